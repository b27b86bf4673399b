#pragma once

// BTRL checkpoint files. Little-endian throughout:
//
//   "BTRL"  u32 version
//   u32 meta count,   { u32 len, key bytes, u32 len, value bytes }*
//   u32 vocab count,  { u32 len, token bytes }*
//   u32 tensor count, { u32 name len, name, u32 rank, u64 dims[rank],
//                       u8 dtype (0 = fp32, 1 = ternary packed),
//                       f64 scale (ternary only), u64 payload len, payload }*
//
// fp32 payloads are row-major IEEE singles; ternary payloads use the packed
// trit layout of quantizer.hpp. Meta entries are written in key order so equal
// content always produces equal bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "bitrl/backbone.hpp"
#include "bitrl/error.hpp"
#include "bitrl/heads.hpp"
#include "bitrl/quantizer.hpp"
#include "bitrl/tensor.hpp"

namespace bitrl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { fp32 = 0, ternary = 1 };

struct TensorRecord {
  std::string name;
  std::vector<std::uint64_t> dims;
  DType dtype = DType::fp32;
  double scale = 1.0;  // ternary only
  std::vector<std::uint8_t> payload;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::string> vocab;
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }

  const TensorRecord& at(const std::string& name) const {
    if (const auto* t = find(name)) return *t;
    throw Error(ErrorKind::format, "checkpoint: missing tensor '" + name + "'");
  }

  const std::string& meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw Error(ErrorKind::format, "checkpoint: missing meta key '" + key + "'");
    return it->second;
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void bytes(const std::vector<std::uint8_t>& b) { out_.insert(out_.end(), b.begin(), b.end()); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& in) : in_(in) {}

  void need(std::uint64_t n) const {
    if (n > in_.size() - pos_) throw Error(ErrorKind::format, "checkpoint: truncated file");
  }
  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{in_[pos_++]} << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{in_[pos_++]} << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(in_.begin() + static_cast<std::ptrdiff_t>(pos_), in_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::vector<std::uint8_t> bytes(std::uint64_t n) {
    need(n);
    std::vector<std::uint8_t> b(in_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                in_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return b;
  }
  bool at_end() const { return pos_ == in_.size(); }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

inline std::uint64_t expected_payload(const TensorRecord& t) {
  const std::uint64_t n = t.element_count();
  return t.dtype == DType::fp32 ? 4 * n : (n + 3) / 4;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.u8('B');
  w.u8('T');
  w.u8('R');
  w.u8('L');
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(c.vocab.size()));
  for (const auto& t : c.vocab) w.str(t);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (t.payload.size() != detail::expected_payload(t)) {
      throw Error(ErrorKind::format, "checkpoint: payload size does not match dims for '" + t.name + "'");
    }
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) w.u64(d);
    w.u8(static_cast<std::uint8_t>(t.dtype));
    if (t.dtype == DType::ternary) w.f64(t.scale);
    w.u64(t.payload.size());
    w.bytes(t.payload);
  }
  return w.take();
}

inline Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  const char magic[4] = {static_cast<char>(r.u8()), static_cast<char>(r.u8()), static_cast<char>(r.u8()),
                         static_cast<char>(r.u8())};
  if (std::memcmp(magic, "BTRL", 4) != 0) throw Error(ErrorKind::format, "checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::format, "checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint c;
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    std::string v = r.str();
    if (!c.meta.emplace(std::move(k), std::move(v)).second) throw Error(ErrorKind::format, "checkpoint: duplicate meta key");
  }
  const std::uint32_t n_vocab = r.u32();
  for (std::uint32_t i = 0; i < n_vocab; ++i) c.vocab.push_back(r.str());
  const std::uint32_t n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    TensorRecord t;
    t.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw Error(ErrorKind::format, "checkpoint: implausible tensor rank");
    for (std::uint32_t k = 0; k < rank; ++k) t.dims.push_back(r.u64());
    const std::uint8_t tag = r.u8();
    if (tag > 1) throw Error(ErrorKind::format, "checkpoint: unknown dtype tag");
    t.dtype = static_cast<DType>(tag);
    if (t.dtype == DType::ternary) t.scale = r.f64();
    const std::uint64_t len = r.u64();
    if (len != detail::expected_payload(t)) {
      throw Error(ErrorKind::format, "checkpoint: payload size does not match dims for '" + t.name + "'");
    }
    t.payload = r.bytes(len);
    if (c.find(t.name)) throw Error(ErrorKind::format, "checkpoint: duplicate tensor '" + t.name + "'");
    c.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw Error(ErrorKind::format, "checkpoint: trailing bytes");
  return c;
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::io, "write failed for '" + path + "'");
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open '" + path + "'");
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) { write_file(path, serialize_checkpoint(c)); }
inline Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

// ---------------------------------------------------------------------------
// Tensor conversions.

inline TensorRecord fp32_record(std::string name, const DenseMatrix& m) {
  TensorRecord t{std::move(name), {m.rows(), m.cols()}, DType::fp32, 1.0, {}};
  t.payload.resize(4 * m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(m.data()[i]));
    for (int k = 0; k < 4; ++k) t.payload[4 * i + k] = static_cast<std::uint8_t>(bits >> (8 * k));
  }
  return t;
}

inline TensorRecord fp32_record(std::string name, const DenseVector& v) {
  TensorRecord t = fp32_record(std::move(name), DenseMatrix(1, v.size(), v));
  t.dims = {v.size()};
  return t;
}

inline TensorRecord ternary_record(std::string name, const TernaryTensor& w) {
  return {std::move(name), {w.rows(), w.cols()}, DType::ternary, w.scale(), w.packed()};
}

inline DenseMatrix matrix_from(const TensorRecord& t) {
  if (t.dtype != DType::fp32) throw Error(ErrorKind::format, "checkpoint: '" + t.name + "' is not fp32");
  const std::size_t rows = t.dims.size() == 2 ? t.dims[0] : 1;
  const std::size_t cols = t.dims.size() == 2 ? t.dims[1] : (t.dims.size() == 1 ? t.dims[0] : 0);
  if (t.dims.size() > 2 || t.dims.empty()) throw Error(ErrorKind::format, "checkpoint: '" + t.name + "' has bad rank");
  DenseMatrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= std::uint32_t{t.payload[4 * i + k]} << (8 * k);
    const float f = std::bit_cast<float>(bits);
    if (!std::isfinite(f)) throw Error(ErrorKind::format, "checkpoint: non-finite value in '" + t.name + "'");
    m.data()[i] = f;
  }
  return m;
}

inline DenseVector vector_from(const TensorRecord& t) {
  if (t.dims.size() != 1) throw Error(ErrorKind::format, "checkpoint: '" + t.name + "' is not a vector");
  return matrix_from(t).data();
}

inline TernaryTensor ternary_from(const TensorRecord& t, ScaleMode mode) {
  if (t.dtype != DType::ternary) throw Error(ErrorKind::format, "checkpoint: '" + t.name + "' is not ternary");
  if (t.dims.size() != 2) throw Error(ErrorKind::format, "checkpoint: '" + t.name + "' must be rank 2");
  return TernaryTensor(t.dims[0], t.dims[1], t.payload, t.scale, mode);
}

// ---------------------------------------------------------------------------
// Backbones.

inline const char* const kLinearNames[6] = {"wq", "wk", "wv", "wo", "w1", "w2"};

inline std::string layer_prefix(std::size_t i) { return "backbone.layers." + std::to_string(i) + "."; }

inline std::string scale_mode_name(ScaleMode m) { return m == ScaleMode::absmean ? "absmean" : "none"; }

inline ScaleMode parse_scale_mode(const std::string& s) {
  if (s == "absmean") return ScaleMode::absmean;
  if (s == "none") return ScaleMode::none;
  throw Error(ErrorKind::invalid_argument, "unknown scale mode '" + s + "'");
}

namespace detail {

template <class Linear>
void put_backbone(Checkpoint& c, const Encoder<Linear>& m) {
  const auto& cfg = m.config();
  c.meta["backbone.layers"] = std::to_string(cfg.layers);
  c.meta["backbone.model_dim"] = std::to_string(cfg.model_dim);
  c.meta["backbone.heads"] = std::to_string(cfg.heads);
  c.meta["backbone.ffn_dim"] = std::to_string(cfg.ffn_dim);
  c.vocab = m.vocab().tokens();
  c.tensors.push_back(fp32_record("backbone.embedding", m.embeddings()));
  for (std::size_t i = 0; i < m.layers().size(); ++i) {
    const auto& l = m.layers()[i];
    const std::string p = layer_prefix(i);
    const Linear* ws[6] = {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2};
    for (int k = 0; k < 6; ++k) {
      if constexpr (std::is_same_v<Linear, TernaryTensor>) {
        c.tensors.push_back(ternary_record(p + kLinearNames[k], *ws[k]));
      } else {
        c.tensors.push_back(fp32_record(p + kLinearNames[k], *ws[k]));
      }
    }
    c.tensors.push_back(fp32_record(p + "ln1.gain", l.ln1_gain));
    c.tensors.push_back(fp32_record(p + "ln1.bias", l.ln1_bias));
    c.tensors.push_back(fp32_record(p + "ln2.gain", l.ln2_gain));
    c.tensors.push_back(fp32_record(p + "ln2.bias", l.ln2_bias));
  }
  c.tensors.push_back(fp32_record("backbone.final.gain", m.final_gain()));
  c.tensors.push_back(fp32_record("backbone.final.bias", m.final_bias()));
}

inline std::size_t meta_count(const Checkpoint& c, const std::string& key) {
  const std::string& s = c.meta_at(key);
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty()) throw Error(ErrorKind::format, "checkpoint: meta '" + key + "' is not a count");
  return static_cast<std::size_t>(v);
}

inline BackboneConfig backbone_config_from(const Checkpoint& c) {
  BackboneConfig cfg;
  cfg.layers = meta_count(c, "backbone.layers");
  cfg.model_dim = meta_count(c, "backbone.model_dim");
  cfg.heads = meta_count(c, "backbone.heads");
  cfg.ffn_dim = meta_count(c, "backbone.ffn_dim");
  if (cfg.layers == 0 || cfg.layers > 64) throw Error(ErrorKind::format, "checkpoint: implausible layer count");
  return cfg;
}

template <class Linear, class MakeLinear>
Encoder<Linear> get_backbone(const Checkpoint& c, MakeLinear make) {
  BackboneConfig cfg = backbone_config_from(c);
  std::vector<EncoderLayer<Linear>> layers;
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string p = layer_prefix(i);
    EncoderLayer<Linear> l{make(c.at(p + "wq")), make(c.at(p + "wk")), make(c.at(p + "wv")),
                           make(c.at(p + "wo")), make(c.at(p + "w1")), make(c.at(p + "w2")),
                           vector_from(c.at(p + "ln1.gain")), vector_from(c.at(p + "ln1.bias")),
                           vector_from(c.at(p + "ln2.gain")), vector_from(c.at(p + "ln2.bias"))};
    layers.push_back(std::move(l));
  }
  return Encoder<Linear>(cfg, Vocabulary(c.vocab), matrix_from(c.at("backbone.embedding")), std::move(layers),
                         vector_from(c.at("backbone.final.gain")), vector_from(c.at("backbone.final.bias")));
}

}  // namespace detail

inline Checkpoint backbone_checkpoint(const BackboneModel& m) {
  Checkpoint c;
  c.meta["backbone.precision"] = "ternary";
  // Every linear layer of a model shares one scale mode.
  c.meta["quant.scale_mode"] = scale_mode_name(m.layers().empty() ? ScaleMode::absmean : m.layers()[0].wq.scale_mode());
  detail::put_backbone(c, m);
  return c;
}

inline Checkpoint backbone_checkpoint(const ShadowBackbone& m) {
  Checkpoint c;
  c.meta["backbone.precision"] = "fp32";
  detail::put_backbone(c, m);
  return c;
}

inline bool is_ternary_backbone(const Checkpoint& c) { return c.meta_at("backbone.precision") == "ternary"; }

inline BackboneModel load_backbone(const Checkpoint& c) {
  if (!is_ternary_backbone(c)) throw Error(ErrorKind::format, "checkpoint: backbone is not ternary");
  const ScaleMode mode = parse_scale_mode(c.meta_at("quant.scale_mode"));
  return detail::get_backbone<TernaryTensor>(c, [&](const TensorRecord& t) { return ternary_from(t, mode); });
}

// Full-precision backbone; ternary checkpoints are dequantized.
inline ShadowBackbone load_shadow_backbone(const Checkpoint& c) {
  if (is_ternary_backbone(c)) return dequantized(load_backbone(c));
  return detail::get_backbone<DenseMatrix>(c, [](const TensorRecord& t) { return matrix_from(t); });
}

// Applies the quantizer to every linear layer of a full-precision model.
inline BackboneModel quantize_backbone(const ShadowBackbone& m, const QuantConfig& q) {
  std::vector<EncoderLayer<TernaryTensor>> layers;
  for (const auto& l : m.layers()) {
    layers.push_back({quantize(l.wq, q), quantize(l.wk, q), quantize(l.wv, q), quantize(l.wo, q), quantize(l.w1, q),
                      quantize(l.w2, q), l.ln1_gain, l.ln1_bias, l.ln2_gain, l.ln2_bias});
  }
  BackboneConfig cfg = m.config();
  cfg.quant = q;
  return BackboneModel(cfg, m.vocab(), m.embeddings(), std::move(layers), m.final_gain(), m.final_bias());
}

// ---------------------------------------------------------------------------
// Heads.

inline void put_head(Checkpoint& c, const std::string& prefix, const HeadParams& h) {
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string p = prefix + ".l" + std::to_string(i + 1) + ".";
    c.tensors.push_back(fp32_record(p + "w", h.layers[i].w));
    c.tensors.push_back(fp32_record(p + "b", h.layers[i].b));
  }
}

inline HeadParams get_head(const Checkpoint& c, const std::string& prefix) {
  HeadParams h;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string p = prefix + ".l" + std::to_string(i + 1) + ".";
    h.layers[i].w = matrix_from(c.at(p + "w"));
    h.layers[i].b = vector_from(c.at(p + "b"));
    if (h.layers[i].b.size() != h.layers[i].w.cols() ||
        (i > 0 && h.layers[i].w.rows() != h.layers[i - 1].w.cols())) {
      throw Error(ErrorKind::format, "checkpoint: inconsistent head shapes under '" + prefix + "'");
    }
  }
  return h;
}

inline std::size_t checkpoint_size(const Checkpoint& c) { return serialize_checkpoint(c).size(); }

}  // namespace bitrl
