#pragma once

// Frozen pre-norm transformer encoder producing the latent state h.
//
// Encoder<TernaryTensor> is the deployed backbone: every linear projection is a
// packed ternary tensor executed by the integer kernels. Encoder<DenseMatrix>
// is the full-precision shadow holding the same weights before quantization.
// Embeddings and layer-norm parameters are full precision in both. All stored
// real parameters are rounded to float32 so checkpoints are lossless.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "bitrl/error.hpp"
#include "bitrl/kernels.hpp"
#include "bitrl/quantizer.hpp"
#include "bitrl/tensor.hpp"
#include "bitrl/text.hpp"

namespace bitrl {

inline constexpr double kLayerNormEps = 1e-5;

struct BackboneConfig {
  std::size_t layers = 4;
  std::size_t model_dim = 128;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  QuantConfig quant{};

  void validate() const {
    if (layers < 2 || layers > 6) throw Error(ErrorKind::invalid_argument, "backbone: layer count must be in [2, 6]");
    if (model_dim < 64 || model_dim > 256) throw Error(ErrorKind::invalid_argument, "backbone: model dim must be in [64, 256]");
    if (heads == 0 || model_dim % heads != 0) throw Error(ErrorKind::invalid_argument, "backbone: heads must divide model dim");
    if (ffn_dim == 0) throw Error(ErrorKind::invalid_argument, "backbone: ffn dim must be positive");
    quant.validate();
  }

  friend bool operator==(const BackboneConfig& a, const BackboneConfig& b) {
    return a.layers == b.layers && a.model_dim == b.model_dim && a.heads == b.heads && a.ffn_dim == b.ffn_dim;
  }
};

template <class Linear>
struct EncoderLayer {
  Linear wq, wk, wv, wo;  // d x d
  Linear w1;              // ffn x d
  Linear w2;              // d x ffn
  DenseVector ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

inline std::size_t linear_rows(const DenseMatrix& m) { return m.rows(); }
inline std::size_t linear_cols(const DenseMatrix& m) { return m.cols(); }
inline std::size_t linear_rows(const TernaryTensor& t) { return t.rows(); }
inline std::size_t linear_cols(const TernaryTensor& t) { return t.cols(); }

// Per-call statistics the theory checks need.
struct EncodeTrace {
  double min_ln_sigma = std::numeric_limits<double>::infinity();
};

// Adds the encoding of position pos to out.
inline void sinusoidal_position(std::size_t pos, std::span<double> out) {
  const std::size_t d = out.size();
  for (std::size_t i = 0; i < d; i += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
    out[i] += std::sin(static_cast<double>(pos) * freq);
    if (i + 1 < d) out[i + 1] += std::cos(static_cast<double>(pos) * freq);
  }
}

template <class Linear>
class Encoder {
 public:
  static constexpr bool kTernary = std::is_same_v<Linear, TernaryTensor>;

  Encoder(BackboneConfig cfg, Vocabulary vocab, DenseMatrix embeddings,
          std::vector<EncoderLayer<Linear>> layers, DenseVector final_gain, DenseVector final_bias)
      : cfg_(cfg),
        vocab_(std::move(vocab)),
        embeddings_(std::move(embeddings)),
        layers_(std::move(layers)),
        final_gain_(std::move(final_gain)),
        final_bias_(std::move(final_bias)) {
    const std::size_t d = cfg_.model_dim;
    if (cfg_.heads == 0 || d % cfg_.heads != 0) throw Error(ErrorKind::invalid_argument, "encoder: heads must divide d");
    if (layers_.size() != cfg_.layers) throw Error(ErrorKind::dimension_mismatch, "encoder: layer count");
    if (embeddings_.rows() != vocab_.size() || embeddings_.cols() != d) {
      throw Error(ErrorKind::dimension_mismatch, "encoder: embedding shape");
    }
    auto check = [&](const Linear& w, std::size_t r, std::size_t c, const char* name) {
      if (linear_rows(w) != r || linear_cols(w) != c) {
        throw Error(ErrorKind::dimension_mismatch, std::string("encoder: bad shape for ") + name);
      }
    };
    auto check_vec = [&](const DenseVector& v, const char* name) {
      if (v.size() != d) throw Error(ErrorKind::dimension_mismatch, std::string("encoder: bad length for ") + name);
    };
    for (const auto& l : layers_) {
      check(l.wq, d, d, "wq");
      check(l.wk, d, d, "wk");
      check(l.wv, d, d, "wv");
      check(l.wo, d, d, "wo");
      check(l.w1, cfg_.ffn_dim, d, "w1");
      check(l.w2, d, cfg_.ffn_dim, "w2");
      check_vec(l.ln1_gain, "ln1 gain");
      check_vec(l.ln1_bias, "ln1 bias");
      check_vec(l.ln2_gain, "ln2 gain");
      check_vec(l.ln2_bias, "ln2 bias");
    }
    check_vec(final_gain_, "final gain");
    positions_ = DenseMatrix(kMaxContext, d);
    for (std::size_t t = 0; t < kMaxContext; ++t) sinusoidal_position(t, positions_.row(t));
    check_vec(final_bias_, "final bias");
    if constexpr (!kTernary) {
      for (const auto& l : layers_) {
        transposed_.push_back({transpose(l.wq), transpose(l.wk), transpose(l.wv), transpose(l.wo),
                               transpose(l.w1), transpose(l.w2)});
      }
    }
  }

  const BackboneConfig& config() const noexcept { return cfg_; }
  const Vocabulary& vocab() const noexcept { return vocab_; }
  const DenseMatrix& embeddings() const noexcept { return embeddings_; }
  const std::vector<EncoderLayer<Linear>>& layers() const noexcept { return layers_; }
  const DenseVector& final_gain() const noexcept { return final_gain_; }
  const DenseVector& final_bias() const noexcept { return final_bias_; }
  std::size_t model_dim() const noexcept { return cfg_.model_dim; }
  // Row t holds the sinusoidal encoding of position t.
  const DenseMatrix& positions() const noexcept { return positions_; }

  // There is no unfreezing: the encoder exposes no mutating access.
  bool frozen() const noexcept { return true; }

  std::size_t parameter_count() const {
    std::size_t n = embeddings_.size() + 2 * final_gain_.size();
    for (const auto& l : layers_) {
      for (const Linear* w : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2}) n += linear_rows(*w) * linear_cols(*w);
      n += 4 * cfg_.model_dim;
    }
    return n;
  }

  // Transposed dense weights (in x out) used by the full-precision path.
  const DenseMatrix& transposed(std::size_t layer, std::size_t which) const
    requires(!kTernary)
  {
    return transposed_[layer][which];
  }

 private:
  BackboneConfig cfg_;
  Vocabulary vocab_;
  DenseMatrix embeddings_;
  std::vector<EncoderLayer<Linear>> layers_;
  DenseVector final_gain_, final_bias_;
  DenseMatrix positions_;
  std::vector<std::array<DenseMatrix, 6>> transposed_;
};

using BackboneModel = Encoder<TernaryTensor>;
using ShadowBackbone = Encoder<DenseMatrix>;

struct BackbonePair {
  BackboneModel model;
  ShadowBackbone shadow;
};

inline double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

namespace detail {

inline void layer_norm_rows(const DenseMatrix& x, const DenseVector& gain, const DenseVector& bias,
                            DenseMatrix& out, EncodeTrace* trace) {
  const std::size_t d = x.cols();
  out = DenseMatrix(x.rows(), d);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    auto row = x.row(t);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    const double sigma = std::sqrt(var + kLayerNormEps);
    if (trace) trace->min_ln_sigma = std::min(trace->min_ln_sigma, sigma);
    auto o = out.row(t);
    for (std::size_t i = 0; i < d; ++i) o[i] = gain[i] * (row[i] - mu) / sigma + bias[i];
  }
}

// Y[t] = W x[t] for every token row.
inline DenseMatrix apply_linear(const TernaryTensor& w, const DenseMatrix& x) {
  thread_local std::vector<QuantizedActivations> q;
  if (q.size() < x.rows()) q.resize(x.rows());
  for (std::size_t t = 0; t < x.rows(); ++t) quantize_activations_into(x.row(t), q[t]);
  DenseMatrix y;
  ternary_matmul_tokens_into(w, std::span<const QuantizedActivations>(q.data(), x.rows()), y);
  return y;
}

inline DenseMatrix apply_linear_dense(const DenseMatrix& wt, const DenseMatrix& x) { return matmul(x, wt); }

inline void attention(const DenseMatrix& q, const DenseMatrix& k, const DenseMatrix& v, std::size_t heads,
                      DenseMatrix& out) {
  const std::size_t tokens = q.rows();
  const std::size_t d = q.cols();
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  out = DenseMatrix(tokens, d);
  std::vector<double> a(tokens), kt(dh * tokens);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    // Per-head transpose of K so the score loop runs over contiguous tokens.
    for (std::size_t j = 0; j < tokens; ++j) {
      for (std::size_t c = 0; c < dh; ++c) kt[c * tokens + j] = k(j, off + c);
    }
    for (std::size_t i = 0; i < tokens; ++i) {
      const double* qi = q.data().data() + i * d + off;
      std::fill(a.begin(), a.end(), 0.0);
      for (std::size_t c = 0; c < dh; ++c) {
        const double qc = qi[c];
        const double* kc = kt.data() + c * tokens;
        for (std::size_t j = 0; j < tokens; ++j) a[j] += qc * kc[j];
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < tokens; ++j) {
        a[j] *= inv_sqrt;
        mx = std::max(mx, a[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < tokens; ++j) {
        a[j] = std::exp(a[j] - mx);
        z += a[j];
      }
      double* oi = out.data().data() + i * d + off;
      for (std::size_t j = 0; j < tokens; ++j) {
        const double p = a[j] / z;
        const double* vj = v.data().data() + j * d + off;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
      }
    }
  }
}

}  // namespace detail

// h = mean over tokens of the final-normed representations.
template <class Linear>
DenseVector encode(const Encoder<Linear>& model, std::span<const int> tokens, EncodeTrace* trace = nullptr) {
  if (tokens.empty()) throw Error(ErrorKind::invalid_argument, "encode: empty token sequence");
  if (tokens.size() > kMaxContext) throw Error(ErrorKind::invalid_argument, "encode: more than 64 tokens");
  const std::size_t d = model.model_dim();
  const std::size_t n = tokens.size();
  DenseMatrix x(n, d);
  for (std::size_t t = 0; t < n; ++t) {
    const auto id = static_cast<std::size_t>(tokens[t]);
    if (id >= model.vocab().size()) throw Error(ErrorKind::invalid_argument, "encode: token id out of range");
    auto row = x.row(t);
    auto emb = model.embeddings().row(id);
    auto pos = model.positions().row(t);
    for (std::size_t i = 0; i < d; ++i) row[i] = emb[i] + pos[i];
  }

  auto lin = [&](std::size_t layer, std::size_t which, const Linear& w, const DenseMatrix& in) {
    if constexpr (Encoder<Linear>::kTernary) {
      (void)layer;
      (void)which;
      return detail::apply_linear(w, in);
    } else {
      (void)w;
      return detail::apply_linear_dense(model.transposed(layer, which), in);
    }
  };

  DenseMatrix u, att;
  for (std::size_t li = 0; li < model.layers().size(); ++li) {
    const auto& l = model.layers()[li];
    detail::layer_norm_rows(x, l.ln1_gain, l.ln1_bias, u, trace);
    const DenseMatrix q = lin(li, 0, l.wq, u);
    const DenseMatrix k = lin(li, 1, l.wk, u);
    const DenseMatrix v = lin(li, 2, l.wv, u);
    detail::attention(q, k, v, model.config().heads, att);
    const DenseMatrix o = lin(li, 3, l.wo, att);
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += o.data()[i];

    detail::layer_norm_rows(x, l.ln2_gain, l.ln2_bias, u, trace);
    DenseMatrix hidden = lin(li, 4, l.w1, u);
    for (double& v2 : hidden.data()) v2 = v2 > 0.0 ? v2 : 0.0;
    const DenseMatrix f = lin(li, 5, l.w2, hidden);
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += f.data()[i];
  }
  detail::layer_norm_rows(x, model.final_gain(), model.final_bias(), u, trace);
  DenseVector h(d, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    auto row = u.row(t);
    for (std::size_t i = 0; i < d; ++i) h[i] += row[i];
  }
  for (double& v : h) v /= static_cast<double>(n);
  return h;
}

// ---------------------------------------------------------------------------

// Weights ~ N(0, 1/fan_in), embeddings ~ N(0, 1), norms at identity. The
// shadow keeps the pre-quantization weights; the model holds their ternary
// quantization under cfg.quant.
inline BackbonePair build_backbone(const BackboneConfig& cfg, RngStream& rng) {
  cfg.validate();
  Vocabulary vocab = Vocabulary::standard();
  const std::size_t d = cfg.model_dim;
  auto draw = [&](std::size_t rows, std::size_t cols, double stddev) {
    DenseMatrix m = random_normal(rows, cols, rng, stddev);
    for (double& v : m.data()) v = round_to_float(v);
    return m;
  };
  DenseMatrix emb = draw(vocab.size(), d, 1.0);
  std::vector<EncoderLayer<DenseMatrix>> fp_layers;
  std::vector<EncoderLayer<TernaryTensor>> q_layers;
  const double sd_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double sd_ffn = 1.0 / std::sqrt(static_cast<double>(cfg.ffn_dim));
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    EncoderLayer<DenseMatrix> l;
    l.wq = draw(d, d, sd_d);
    l.wk = draw(d, d, sd_d);
    l.wv = draw(d, d, sd_d);
    l.wo = draw(d, d, sd_d);
    l.w1 = draw(cfg.ffn_dim, d, sd_d);
    l.w2 = draw(d, cfg.ffn_dim, sd_ffn);
    l.ln1_gain = l.ln2_gain = DenseVector(d, 1.0);
    l.ln1_bias = l.ln2_bias = DenseVector(d, 0.0);
    EncoderLayer<TernaryTensor> ql{quantize(l.wq, cfg.quant), quantize(l.wk, cfg.quant), quantize(l.wv, cfg.quant),
                                   quantize(l.wo, cfg.quant), quantize(l.w1, cfg.quant), quantize(l.w2, cfg.quant),
                                   l.ln1_gain, l.ln1_bias, l.ln2_gain, l.ln2_bias};
    fp_layers.push_back(std::move(l));
    q_layers.push_back(std::move(ql));
  }
  DenseVector fg(d, 1.0), fb(d, 0.0);
  return {BackboneModel(cfg, vocab, emb, std::move(q_layers), fg, fb),
          ShadowBackbone(cfg, vocab, std::move(emb), std::move(fp_layers), fg, fb)};
}

// Full-precision copy of the ternary model (weights alpha * trit); the oracle
// path for the integer kernels.
inline ShadowBackbone dequantized(const BackboneModel& m) {
  std::vector<EncoderLayer<DenseMatrix>> layers;
  for (const auto& l : m.layers()) {
    layers.push_back({dequantize(l.wq), dequantize(l.wk), dequantize(l.wv), dequantize(l.wo), dequantize(l.w1),
                      dequantize(l.w2), l.ln1_gain, l.ln1_bias, l.ln2_gain, l.ln2_bias});
  }
  return ShadowBackbone(m.config(), m.vocab(), m.embeddings(), std::move(layers), m.final_gain(), m.final_bias());
}

// Flattened linear-layer weights in layer order (wq, wk, wv, wo, w1, w2).
inline DenseVector linear_parameters(const ShadowBackbone& m) {
  DenseVector theta;
  for (const auto& l : m.layers()) {
    for (const DenseMatrix* w : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2}) {
      theta.insert(theta.end(), w->data().begin(), w->data().end());
    }
  }
  return theta;
}

inline std::vector<int> tokenize_state(const Vocabulary& vocab, EnvId env, std::span<const double> obs) {
  return tokenize(vocab, serialize_state(env, obs));
}

}  // namespace bitrl
