#pragma once

// Ternary weight quantization: trit(i,j) = sign(w) * 1[|w| > tau], an optional
// per-tensor scale, and 2-bit packed storage (4 trits per byte).
//
// Packed layout (part of the checkpoint wire format): trit i lives in bits
// [2*(i%4), 2*(i%4)+1] of byte i/4 with codes 0 -> 00, +1 -> 01, -1 -> 10.
// Code 11 is invalid. A trailing partial byte is zero padded.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "bitrl/error.hpp"
#include "bitrl/tensor.hpp"

namespace bitrl {

enum class ThresholdMode { absmean_fraction, fixed };
enum class ScaleMode { absmean, none };

struct QuantConfig {
  ThresholdMode threshold_mode = ThresholdMode::absmean_fraction;
  double threshold_fraction = 0.5;
  double fixed_tau = 0.0;
  ScaleMode scale_mode = ScaleMode::absmean;

  void validate() const {
    if (!(threshold_fraction > 0.0 && threshold_fraction <= 1.0)) {
      throw Error(ErrorKind::invalid_argument, "threshold fraction must lie in (0, 1]");
    }
    if (!(fixed_tau >= 0.0)) throw Error(ErrorKind::invalid_argument, "fixed tau must be >= 0");
  }

  static QuantConfig fixed_threshold(double tau, ScaleMode scale = ScaleMode::none) {
    QuantConfig c;
    c.threshold_mode = ThresholdMode::fixed;
    c.fixed_tau = tau;
    c.scale_mode = scale;
    return c;
  }
};

namespace detail {

inline constexpr std::uint8_t encode_trit(int t) { return t == 1 ? 0b01 : (t == -1 ? 0b10 : 0b00); }

// Byte -> four signed trits. Bytes containing code 11 are flagged invalid.
struct TritDecodeTable {
  std::array<std::array<std::int8_t, 4>, 256> trits{};
  std::array<bool, 256> valid{};

  constexpr TritDecodeTable() {
    for (int b = 0; b < 256; ++b) {
      bool ok = true;
      for (int k = 0; k < 4; ++k) {
        const int code = (b >> (2 * k)) & 3;
        trits[b][k] = static_cast<std::int8_t>(code == 1 ? 1 : (code == 2 ? -1 : 0));
        if (code == 3) ok = false;
      }
      valid[b] = ok;
    }
  }
};

inline constexpr TritDecodeTable kTritTable{};

}  // namespace detail

inline std::vector<std::uint8_t> pack_trits(std::span<const std::int8_t> values) {
  std::vector<std::uint8_t> out((values.size() + 3) / 4, 0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const int v = values[i];
    if (v < -1 || v > 1) throw Error(ErrorKind::invalid_argument, "pack_trits: value outside {-1,0,+1}");
    out[i / 4] |= static_cast<std::uint8_t>(detail::encode_trit(v) << (2 * (i % 4)));
  }
  return out;
}

inline std::vector<std::int8_t> unpack_trits(std::span<const std::uint8_t> bytes, std::size_t n) {
  if (bytes.size() * 4 < n) throw Error(ErrorKind::format, "unpack_trits: buffer holds fewer than n trits");
  std::vector<std::int8_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int code = (bytes[i / 4] >> (2 * (i % 4))) & 3;
    if (code == 3) throw Error(ErrorKind::format, "unpack_trits: invalid trit code 11");
    out[i] = static_cast<std::int8_t>(code == 1 ? 1 : (code == 2 ? -1 : 0));
  }
  return out;
}

class TernaryTensor {
 public:
  TernaryTensor() = default;

  // Validates the packed buffer: length, code alphabet and zero padding.
  TernaryTensor(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> packed, double scale,
                ScaleMode mode)
      : rows_(rows), cols_(cols), packed_(std::move(packed)), scale_(scale), mode_(mode) {
    const std::size_t n = rows_ * cols_;
    if (packed_.size() != (n + 3) / 4) throw Error(ErrorKind::format, "ternary tensor: packed length mismatch");
    for (std::uint8_t b : packed_) {
      if (!detail::kTritTable.valid[b]) throw Error(ErrorKind::format, "ternary tensor: invalid trit code 11");
    }
    if (n % 4 != 0 && !packed_.empty()) {
      const unsigned used_bits = 2 * (n % 4);
      if ((packed_.back() >> used_bits) != 0) throw Error(ErrorKind::format, "ternary tensor: non-zero padding");
    }
    if (!std::isfinite(scale_) || !(scale_ > 0.0)) throw Error(ErrorKind::format, "ternary tensor: scale must be > 0");
    if (mode_ == ScaleMode::none && scale_ != 1.0) {
      throw Error(ErrorKind::format, "ternary tensor: unscaled tensor must have scale 1");
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return rows_ * cols_; }
  double scale() const noexcept { return scale_; }
  ScaleMode scale_mode() const noexcept { return mode_; }
  const std::vector<std::uint8_t>& packed() const noexcept { return packed_; }

  // Packed bytes plus the 8-byte scale.
  std::size_t storage_bytes() const noexcept { return packed_.size() + sizeof(double); }

  int trit(std::size_t r, std::size_t c) const {
    const std::size_t i = r * cols_ + c;
    return detail::kTritTable.trits[packed_[i / 4]][i % 4];
  }

  std::vector<std::int8_t> trits() const { return unpack_trits(packed_, size()); }

  std::size_t zero_count() const {
    std::size_t z = 0;
    const std::size_t n = size();
    for (std::size_t i = 0; i < n; ++i) {
      if (detail::kTritTable.trits[packed_[i / 4]][i % 4] == 0) ++z;
    }
    return z;
  }

  friend bool operator==(const TernaryTensor&, const TernaryTensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> packed_;
  double scale_ = 1.0;
  ScaleMode mode_ = ScaleMode::none;
};

inline double quantization_threshold(const DenseMatrix& w, const QuantConfig& cfg) {
  if (cfg.threshold_mode == ThresholdMode::fixed) return cfg.fixed_tau;
  std::vector<double> mags(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) mags[i] = std::abs(w.data()[i]);
  const double absmean = mean(mags);
  if (!(absmean > 0.0)) throw Error(ErrorKind::degenerate_input, "quantize: all-zero matrix in absmean mode");
  return cfg.threshold_fraction * absmean;
}

inline TernaryTensor quantize(const DenseMatrix& w, const QuantConfig& cfg = {}) {
  cfg.validate();
  if (!w.all_finite()) throw Error(ErrorKind::invalid_argument, "quantize: non-finite weights");
  const double tau = quantization_threshold(w, cfg);

  std::vector<std::int8_t> trits(w.size());
  std::vector<double> kept;
  kept.reserve(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double v = w.data()[i];
    // Strict inequality: |w| == tau maps to zero.
    if (std::abs(v) > tau) {
      trits[i] = v > 0.0 ? 1 : -1;
      kept.push_back(std::abs(v));
    }
  }
  double scale = 1.0;
  if (cfg.scale_mode == ScaleMode::absmean && !kept.empty()) {
    const auto [lo, hi] = std::minmax_element(kept.begin(), kept.end());
    // Equal magnitudes (already ternary times a scale) keep that scale exactly.
    scale = *lo == *hi ? *lo : mean(kept);
  }
  return TernaryTensor(w.rows(), w.cols(), pack_trits(trits), scale, cfg.scale_mode);
}

inline DenseMatrix dequantize(const TernaryTensor& t) {
  DenseMatrix out(t.rows(), t.cols());
  const auto& packed = t.packed();
  const std::size_t n = t.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t b = packed[i / 4];
    if (!detail::kTritTable.valid[b]) throw Error(ErrorKind::format, "dequantize: invalid trit code 11");
    out.data()[i] = t.scale() * detail::kTritTable.trits[b][i % 4];
  }
  return out;
}

struct PerturbationReport {
  double delta_norm = 0.0;
  double theta_norm = 0.0;
  double epsilon_q = 0.0;
};

inline PerturbationReport perturbation_between(std::span<const double> original,
                                               std::span<const double> quantized) {
  if (original.size() != quantized.size()) {
    throw Error(ErrorKind::dimension_mismatch, "perturbation: length mismatch");
  }
  std::vector<double> delta(original.size());
  for (std::size_t i = 0; i < original.size(); ++i) delta[i] = quantized[i] - original[i];
  PerturbationReport r;
  r.theta_norm = norm2(original);
  if (!(r.theta_norm > 0.0)) throw Error(ErrorKind::degenerate_input, "perturbation: zero parameter norm");
  r.delta_norm = norm2(delta);
  r.epsilon_q = r.delta_norm / r.theta_norm;
  return r;
}

inline PerturbationReport measure_perturbation(const DenseMatrix& w, const QuantConfig& cfg = {}) {
  if (!(frobenius_norm(w) > 0.0)) throw Error(ErrorKind::degenerate_input, "measure_perturbation: zero norm");
  return perturbation_between(w.data(), dequantize(quantize(w, cfg)).data());
}

}  // namespace bitrl
