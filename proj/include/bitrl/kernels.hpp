#pragma once

// Integer-only forward kernels for packed ternary weights.
//
// Activations are quantized to int8 per vector (absmax). The matvec then runs
// entirely in integer arithmetic: for every group of four activations two
// 16-entry tables of signed partial sums are built (one per nibble of a packed
// weight byte), and each output row accumulates table lookups indexed by its
// weight bytes. The inner loop contains additions and lookups only. The
// accumulator is scaled once at the end by alpha * act_scale.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bitrl/error.hpp"
#include "bitrl/quantizer.hpp"
#include "bitrl/tensor.hpp"

namespace bitrl {

// Accumulators are int32: 127 * 2^24 < 2^31.
inline constexpr std::size_t kMaxKernelCols = std::size_t{1} << 24;

struct QuantizedActivations {
  std::vector<std::int8_t> values;
  double act_scale = 1.0;

  std::size_t size() const noexcept { return values.size(); }
};

namespace detail {

// round-half-away-from-zero without a libm call; exact for |v| < 2^52.
inline double round_half_away(double v) {
  const double t = std::trunc(v);
  const double f = v - t;
  return t + static_cast<double>(f >= 0.5) - static_cast<double>(f <= -0.5);
}

}  // namespace detail

// act_scale = max|x| / 127, values = round-half-away(x / act_scale).
// An all-zero vector maps to zeros with act_scale = 1. Reuses q's storage.
inline void quantize_activations_into(std::span<const double> x, QuantizedActivations& q) {
  q.values.assign(x.size(), 0);
  q.act_scale = 1.0;
  double amax = 0.0;
  for (double v : x) {
    const double a = std::abs(v);
    amax = (a > amax || a != a) ? a : amax;  // NaN propagates
  }
  if (!std::isfinite(amax)) throw Error(ErrorKind::invalid_argument, "quantize_activations: non-finite input");
  if (amax == 0.0) return;
  q.act_scale = amax / 127.0;
  const double s = q.act_scale;
  std::int8_t* out = q.values.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = detail::round_half_away(x[i] / s);
    out[i] = static_cast<std::int8_t>(r > 127.0 ? 127.0 : (r < -127.0 ? -127.0 : r));
  }
}

inline QuantizedActivations quantize_activations(std::span<const double> x) {
  QuantizedActivations q;
  quantize_activations_into(x, q);
  return q;
}

inline DenseVector dequantize_activations(const QuantizedActivations& q) {
  DenseVector out(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) out[i] = q.values[i] * q.act_scale;
  return out;
}

namespace detail {

// Raw integer accumulators, one per output row.
inline void ternary_accumulate(const TernaryTensor& w, std::span<const std::int8_t> x,
                               std::span<std::int32_t> acc) {
  const std::size_t rows = w.rows();
  const std::size_t cols = w.cols();
  const std::uint8_t* packed = w.packed().data();

  if (cols % 4 != 0) {
    // Rows straddle byte boundaries; decode trit by trit.
    for (std::size_t r = 0; r < rows; ++r) {
      std::int32_t a = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        const int code = (packed[i / 4] >> (2 * (i % 4))) & 3;
        if (code == 1) a += x[c];
        else if (code == 2) a -= x[c];
      }
      acc[r] = a;
    }
    return;
  }

  const std::size_t groups = cols / 4;
  // tables[g*32 + n]      : contribution of the low nibble n over x[4g], x[4g+1]
  // tables[g*32 + 16 + n] : contribution of the high nibble n over x[4g+2], x[4g+3]
  thread_local std::vector<std::int16_t> tables;
  tables.resize(groups * 32);
  for (std::size_t g = 0; g < groups; ++g) {
    std::int16_t* t = tables.data() + g * 32;
    for (int half = 0; half < 2; ++half) {
      const std::int16_t a = x[4 * g + 2 * half];
      const std::int16_t b = x[4 * g + 2 * half + 1];
      const std::int16_t ca[4] = {0, a, static_cast<std::int16_t>(-a), 0};
      const std::int16_t cb[4] = {0, b, static_cast<std::int16_t>(-b), 0};
      for (int n = 0; n < 16; ++n) t[half * 16 + n] = static_cast<std::int16_t>(ca[n & 3] + cb[n >> 2]);
    }
  }
  const std::int16_t* tbl = tables.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* row = packed + r * groups;
    std::int32_t a0 = 0, a1 = 0;
    std::size_t g = 0;
    for (; g + 2 <= groups; g += 2) {
      const std::uint8_t b0 = row[g];
      const std::uint8_t b1 = row[g + 1];
      a0 += tbl[g * 32 + (b0 & 15)] + tbl[g * 32 + 16 + (b0 >> 4)];
      a1 += tbl[(g + 1) * 32 + (b1 & 15)] + tbl[(g + 1) * 32 + 16 + (b1 >> 4)];
    }
    for (; g < groups; ++g) {
      const std::uint8_t b0 = row[g];
      a0 += tbl[g * 32 + (b0 & 15)] + tbl[g * 32 + 16 + (b0 >> 4)];
    }
    acc[r] = a0 + a1;
  }
}

}  // namespace detail

inline void ternary_matvec_into(const TernaryTensor& w, const QuantizedActivations& x,
                                std::span<double> out) {
  if (w.cols() != x.size()) throw Error(ErrorKind::dimension_mismatch, "ternary_matvec: w.cols != x.len");
  if (w.cols() > kMaxKernelCols) throw Error(ErrorKind::invalid_argument, "ternary_matvec: cols exceeds 2^24");
  if (out.size() != w.rows()) throw Error(ErrorKind::dimension_mismatch, "ternary_matvec: output length");
  thread_local std::vector<std::int32_t> acc;
  acc.resize(w.rows());
  detail::ternary_accumulate(w, x.values, acc);
  const double s = w.scale() * x.act_scale;
  for (std::size_t r = 0; r < w.rows(); ++r) out[r] = static_cast<double>(acc[r]) * s;
}

inline DenseVector ternary_matvec(const TernaryTensor& w, const QuantizedActivations& x) {
  DenseVector out(w.rows());
  ternary_matvec_into(w, x, out);
  return out;
}

// Batched form of ternary_matvec over many activation vectors (the tokens of a
// sequence). Produces bit-identical results to calling ternary_matvec per
// vector. Tokens are processed in blocks of kTokenLanes: for each weight column
// c a table holds {0, +x_c, -x_c, 0} across the block's lanes, so every weight
// costs one table load (indexed by its 2-bit code) and one vector add. Partial
// sums run in int16 over at most 256 columns (256 * 127 < 2^15) and are then
// widened into the int32 accumulators.
inline constexpr std::size_t kTokenLanes = 32;

inline void ternary_matmul_tokens_into(const TernaryTensor& w, std::span<const QuantizedActivations> xs,
                                       DenseMatrix& out) {
  const std::size_t rows = w.rows();
  const std::size_t cols = w.cols();
  const std::size_t n = xs.size();
  for (const auto& x : xs) {
    if (x.size() != cols) throw Error(ErrorKind::dimension_mismatch, "ternary_matmul_tokens: w.cols != x.len");
  }
  if (cols > kMaxKernelCols) throw Error(ErrorKind::invalid_argument, "ternary_matmul_tokens: cols exceeds 2^24");
  if (out.rows() != n || out.cols() != rows) out = DenseMatrix(n, rows);

  constexpr std::size_t L = kTokenLanes;
  constexpr std::size_t kChunk = 256;
  using lanes16 = std::int16_t __attribute__((vector_size(L * sizeof(std::int16_t))));
  const std::uint8_t* packed = w.packed().data();
  thread_local std::vector<lanes16> table;
  table.resize(cols * 4);
  std::vector<std::int32_t> acc(L);

  for (std::size_t base = 0; base < n; base += L) {
    const std::size_t lanes = std::min(L, n - base);
    for (std::size_t c = 0; c < cols; ++c) {
      lanes16 plus{};
      for (std::size_t t = 0; t < lanes; ++t) plus[t] = xs[base + t].values[c];
      table[c * 4 + 0] = lanes16{};
      table[c * 4 + 1] = plus;
      table[c * 4 + 2] = -plus;
      table[c * 4 + 3] = lanes16{};
    }
    const lanes16* tbl = table.data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::fill(acc.begin(), acc.end(), 0);
      const std::size_t first = r * cols;
      for (std::size_t c0 = 0; c0 < cols; c0 += kChunk) {
        const std::size_t c1 = std::min(cols, c0 + kChunk);
        lanes16 part0{}, part1{};
        std::size_t c = c0;
        if (cols % 4 == 0) {
          // Rows start on byte boundaries: decode four codes per weight byte.
          const std::uint8_t* bytes = packed + first / 4;
          for (; c + 4 <= c1; c += 4) {
            const unsigned b = bytes[c / 4];
            const lanes16* g = tbl + c * 4;
            part0 += g[b & 3u];
            part1 += g[4 + ((b >> 2) & 3u)];
            part0 += g[8 + ((b >> 4) & 3u)];
            part1 += g[12 + (b >> 6)];
          }
        }
        for (; c < c1; ++c) {
          const std::size_t i = first + c;
          const unsigned code = (packed[i >> 2] >> ((i & 3) << 1)) & 3u;
          part0 += tbl[c * 4 + code];
        }
        // Each half holds at most 128 terms, so both fit int16 separately.
        for (std::size_t t = 0; t < L; ++t) acc[t] += std::int32_t{part0[t]} + std::int32_t{part1[t]};
      }
      for (std::size_t t = 0; t < lanes; ++t) {
        out(base + t, r) = static_cast<double>(acc[t]) * (w.scale() * xs[base + t].act_scale);
      }
    }
  }
}

inline DenseMatrix ternary_matmul_tokens(const TernaryTensor& w, std::span<const QuantizedActivations> xs) {
  DenseMatrix out;
  ternary_matmul_tokens_into(w, xs, out);
  return out;
}

// Oracle path: dequantize the weights and take the dense product with x.
inline DenseVector ternary_matvec_reference(const TernaryTensor& w, std::span<const double> x) {
  if (w.cols() != x.size()) throw Error(ErrorKind::dimension_mismatch, "ternary_matvec_reference: w.cols != x.len");
  return matvec(dequantize(w), x);
}

// Row-major float32 matvec; the dense baseline the benchmark measures against.
inline void dense_matvec_f32(std::span<const float> w, std::size_t rows, std::size_t cols,
                             std::span<const float> x, std::span<float> y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = w.data() + r * cols;
    float s = 0.0f;
    for (std::size_t c = 0; c < cols; ++c) s += row[c] * x[c];
    y[r] = s;
  }
}

// ---------------------------------------------------------------------------
// Benchmark harness.

struct KernelBenchReport {
  std::size_t rows = 0;
  std::size_t cols = 0;
  double median_ns = 0.0;
  double p95_ns = 0.0;
  double dense_median_ns = 0.0;
  double dense_p95_ns = 0.0;
  std::size_t bytes_touched = 0;
  std::size_t dense_bytes_touched = 0;
  double speedup_vs_dense = 0.0;
};

namespace detail {

inline double percentile_ns(std::vector<double> samples, double q) {
  if (samples.empty()) return 0.0;
  std::sort(samples.begin(), samples.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(samples.size())));
  return samples[std::clamp<std::size_t>(rank, 1, samples.size()) - 1];
}

}  // namespace detail

inline constexpr std::size_t kBenchWarmup = 10;

inline std::vector<KernelBenchReport> bench_matvec(
    std::span<const std::pair<std::size_t, std::size_t>> dims, std::size_t iters,
    std::uint64_t seed = 0) {
  if (iters < 100) throw Error(ErrorKind::invalid_argument, "bench_matvec: iters must be >= 100");
  using clock = std::chrono::steady_clock;
  std::vector<KernelBenchReport> reports;
  RngStream rng(seed, 0xBE4C);
  volatile double sink = 0.0;

  for (auto [rows, cols] : dims) {
    if (rows == 0 || cols == 0) throw Error(ErrorKind::invalid_argument, "bench_matvec: empty shape");
    const DenseMatrix w = random_normal(rows, cols, rng, 1.0 / std::sqrt(static_cast<double>(cols)));
    const TernaryTensor tw = quantize(w);
    DenseVector x(cols);
    for (double& v : x) v = rng.normal();
    std::vector<float> wf(w.data().begin(), w.data().end());
    std::vector<float> xf(x.begin(), x.end());
    std::vector<float> yf(rows);
    DenseVector y(rows);

    auto run_ternary = [&] {
      const QuantizedActivations q = quantize_activations(x);
      ternary_matvec_into(tw, q, y);
      sink = sink + y[0];
    };
    auto run_dense = [&] {
      dense_matvec_f32(wf, rows, cols, xf, yf);
      sink = sink + yf[0];
    };

    std::vector<double> ternary_ns, dense_ns;
    ternary_ns.reserve(iters);
    dense_ns.reserve(iters);
    for (std::size_t i = 0; i < kBenchWarmup; ++i) {
      run_ternary();
      run_dense();
    }
    for (std::size_t i = 0; i < iters; ++i) {
      auto t0 = clock::now();
      run_ternary();
      auto t1 = clock::now();
      run_dense();
      auto t2 = clock::now();
      ternary_ns.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
      dense_ns.push_back(std::chrono::duration<double, std::nano>(t2 - t1).count());
    }

    KernelBenchReport r;
    r.rows = rows;
    r.cols = cols;
    r.median_ns = detail::percentile_ns(ternary_ns, 0.5);
    r.p95_ns = detail::percentile_ns(ternary_ns, 0.95);
    r.dense_median_ns = detail::percentile_ns(dense_ns, 0.5);
    r.dense_p95_ns = detail::percentile_ns(dense_ns, 0.95);
    r.bytes_touched = tw.packed().size() + cols;  // packed weights + int8 activations
    r.dense_bytes_touched = 4 * rows * cols + 4 * cols;
    r.speedup_vs_dense = r.dense_median_ns / std::max(r.median_ns, 1.0);
    reports.push_back(r);
  }
  return reports;
}

}  // namespace bitrl
