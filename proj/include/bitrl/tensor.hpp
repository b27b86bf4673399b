#pragma once

// Dense real-valued linear algebra, reductions and the reproducible RNG shared
// by every other module. This is the full-precision reference path: all real
// arithmetic is carried out in double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "bitrl/error.hpp"

namespace bitrl {

using DenseVector = std::vector<double>;

class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw Error(ErrorKind::dimension_mismatch, "matrix data length does not equal rows*cols");
    }
  }

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Reductions. Inputs of 1024 entries or more are summed pairwise so that the
// theory checks can compare small quantities against their bounds.

namespace detail {

inline double pairwise_sum(const double* p, std::size_t n) {
  if (n <= 128) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += p[i];
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(p, half) + pairwise_sum(p + half, n - half);
}

}  // namespace detail

inline double sum(std::span<const double> v) {
  if (v.size() < 1024) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  return detail::pairwise_sum(v.data(), v.size());
}

inline double mean(std::span<const double> v) {
  return v.empty() ? 0.0 : sum(v) / static_cast<double>(v.size());
}

// Four independent accumulators; deterministic and roughly 4x the throughput
// of a single dependency chain.
inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorKind::dimension_mismatch, "dot: length mismatch");
  const std::size_t n = a.size();
  if (n >= 1024) {
    std::vector<double> prod(n);
    for (std::size_t i = 0; i < n; ++i) prod[i] = a[i] * b[i];
    return sum(prod);
  }
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline double norm2(std::span<const double> v) {
  if (v.size() < 1024) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  }
  std::vector<double> sq(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) sq[i] = v[i] * v[i];
  return std::sqrt(sum(sq));
}

inline double frobenius_norm(const DenseMatrix& m) { return norm2(m.data()); }

// ---------------------------------------------------------------------------
// Products.

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorKind::dimension_mismatch, "matmul: a.cols != b.rows");
  }
  DenseMatrix out(a.rows(), b.cols());
  // i-k-j order over column strips of 32 so a strip of the output row stays in
  // registers; each output still sums over k in increasing order.
  constexpr std::size_t kStrip = 32;
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* orow = out.row(i).data();
    const double* arow = a.row(i).data();
    std::size_t j0 = 0;
    for (; j0 + kStrip <= n; j0 += kStrip) {
      double acc[kStrip] = {};
      for (std::size_t k = 0; k < a.cols(); ++k) {
        const double aik = arow[k];
        if (aik == 0.0) continue;
        const double* brow = b.row(k).data() + j0;
        for (std::size_t j = 0; j < kStrip; ++j) acc[j] += aik * brow[j];
      }
      std::copy(acc, acc + kStrip, orow + j0);
    }
    for (std::size_t k = 0; k < a.cols() && j0 < n; ++k) {
      const double aik = arow[k];
      if (aik == 0.0) continue;
      const double* brow = b.row(k).data();
      for (std::size_t j = j0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  if (!out.all_finite()) throw Error(ErrorKind::degenerate_input, "matmul: non-finite output");
  return out;
}

inline DenseVector matvec(const DenseMatrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw Error(ErrorKind::dimension_mismatch, "matvec: a.cols != x.len");
  DenseVector y(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) y[r] = dot(a.row(r), x);
  return y;
}

inline DenseMatrix transpose(const DenseMatrix& a) {
  DenseMatrix t(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
  return t;
}

// ---------------------------------------------------------------------------
// Spectral norm upper bound.
//
// Returns min of three rigorous upper bounds on sigma_max:
//   sqrt(||A||_1 * ||A||_inf), ||A||_F, and (trace((A^T A)^k))^(1/2k)
// with k = 2^6 obtained by repeated squaring of the Gram matrix. The last one
// overshoots by at most n^(1/2k), about 4% for n = 128.

namespace detail {

inline double gram_trace_power_bound(const DenseMatrix& a) {
  const bool use_cols = a.cols() <= a.rows();
  const std::size_t n = use_cols ? a.cols() : a.rows();
  if (n == 0) return 0.0;
  DenseMatrix g(n, n);
  if (use_cols) {
    for (std::size_t r = 0; r < a.rows(); ++r) {
      auto row = a.row(r);
      for (std::size_t i = 0; i < n; ++i) {
        const double ri = row[i];
        if (ri == 0.0) continue;
        double* gi = g.row(i).data();
        for (std::size_t j = 0; j < n; ++j) gi[j] += ri * row[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i; j < n; ++j) g(i, j) = g(j, i) = dot(a.row(i), a.row(j));
  }
  auto trace = [](const DenseMatrix& m) {
    double t = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) t += m(i, i);
    return t;
  };
  double tr = trace(g);
  if (!(tr > 0.0)) return 0.0;
  // lambda_max(G) <= trace(G^(2^m))^(1/2^m); track the normalizers in log space.
  double log_scale = std::log(tr);  // G = tr * C
  for (double& v : g.data()) v /= tr;
  constexpr int kSquarings = 6;
  double exponent = 1.0;
  for (int s = 0; s < kSquarings; ++s) {
    g = matmul(g, g);
    exponent *= 2.0;
    const double t = trace(g);
    if (!(t > 0.0)) break;
    // Invariant: G^exponent = exp(exponent * log_scale) * g with trace(g) = 1.
    for (double& v : g.data()) v /= t;
    log_scale += std::log(t) / exponent;
  }
  const double lambda_bound = std::exp(log_scale);
  return std::sqrt(lambda_bound) * (1.0 + 1e-9);
}

}  // namespace detail

inline double spectral_norm_upper_bound(const DenseMatrix& a) {
  if (a.empty()) return 0.0;
  double norm1 = 0.0;
  std::vector<double> colsum(a.cols(), 0.0);
  double norm_inf = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double rs = 0.0;
    auto row = a.row(r);
    for (std::size_t c = 0; c < a.cols(); ++c) {
      rs += std::abs(row[c]);
      colsum[c] += std::abs(row[c]);
    }
    norm_inf = std::max(norm_inf, rs);
  }
  for (double c : colsum) norm1 = std::max(norm1, c);
  double bound = std::min(std::sqrt(norm1 * norm_inf), frobenius_norm(a));
  bound = std::min(bound, detail::gram_trace_power_bound(a));
  return bound * (1.0 + 1e-9);
}

// ---------------------------------------------------------------------------
// Distributions.

inline DenseVector softmax(std::span<const double> logits) {
  DenseVector p(logits.size());
  if (logits.empty()) return p;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

inline DenseVector log_softmax(std::span<const double> logits) {
  DenseVector out(logits.size());
  if (logits.empty()) return out;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  const double lz = m + std::log(z);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

inline double entropy(std::span<const double> dist) {
  double total = 0.0;
  for (double p : dist) {
    if (!(p >= 0.0) || !std::isfinite(p)) {
      throw Error(ErrorKind::invalid_argument, "entropy: entries must be finite and non-negative");
    }
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw Error(ErrorKind::invalid_argument, "entropy: distribution is not normalized");
  }
  double h = 0.0;
  for (double p : dist) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::max(h, 0.0);
}

// ---------------------------------------------------------------------------
// Reproducible RNG: xoshiro256** seeded through splitmix64 from (seed, stream).
// Every distribution below is derived from raw 64-bit draws in this file, so
// sequences do not depend on the standard library implementation.

class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id = 0) : seed_(seed), stream_(stream_id) {
    std::uint64_t x = seed ^ (0x9E3779B97F4A7C15ULL * (stream_id + 1));
    for (auto& s : state_) s = splitmix64(x);
    if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_; }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  // Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(angle);
    has_spare_ = true;
    return r * std::cos(angle);
  }

  // Categorical draw by cumulative-probability inversion.
  std::size_t categorical(std::span<const double> probs) {
    const double u = uniform();
    double cum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      cum += probs[i];
      if (u < cum) return i;
    }
    // Rounding left u above the final cumulative sum; take the last positive entry.
    for (std::size_t i = probs.size(); i-- > 0;) {
      if (probs[i] > 0.0) return i;
    }
    return 0;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t state_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline DenseMatrix random_normal(std::size_t rows, std::size_t cols, RngStream& rng,
                                 double stddev = 1.0) {
  DenseMatrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal() * stddev;
  return m;
}

}  // namespace bitrl
