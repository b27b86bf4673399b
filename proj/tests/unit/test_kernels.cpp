#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "bitrl/kernels.hpp"

namespace bitrl {
namespace {

TernaryTensor from_trits(std::size_t r, std::size_t c, const std::vector<std::int8_t>& t, double alpha) {
  return TernaryTensor(r, c, pack_trits(t), alpha, alpha == 1.0 ? ScaleMode::none : ScaleMode::absmean);
}

TernaryTensor identity_trits(std::size_t n, int sign) {
  std::vector<std::int8_t> t(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) t[i * n + i] = static_cast<std::int8_t>(sign);
  return from_trits(n, n, t, 1.0);
}

TEST(RoundHalfAway, Ties) {
  using detail::round_half_away;
  EXPECT_EQ(round_half_away(0.5), 1.0);
  EXPECT_EQ(round_half_away(-0.5), -1.0);
  EXPECT_EQ(round_half_away(1.5), 2.0);
  EXPECT_EQ(round_half_away(2.4999), 2.0);
  EXPECT_EQ(round_half_away(-2.5), -3.0);
  EXPECT_EQ(round_half_away(0.49999999999999994), 0.0);
}

TEST(ActivationQuant, ExactlyRepresentable) {
  const auto q = quantize_activations(std::vector<double>{127, -127});
  EXPECT_EQ(q.values, (std::vector<std::int8_t>{127, -127}));
  EXPECT_EQ(q.act_scale, 1.0);
}

TEST(ActivationQuant, ZeroVectorConvention) {
  const auto q = quantize_activations(std::vector<double>{0, 0});
  EXPECT_EQ(q.values, (std::vector<std::int8_t>{0, 0}));
  EXPECT_EQ(q.act_scale, 1.0);
}

TEST(ActivationQuant, ErrorWithinHalfStep) {
  RngStream rng(1);
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> x(1 + rng.below(300));
    for (double& v : x) v = rng.normal() * 3.0;
    const auto q = quantize_activations(x);
    const auto back = dequantize_activations(q);
    for (std::size_t k = 0; k < x.size(); ++k) ASSERT_LE(std::abs(back[k] - x[k]), q.act_scale / 2 + 1e-9);
  }
}

TEST(ActivationQuant, RejectsNonFinite) {
  EXPECT_THROW(quantize_activations(std::vector<double>{1.0, NAN}), Error);
  EXPECT_THROW(quantize_activations(std::vector<double>{INFINITY}), Error);
}

TEST(TernaryMatvec, ArithmeticByDefinition) {
  const auto w = from_trits(2, 2, {1, -1, 0, 1}, 0.5);
  QuantizedActivations x{{2, 3}, 1.0};
  EXPECT_EQ(ternary_matvec(w, x), (DenseVector{-0.5, 1.5}));
}

TEST(TernaryMatvec, ZeroWeights) {
  const auto w = from_trits(3, 5, std::vector<std::int8_t>(15, 0), 1.0);
  const auto x = quantize_activations(std::vector<double>{1, -2, 3, 4, 5});
  EXPECT_EQ(ternary_matvec(w, x), DenseVector(3, 0.0));
}

TEST(TernaryMatvec, IdentityAndNegation) {
  RngStream rng(2);
  for (std::size_t n : {1u, 4u, 7u, 64u}) {
    std::vector<double> xs(n);
    for (double& v : xs) v = rng.normal();
    const auto q = quantize_activations(xs);
    const auto xd = dequantize_activations(q);
    EXPECT_EQ(ternary_matvec(identity_trits(n, 1), q), xd);
    DenseVector neg(n);
    for (std::size_t i = 0; i < n; ++i) neg[i] = -xd[i];
    EXPECT_EQ(ternary_matvec(identity_trits(n, -1), q), neg);
  }
}

TEST(TernaryMatvec, MatchesDenseReference) {
  RngStream rng(3);
  const std::size_t dims[3] = {64, 256, 1024};
  for (int p = 0; p < 300; ++p) {
    const std::size_t n = dims[p % 3];
    const std::size_t rows = 1 + rng.below(n);
    const TernaryTensor w = quantize(random_normal(rows, n, rng));
    std::vector<double> x(n);
    for (double& v : x) v = rng.normal();
    const auto q = quantize_activations(x);
    const DenseVector y = ternary_matvec(w, q);
    const DenseMatrix dw = dequantize(w);
    const DenseVector xd = dequantize_activations(q);
    for (std::size_t r = 0; r < rows; ++r) {
      long double o = 0.0L;
      for (std::size_t c = 0; c < n; ++c) o += static_cast<long double>(dw(r, c)) * xd[c];
      ASSERT_NEAR(y[r], static_cast<double>(o), 1e-9 * (1.0 + std::abs(static_cast<double>(o))));
    }
  }
}

TEST(TernaryMatvec, OddWidthsUseGenericPath) {
  RngStream rng(4);
  for (std::size_t cols : {1u, 3u, 5u, 13u, 130u}) {
    const TernaryTensor w = quantize(random_normal(7, cols, rng));
    std::vector<double> x(cols);
    for (double& v : x) v = rng.normal();
    const auto q = quantize_activations(x);
    const DenseVector y = ternary_matvec(w, q);
    const DenseVector ref = ternary_matvec_reference(w, dequantize_activations(q));
    for (std::size_t r = 0; r < 7; ++r) EXPECT_NEAR(y[r], ref[r], 1e-12 * (1 + std::abs(ref[r])));
  }
}

TEST(TernaryMatvec, ReferenceAgreesWithMatmul) {
  RngStream rng(5);
  for (int i = 0; i < 100; ++i) {
    const std::size_t r = 1 + rng.below(40), c = 1 + rng.below(40);
    const TernaryTensor w = quantize(random_normal(r, c, rng));
    const DenseMatrix x = random_normal(c, 1, rng);
    const DenseVector a = ternary_matvec_reference(w, x.data());
    const DenseMatrix b = matmul(dequantize(w), x);
    for (std::size_t k = 0; k < r; ++k) ASSERT_NEAR(a[k], b(k, 0), 1e-12 * (1 + std::abs(b(k, 0))));
  }
}

TEST(TernaryMatvec, ShapeErrors) {
  const TernaryTensor w = from_trits(2, 4, std::vector<std::int8_t>(8, 1), 1.0);
  EXPECT_THROW(ternary_matvec(w, quantize_activations(std::vector<double>{1, 2, 3})), Error);
  std::vector<double> out(3);
  EXPECT_THROW(ternary_matvec_into(w, quantize_activations(std::vector<double>{1, 2, 3, 4}), out), Error);
}

TEST(TokenBatch, BitIdenticalToPerTokenMatvec) {
  RngStream rng(6);
  for (auto [rows, cols, tokens] : {std::array<std::size_t, 3>{64, 64, 27}, {128, 256, 44}, {9, 6, 1}, {5, 300, 65}}) {
    const TernaryTensor w = quantize(random_normal(rows, cols, rng));
    std::vector<QuantizedActivations> xs;
    for (std::size_t t = 0; t < tokens; ++t) {
      std::vector<double> x(cols);
      for (double& v : x) v = rng.normal();
      xs.push_back(quantize_activations(x));
    }
    const DenseMatrix out = ternary_matmul_tokens(w, xs);
    ASSERT_EQ(out.rows(), tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
      const DenseVector y = ternary_matvec(w, xs[t]);
      for (std::size_t r = 0; r < rows; ++r) ASSERT_EQ(out(t, r), y[r]);
    }
  }
}

TEST(TokenBatch, SaturatedColumnsDoNotOverflow) {
  // Every activation at +-127 and every trit +1: 1024 columns sum to 130048.
  const std::size_t cols = 1024;
  const auto w = from_trits(2, cols, std::vector<std::int8_t>(2 * cols, 1), 1.0);
  std::vector<QuantizedActivations> xs(3);
  for (auto& x : xs) x = {std::vector<std::int8_t>(cols, 127), 1.0};
  xs[1].values.assign(cols, -127);
  const DenseMatrix out = ternary_matmul_tokens(w, xs);
  EXPECT_EQ(out(0, 0), 127.0 * cols);
  EXPECT_EQ(out(1, 1), -127.0 * cols);
  EXPECT_EQ(ternary_matvec(w, xs[0])[0], 127.0 * cols);
}

TEST(Bench, SmokeAndByteAccounting) {
  const std::vector<std::pair<std::size_t, std::size_t>> dims{{1, 1}, {64, 64}};
  const auto r = bench_matvec(dims, 100);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_GT(r[0].median_ns, 0.0);
  EXPECT_GE(static_cast<double>(r[1].dense_bytes_touched - 64 * 4) / (r[1].bytes_touched - 64), 10.0);
  EXPECT_THROW(bench_matvec(dims, 10), Error);
}

}  // namespace
}  // namespace bitrl
