#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "bitrl/theory.hpp"

namespace bitrl {
namespace {

BackbonePair small_pair(std::uint64_t seed) {
  RngStream rng(seed);
  return build_backbone(small_backbone_config(), rng);
}

TEST(CheckBound, Semantics) {
  EXPECT_TRUE(check_bound(0.0, 0.0).holds);
  EXPECT_TRUE(check_bound(1.0, 1.0).holds);
  EXPECT_TRUE(check_bound(1.0 + 1e-12, 1.0).holds);
  EXPECT_FALSE(check_bound(1.01, 1.0).holds);
  EXPECT_DOUBLE_EQ(check_bound(2.0, 5.0).slack_ratio, 2.5);
  EXPECT_TRUE(std::isinf(check_bound(0.0, 1.0).slack_ratio));
}

TEST(LinearBound, HoldsOnRandomMatrices) {
  RngStream rng(1);
  for (int i = 0; i < 50; ++i) {
    const DenseMatrix w = random_normal(32, 48, rng);
    const DenseMatrix x = random_normal(1, 48, rng);
    const BoundCheckResult r = verify_linear_bound(w, quantize(w), x.data());
    EXPECT_TRUE(r.holds);
    EXPECT_GT(r.measured, 0.0);
  }
  const DenseMatrix w = random_normal(4, 4, rng);
  EXPECT_THROW(verify_linear_bound(w, quantize(w), std::vector<double>(3, 1.0)), Error);
}

TEST(ReprBound, ZeroPerturbationGivesZeroGap) {
  const BackbonePair p = small_pair(2);
  const ShadowBackbone d = dequantized(p.model);
  RngStream rng(3);
  std::vector<std::vector<int>> xs;
  for (int i = 0; i < 5; ++i) xs.push_back(random_tokens(p.model.vocab(), rng));
  const ReprBoundReport r = verify_repr_bound(d, d, xs);
  EXPECT_EQ(r.perturbation.epsilon_q, 0.0);
  EXPECT_EQ(r.check.measured, 0.0);
  EXPECT_TRUE(r.check.holds);
  EXPECT_THROW(verify_repr_bound(d, d, {}), Error);
}

TEST(ReprBound, HoldsOnSmallBackbone) {
  const BackbonePair p = small_pair(4);
  RngStream rng(5);
  std::vector<std::vector<int>> xs;
  for (int i = 0; i < 20; ++i) xs.push_back(random_tokens(p.model.vocab(), rng));
  const ReprBoundReport r = verify_repr_bound(p, xs);
  EXPECT_GT(r.check.measured, 0.0);
  EXPECT_TRUE(r.check.holds);
  EXPECT_EQ(r.sensitivity.unit_constants.size(), 6u * small_backbone_config().layers);
  // Independent check of the perturbation size.
  const DenseVector a = linear_parameters(p.shadow), b = linear_parameters(dequantized(p.model));
  long double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (long double)(b[i] - a[i]) * (b[i] - a[i]);
    den += (long double)a[i] * a[i];
  }
  EXPECT_NEAR(r.perturbation.epsilon_q, std::sqrt(static_cast<double>(num / den)), 1e-9);
}

TEST(PolicyLipschitz, BoundsGradientDifferences) {
  RngStream rng(6);
  const HeadParams pi = make_head(16, 3, 1.0, rng);
  const double beta = 0.05;
  for (int t = 0; t < 20; ++t) {
    const DenseMatrix h = random_normal(1, 16, rng);
    DenseMatrix g = h;
    for (double& x : g.data()) x += 0.01 * rng.normal();
    const std::vector<std::size_t> act{rng.below(3)};
    const std::vector<double> adv{rng.normal()};
    HeadGradients a = on_policy_gradient(pi, h, act, adv, beta);
    const HeadGradients b = on_policy_gradient(pi, g, act, adv, beta);
    a.scale(-1.0);
    a.add(b);
    double dh = 0.0;
    for (std::size_t i = 0; i < 16; ++i) dh += (h.data()[i] - g.data()[i]) * (h.data()[i] - g.data()[i]);
    const double bound_r = std::max(norm2(h.data()), norm2(g.data()));
    const double lip = policy_lipschitz(pi, std::abs(adv[0]), beta, bound_r).constant;
    EXPECT_LE(std::sqrt(a.sum_of_squares()), lip * std::sqrt(dh));
  }
  HeadParams lin = pi;
  lin.activation = HeadActivation::identity;
  EXPECT_THROW(policy_lipschitz(lin, 1.0, 0.0, 1.0), Error);
}

TEST(GradientBias, HoldsOnSmallBackbone) {
  const BackbonePair p = small_pair(7);
  RngStream rng(8);
  const HeadParams pi = make_head(64, 2, 1.0, rng);
  PolicyBatch b;
  for (int i = 0; i < 8; ++i) {
    b.inputs.push_back(random_tokens(p.model.vocab(), rng));
    b.actions.push_back(rng.below(2));
    b.advantages.push_back(rng.normal());
  }
  const GradientBiasReport r = measure_gradient_bias(pi, p, b);
  EXPECT_TRUE(r.check.holds);
  EXPECT_GT(r.check.measured, 0.0);
  b.actions.pop_back();
  EXPECT_THROW(measure_gradient_bias(pi, p, b), Error);
}

TEST(Lstd, ZeroDiscountIsRidgeRegression) {
  RngStream rng(9);
  const std::size_t n = 200, k = 6;
  const DenseMatrix phi = random_normal(n, k, rng), next = random_normal(n, k, rng);
  std::vector<Transition> data(n);
  for (auto& t : data) {
    t.reward = rng.normal();
    t.terminal = rng.uniform() < 0.2;
  }
  const double ridge = 1e-2;
  const auto w = detail::lstd(phi, next, data, 0.0, ridge);
  ASSERT_TRUE(w.has_value());
  Eigen::MatrixXd X(n, k);
  Eigen::VectorXd y(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) X(i, j) = phi(i, j);
    y(i) = data[i].reward;
  }
  const Eigen::MatrixXd A = X.transpose() * X + ridge * n * Eigen::MatrixXd::Identity(k, k);
  const Eigen::VectorXd o = A.ldlt().solve(X.transpose() * y);
  for (std::size_t j = 0; j < k; ++j) EXPECT_NEAR((*w)[j], o(j), 1e-10);
}

TEST(Lstd, SatisfiesTdFixedPoint) {
  RngStream rng(10);
  const std::size_t n = 300, k = 5;
  const DenseMatrix phi = random_normal(n, k, rng), next = random_normal(n, k, rng);
  std::vector<Transition> data(n);
  for (auto& t : data) {
    t.reward = rng.normal();
    t.terminal = rng.uniform() < 0.1;
  }
  const double gamma = 0.9, ridge = 1e-3;
  const auto w = detail::lstd(phi, next, data, gamma, ridge);
  ASSERT_TRUE(w.has_value());
  // sum_t phi_t (r_t + g phi'_t w - phi_t w) = ridge * n * w
  for (std::size_t i = 0; i < k; ++i) {
    long double s = 0;
    for (std::size_t t = 0; t < n; ++t) {
      const double g = data[t].terminal ? 0.0 : gamma;
      s += phi(t, i) * (data[t].reward + g * dot(next.row(t), *w) - dot(phi.row(t), *w));
    }
    EXPECT_NEAR(static_cast<double>(s), ridge * n * (*w)[i], 1e-8);
  }
}

TEST(Lstd, SingularSystemReportsNothing) {
  const DenseMatrix a(3, 3);
  EXPECT_FALSE(detail::solve_linear(a, DenseVector(3, 1.0)).has_value());
}

TEST(Amplification, GridValidationAndShape) {
  const BackbonePair p = small_pair(11);
  RngStream rng(12);
  EXPECT_THROW(verify_value_amplification(p, EnvId::cartpole, {}, rng), Error);
  EXPECT_THROW(verify_value_amplification(p, EnvId::cartpole, {0.5, 0.5}, rng), Error);
  EXPECT_THROW(verify_value_amplification(p, EnvId::cartpole, {1.0}, rng), Error);
  ValueFitBudget b;
  b.train_transitions = 300;
  b.heldout_states = 50;
  const AmplificationReport r = verify_value_amplification(p, EnvId::cartpole, {0.0, 0.5, 0.9}, rng, b);
  ASSERT_EQ(r.rows.size(), 3u);
  for (const auto& row : r.rows) {
    EXPECT_TRUE(row.converged);
    EXPECT_GT(row.gap, 0.0);
    EXPECT_NEAR(row.scaled_gap, row.gap * (1.0 - row.gamma), 1e-15);
  }
}

TEST(Amplification, DiscountHorizonArithmetic) {
  EXPECT_NEAR(1.0 / (1.0 - 0.99), 100.0, 1e-9);
  EXPECT_NEAR(1.0 / (1.0 - 0.9), 10.0, 1e-12);
}

TEST(SignTest, ExactValues) {
  EXPECT_EQ(sign_test_p(0, 0), 1.0);
  EXPECT_NEAR(sign_test_p(10, 0), 2.0 / 1024.0, 1e-15);
  EXPECT_NEAR(sign_test_p(0, 10), 2.0 / 1024.0, 1e-15);
  EXPECT_NEAR(sign_test_p(8, 2), 2.0 * (1 + 10 + 45) / 1024.0, 1e-15);
  EXPECT_EQ(sign_test_p(5, 5), 1.0);
}

TEST(Entropy, UniformHeadGivesLogActions) {
  const BackbonePair p = small_pair(13);
  RngStream rng(14);
  HeadParams pi = make_policy_head(64, 3, rng);
  for (double& w : pi.layers[2].w.data()) w = 0.0;
  RngStream srng(15);
  const auto states = uniform_policy_states(EnvId::mountaincar, 30, srng);
  const EntropyPair e = entropy_pair(p, pi, EnvId::mountaincar, states);
  EXPECT_NEAR(e.ternary, std::log(3.0), 1e-12);
  EXPECT_NEAR(e.fp, std::log(3.0), 1e-12);
  EXPECT_EQ(e.delta, 0.0);
}

TEST(Entropy, Summary) {
  std::vector<EntropyPair> pairs;
  for (int i = 0; i < 10; ++i) pairs.push_back({std::uint64_t(i), 0.5, 0.6, -0.1});
  pairs.push_back({10, 0.6, 0.6, 0.0});
  const EntropyReport r = summarize_entropy(pairs);
  EXPECT_EQ(r.negatives, 10u);
  EXPECT_EQ(r.positives, 0u);
  EXPECT_NEAR(r.p_value, 2.0 / 1024.0, 1e-15);
  EXPECT_TRUE(r.negative_flagged);
  EXPECT_NEAR(r.mean_delta, -1.0 / 11.0, 1e-15);
  EXPECT_THROW(measure_entropy_delta(EnvId::cartpole, 19), Error);
}

TEST(Suites, SmallRunsPass) {
  const SuiteReport a = run_lemma1_suite(3, 5);
  EXPECT_TRUE(a.passed);
  EXPECT_EQ(a.detail["held"], 3);
  const SuiteReport b = run_thm1_suite(2, 8);
  EXPECT_TRUE(b.passed);
}

}  // namespace
}  // namespace bitrl
