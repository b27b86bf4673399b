#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "bitrl/backbone.hpp"
#include "bitrl/checkpoint.hpp"
#include "bitrl/envs.hpp"
#include "bitrl/heads.hpp"

namespace bitrl {
namespace {

BackboneConfig small() {
  BackboneConfig c;
  c.layers = 2;
  c.model_dim = 64;
  c.heads = 4;
  c.ffn_dim = 128;
  return c;
}

std::vector<int> cartpole_tokens(const Vocabulary& v, std::uint64_t seed) {
  RngStream rng(seed);
  const EnvState st = reset(EnvId::cartpole, rng);
  return tokenize_state(v, EnvId::cartpole, st.obs);
}

TEST(Backbone, ConfigValidation) {
  BackboneConfig c = small();
  EXPECT_NO_THROW(c.validate());
  c.layers = 7;
  EXPECT_THROW(c.validate(), Error);
  c = small();
  c.model_dim = 32;
  EXPECT_THROW(c.validate(), Error);
  c = small();
  c.heads = 3;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Backbone, ShapesAndParameterCount) {
  RngStream rng(1);
  const BackboneConfig c;
  const BackbonePair p = build_backbone(c, rng);
  const std::size_t v = p.model.vocab().size(), d = c.model_dim, f = c.ffn_dim;
  const std::size_t per_layer = 4 * d * d + 2 * d * f + 4 * d;
  EXPECT_EQ(p.model.parameter_count(), v * d + 2 * d + c.layers * per_layer);
  EXPECT_EQ(p.shadow.parameter_count(), p.model.parameter_count());
  EXPECT_TRUE(p.model.frozen());
  for (const auto& l : p.model.layers()) {
    EXPECT_EQ(l.w1.rows(), f);
    EXPECT_EQ(l.w1.cols(), d);
    EXPECT_EQ(l.w2.rows(), d);
    EXPECT_EQ(l.w2.cols(), f);
  }
}

TEST(Backbone, TrainableFractionAtDefaultShape) {
  // Heads of 256 and 128 hidden units on a 4 x 128 encoder. Recorded rather
  // than bounded: the heads are a sizable share of this small encoder.
  RngStream rng(2);
  const BackbonePair p = build_backbone(BackboneConfig{}, rng);
  const HeadParams pi = make_policy_head(128, 2, rng);
  const HeadParams v = make_value_head(128, rng);
  const std::size_t heads = pi.parameter_count() + v.parameter_count();
  EXPECT_EQ(pi.parameter_count(), 128u * 256 + 256 + 256 * 128 + 128 + 128 * 2 + 2);
  const double frac = static_cast<double>(heads) / static_cast<double>(heads + p.model.parameter_count());
  EXPECT_GT(frac, 0.0);
  EXPECT_LT(frac, 0.5);
}

TEST(Backbone, SameSeedSameCheckpointBytes) {
  RngStream a(7), b(7), c(8);
  const auto pa = build_backbone(small(), a), pb = build_backbone(small(), b), pc = build_backbone(small(), c);
  EXPECT_EQ(serialize_checkpoint(backbone_checkpoint(pa.model)), serialize_checkpoint(backbone_checkpoint(pb.model)));
  EXPECT_NE(serialize_checkpoint(backbone_checkpoint(pa.model)), serialize_checkpoint(backbone_checkpoint(pc.model)));
}

TEST(Backbone, EveryLayerPerturbationInUnitInterval) {
  RngStream rng(3);
  const BackbonePair p = build_backbone(BackboneConfig{}, rng);
  for (std::size_t i = 0; i < p.shadow.layers().size(); ++i) {
    const auto& fl = p.shadow.layers()[i];
    const auto& ql = p.model.layers()[i];
    const DenseMatrix* f[6] = {&fl.wq, &fl.wk, &fl.wv, &fl.wo, &fl.w1, &fl.w2};
    const TernaryTensor* q[6] = {&ql.wq, &ql.wk, &ql.wv, &ql.wo, &ql.w1, &ql.w2};
    for (int k = 0; k < 6; ++k) {
      const double eps = perturbation_between(f[k]->data(), dequantize(*q[k]).data()).epsilon_q;
      EXPECT_GT(eps, 0.0);
      EXPECT_LT(eps, 1.0);
      EXPECT_EQ(quantize(*f[k]), *q[k]);
    }
  }
}

TEST(Encode, DeterministicBitIdentical) {
  RngStream rng(4);
  const BackbonePair p = build_backbone(small(), rng);
  const auto t = cartpole_tokens(p.model.vocab(), 11);
  const DenseVector a = encode(p.model, t), b = encode(p.model, t);
  EXPECT_EQ(a, b);
  EXPECT_EQ(encode(p.shadow, t), encode(p.shadow, t));
  EXPECT_EQ(a.size(), 64u);
}

TEST(Encode, InputErrors) {
  RngStream rng(5);
  const BackbonePair p = build_backbone(small(), rng);
  EXPECT_THROW(encode(p.model, std::vector<int>{}), Error);
  EXPECT_THROW(encode(p.model, std::vector<int>(65, 2)), Error);
  EXPECT_THROW(encode(p.model, std::vector<int>{100000}), Error);
  EXPECT_NO_THROW(encode(p.model, std::vector<int>(64, 2)));
}

TEST(Encode, ZeroTritsLeaveEmbeddingPath) {
  RngStream rng(6);
  const BackboneConfig c = small();
  const BackbonePair p = build_backbone(c, rng);
  const std::size_t d = c.model_dim, f = c.ffn_dim;
  auto zeros = [](std::size_t r, std::size_t k) {
    return TernaryTensor(r, k, std::vector<std::uint8_t>((r * k + 3) / 4, 0), 1.0, ScaleMode::none);
  };
  std::vector<EncoderLayer<TernaryTensor>> layers;
  for (std::size_t i = 0; i < c.layers; ++i) {
    layers.push_back({zeros(d, d), zeros(d, d), zeros(d, d), zeros(d, d), zeros(f, d), zeros(d, f),
                      DenseVector(d, 1.0), DenseVector(d, 0.0), DenseVector(d, 1.0), DenseVector(d, 0.0)});
  }
  DenseVector gain(d), bias(d);
  for (std::size_t i = 0; i < d; ++i) {
    gain[i] = 0.5 + 0.01 * i;
    bias[i] = 0.1 * std::sin(double(i));
  }
  const BackboneModel m(c, p.model.vocab(), p.model.embeddings(), std::move(layers), gain, bias);
  const auto t = cartpole_tokens(m.vocab(), 12);
  const DenseVector h = encode(m, t);

  // Oracle: mean over tokens of LayerNorm(embedding + sinusoid).
  DenseVector o(d, 0.0);
  for (std::size_t pos = 0; pos < t.size(); ++pos) {
    std::vector<long double> x(d);
    for (std::size_t i = 0; i < d; ++i) {
      const long double freq = std::pow(10000.0L, -static_cast<long double>(i - i % 2) / d);
      const long double pe = i % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq);
      x[i] = m.embeddings()(static_cast<std::size_t>(t[pos]), i) + pe;
    }
    long double mu = 0, var = 0;
    for (auto v : x) mu += v;
    mu /= d;
    for (auto v : x) var += (v - mu) * (v - mu);
    var /= d;
    for (std::size_t i = 0; i < d; ++i) {
      o[i] += static_cast<double>((x[i] - mu) / std::sqrt(var + 1e-5L) * gain[i] + bias[i]) / t.size();
    }
  }
  for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(h[i], o[i], 1e-9);
}

TEST(Encode, IntegerPathTracksDequantizedWeights) {
  RngStream rng(7);
  const BackbonePair p = build_backbone(small(), rng);
  const ShadowBackbone deq = dequantized(p.model);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto t = cartpole_tokens(p.model.vocab(), s);
    const DenseVector a = encode(p.model, t), b = encode(deq, t);
    DenseVector diff(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
    // Only int8 activation rounding separates the two.
    EXPECT_LT(norm2(diff), 0.05 * norm2(b));
  }
}

TEST(Encode, PositionsMatter) {
  RngStream rng(8);
  const BackbonePair p = build_backbone(small(), rng);
  std::vector<int> t{5, 9, 12, 20};
  std::vector<int> r(t.rbegin(), t.rend());
  EXPECT_NE(encode(p.shadow, t), encode(p.shadow, r));
  DenseVector pe(6, 0.0);
  sinusoidal_position(0, pe);
  EXPECT_EQ(pe, (DenseVector{0, 1, 0, 1, 0, 1}));
}

}  // namespace
}  // namespace bitrl
