#include <gtest/gtest.h>

#include <sstream>
#include <vector>

#include "bitrl/envs.hpp"
#include "bitrl/text.hpp"

namespace bitrl {
namespace {

// Independent re-count: words, with each numeric word costing a sign token
// plus one token per character after an optional sign.
std::size_t count_tokens(const std::string& text) {
  std::istringstream in(text);
  std::string w;
  std::size_t n = 0;
  while (in >> w) {
    const bool numeric = !w.empty() && (std::isdigit(static_cast<unsigned char>(w.back())) != 0) &&
                         w.find_first_not_of("+-0123456789.") == std::string::npos;
    if (numeric) n += 1 + w.size() - (w[0] == '-' || w[0] == '+' ? 1 : 0);
    else n += 1;
  }
  return n;
}

TEST(Serialize, CartPoleZeroState) {
  const std::vector<double> obs{0, 0, 0, 0};
  EXPECT_EQ(serialize_state(EnvId::cartpole, obs),
            "cart position 0.00 velocity 0.00 pole angle 0.00 angular velocity 0.00");
  EXPECT_EQ(serialize_state(EnvId::cartpole, obs), serialize_state("cartpole", obs));
}

TEST(Serialize, FixedTwoDecimals) {
  EXPECT_EQ(format_fixed2(0.005), "0.01");
  EXPECT_EQ(format_fixed2(-0.004), "0.00");
  EXPECT_EQ(format_fixed2(-1.236), "-1.24");
  EXPECT_EQ(format_fixed2(12.5), "12.50");
  EXPECT_THROW(format_fixed2(NAN), Error);
}

TEST(Serialize, MountainCarVelocityInHundredths) {
  const std::vector<double> obs{-0.5, 0.0123};
  EXPECT_EQ(serialize_state(EnvId::mountaincar, obs), "car position -0.50 velocity in hundredths 1.23");
}

TEST(Serialize, DimensionMismatch) {
  EXPECT_THROW(serialize_state(EnvId::cartpole, std::vector<double>{1, 2}), Error);
  EXPECT_THROW(serialize_state("nope", std::vector<double>{1}), Error);
}

TEST(Tokenize, EmptyAndDeterministic) {
  const Vocabulary v = Vocabulary::standard();
  EXPECT_TRUE(tokenize(v, "").empty());
  const auto a = tokenize(v, "velocity 0.00 velocity 0.00");
  ASSERT_EQ(a.size(), 12u);
  EXPECT_EQ(std::vector<int>(a.begin() + 1, a.begin() + 6), std::vector<int>(a.begin() + 7, a.end()));
  EXPECT_EQ(tokenize(v, "velocity 0.00"), tokenize(v, "velocity 0.00"));
}

TEST(Tokenize, NumbersSplitIntoSignAndCharacters) {
  const Vocabulary v = Vocabulary::standard();
  const auto t = tokenize(v, "-1.25 3.0");
  std::vector<std::string> words;
  for (int id : t) words.push_back(v.token(id));
  EXPECT_EQ(words, (std::vector<std::string>{"-", "1", ".", "2", "5", "+", "3", ".", "0"}));
  EXPECT_EQ(tokenize(v, "zebra")[0], Vocabulary::kUnknown);
}

TEST(Tokenize, TruncatesAtContextLimit) {
  const Vocabulary v = Vocabulary::standard();
  std::string s;
  for (int i = 0; i < 100; ++i) s += "velocity ";
  EXPECT_EQ(tokenize(v, s).size(), kMaxContext);
}

TEST(Tokenize, CartPoleLengthInRange) {
  const Vocabulary v = Vocabulary::standard();
  RngStream rng(1);
  for (int i = 0; i < 200; ++i) {
    EnvState st = reset(EnvId::cartpole, rng);
    const std::string s = serialize_state(EnvId::cartpole, st.obs);
    const auto t = tokenize(v, s);
    EXPECT_EQ(t.size(), count_tokens(s));
    EXPECT_GE(t.size(), 15u);
    EXPECT_LE(t.size(), 40u);
  }
}

TEST(Tokenize, SeventeenDimGenericStateIsTruncated) {
  // Two-decimal rendering spends about five tokens per value, so 17 values
  // exceed the context and are cut at 64.
  const Vocabulary v = Vocabulary::standard();
  RngStream rng(2);
  std::vector<double> obs(17);
  for (double& x : obs) x = rng.normal();
  const std::string s = serialize_state("generic", obs);
  EXPECT_GT(count_tokens(s), kMaxContext);
  EXPECT_EQ(tokenize(v, s).size(), kMaxContext);
}

TEST(Vocabulary, RoundTripAndValidation) {
  const Vocabulary v = Vocabulary::standard();
  EXPECT_EQ(Vocabulary(v.tokens()), v);
  EXPECT_EQ(v.id("<pad>"), Vocabulary::kPad);
  EXPECT_THROW(Vocabulary(std::vector<std::string>{"a", "b"}), Error);
  EXPECT_THROW(Vocabulary(std::vector<std::string>{"<pad>", "<unk>", "x", "x"}), Error);
  for (EnvId id : kAllEnvs) {
    for (const auto& slot : serialization_template(id).slots) {
      std::istringstream in(slot.label);
      std::string w;
      while (in >> w) EXPECT_NE(v.id(w), Vocabulary::kUnknown) << w;
    }
  }
}

}  // namespace
}  // namespace bitrl
