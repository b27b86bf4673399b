#include <gtest/gtest.h>

#include <filesystem>
#include <vector>

#include "bitrl/checkpoint.hpp"

namespace bitrl {
namespace {

BackbonePair small_pair(std::uint64_t seed) {
  BackboneConfig c;
  c.layers = 2;
  c.model_dim = 64;
  c.heads = 4;
  c.ffn_dim = 128;
  RngStream rng(seed);
  return build_backbone(c, rng);
}

ErrorKind kind_of(const std::vector<std::uint8_t>& bytes) {
  try {
    parse_checkpoint(bytes);
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::io;  // no error
}

TEST(Checkpoint, TernaryBackboneRoundTrip) {
  const BackbonePair p = small_pair(1);
  const Checkpoint c = backbone_checkpoint(p.model);
  const auto bytes = serialize_checkpoint(c);
  const Checkpoint back = parse_checkpoint(bytes);
  EXPECT_EQ(back, c);
  const BackboneModel m = load_backbone(back);
  EXPECT_EQ(serialize_checkpoint(backbone_checkpoint(m)), bytes);
  const std::vector<int> t{3, 9, 14, 2, 7};
  EXPECT_EQ(encode(m, t), encode(p.model, t));
}

TEST(Checkpoint, ShadowRoundTripAndRequantize) {
  const BackbonePair p = small_pair(2);
  const Checkpoint c = parse_checkpoint(serialize_checkpoint(backbone_checkpoint(p.shadow)));
  EXPECT_FALSE(is_ternary_backbone(c));
  const ShadowBackbone s = load_shadow_backbone(c);
  // Weights were drawn at float precision, so fp32 storage is lossless.
  EXPECT_EQ(linear_parameters(s), linear_parameters(p.shadow));
  const BackboneModel q = quantize_backbone(s, QuantConfig{});
  EXPECT_EQ(serialize_checkpoint(backbone_checkpoint(q)), serialize_checkpoint(backbone_checkpoint(p.model)));
  EXPECT_THROW(load_backbone(c), Error);
}

TEST(Checkpoint, QuantizingTernaryCheckpointIsExact) {
  const BackbonePair p = small_pair(3);
  const ShadowBackbone deq = load_shadow_backbone(backbone_checkpoint(p.model));
  const BackboneModel again = quantize_backbone(deq, QuantConfig{});
  for (std::size_t i = 0; i < deq.layers().size(); ++i) {
    const auto& a = deq.layers()[i];
    const auto& b = again.layers()[i];
    for (auto [f, q] : {std::pair{&a.wq, &b.wq}, {&a.wk, &b.wk}, {&a.wv, &b.wv}, {&a.wo, &b.wo}, {&a.w1, &b.w1},
                        {&a.w2, &b.w2}}) {
      EXPECT_EQ(perturbation_between(f->data(), dequantize(*q).data()).epsilon_q, 0.0);
    }
  }
}

TEST(Checkpoint, SizeRatioAtDefaultShape) {
  RngStream rng(4);
  const BackbonePair p = build_backbone(BackboneConfig{}, rng);
  const double fp = static_cast<double>(checkpoint_size(backbone_checkpoint(p.shadow)));
  const double q = static_cast<double>(checkpoint_size(backbone_checkpoint(p.model)));
  // Embeddings and norms stay fp32, so the ratio sits below the 16x of the weights alone.
  EXPECT_GE(fp / q, 10.0);
  EXPECT_LT(fp / q, 16.0);
}

TEST(Checkpoint, CorruptionIsAFormatError) {
  const auto bytes = serialize_checkpoint(backbone_checkpoint(small_pair(5).model));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_EQ(kind_of(bad), ErrorKind::format);
  bad = bytes;
  bad[4] = 9;  // version
  EXPECT_EQ(kind_of(bad), ErrorKind::format);
  EXPECT_EQ(kind_of({bytes.begin(), bytes.begin() + bytes.size() / 2}), ErrorKind::format);
  bad = bytes;
  bad.push_back(0);
  EXPECT_EQ(kind_of(bad), ErrorKind::format);
  EXPECT_EQ(kind_of({}), ErrorKind::format);
}

TEST(Checkpoint, InvalidTritCodeRejectedOnLoad) {
  Checkpoint c = backbone_checkpoint(small_pair(6).model);
  for (auto& t : c.tensors) {
    if (t.dtype == DType::ternary) {
      t.payload[0] = 0xFF;
      break;
    }
  }
  const Checkpoint back = parse_checkpoint(serialize_checkpoint(c));
  EXPECT_THROW(load_backbone(back), Error);
}

TEST(Checkpoint, PayloadMismatchAndMissingPieces) {
  Checkpoint c;
  c.tensors.push_back({"x", {2, 2}, DType::fp32, 1.0, std::vector<std::uint8_t>(15)});
  EXPECT_THROW(serialize_checkpoint(c), Error);
  Checkpoint empty;
  EXPECT_THROW(empty.at("x"), Error);
  EXPECT_THROW(empty.meta_at("k"), Error);
  EXPECT_THROW(load_backbone(empty), Error);
}

TEST(Checkpoint, HeadsRoundTrip) {
  RngStream rng(7);
  const HeadParams h = make_policy_head(64, 3, rng);
  Checkpoint c;
  put_head(c, "policy", h);
  const HeadParams back = get_head(parse_checkpoint(serialize_checkpoint(c)), "policy");
  EXPECT_EQ(back, h);
  EXPECT_THROW(get_head(c, "value"), Error);
}

TEST(Checkpoint, FileIo) {
  const auto dir = std::filesystem::temp_directory_path() / "bitrl_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "b.btrl").string();
  const Checkpoint c = backbone_checkpoint(small_pair(8).model);
  save_checkpoint(c, path);
  EXPECT_EQ(load_checkpoint(path), c);
  EXPECT_THROW(load_checkpoint((dir / "missing.btrl").string()), Error);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace bitrl
