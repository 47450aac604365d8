#include <cmath>

#include "doctest.h"
#include "mgc/net.hpp"
#include "support.hpp"

using namespace mgc;
using namespace mgc::net;

namespace {

// Output extent of a k=3, pad=1 convolution.
std::size_t conv_out(std::size_t n, int stride) { return (n + 2 - 3) / stride + 1; }

struct Inputs {
  Tensor rgb, pose;
};

Inputs random_inputs(const ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t H = cfg.height, W = cfg.width;
  return {test::random_tensor({n, 3, std::size_t(cfg.t_rgb), H, W}, rng, 0, 1),
          test::random_tensor({n, std::size_t(cfg.pose.in_channels), std::size_t(cfg.t_pose), H, W}, rng, 0, 1)};
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.height = cfg.width = 8;
  cfg.t_rgb = 4;
  cfg.t_pose = 16;
  cfg.rgb.stage_channels = cfg.pose.stage_channels = {4, 6};
  cfg.rgb.embed_dim = cfg.pose.embed_dim = 8;
  cfg.fusion.hidden = 5;
  cfg.fusion.lateral_channels = 2;
  return cfg;
}

}  // namespace

TEST_CASE("feature shapes follow the stride calculus") {
  const ModelConfig cfg;
  const auto plan = plan_shapes(cfg);
  std::size_t tr = 8, tp = 32, h = 16, w = 16;
  for (std::size_t s = 0; s < 2; ++s) {
    tr = conv_out(tr, 2), tp = conv_out(tp, 2), h = conv_out(h, 2), w = conv_out(w, 2);
    const std::size_t c = cfg.rgb.stage_channels[s];
    CHECK(plan.rgb_stages[s] == Shape{c, tr, h, w});
    CHECK(plan.pose_stages[s] == Shape{c, tp, h, w});
  }
  CHECK(plan.stride_ratio == 4);

  Model model(cfg);
  const auto in = random_inputs(cfg, 2, 1);
  ag::NoGradGuard ng;
  const auto out = model.encode(in.rgb, in.pose);
  CHECK(out.rgb->feat->value.shape() == Shape{2, 32, 2, 4, 4});
  CHECK(out.pose->feat->value.shape() == Shape{2, 32, 8, 4, 4});
  CHECK(out.rgb->embed->value.shape() == Shape{2, 64});
  CHECK(out.pose->logits->value.shape() == Shape{2, 6});
}

TEST_CASE("zero heads give uniform probabilities") {
  const auto cfg = small_config();
  Model model(cfg);
  for (const char* n : {"rgb.head.weight", "rgb.head.bias", "pose.head.weight", "pose.head.bias"}) {
    model.params().get(n)->value.fill(0.0);
  }
  const auto in = random_inputs(cfg, 3, 2);
  const auto out = model.encode(in.rgb, in.pose);
  for (double p : out.rgb->probs.values()) CHECK(p == doctest::Approx(1.0 / 3).epsilon(1e-15));
  for (double p : out.pose->probs.values()) CHECK(p == doctest::Approx(1.0 / 3).epsilon(1e-15));
}

TEST_CASE("encode is deterministic and probabilities are normalized") {
  const auto cfg = small_config();
  Model a(cfg), b(cfg);
  const auto in = random_inputs(cfg, 4, 3);
  const auto oa = a.encode(in.rgb, in.pose), oa2 = a.encode(in.rgb, in.pose), ob = b.encode(in.rgb, in.pose);
  CHECK(test::bit_equal(oa.rgb->logits->value, oa2.rgb->logits->value));
  CHECK(test::bit_equal(oa.pose->embed->value, ob.pose->embed->value));
  for (const auto* p : {&oa.rgb->probs, &oa.pose->probs}) {
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (double v : p->row(r)) {
        CHECK(v > 0.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
  auto other = cfg;
  other.seed = 1;
  Model c(other);
  CHECK_FALSE(test::bit_equal(c.encode(in.rgb, in.pose).rgb->logits->value, oa.rgb->logits->value));
}

TEST_CASE("single-branch models") {
  auto cfg = small_config();
  cfg.stage = Stage::rgb_only;
  Model m(cfg);
  CHECK_FALSE(m.params().contains("fusion.q_rgb.weight"));
  CHECK_FALSE(m.params().contains("pose.head.weight"));
  CHECK(m.params().get("rgb.stage2.conv.weight")->value.dim(1) == 4);
  const auto in = random_inputs(cfg, 2, 4);
  const auto out = m.encode(in.rgb, Tensor());
  CHECK(out.rgb.has_value());
  CHECK_FALSE(out.pose.has_value());

  Model joint(small_config());
  CHECK(joint.params().get("rgb.stage2.conv.weight")->value.dim(1) == 4 + 2);
}

TEST_CASE("encode validates its inputs") {
  const auto cfg = small_config();
  Model m(cfg);
  auto in = random_inputs(cfg, 2, 5);
  SUBCASE("wrong rgb length") {
    Rng rng(1);
    CHECK_THROWS_AS(m.encode(test::random_tensor({2, 3, 3, 8, 8}, rng), in.pose), ValidationError);
  }
  SUBCASE("batch mismatch") {
    Rng rng(1);
    CHECK_THROWS_AS(m.encode(in.rgb, test::random_tensor({3, 5, 16, 8, 8}, rng)), ValidationError);
  }
  SUBCASE("non-finite input is rejected") {
    in.pose[7] = NAN;
    CHECK_THROWS_AS(m.encode(in.rgb, in.pose), ValidationError);
  }
}

TEST_CASE("invalid model configs") {
  auto cfg = small_config();
  SUBCASE("pose length not a multiple of rgb length") { cfg.t_pose = 10; }
  SUBCASE("branches with different depths") { cfg.pose.stage_channels = {4, 6, 8}; }
  SUBCASE("no classes") { cfg.num_classes = 0; }
  CHECK_THROWS_AS(plan_shapes(cfg), ValidationError);
}

TEST_CASE("fuse_probs") {
  Rng rng(6);
  Tensor p = ops::softmax_rows(test::random_tensor({5, 4}, rng, -3, 3));
  CHECK(test::bit_equal(fuse_probs(p, p), p));
  const auto f = fuse_probs(Tensor({1, 2}, {1.0, 0.0}), Tensor({1, 2}, {0.0, 1.0}));
  CHECK(f[0] == 0.5);
  CHECK(f[1] == 0.5);
  for (std::size_t r = 0; r < 5; ++r) CHECK(argmax(fuse_probs(p, p).row(r)) == argmax(p.row(r)));
  CHECK_THROWS_AS(fuse_probs(p, Tensor({5, 3}, 0.25)), ValidationError);
}

TEST_CASE("argmax and top-1") {
  CHECK(argmax(std::vector<double>{0.2, 0.4, 0.4}) == 1);
  const Tensor p({4, 2}, {0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7});
  CHECK(top1_accuracy(p, std::vector<int>{0, 1, 0, 1}) == 1.0);
  CHECK(top1_accuracy(p, std::vector<int>{0, 1, 1, 0}) == 0.5);
  CHECK_THROWS_AS(top1_accuracy(Tensor({0, 2}), std::vector<int>{}), ValidationError);
}

TEST_CASE("checkpoint round-trip") {
  test::TempDir dir("ckpt");
  auto cfg = small_config();
  cfg.fusion.source = xfuse::AttentionSource::self;
  cfg.seed = 42;
  Model m(cfg);
  auto ck = snapshot(m);
  ck.meta["epoch"] = "3";
  ck.banks["rgb"] = {Tensor({3, 8}, 0.25), 0.9};
  save_checkpoint(ck, dir / "c");
  const auto back = load_checkpoint(dir / "c");
  CHECK(back.meta.at("epoch") == "3");
  CHECK(back.config.fusion.source == xfuse::AttentionSource::self);
  CHECK(back.config.seed == 42);
  CHECK(back.config.rgb.stage_channels == cfg.rgb.stage_channels);
  CHECK(back.banks.at("rgb").rho == 0.9);
  REQUIRE(back.params.size() == ck.params.size());
  for (const auto& [name, t] : ck.params) {
    // parameters pass through f32 on disk
    const auto& b = back.params.at(name);
    REQUIRE(b.shape() == t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) CHECK(b[i] == static_cast<double>(static_cast<float>(t[i])));
  }

  Model fresh(back.config);
  load_params(fresh, back);
  const auto in = random_inputs(cfg, 2, 7);
  const auto o1 = fresh.encode(in.rgb, in.pose);
  Model again(back.config);
  load_params(again, load_checkpoint(dir / "c"));
  CHECK(test::bit_equal(again.encode(in.rgb, in.pose).rgb->probs, o1.rgb->probs));

  auto bigger = cfg;
  bigger.rgb.embed_dim = 9;
  Model mismatch(bigger);
  CHECK_THROWS_AS(load_params(mismatch, back), ValidationError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), IoError);
}

TEST_CASE("stage names") {
  CHECK(parse_stage("joint") == Stage::joint);
  CHECK(parse_stage("rgb") == Stage::rgb_only);
  CHECK(parse_stage("pose") == Stage::pose_only);
  CHECK_THROWS_AS(parse_stage("fused"), ValidationError);
}
