#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "mgc/synthgen.hpp"
#include "mgc/trainer.hpp"
#include "support.hpp"

using namespace mgc;
using namespace mgc::trainer;
using tensorio::PredictionFile;
using tensorio::Split;

namespace {

synthgen::GenConfig tiny_gen() {
  synthgen::GenConfig g;
  g.num_classes = 3;
  g.train_per_class = 3;
  g.val_per_class = 2;
  g.test_per_class = 2;
  g.t_rgb = 4;
  g.t_pose = 16;
  g.height = g.width = 8;
  return g;
}

net::ModelConfig tiny_model() {
  net::ModelConfig m;
  m.rgb.stage_channels = m.pose.stage_channels = {4, 6};
  m.rgb.embed_dim = m.pose.embed_dim = 8;
  m.fusion.hidden = 5;
  m.fusion.lateral_channels = 2;
  return m;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 4;
  c.lr = 0.01;
  c.lr_drop_epochs = {1};
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

PredictionFile pred(std::vector<std::string> ids, std::vector<std::uint32_t> shape, std::vector<float> data) {
  return {std::move(ids), {std::move(shape), std::move(data)}};
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  const TrainConfig cfg;
  CHECK(lr_at(0, cfg) == 0.0075);
  CHECK(lr_at(7, cfg) == 0.0075);
  CHECK(lr_at(8, cfg) == doctest::Approx(0.00075).epsilon(1e-14));
  CHECK(lr_at(21, cfg) == doctest::Approx(0.00075).epsilon(1e-14));
  CHECK(lr_at(22, cfg) == doctest::Approx(0.000075).epsilon(1e-14));
  CHECK(lr_at(29, cfg) == doctest::Approx(0.000075).epsilon(1e-14));
  CHECK_THROWS_AS(lr_at(30, cfg), ValidationError);
  auto flat = cfg;
  flat.lr_drop_factor = 1.0;
  for (int e = 0; e < 30; ++e) CHECK(lr_at(e, flat) == 0.0075);
}

TEST_CASE("weight decay alone shrinks by lr * wd * w") {
  auto p = ag::parameter(Tensor({3}, {2.0, -0.5, 1e3}));
  const Tensor before = p->value;
  Sgd opt({p}, 0.9, 1e-4);
  opt.zero_grad();
  opt.step(0.1);
  for (std::size_t i = 0; i < 3; ++i) CHECK(test::bit_equal(p->value[i], before[i] - 0.1 * (1e-4 * before[i])));
}

TEST_CASE("momentum follows the closed form on a quadratic") {
  // f(w) = a/2 w^2, gradient a*w
  const double a = 3.0, lr = 0.05, mu = 0.9, wd = 0.01, w0 = 1.5;
  auto p = ag::parameter(Tensor({1}, {w0}));
  Sgd opt({p}, mu, wd);
  for (int step = 0; step < 2; ++step) {
    opt.zero_grad();
    p->grad_buffer()[0] = a * p->value[0];
    opt.step(lr);
  }
  const double g0 = (a + wd) * w0, v1 = g0, w1 = w0 - lr * v1;
  const double g1 = (a + wd) * w1, v2 = mu * v1 + g1, w2 = w1 - lr * v2;
  CHECK(std::abs(p->value[0] - w2) <= 1e-12);
}

TEST_CASE("config validation") {
  auto c = tiny_train();
  SUBCASE("negative alpha") { c.alpha = -0.1; }
  SUBCASE("non-positive tau") { c.tau = 0; }
  SUBCASE("rho outside [0,1]") { c.rho = 1.5; }
  SUBCASE("zero batch") { c.batch_size = 0; }
  CHECK_THROWS_AS(validate(c), ValidationError);
  CHECK(parse_prm_branch("pose") == PrmBranch::pose);
  CHECK_THROWS_AS(parse_prm_branch("none"), ValidationError);
}

TEST_CASE("ensemble") {
  const auto p = pred({"a", "b"}, {2, 2}, {0.25f, 0.75f, 0.6f, 0.4f});
  SUBCASE("one file is the identity") {
    const double w[] = {1.0};
    const auto e = ensemble({p}, w);
    CHECK(e.clip_ids == p.clip_ids);
    CHECK(e.probs.data == p.probs.data);
  }
  SUBCASE("identical files with any weights") {
    const double w[] = {0.3, 2.0};
    CHECK(ensemble({p, p}, w).probs.data == p.probs.data);
  }
  SUBCASE("opposite one-hot rows average") {
    const double w[] = {1.0, 1.0};
    const auto e = ensemble({pred({"x"}, {1, 2}, {1, 0}), pred({"x"}, {1, 2}, {0, 1})}, w);
    CHECK(e.probs.data == std::vector<float>{0.5f, 0.5f});
  }
  SUBCASE("clip order follows the first file") {
    const double w[] = {1.0, 1.0};
    const auto e = ensemble({p, pred({"b", "a"}, {2, 2}, {0.6f, 0.4f, 0.25f, 0.75f})}, w);
    CHECK(e.clip_ids == p.clip_ids);
    CHECK(e.probs.data == p.probs.data);
  }
  SUBCASE("errors") {
    const double w1[] = {1.0}, w2[] = {1.0, 1.0}, wneg[] = {1.0, -1.0};
    CHECK_THROWS_AS(ensemble({p, pred({"a", "c"}, {2, 2}, {1, 0, 0, 1})}, w2), ValidationError);
    CHECK_THROWS_AS(ensemble({p, p}, w1), ValidationError);
    CHECK_THROWS_AS(ensemble({p, p}, wneg), ValidationError);
    CHECK_THROWS_AS(ensemble({}, std::span<const double>{}), ValidationError);
  }
}

TEST_CASE("training on a tiny generated dataset") {
  test::TempDir dir("train");
  const auto manifest = synthgen::generate(tiny_gen(), dir / "data");

  SUBCASE("evaluation bookkeeping") {
    const auto data = load_split(manifest, Split::test);
    CHECK(data.rgb.shape() == Shape{6, 3, 4, 8, 8});
    CHECK(data.pose.shape() == Shape{6, 5, 16, 8, 8});
    net::Model model(fit_model_config(tiny_model(), data));
    const auto r = evaluate(model, data, 4);
    for (std::size_t k = 0; k < 3; ++k) {
      std::size_t s = 0;
      for (auto v : r.confusion[k]) s += v;
      CHECK(s == 2);
    }
    REQUIRE(r.predictions.num_rows() == 6);
    CHECK(r.predictions.clip_ids == data.clip_ids);
    for (std::size_t i = 0; i < 6; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) s += r.predictions.probs.data[i * 3 + k];
      CHECK(std::abs(s - 1.0) <= tensorio::kProbRowTolerance);
    }
    CHECK(r.top1.rgb.has_value());
    CHECK(r.top1.pose.has_value());
  }

  SUBCASE("runs are reproducible and write their artifacts") {
    const auto a = train(manifest, tiny_train(), tiny_model(), {}, dir / "a");
    const auto b = train(manifest, tiny_train(), tiny_model(), {}, dir / "b");
    CHECK(a.epochs.size() == 2);
    CHECK(a.epochs[1].lr == doctest::Approx(0.001));
    CHECK(slurp(dir / "a" / "run_record.tsv") == slurp(dir / "b" / "run_record.tsv"));
    CHECK(slurp(dir / "a" / "prototype_drift.tsv") == slurp(dir / "b" / "prototype_drift.tsv"));
    for (const char* f : {"summary.md", "predictions_test.pred", "confusion_test.tsv", "checkpoints/best/index.txt",
                          "checkpoints/last/index.txt"}) {
      CHECK_MESSAGE(std::filesystem::exists(dir / "a" / f), f);
    }
    for (std::size_t e = 0; e < 2; ++e) {
      CHECK(test::bit_equal(a.epochs[e].l_total, b.epochs[e].l_total));
      CHECK(a.epochs[e].l_pr > 0.0);
    }
    const auto ck = net::load_checkpoint(a.best_checkpoint);
    CHECK(ck.banks.count("rgb") == 1);
    CHECK(ck.banks.count("pose") == 1);
    CHECK(std::stoi(ck.meta.at("epoch")) == a.best_epoch);

    const auto ev = evaluate(manifest, ck, Split::test);
    REQUIRE(a.test.has_value());
    CHECK(ev.top1.fused == a.test->fused);
  }

  SUBCASE("alpha = 0 matches a run without the refinement module") {
    auto zero = tiny_train();
    zero.alpha = 0.0;
    auto off = zero;
    off.prm = false;
    const auto a = train(manifest, zero, tiny_model(), {}, dir / "zero");
    const auto b = train(manifest, off, tiny_model(), {}, dir / "off");
    for (std::size_t e = 0; e < 2; ++e) {
      CHECK(test::bit_equal(a.epochs[e].l_ce, b.epochs[e].l_ce));
      CHECK(test::bit_equal(a.epochs[e].l_total, b.epochs[e].l_total));
      CHECK(b.epochs[e].l_pr == 0.0);
    }
    const auto ca = net::load_checkpoint(a.final_checkpoint), cb = net::load_checkpoint(b.final_checkpoint);
    REQUIRE(ca.params.size() == cb.params.size());
    for (const auto& [name, t] : ca.params) CHECK_MESSAGE(test::bit_equal(t, cb.params.at(name)), name);
    CHECK(cb.banks.empty());
  }

  SUBCASE("single-branch checkpoints seed a joint run") {
    auto rgb = tiny_train();
    rgb.stage = net::Stage::rgb_only;
    const auto r = train(manifest, rgb, tiny_model(), {}, dir / "rgb");
    CHECK_FALSE(r.epochs[0].val.pose.has_value());
    const auto ck = net::load_checkpoint(r.best_checkpoint);
    CHECK(ck.config.stage == net::Stage::rgb_only);
    CHECK(ck.banks.empty());  // refinement stays off while pretraining by default

    const auto data = load_split(manifest, Split::train);
    auto mc = fit_model_config(tiny_model(), data);
    net::Model joint(mc);
    transplant(joint, ck);
    const auto& w = joint.params().get("rgb.stage2.conv.weight")->value;  // (6, 2+4, 3,3,3)
    const auto& src = ck.params.at("rgb.stage2.conv.weight");              // (6, 4, 3,3,3)
    for (std::size_t o = 0; o < 6; ++o)
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t t = 0; t < 27; ++t) {
          const double got = w[(o * 6 + i) * 27 + t];
          CHECK(got == (i < 2 ? 0.0 : src[(o * 4 + (i - 2)) * 27 + t]));
        }
    CHECK(test::bit_equal(joint.params().get("rgb.head.weight")->value, ck.params.at("rgb.head.weight")));

    TrainInit init;
    init.rgb = ck;
    auto joint_cfg = tiny_train();
    joint_cfg.epochs = 1;
    joint_cfg.lr_drop_epochs = {};
    const auto jr = train(manifest, joint_cfg, tiny_model(), init, dir / "joint");
    CHECK(jr.epochs.size() == 1);
  }

  SUBCASE("resume restores parameters and banks") {
    const auto a = train(manifest, tiny_train(), tiny_model(), {}, dir / "first");
    TrainInit init;
    init.resume = net::load_checkpoint(a.final_checkpoint);
    auto cfg = tiny_train();
    cfg.epochs = 1;
    cfg.lr_drop_epochs = {};
    cfg.lr = 1e-12;
    const auto b = train(manifest, cfg, tiny_model(), init, dir / "resumed");
    CHECK(b.initial_val.fused == evaluate(manifest, *init.resume, Split::val).top1.fused);
    CHECK(net::load_checkpoint(b.final_checkpoint).banks.count("rgb") == 1);
  }
}

TEST_CASE("confusion file layout") {
  test::TempDir dir("conf");
  write_confusion(dir / "c.tsv", {{2, 0}, {1, 3}});
  const auto text = slurp(dir / "c.tsv");
  CHECK(text.find("2\t0") != std::string::npos);
  CHECK(text.find("1\t3") != std::string::npos);
}

TEST_CASE("comparison table") {
  std::vector<VariantResult> r;
  for (const auto& v : mechanism_variants()) r.push_back({v, {0.5, 0.75, 1.0}});
  REQUIRE(r.size() == 3);
  CHECK(r[0].variant.alpha == 0.0);
  CHECK(r[2].variant.source == xfuse::AttentionSource::cross);
  CHECK(r[0].mean() == doctest::Approx(0.75));
  CHECK(r[0].stddev() == doctest::Approx(0.25));
  const auto table = comparison_table(r);
  CHECK(table.find("75.00") != std::string::npos);
  CHECK(table.find(r[2].variant.name) != std::string::npos);
}
