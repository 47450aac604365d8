#include "mgc/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "mgc/net.hpp"
#include "mgc/ops.hpp"
#include "mgc/protoref.hpp"
#include "mgc/rng.hpp"
#include "mgc/xfuse.hpp"

namespace mgc::gradcheck {

namespace {

constexpr std::size_t kN = 6, kK = 3, kD = 8, kHidden = 5, kTime = 4;

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Half the batch keeps its prediction as the label (TP anchors), the rest is
// relabelled to the next class (FN/FP members), so every loss branch is live.
std::vector<int> mixed_labels(const Tensor& probs) {
  std::vector<int> labels(probs.dim(0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int pred = static_cast<int>(net::argmax(probs.row(i)));
    labels[i] = i % 2 == 0 ? pred : (pred + 1) % static_cast<int>(probs.dim(1));
  }
  return labels;
}

net::ModelConfig small_model() {
  net::ModelConfig c;
  c.num_classes = kK;
  c.t_rgb = 8;
  c.t_pose = 32;
  c.height = c.width = 6;
  for (auto* b : {&c.rgb, &c.pose}) {
    b->stage_channels = {4, 6};
    b->temporal_strides = {2, 2};
    b->spatial_strides = {2, 2};
    b->embed_dim = kD;
  }
  c.rgb.in_channels = 3;
  c.pose.in_channels = 3;
  c.fusion.hidden = kHidden;
  c.fusion.lateral_channels = 2;
  c.norm_groups = 2;
  c.stage = net::Stage::joint;
  return c;
}

std::vector<std::pair<std::string, ag::Var>> leaves_of(const nn::ParamStore& ps) {
  return {ps.entries().begin(), ps.entries().end()};
}

}  // namespace

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

SuiteResult check(const std::string& name, const std::vector<std::pair<std::string, ag::Var>>& leaves,
                  const std::function<ag::Var()>& loss, const Options& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  r.name = name;
  std::vector<ag::Var> vars;
  for (const auto& l : leaves) vars.push_back(l.second);
  ag::zero_grad(vars);
  ag::backward(loss());

  Rng rng(derive_seed(opt.seed, name));
  for (const auto& [leaf_name, v] : leaves) {
    const Tensor analytic = v->has_grad() ? v->grad : Tensor::zeros_like(v->value);
    std::vector<std::size_t> idx(v->value.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > std::max(opt.samples_per_tensor, opt.exhaustive_below)) {
      rng.shuffle(idx);
      idx.resize(opt.samples_per_tensor);
    }
    ag::NoGradGuard no_grad;
    for (auto i : idx) {
      const double orig = v->value[i];
      v->value[i] = orig + opt.eps;
      const double up = loss()->value[0];
      v->value[i] = orig - opt.eps;
      const double down = loss()->value[0];
      v->value[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double e = relative_error(analytic[i], numeric);
      if (e >= r.max_rel_error) {
        r.max_rel_error = e;
        r.worst = leaf_name + "[" + std::to_string(i) + "]";
        r.worst_analytic = analytic[i];
        r.worst_numeric = numeric;
      }
      ++r.entries;
    }
  }
  ag::zero_grad(vars);
  r.passed = std::isfinite(r.max_rel_error) && r.max_rel_error < opt.tolerance;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

SuiteResult cross_entropy_suite(const Options& opt) {
  Rng rng(derive_seed(opt.seed, "ce.data"));
  auto logits = ag::parameter(random_tensor({kN, kK}, rng, -2, 2), "logits");
  std::vector<int> labels(kN);
  for (auto& y : labels) y = static_cast<int>(rng.below(kK));
  return check("cross_entropy", {{"logits", logits}}, [&] { return ops::cross_entropy(logits, labels); }, opt);
}

SuiteResult refinement_suite(const Options& opt) {
  Rng rng(derive_seed(opt.seed, "prm.data"));
  auto feats = ag::parameter(random_tensor({kN, kD}, rng), "F'");
  const Tensor probs = ops::softmax_rows(random_tensor({kN, kK}, rng, -2, 2));
  const auto labels = mixed_labels(probs);
  const auto bank = protoref::random_bank(kK, kD, 0.9, rng.next_u64());
  const auto ctx = protoref::make_context(bank, probs, labels, feats->value, 0.1);
  return check("refinement_loss", {{"F'", feats}}, [&] { return protoref::refinement_loss(feats, ctx); }, opt);
}

SuiteResult fusion_suite(const Options& opt) {
  Rng rng(derive_seed(opt.seed, "fusion.data"));
  nn::ParamStore ps;
  xfuse::FusionConfig cfg;
  cfg.hidden = kHidden;
  cfg.lateral_channels = 3;
  const std::size_t c_rgb = 4, c_pose = 6, ratio = 4;
  const auto p = xfuse::make_params(ps, cfg, c_rgb, c_pose, kTime, ratio, rng);
  auto x_rgb = ag::parameter(random_tensor({2, c_rgb, kTime, 3, 3}, rng), "x_rgb");
  auto x_pose = ag::parameter(random_tensor({2, c_pose, ratio * kTime, 3, 3}, rng), "x_pose");
  // Random linear read-out of both outputs so every element carries weight.
  const auto probe = xfuse::exchange(x_rgb, x_pose, p, cfg);
  const Tensor w_rgb = random_tensor(probe.out_rgb->value.shape(), rng);
  const Tensor w_pose = random_tensor(probe.out_pose->value.shape(), rng);
  auto leaves = leaves_of(ps);
  leaves.emplace_back("x_rgb", x_rgb);
  leaves.emplace_back("x_pose", x_pose);
  return check(
      "fusion", leaves,
      [&] {
        const auto s = xfuse::exchange(x_rgb, x_pose, p, cfg);
        return ops::add(ops::weighted_sum(s.out_rgb, w_rgb), ops::weighted_sum(s.out_pose, w_pose));
      },
      opt);
}

namespace {

struct NetInstance {
  net::Model model;
  Tensor rgb, pose;
};

NetInstance make_instance(const Options& opt, const char* tag) {
  Rng rng(derive_seed(opt.seed, tag));
  net::ModelConfig cfg = small_model();
  cfg.seed = rng.next_u64();
  NetInstance inst{net::Model(cfg), {}, {}};
  inst.rgb = random_tensor({kN, 3, 8, 6, 6}, rng, 0, 1);
  inst.pose = random_tensor({kN, 3, 32, 6, 6}, rng, 0, 1);
  return inst;
}

}  // namespace

SuiteResult network_suite(const Options& opt) {
  auto inst = make_instance(opt, "network.data");
  Rng rng(derive_seed(opt.seed, "network.labels"));
  std::vector<int> labels(kN);
  for (auto& y : labels) y = static_cast<int>(rng.below(kK));
  return check("network_ce", leaves_of(inst.model.params()),
               [&] {
                 const auto out = inst.model.encode(inst.rgb, inst.pose);
                 return ops::add(ops::cross_entropy(out.rgb->logits, labels), ops::cross_entropy(out.pose->logits, labels));
               },
               opt);
}

SuiteResult composite_suite(const Options& opt) {
  auto inst = make_instance(opt, "composite.data");
  const double alpha = 0.5, tau = 0.1;
  Rng rng(derive_seed(opt.seed, "composite.banks"));
  const auto base = [&] {
    ag::NoGradGuard g;
    return inst.model.encode(inst.rgb, inst.pose);
  }();
  const auto labels = mixed_labels(base.rgb->probs);
  // Batch statistics frozen at the base point, as during a training step.
  const auto ctx_rgb = protoref::make_context(protoref::random_bank(kK, kD, 0.9, rng.next_u64()), base.rgb->probs,
                                              labels, base.rgb->embed->value, tau);
  const auto ctx_pose = protoref::make_context(protoref::random_bank(kK, kD, 0.9, rng.next_u64()), base.pose->probs,
                                               labels, base.pose->embed->value, tau);
  return check("composite", leaves_of(inst.model.params()),
               [&] {
                 const auto out = inst.model.encode(inst.rgb, inst.pose);
                 const auto ce =
                     ops::add(ops::cross_entropy(out.rgb->logits, labels), ops::cross_entropy(out.pose->logits, labels));
                 const auto pr = ops::add(protoref::refinement_loss(out.rgb->embed, ctx_rgb),
                                          protoref::refinement_loss(out.pose->embed, ctx_pose));
                 return ops::add(ce, ops::scale(pr, alpha));
               },
               opt);
}

std::vector<SuiteResult> run_all(const Options& opt) {
  return {cross_entropy_suite(opt), refinement_suite(opt), fusion_suite(opt), network_suite(opt), composite_suite(opt)};
}

}  // namespace mgc::gradcheck
