#include "mgc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "mgc/errors.hpp"

namespace mgc::trainer {

namespace fs = std::filesystem;
using tensorio::Split;

const char* to_string(PrmBranch b) {
  switch (b) {
    case PrmBranch::rgb: return "rgb";
    case PrmBranch::pose: return "pose";
    case PrmBranch::both: return "both";
  }
  return "?";
}

PrmBranch parse_prm_branch(const std::string& s) {
  if (s == "rgb") return PrmBranch::rgb;
  if (s == "pose") return PrmBranch::pose;
  if (s == "both") return PrmBranch::both;
  throw ValidationError("prm branch must be rgb, pose or both (got '" + s + "')");
}

bool TrainConfig::prm_on(const std::string& branch) const {
  if (!prm_active()) return false;
  if (prm_branch == PrmBranch::both) return true;
  return branch == to_string(prm_branch);
}

void validate(const TrainConfig& cfg) {
  if (cfg.epochs <= 0) throw ValidationError("epochs must be positive");
  if (cfg.batch_size <= 0) throw ValidationError("batch size must be positive");
  if (!(cfg.lr > 0.0)) throw ValidationError("learning rate must be positive");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ValidationError("momentum must lie in [0, 1)");
  if (!(cfg.weight_decay >= 0.0)) throw ValidationError("weight decay must be non-negative");
  if (!(cfg.lr_drop_factor > 0.0)) throw ValidationError("lr drop factor must be positive");
  for (std::size_t i = 0; i < cfg.lr_drop_epochs.size(); ++i) {
    const int e = cfg.lr_drop_epochs[i];
    if (e < 0 || e >= cfg.epochs) throw ValidationError("lr drop epoch " + std::to_string(e) + " outside [0, epochs)");
    if (i > 0 && e <= cfg.lr_drop_epochs[i - 1]) throw ValidationError("lr drop epochs must be strictly increasing");
  }
  if (!(cfg.alpha >= 0.0) || !std::isfinite(cfg.alpha)) throw ValidationError("alpha must be finite and >= 0");
  if (!(cfg.tau > 0.0)) throw ValidationError("tau must be positive");
  if (!(cfg.rho >= 0.0 && cfg.rho <= 1.0)) throw ValidationError("rho must lie in [0, 1]");
}

double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs) throw ValidationError("epoch " + std::to_string(epoch) + " out of range");
  double lr = cfg.lr;
  for (int e : cfg.lr_drop_epochs)
    if (e <= epoch) lr *= cfg.lr_drop_factor;
  return lr;
}

// ------------------------------------------------------------------- SGD

Sgd::Sgd(std::vector<ag::Var> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.push_back(Tensor::zeros_like(p->value));
}

void Sgd::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& w = params_[i]->value;
    auto& v = velocity_[i];
    const bool has = params_[i]->has_grad();
    for (std::size_t j = 0; j < w.numel(); ++j) {
      const double g = (has ? params_[i]->grad[j] : 0.0) + weight_decay_ * w[j];
      v[j] = momentum_ * v[j] + g;
      w[j] -= lr * v[j];
    }
  }
}

void Sgd::zero_grad() { ag::zero_grad(params_); }

// ------------------------------------------------------------------ data

namespace {

// (T, C, H, W) on disk -> slot n of (N, C, T, H, W)
void place_channel_first(const Tensor& clip, Tensor& dst, std::size_t n) {
  const std::size_t T = clip.dim(0), C = clip.dim(1), HW = clip.dim(2) * clip.dim(3);
  double* out = dst.data() + n * T * C * HW;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c)
      std::copy_n(clip.data() + (t * C + c) * HW, HW, out + (c * T + t) * HW);
}

}  // namespace

Dataset load_split(const tensorio::DatasetManifest& m, Split split) {
  Dataset d;
  d.num_classes = m.num_classes;
  const auto entries = m.split_entries(split);
  Shape rgb_shape, pose_shape;
  for (std::size_t n = 0; n < entries.size(); ++n) {
    const auto& e = *entries[n];
    const Tensor rgb = tensorio::from_blob(tensorio::read_tensor(m.resolve(e.rgb_path)));
    const Tensor pose = tensorio::from_blob(tensorio::read_tensor(m.resolve(e.pose_path)));
    if (rgb.rank() != 4 || pose.rank() != 4) throw ValidationError("clip " + e.clip_id + ": clips must be (T, C, H, W)");
    if (n == 0) {
      rgb_shape = rgb.shape();
      pose_shape = pose.shape();
      d.rgb = Tensor({entries.size(), rgb_shape[1], rgb_shape[0], rgb_shape[2], rgb_shape[3]});
      d.pose = Tensor({entries.size(), pose_shape[1], pose_shape[0], pose_shape[2], pose_shape[3]});
    }
    require_shape(rgb, rgb_shape, "rgb clip " + e.clip_id);
    require_shape(pose, pose_shape, "pose clip " + e.clip_id);
    place_channel_first(rgb, d.rgb, n);
    place_channel_first(pose, d.pose, n);
    d.clip_ids.push_back(e.clip_id);
    d.labels.push_back(e.label);
  }
  return d;
}

Tensor gather(const Tensor& all, std::span<const std::size_t> idx) {
  if (all.rank() == 0) return {};
  Shape s = all.shape();
  const std::size_t stride = all.numel() / s[0];
  s[0] = idx.size();
  Tensor out(s);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= all.dim(0)) throw ValidationError("gather: index out of range");
    std::copy_n(all.data() + idx[i] * stride, stride, out.data() + i * stride);
  }
  return out;
}

net::ModelConfig fit_model_config(net::ModelConfig cfg, const Dataset& d) {
  if (d.size() == 0) throw ValidationError("cannot size a model from an empty split");
  cfg.num_classes = d.num_classes;
  cfg.rgb.in_channels = static_cast<int>(d.rgb.dim(1));
  cfg.t_rgb = static_cast<int>(d.rgb.dim(2));
  cfg.height = static_cast<int>(d.rgb.dim(3));
  cfg.width = static_cast<int>(d.rgb.dim(4));
  cfg.pose.in_channels = static_cast<int>(d.pose.dim(1));
  cfg.t_pose = static_cast<int>(d.pose.dim(2));
  if (d.pose.dim(3) != d.rgb.dim(3) || d.pose.dim(4) != d.rgb.dim(4)) {
    throw ValidationError("rgb and pose clips differ in spatial size");
  }
  return cfg;
}

// ------------------------------------------------------------- transplant

void transplant(net::Model& joint, const net::Checkpoint& branch) {
  if (joint.config().stage != net::Stage::joint) throw ValidationError("transplant target must be a joint model");
  if (branch.config.stage == net::Stage::joint) throw ValidationError("transplant source must be a single-branch checkpoint");
  const int lateral = joint.config().fusion.lateral_channels;
  for (const auto& [name, t] : branch.params) {
    if (!joint.params().contains(name)) throw ValidationError("joint model has no parameter " + name);
    Tensor& dst = joint.params().get(name)->value;
    if (dst.shape() == t.shape()) {
      dst = t;
      continue;
    }
    // Second-stage conv: input channels are [lateral | own].
    const Shape& ds = dst.shape();
    if (ds.size() != 5 || t.rank() != 5 || ds[0] != t.dim(0) || ds[1] != t.dim(1) + lateral ||
        !std::equal(ds.begin() + 2, ds.end(), t.shape().begin() + 2)) {
      throw ValidationError("cannot transplant " + name + ": " + shape_str(t.shape()) + " into " + shape_str(ds));
    }
    dst.fill(0.0);
    const std::size_t k = ds[2] * ds[3] * ds[4];
    for (std::size_t o = 0; o < ds[0]; ++o)
      for (std::size_t c = 0; c < t.dim(1); ++c)
        std::copy_n(t.data() + (o * t.dim(1) + c) * k, k, dst.data() + (o * ds[1] + c + lateral) * k);
  }
}

// -------------------------------------------------------------- evaluation

namespace {

std::size_t count_hits(const Tensor& probs, std::span<const int> labels) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += net::argmax(probs.row(i)) == static_cast<std::size_t>(labels[i]);
  return hits;
}

void append_rows(Tensor& dst, const Tensor& src, std::size_t offset) {
  std::copy_n(src.data(), src.numel(), dst.data() + offset * src.dim(1));
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : "-"; }

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

}  // namespace

EvalResult evaluate(const net::Model& model, const Dataset& data, int batch_size) {
  if (data.size() == 0) throw ValidationError("evaluation split is empty");
  ag::NoGradGuard no_grad;
  const auto& cfg = model.config();
  const std::size_t n = data.size(), k = static_cast<std::size_t>(cfg.num_classes);
  Tensor p_rgb({n, k}), p_pose({n, k});
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> idx(std::min<std::size_t>(batch_size, n - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto out = model.encode(cfg.has_rgb() ? gather(data.rgb, idx) : Tensor(),
                                  cfg.has_pose() ? gather(data.pose, idx) : Tensor());
    if (out.rgb) append_rows(p_rgb, out.rgb->probs, start);
    if (out.pose) append_rows(p_pose, out.pose->probs, start);
  }
  EvalResult r;
  const double denom = static_cast<double>(n);
  Tensor fused;
  if (cfg.has_rgb()) r.top1.rgb = count_hits(p_rgb, data.labels) / denom;
  if (cfg.has_pose()) r.top1.pose = count_hits(p_pose, data.labels) / denom;
  if (cfg.has_rgb() && cfg.has_pose()) {
    fused = net::fuse_probs(p_rgb, p_pose);
  } else {
    fused = cfg.has_rgb() ? p_rgb : p_pose;
  }
  r.top1.fused = count_hits(fused, data.labels) / denom;
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  for (std::size_t i = 0; i < n; ++i) ++r.confusion.at(data.labels[i]).at(net::argmax(fused.row(i)));
  r.predictions.clip_ids = data.clip_ids;
  r.predictions.probs = tensorio::to_blob(fused);
  return r;
}

EvalResult evaluate(const tensorio::DatasetManifest& manifest, const net::Checkpoint& ckpt, Split split) {
  const Dataset data = load_split(manifest, split);
  if (data.size() == 0) throw ValidationError(std::string("split '") + tensorio::to_string(split) + "' is empty");
  if (data.num_classes != ckpt.config.num_classes) throw ValidationError("checkpoint and dataset disagree on K");
  net::Model model(ckpt.config);
  net::load_params(model, ckpt);
  return evaluate(model, data);
}

void write_confusion(const fs::path& path, const std::vector<std::vector<std::size_t>>& confusion) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "label\\pred";
  for (std::size_t j = 0; j < confusion.size(); ++j) out << '\t' << j;
  out << '\n';
  for (std::size_t i = 0; i < confusion.size(); ++i) {
    out << i;
    for (auto c : confusion[i]) out << '\t' << c;
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

tensorio::PredictionFile ensemble(const std::vector<tensorio::PredictionFile>& files, std::span<const double> weights) {
  if (files.empty()) throw ValidationError("ensemble needs at least one prediction file");
  if (weights.size() != files.size()) throw ValidationError("ensemble needs one weight per file");
  double wsum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("ensemble weights must be finite and >= 0");
    wsum += w;
  }
  if (!(wsum > 0.0)) throw ValidationError("ensemble weights must not all be zero");
  for (const auto& f : files) tensorio::validate(f);
  const auto& first = files.front();
  const std::size_t n = first.num_rows(), k = first.num_classes();
  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < n; ++i)
    if (!row_of.emplace(first.clip_ids[i], i).second) throw ValidationError("duplicate clip id " + first.clip_ids[i]);
  Tensor out({n, k});
  for (std::size_t f = 0; f < files.size(); ++f) {
    const auto& file = files[f];
    if (file.num_rows() != n) throw ValidationError("ensemble inputs list different clips");
    if (file.num_classes() != k) throw ValidationError("ensemble inputs disagree on the class count");
    std::vector<bool> seen(n, false);
    for (std::size_t i = 0; i < n; ++i) {
      const auto it = row_of.find(file.clip_ids[i]);
      if (it == row_of.end() || seen[it->second]) {
        throw ValidationError("ensemble inputs list different clips (" + file.clip_ids[i] + ")");
      }
      seen[it->second] = true;
      const std::size_t r = it->second;
      for (std::size_t j = 0; j < k; ++j) out[r * k + j] += weights[f] * static_cast<double>(file.probs.data[i * k + j]);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto r = out.row(i);
    for (auto& v : r) v /= wsum;
    const double s = std::accumulate(r.begin(), r.end(), 0.0);
    // Rows already normalised to f32 precision are left alone so that
    // averaging identical inputs reproduces them exactly.
    if (std::abs(s - 1.0) > 1e-6)
      for (auto& v : r) v /= s;
  }
  tensorio::PredictionFile p;
  p.clip_ids = first.clip_ids;
  p.probs = tensorio::to_blob(out);
  tensorio::validate(p);
  return p;
}

// ---------------------------------------------------------------- records

void write_run_record(const fs::path& path, const RunRecord& rec) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch\tlr\tl_ce\tl_pr\tl_total\ttrain_rgb\ttrain_pose\ttrain_fused\tval_rgb\tval_pose\tval_fused\n";
  for (const auto& e : rec.epochs) {
    out << e.epoch << '\t' << fmt(e.lr) << '\t' << fmt(e.l_ce) << '\t' << fmt(e.l_pr) << '\t' << fmt(e.l_total) << '\t'
        << fmt_opt(e.train.rgb) << '\t' << fmt_opt(e.train.pose) << '\t' << fmt(e.train.fused) << '\t'
        << fmt_opt(e.val.rgb) << '\t' << fmt_opt(e.val.pose) << '\t' << fmt(e.val.fused) << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

namespace {

struct BranchRef {
  std::string name;
  const net::BranchOutput* out;
};

std::vector<BranchRef> branches(const net::EncodeOutput& o) {
  std::vector<BranchRef> b;
  if (o.rgb) b.push_back({"rgb", &*o.rgb});
  if (o.pose) b.push_back({"pose", &*o.pose});
  return b;
}

void dump_batch(const fs::path& path, int epoch, std::size_t batch, const Dataset& data,
                const std::vector<std::size_t>& idx, const std::string& reason) {
  std::ofstream out(path, std::ios::trunc);
  out << "# non-finite value during training\n";
  out << "reason\t" << reason << "\nepoch\t" << epoch << "\nbatch\t" << batch << "\n";
  out << "clip_id\tlabel\trgb_finite\tpose_finite\n";
  for (auto i : idx) {
    const std::vector<std::size_t> one{i};
    out << data.clip_ids[i] << '\t' << data.labels[i] << '\t' << gather(data.rgb, one).all_finite() << '\t'
        << gather(data.pose, one).all_finite() << '\n';
  }
}

void write_summary(const fs::path& path, const TrainConfig& cfg, const net::ModelConfig& mc, const RunRecord& rec) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# Training summary\n\n";
  out << "| setting | value |\n|---|---|\n";
  out << "| stage | " << net::to_string(cfg.stage) << " |\n";
  out << "| epochs | " << cfg.epochs << " |\n| batch size | " << cfg.batch_size << " |\n";
  out << "| lr | " << cfg.lr << " |\n| momentum | " << cfg.momentum << " |\n| weight decay | " << cfg.weight_decay << " |\n";
  out << "| alpha | " << cfg.alpha << " |\n| tau | " << cfg.tau << " |\n| rho | " << cfg.rho << " |\n";
  out << "| refinement | " << (cfg.prm_active() ? to_string(cfg.prm_branch) : "off") << " |\n";
  out << "| attention | " << xfuse::to_string(mc.fusion.source) << " |\n";
  out << "| seed | " << cfg.seed << " |\n\n";
  out << "Best epoch: " << rec.best_epoch << " (val fused top-1 " << pct(rec.epochs.at(rec.best_epoch).val.fused)
      << "%)\n\n";
  const auto& last = rec.epochs.back();
  out << "| split | rgb | pose | fused |\n|---|---|---|---|\n";
  auto row = [&](const char* name, const Top1& t) {
    out << "| " << name << " | " << (t.rgb ? pct(*t.rgb) : "-") << " | " << (t.pose ? pct(*t.pose) : "-") << " | "
        << pct(t.fused) << " |\n";
  };
  row("train (last epoch)", last.train);
  row("val (last epoch)", last.val);
  if (rec.test) row("test (best checkpoint)", *rec.test);
  out << "\nTop-1 accuracy in percent.\n";
}

}  // namespace

RunRecord train(const tensorio::DatasetManifest& manifest, const TrainConfig& cfg, const net::ModelConfig& model_base,
                const TrainInit& init, const fs::path& out_dir) {
  validate(cfg);
  const Dataset tr = load_split(manifest, Split::train);
  const Dataset va = load_split(manifest, Split::val);
  if (tr.size() == 0) throw ValidationError("training split is empty");
  if (va.size() == 0) throw ValidationError("validation split is empty");

  net::ModelConfig mc = fit_model_config(model_base, tr);
  mc.stage = cfg.stage;
  mc.seed = derive_seed(cfg.seed, "model");
  net::Model model(mc);

  if (init.resume) {
    net::load_params(model, *init.resume);
  }
  for (const auto* src : {&init.rgb, &init.pose}) {
    if (!*src) continue;
    if (cfg.stage == net::Stage::joint) {
      transplant(model, **src);
    } else {
      net::load_params(model, **src);
    }
  }

  std::map<std::string, protoref::PrototypeBank> banks;
  for (const char* b : {"rgb", "pose"}) {
    const bool present = std::string(b) == "rgb" ? mc.has_rgb() : mc.has_pose();
    if (!present || !cfg.prm_on(b)) continue;
    const auto& bc = std::string(b) == "rgb" ? mc.rgb : mc.pose;
    banks[b] = protoref::random_bank(mc.num_classes, bc.embed_dim, cfg.rho, derive_seed(cfg.seed, std::string("bank.") + b));
    if (init.resume && init.resume->banks.count(b)) {
      banks[b].prototypes = init.resume->banks.at(b).prototypes;
      protoref::validate(banks[b]);
    }
  }
  const auto initial_banks = banks;

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir.string());
  std::ofstream drift(out_dir / "prototype_drift.tsv", std::ios::trunc);
  if (!drift) throw IoError("cannot write prototype_drift.tsv");
  drift << "epoch\tbranch\tclass\tcosine_to_initial\n";

  auto checkpoint = [&](int epoch, double val_fused) {
    net::Checkpoint c = net::snapshot(model);
    for (const auto& [b, bank] : banks) c.banks[b] = {bank.prototypes, bank.rho};
    c.meta["epoch"] = std::to_string(epoch);
    c.meta["val_fused_top1"] = fmt(val_fused);
    c.meta["train_seed"] = std::to_string(cfg.seed);
    return c;
  };

  Sgd opt(model.params().vars(), cfg.momentum, cfg.weight_decay);
  Rng order_rng(derive_seed(cfg.seed, "batch-order"));
  RunRecord rec;
  rec.initial_val = evaluate(model, va, cfg.batch_size).top1;
  double best_val = -1.0;
  const std::size_t n = tr.size();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord er;
    er.epoch = epoch;
    er.lr = lr_at(epoch, cfg);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order);

    std::size_t hits_rgb = 0, hits_pose = 0, hits_fused = 0;
    for (std::size_t start = 0, batch = 0; start < n; start += cfg.batch_size, ++batch) {
      const std::vector<std::size_t> idx(order.begin() + start, order.begin() + std::min(n, start + cfg.batch_size));
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(tr.labels[i]);
      try {
        const auto out = model.encode(mc.has_rgb() ? gather(tr.rgb, idx) : Tensor(),
                                      mc.has_pose() ? gather(tr.pose, idx) : Tensor());
        ag::Var ce, lpr;
        double lpr_value = 0.0;
        std::map<std::string, protoref::RefinementContext> contexts;
        for (const auto& b : branches(out)) {
          const ag::Var l = ops::cross_entropy(b.out->logits, labels);
          ce = ce ? ops::add(ce, l) : l;
          if (!banks.count(b.name)) continue;
          auto ctx = protoref::make_context(banks.at(b.name), b.out->probs, labels, b.out->embed->value, cfg.tau);
          if (cfg.alpha > 0.0) {
            const ag::Var l_pr = protoref::refinement_loss(b.out->embed, ctx);
            lpr_value += l_pr->value[0];
            lpr = lpr ? ops::add(lpr, l_pr) : l_pr;
          } else {
            lpr_value += protoref::proto_loss(ctx, b.out->embed->value).value;
          }
          contexts.emplace(b.name, std::move(ctx));
        }
        const ag::Var total = lpr ? ops::add(ce, ops::scale(lpr, cfg.alpha)) : ce;
        if (!std::isfinite(total->value[0]) || !std::isfinite(lpr_value)) throw NumericalError("training loss is not finite");
        const auto report = protoref::total_loss(ce->value[0], lpr_value, cfg.alpha);

        ag::backward(total);
        opt.step(er.lr);
        opt.zero_grad();
        for (const auto& b : branches(out)) {
          if (contexts.count(b.name)) {
            banks[b.name] = protoref::update_prototypes(banks[b.name], contexts.at(b.name).part, b.out->embed->value);
          }
        }

        const double bs = static_cast<double>(idx.size());
        er.l_ce += report.l_ce * bs;
        er.l_pr += report.l_pr * bs;
        er.l_total += report.l_total * bs;
        if (out.rgb) hits_rgb += count_hits(out.rgb->probs, labels);
        if (out.pose) hits_pose += count_hits(out.pose->probs, labels);
        hits_fused += count_hits(out.rgb && out.pose ? net::fuse_probs(out.rgb->probs, out.pose->probs)
                                                     : (out.rgb ? out.rgb->probs : out.pose->probs),
                                 labels);
      } catch (const NumericalError& e) {
        dump_batch(out_dir / "nonfinite_batch.txt", epoch, batch, tr, idx, e.what());
        throw NumericalError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch) + "; see nonfinite_batch.txt)");
      }
    }
    const double dn = static_cast<double>(n);
    er.l_ce /= dn;
    er.l_pr /= dn;
    er.l_total /= dn;
    if (mc.has_rgb()) er.train.rgb = hits_rgb / dn;
    if (mc.has_pose()) er.train.pose = hits_pose / dn;
    er.train.fused = hits_fused / dn;
    er.val = evaluate(model, va, cfg.batch_size).top1;
    rec.epochs.push_back(er);

    for (const auto& [b, bank] : banks) {
      for (std::size_t k = 0; k < bank.num_classes(); ++k) {
        drift << epoch << '\t' << b << '\t' << k << '\t'
              << fmt(protoref::cosine_sim(bank.prototypes.row(k), initial_banks.at(b).prototypes.row(k))) << '\n';
      }
    }
    if (er.val.fused > best_val) {
      best_val = er.val.fused;
      rec.best_epoch = epoch;
      rec.best_checkpoint = out_dir / "checkpoints" / "best";
      net::save_checkpoint(checkpoint(epoch, er.val.fused), rec.best_checkpoint);
    }
    write_run_record(out_dir / "run_record.tsv", rec);
  }
  drift.close();
  rec.final_checkpoint = out_dir / "checkpoints" / "last";
  net::save_checkpoint(checkpoint(cfg.epochs - 1, rec.epochs.back().val.fused), rec.final_checkpoint);

  if (cfg.evaluate_test && !manifest.split_entries(Split::test).empty()) {
    const auto res = evaluate(manifest, net::load_checkpoint(rec.best_checkpoint), Split::test);
    rec.test = res.top1;
    tensorio::write_predictions(out_dir / "predictions_test.pred", res.predictions);
    write_confusion(out_dir / "confusion_test.tsv", res.confusion);
  }
  write_summary(out_dir / "summary.md", cfg, mc, rec);
  return rec;
}

// ------------------------------------------------------------- comparison

std::vector<Variant> mechanism_variants() {
  return {{"CE", 0.0, xfuse::AttentionSource::none},
          {"CE+PRM", 0.5, xfuse::AttentionSource::none},
          {"CE+PRM+fusion", 0.5, xfuse::AttentionSource::cross}};
}

double VariantResult::mean() const {
  if (test_top1.empty()) return 0.0;
  return std::accumulate(test_top1.begin(), test_top1.end(), 0.0) / static_cast<double>(test_top1.size());
}

double VariantResult::stddev() const {
  if (test_top1.size() < 2) return 0.0;
  const double m = mean();
  double s = 0.0;
  for (double v : test_top1) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(test_top1.size() - 1));
}

std::vector<VariantResult> compare(const tensorio::DatasetManifest& manifest, const TrainConfig& base,
                                   const net::ModelConfig& model_base, std::span<const std::uint64_t> seeds,
                                   const fs::path& out_dir) {
  if (seeds.empty()) throw ValidationError("compare needs at least one seed");
  if (manifest.split_entries(Split::test).empty()) throw ValidationError("compare needs a test split");
  std::vector<VariantResult> results;
  for (const auto& v : mechanism_variants()) {
    VariantResult r;
    r.variant = v;
    for (auto seed : seeds) {
      TrainConfig cfg = base;
      cfg.stage = net::Stage::joint;
      cfg.alpha = v.alpha;
      cfg.seed = seed;
      cfg.evaluate_test = true;
      net::ModelConfig mc = model_base;
      mc.fusion.source = v.source;
      const auto rec = train(manifest, cfg, mc, {}, out_dir / v.name / ("seed" + std::to_string(seed)));
      r.test_top1.push_back(rec.test->fused);
    }
    results.push_back(std::move(r));
  }
  return results;
}

std::string comparison_table(const std::vector<VariantResult>& results) {
  std::ostringstream out;
  out << "| variant | alpha | attention |";
  const std::size_t seeds = results.empty() ? 0 : results.front().test_top1.size();
  for (std::size_t s = 0; s < seeds; ++s) out << " run " << s + 1 << " |";
  out << " mean | std |\n|---|---|---|";
  for (std::size_t s = 0; s < seeds; ++s) out << "---|";
  out << "---|---|\n";
  for (const auto& r : results) {
    out << "| " << r.variant.name << " | " << r.variant.alpha << " | " << xfuse::to_string(r.variant.source) << " |";
    for (double v : r.test_top1) out << ' ' << pct(v) << " |";
    out << ' ' << pct(r.mean()) << " | " << pct(r.stddev()) << " |\n";
  }
  return out.str();
}

}  // namespace mgc::trainer
