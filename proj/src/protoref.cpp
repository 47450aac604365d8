#include "mgc/protoref.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mgc/errors.hpp"

namespace mgc::protoref {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

std::size_t argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

// Unit vector, or NumericalError: inside the loss a vanishing embedding is a
// training failure rather than bad input.
std::vector<double> unit(std::span<const double> a, const char* what) {
  const double n = norm(a);
  if (!(n > 0.0) || !std::isfinite(n)) throw NumericalError(std::string("zero or non-finite norm in ") + what);
  std::vector<double> u(a.begin(), a.end());
  for (auto& v : u) v /= n;
  return u;
}

void check_feats(const BatchPartition& part, const Tensor& feats) {
  if (feats.rank() != 2 || feats.dim(0) != part.labels.size()) {
    throw ValidationError("features " + shape_str(feats.shape()) + " do not match a batch of " +
                          std::to_string(part.labels.size()));
  }
}

double logsumexp(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("cosine_sim: length mismatch");
  const double na = norm(a), nb = norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw ValidationError("cosine_sim: zero vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

std::size_t BatchPartition::num_anchors() const {
  std::size_t n = 0;
  for (const auto& s : tp) n += s.size();
  return n;
}

BatchPartition partition_from_predictions(std::span<const int> preds, std::span<const int> labels, std::size_t num_classes) {
  if (labels.empty()) throw ValidationError("partition_batch: empty batch");
  if (preds.size() != labels.size()) throw ValidationError("partition_batch: prediction/label count mismatch");
  BatchPartition p;
  p.num_classes = num_classes;
  p.labels.assign(labels.begin(), labels.end());
  p.preds.assign(preds.begin(), preds.end());
  p.tp.resize(num_classes);
  p.fn.resize(num_classes);
  p.fp.resize(num_classes);
  p.mu_fn.resize(num_classes);
  p.mu_fp.resize(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i], q = preds[i];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes || q < 0 || static_cast<std::size_t>(q) >= num_classes) {
      throw ValidationError("partition_batch: class index out of range at row " + std::to_string(i));
    }
    if (y == q) {
      p.tp[y].push_back(i);
    } else {
      p.fn[y].push_back(i);
      p.fp[q].push_back(i);
    }
  }
  return p;
}

BatchPartition partition_batch(const Tensor& scores, std::span<const int> labels) {
  if (scores.rank() != 2 || scores.dim(0) == 0) throw ValidationError("partition_batch: empty batch");
  if (scores.dim(0) != labels.size()) throw ValidationError("partition_batch: label count mismatch");
  std::vector<int> preds(labels.size());
  for (std::size_t i = 0; i < preds.size(); ++i) preds[i] = static_cast<int>(argmax_row(scores.row(i)));
  return partition_from_predictions(preds, labels, scores.dim(1));
}

BatchPartition ambiguous_centers(BatchPartition part, const Tensor& feats) {
  check_feats(part, feats);
  const std::size_t d = feats.dim(1);
  auto center = [&](const std::vector<std::size_t>& idx) -> std::optional<std::vector<double>> {
    if (idx.empty()) return std::nullopt;
    std::vector<double> mu(d, 0.0);
    for (auto i : idx) {
      const auto r = feats.row(i);
      for (std::size_t j = 0; j < d; ++j) mu[j] += r[j];
    }
    for (auto& v : mu) v /= static_cast<double>(idx.size());
    return mu;
  };
  for (std::size_t k = 0; k < part.num_classes; ++k) {
    part.mu_fn[k] = center(part.fn[k]);
    part.mu_fp[k] = center(part.fp[k]);
  }
  return part;
}

PrototypeBank random_bank(std::size_t num_classes, std::size_t dim, double rho, std::uint64_t seed) {
  if (num_classes == 0 || dim == 0) throw ValidationError("prototype bank needs K, D > 0");
  Rng rng(seed);
  PrototypeBank b;
  b.rho = rho;
  b.prototypes = Tensor({num_classes, dim});
  for (std::size_t k = 0; k < num_classes; ++k) {
    auto r = b.prototypes.row(k);
    double n = 0.0;
    while (!(n > 1e-12)) {
      for (auto& v : r) v = rng.normal();
      n = norm(r);
    }
    for (auto& v : r) v /= n;
  }
  validate(b);
  return b;
}

void validate(const PrototypeBank& bank) {
  if (bank.prototypes.rank() != 2) throw ValidationError("prototype bank must be (K, D)");
  if (!(bank.rho >= 0.0 && bank.rho <= 1.0)) throw ValidationError("prototype momentum rho must lie in [0, 1]");
  for (std::size_t k = 0; k < bank.num_classes(); ++k) {
    if (std::abs(norm(bank.prototypes.row(k)) - 1.0) > 1e-6) {
      throw ValidationError("prototype row " + std::to_string(k) + " is not unit norm");
    }
  }
}

std::vector<double> ema_blend(std::span<const double> pre, std::span<const double> mean, double rho) {
  std::vector<double> out(pre.size());
  for (std::size_t j = 0; j < pre.size(); ++j) out[j] = (1.0 - rho) * mean[j] + rho * pre[j];
  return out;
}

std::vector<double> tp_mean(const BatchPartition& part, const Tensor& feats, std::size_t k) {
  check_feats(part, feats);
  const auto& idx = part.tp.at(k);
  std::vector<double> mean(feats.dim(1), 0.0);
  if (idx.empty()) return mean;
  for (auto i : idx) {
    const auto u = unit(feats.row(i), "TP embedding");
    for (std::size_t j = 0; j < u.size(); ++j) mean[j] += u[j];
  }
  for (auto& v : mean) v /= static_cast<double>(idx.size());
  return mean;
}

PrototypeBank update_prototypes(const PrototypeBank& bank, const BatchPartition& part, const Tensor& feats) {
  check_feats(part, feats);
  if (feats.dim(1) != bank.dim() || part.num_classes != bank.num_classes()) {
    throw ValidationError("prototype bank " + shape_str(bank.prototypes.shape()) + " does not match the batch");
  }
  PrototypeBank next = bank;
  for (std::size_t k = 0; k < bank.num_classes(); ++k) {
    if (part.tp[k].empty()) continue;
    auto blended = ema_blend(bank.prototypes.row(k), tp_mean(part, feats, k), bank.rho);
    const double n = norm(blended);
    if (!(n > 0.0)) continue;
    auto r = next.prototypes.row(k);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = blended[j] / n;
  }
  return next;
}

CalibrationTerms calibration_terms(const BatchPartition& part, const Tensor& feats, std::size_t i, std::size_t k) {
  check_feats(part, feats);
  if (k >= part.num_classes || i >= part.labels.size() || part.labels[i] != static_cast<int>(k) || !part.is_tp(i)) {
    throw ValidationError("calibration_terms: sample " + std::to_string(i) + " is not a TP anchor of class " +
                          std::to_string(k));
  }
  CalibrationTerms c;
  if (!part.fn[k].empty()) {
    if (!part.mu_fn[k]) throw ValidationError("calibration_terms: FN center not computed");
    c.phi = 1.0 - cosine_sim(feats.row(i), *part.mu_fn[k]);
  }
  if (!part.fp[k].empty()) {
    if (!part.mu_fp[k]) throw ValidationError("calibration_terms: FP center not computed");
    c.varphi = 1.0 + cosine_sim(feats.row(i), *part.mu_fp[k]);
  }
  return c;
}

RefinementContext make_context(const PrototypeBank& bank, const Tensor& probs, std::span<const int> labels,
                               const Tensor& feats, double tau) {
  RefinementContext ctx;
  ctx.part = ambiguous_centers(partition_batch(probs, labels), feats);
  ctx.prototypes = bank.prototypes;
  ctx.probs = probs;
  ctx.tau = tau;
  return ctx;
}

namespace {

struct AnchorGeometry {
  std::vector<double> u;         // unit anchor
  std::vector<double> mu_fn, mu_fp;  // unit centers, empty when absent
  std::vector<double> d;         // cos to each prototype
};

void check_context(const RefinementContext& ctx, const Tensor& feats) {
  if (!(ctx.tau > 0.0)) throw ValidationError("temperature tau must be positive");
  check_feats(ctx.part, feats);
  const std::size_t n = feats.dim(0), k = ctx.part.num_classes;
  if (ctx.prototypes.rank() != 2 || ctx.prototypes.dim(0) != k || ctx.prototypes.dim(1) != feats.dim(1)) {
    throw ValidationError("prototypes " + shape_str(ctx.prototypes.shape()) + " do not match features " +
                          shape_str(feats.shape()));
  }
  require_shape(ctx.probs, {n, k}, "refinement probabilities");
}

AnchorGeometry geometry(const RefinementContext& ctx, const Tensor& feats, std::size_t i, std::size_t k) {
  AnchorGeometry g;
  g.u = unit(feats.row(i), "anchor embedding");
  if (ctx.part.mu_fn[k]) g.mu_fn = unit(*ctx.part.mu_fn[k], "FN center");
  if (ctx.part.mu_fp[k]) g.mu_fp = unit(*ctx.part.mu_fp[k], "FP center");
  g.d.resize(ctx.part.num_classes);
  for (std::size_t l = 0; l < g.d.size(); ++l) g.d[l] = dot(g.u, ctx.prototypes.row(l));
  return g;
}

// -log softmax_k(z) with z_k shifted by -shift; returns the term and dterm/dz.
double shifted_nll(const std::vector<double>& d, std::size_t k, double tau, double shift, std::vector<double>* dz) {
  std::vector<double> z(d.size());
  for (std::size_t l = 0; l < d.size(); ++l) z[l] = d[l] / tau;
  z[k] -= shift;
  const double lse = logsumexp(z);
  if (dz) {
    dz->resize(z.size());
    for (std::size_t l = 0; l < z.size(); ++l) (*dz)[l] = std::exp(z[l] - lse);
    (*dz)[k] -= 1.0;
  }
  return lse - z[k];
}

}  // namespace

ProtoLoss proto_loss(const RefinementContext& ctx, const Tensor& feats) {
  check_context(ctx, feats);
  ProtoLoss out;
  for (std::size_t k = 0; k < ctx.part.num_classes; ++k) {
    for (auto i : ctx.part.tp[k]) {
      const auto g = geometry(ctx, feats, i, k);
      AnchorTerms a;
      a.index = i;
      a.label = static_cast<int>(k);
      if (!g.mu_fn.empty()) a.phi = 1.0 - dot(g.u, g.mu_fn);
      if (!g.mu_fp.empty()) a.varphi = 1.0 + dot(g.u, g.mu_fp);
      const double w = 1.0 - ctx.probs.row(i)[k];
      a.term_a = shifted_nll(g.d, k, ctx.tau, w * a.varphi, nullptr);
      a.term_b = shifted_nll(g.d, k, ctx.tau, w * a.phi, nullptr);
      out.value += a.term_a + a.term_b;
      out.anchors.push_back(a);
    }
  }
  std::sort(out.anchors.begin(), out.anchors.end(), [](const auto& x, const auto& y) { return x.index < y.index; });
  if (!out.anchors.empty()) out.value /= static_cast<double>(out.anchors.size());
  if (!std::isfinite(out.value)) throw NumericalError("refinement loss is not finite");
  return out;
}

ProtoLoss proto_loss(const PrototypeBank& bank, const BatchPartition& part, const Tensor& feats, const Tensor& probs,
                     double tau) {
  RefinementContext ctx;
  ctx.part = part;
  ctx.prototypes = bank.prototypes;
  ctx.probs = probs;
  ctx.tau = tau;
  return proto_loss(ctx, feats);
}

ag::Var refinement_loss(const ag::Var& feats, const RefinementContext& ctx) {
  const ProtoLoss value = proto_loss(ctx, feats->value);
  auto frozen = std::make_shared<RefinementContext>(ctx);
  return ag::make_op(Tensor({1}, value.value), {feats}, [frozen](ag::Node& self) {
    ag::Node& x = *self.inputs[0];
    if (!x.requires_grad) return;
    const RefinementContext& c = *frozen;
    const std::size_t anchors = c.part.num_anchors();
    if (anchors == 0) return;
    const double up = self.grad[0] / static_cast<double>(anchors);
    Tensor& gx = x.grad_buffer();
    const std::size_t dim = x.value.dim(1);
    for (std::size_t k = 0; k < c.part.num_classes; ++k) {
      for (auto i : c.part.tp[k]) {
        const auto g = geometry(c, x.value, i, k);
        const double w = 1.0 - c.probs.row(i)[k];
        std::vector<double> gu(dim, 0.0);  // d(term_a + term_b)/d(unit anchor)
        auto accumulate = [&](double m, const std::vector<double>& dm_du, double sign) {
          std::vector<double> dz;
          shifted_nll(g.d, k, c.tau, w * m, &dz);
          for (std::size_t l = 0; l < dz.size(); ++l) {
            const auto p = c.prototypes.row(l);
            for (std::size_t j = 0; j < dim; ++j) gu[j] += dz[l] * p[j] / c.tau;
          }
          // z_k also carries -w * m(u)
          if (!dm_du.empty())
            for (std::size_t j = 0; j < dim; ++j) gu[j] -= dz[k] * w * sign * dm_du[j];
        };
        const double varphi = g.mu_fp.empty() ? 0.0 : 1.0 + dot(g.u, g.mu_fp);
        const double phi = g.mu_fn.empty() ? 0.0 : 1.0 - dot(g.u, g.mu_fn);
        accumulate(varphi, g.mu_fp, +1.0);
        accumulate(phi, g.mu_fn, -1.0);
        const auto r = x.value.row(i);
        const double n = norm(r), gdu = dot(gu, g.u);
        auto out = gx.row(i);
        for (std::size_t j = 0; j < dim; ++j) out[j] += up * (gu[j] - gdu * g.u[j]) / n;
      }
    }
  });
}

LossReport total_loss(double l_ce, double l_pr, double alpha) {
  if (!std::isfinite(l_ce) || !std::isfinite(l_pr)) throw NumericalError("loss terms must be finite");
  if (!(alpha >= 0.0)) throw ValidationError("alpha must be non-negative");
  LossReport r;
  r.l_ce = l_ce;
  r.l_pr = l_pr;
  r.alpha = alpha;
  r.l_total = l_ce + alpha * l_pr;
  return r;
}

}  // namespace mgc::protoref
