#pragma once

// Prototype-based refinement of embeddings.
//
// Within a batch every sample is a true positive of its label class or,
// when misclassified, a false negative of its label and a false positive of
// the predicted class. TP samples feed an EMA prototype bank; FN/FP centers
// shift the logit of the true class for each TP anchor in a temperature-scaled
// prototype softmax.

#include <optional>
#include <span>
#include <vector>

#include "mgc/autograd.hpp"
#include "mgc/rng.hpp"
#include "mgc/tensor.hpp"

namespace mgc::protoref {

// <a,b> / (|a||b|); throws ValidationError for a zero vector or length mismatch.
double cosine_sim(std::span<const double> a, std::span<const double> b);

struct BatchPartition {
  std::size_t num_classes = 0;
  std::vector<int> labels, preds;
  std::vector<std::vector<std::size_t>> tp, fn, fp;       // [class] -> sorted batch indices
  std::vector<std::optional<std::vector<double>>> mu_fn;  // [class], empty until ambiguous_centers
  std::vector<std::optional<std::vector<double>>> mu_fp;

  std::size_t n_tp(std::size_t k) const { return tp[k].size(); }
  std::size_t n_fn(std::size_t k) const { return fn[k].size(); }
  std::size_t n_fp(std::size_t k) const { return fp[k].size(); }
  bool is_tp(std::size_t i) const { return preds[i] == labels[i]; }
  std::size_t num_anchors() const;
};

// Uses only the row-wise argmax (lowest index on ties) of `scores`.
BatchPartition partition_batch(const Tensor& scores, std::span<const int> labels);
BatchPartition partition_from_predictions(std::span<const int> preds, std::span<const int> labels, std::size_t num_classes);

// Arithmetic means of the FN/FP feature rows per class; absent for empty sets.
BatchPartition ambiguous_centers(BatchPartition part, const Tensor& feats);

struct PrototypeBank {
  Tensor prototypes;  // (K, D), unit rows
  double rho = 0.9;

  std::size_t num_classes() const { return prototypes.dim(0); }
  std::size_t dim() const { return prototypes.dim(1); }
};

// Rows drawn from an isotropic Gaussian and normalised.
PrototypeBank random_bank(std::size_t num_classes, std::size_t dim, double rho, std::uint64_t seed);
void validate(const PrototypeBank& bank);

// (1 - rho) * tp_mean + rho * pre, before renormalisation.
std::vector<double> ema_blend(std::span<const double> pre, std::span<const double> tp_mean, double rho);

// Mean of the unit-normalised TP features of class k.
std::vector<double> tp_mean(const BatchPartition& part, const Tensor& feats, std::size_t k);

// EMA toward the TP mean for every class with TP samples, then row
// renormalisation. Classes without TP samples (or whose blend vanishes) keep
// their row bit for bit.
PrototypeBank update_prototypes(const PrototypeBank& bank, const BatchPartition& part, const Tensor& feats);

struct CalibrationTerms {
  double phi = 0.0;     // 1 - cos(F_i, mu_FN^k), 0 without FN samples
  double varphi = 0.0;  // 1 + cos(F_i, mu_FP^k), 0 without FP samples
};

// Requires i to be a TP anchor of class k and centers to be computed.
CalibrationTerms calibration_terms(const BatchPartition& part, const Tensor& feats, std::size_t i, std::size_t k);

struct AnchorTerms {
  std::size_t index = 0;
  int label = 0;
  double phi = 0, varphi = 0;
  double term_a = 0, term_b = 0;
};

struct ProtoLoss {
  double value = 0.0;  // mean over anchors of term_a + term_b; 0 without anchors
  std::vector<AnchorTerms> anchors;
};

// Batch statistics held fixed while differentiating: partition with centers,
// prototypes and class probabilities.
struct RefinementContext {
  BatchPartition part;
  Tensor prototypes;  // (K, D)
  Tensor probs;       // (N, K)
  double tau = 0.1;
};

RefinementContext make_context(const PrototypeBank& bank, const Tensor& probs, std::span<const int> labels,
                               const Tensor& feats, double tau);

ProtoLoss proto_loss(const RefinementContext& ctx, const Tensor& feats);
ProtoLoss proto_loss(const PrototypeBank& bank, const BatchPartition& part, const Tensor& feats, const Tensor& probs,
                     double tau);

// Differentiable L_PR w.r.t. feats (N, D); gradients do not reach the context.
ag::Var refinement_loss(const ag::Var& feats, const RefinementContext& ctx);

struct LossReport {
  double l_ce = 0, l_pr = 0, l_total = 0;
  double alpha = 0, tau = 0;
  std::vector<AnchorTerms> anchors;
};

LossReport total_loss(double l_ce, double l_pr, double alpha);

}  // namespace mgc::protoref
