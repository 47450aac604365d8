#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mgc/net.hpp"
#include "mgc/protoref.hpp"
#include "mgc/tensorio.hpp"

namespace mgc::trainer {

enum class PrmBranch { rgb, pose, both };
const char* to_string(PrmBranch b);
PrmBranch parse_prm_branch(const std::string& s);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 10;
  double lr = 0.0075;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<int> lr_drop_epochs{8, 22};
  double lr_drop_factor = 0.1;
  double alpha = 0.5;
  double tau = 0.1;
  double rho = 0.9;
  std::uint64_t seed = 0;
  net::Stage stage = net::Stage::joint;
  PrmBranch prm_branch = PrmBranch::both;
  bool prm = true;                    // false removes the refinement module altogether
  bool prm_in_pretraining = false;    // refinement during single-branch stages
  bool evaluate_test = true;          // score the best checkpoint on the test split

  bool prm_active() const { return prm && (stage == net::Stage::joint || prm_in_pretraining); }
  bool prm_on(const std::string& branch) const;
};

void validate(const TrainConfig& cfg);

// lr * factor^(number of drop epochs <= epoch)
double lr_at(int epoch, const TrainConfig& cfg);

// Heavy-ball SGD with coupled weight decay:
//   g = grad + wd * w;  v = momentum * v + g;  w -= lr * v
class Sgd {
 public:
  Sgd(std::vector<ag::Var> params, double momentum, double weight_decay);
  void step(double lr);
  void zero_grad();

 private:
  std::vector<ag::Var> params_;
  std::vector<Tensor> velocity_;
  double momentum_, weight_decay_;
};

// One split held in memory, channel-first: rgb (N,3,T,H,W), pose (N,J,T,H,W).
struct Dataset {
  int num_classes = 0;
  std::vector<std::string> clip_ids;
  std::vector<int> labels;
  Tensor rgb, pose;

  std::size_t size() const { return labels.size(); }
};

Dataset load_split(const tensorio::DatasetManifest& m, tensorio::Split split);
// Rows `idx` of a batch-major tensor.
Tensor gather(const Tensor& all, std::span<const std::size_t> idx);

// Fills the data-dependent fields (classes, extents, channels) from a dataset.
net::ModelConfig fit_model_config(net::ModelConfig base, const Dataset& d);

struct Top1 {
  std::optional<double> rgb, pose;
  double fused = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double l_ce = 0, l_pr = 0, l_total = 0;
  Top1 train, val;
};

struct RunRecord {
  std::vector<EpochRecord> epochs;
  Top1 initial_val;  // before the first step
  int best_epoch = -1;
  std::filesystem::path best_checkpoint, final_checkpoint;
  std::optional<Top1> test;  // best checkpoint on the test split
};

// Optional starting points. A joint run given single-branch checkpoints copies
// their branch weights and starts the fusion parameters fresh; `resume` must
// match the model exactly.
struct TrainInit {
  std::optional<net::Checkpoint> rgb, pose, resume;
};

// Copies single-branch weights into a joint model; the lateral input-channel
// slice of each second-stage convolution is zeroed.
void transplant(net::Model& joint, const net::Checkpoint& branch);

// Writes run_record.tsv, prototype_drift.tsv, summary.md, checkpoints/{best,last}
// and, when the test split is non-empty, predictions_test.pred and
// confusion_test.tsv under out_dir.
RunRecord train(const tensorio::DatasetManifest& manifest, const TrainConfig& cfg, const net::ModelConfig& model_base,
                const TrainInit& init, const std::filesystem::path& out_dir);

struct EvalResult {
  Top1 top1;
  std::vector<std::vector<std::size_t>> confusion;  // [label][prediction], fused
  tensorio::PredictionFile predictions;             // fused probabilities
};

EvalResult evaluate(const net::Model& model, const Dataset& data, int batch_size = 10);
EvalResult evaluate(const tensorio::DatasetManifest& manifest, const net::Checkpoint& ckpt, tensorio::Split split);

void write_confusion(const std::filesystem::path& path, const std::vector<std::vector<std::size_t>>& confusion);

// Weighted mean of probability rows, renormalised; clip order of the first file.
tensorio::PredictionFile ensemble(const std::vector<tensorio::PredictionFile>& files, std::span<const double> weights);

void write_run_record(const std::filesystem::path& path, const RunRecord& rec);

// ------------------------------------------------------------- comparison

struct Variant {
  std::string name;
  double alpha = 0.0;
  xfuse::AttentionSource source = xfuse::AttentionSource::none;
};

// CE only; CE with refinement; CE with refinement and cross-modal attention.
std::vector<Variant> mechanism_variants();

struct VariantResult {
  Variant variant;
  std::vector<double> test_top1;  // fused, one per seed
  double mean() const;
  double stddev() const;
};

// Joint runs from scratch for every (variant, seed) on one dataset.
std::vector<VariantResult> compare(const tensorio::DatasetManifest& manifest, const TrainConfig& base,
                                   const net::ModelConfig& model_base, std::span<const std::uint64_t> seeds,
                                   const std::filesystem::path& out_dir);

std::string comparison_table(const std::vector<VariantResult>& results);

}  // namespace mgc::trainer
