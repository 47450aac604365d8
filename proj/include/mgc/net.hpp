#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mgc/nn.hpp"
#include "mgc/xfuse.hpp"

namespace mgc::net {

using ag::Var;

struct BranchConfig {
  int in_channels = 3;
  std::vector<int> stage_channels{16, 32};
  std::vector<int> temporal_strides{2, 2};
  std::vector<int> spatial_strides{2, 2};
  int embed_dim = 64;  // D
};

enum class Stage { rgb_only, pose_only, joint };

const char* to_string(Stage s);
Stage parse_stage(const std::string& s);

struct ModelConfig {
  int num_classes = 6;
  int t_rgb = 8, t_pose = 32, height = 16, width = 16;
  BranchConfig rgb{3};
  BranchConfig pose{5};
  xfuse::FusionConfig fusion;
  int norm_groups = 4;
  Stage stage = Stage::joint;
  std::uint64_t seed = 0;

  bool has_rgb() const { return stage != Stage::pose_only; }
  bool has_pose() const { return stage != Stage::rgb_only; }
};

// Per-stage feature shapes (N excluded) derived from the configured strides.
struct ShapePlan {
  std::vector<Shape> rgb_stages, pose_stages;  // (C, T, H, W) after each stage
  int stride_ratio = 1;                        // pose time / rgb time, at every stage
};

// Validates the config, including the temporal contract, and returns the plan.
ShapePlan plan_shapes(const ModelConfig& cfg);

struct BranchOutput {
  Var feat;      // F_x (N, C, T', H', W')
  Var embed;     // F'_x (N, D): global max-pool then affine
  Var logits;    // (N, K): the same max-pooled vector through a second affine map
  Tensor probs;  // softmax(logits), not part of the graph
};

struct EncodeOutput {
  std::optional<BranchOutput> rgb, pose;
  std::optional<xfuse::FusionState> fusion;
};

class Model {
 public:
  explicit Model(ModelConfig cfg);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  // rgb (N, 3, t_rgb, H, W), pose (N, J, t_pose, H, W); a missing branch may pass an empty tensor.
  EncodeOutput encode(const Tensor& rgb, const Tensor& pose) const;

  const ModelConfig& config() const { return cfg_; }
  const ShapePlan& plan() const { return plan_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

 private:
  struct Layer {
    nn::Conv3d conv;
    nn::GroupNorm norm;
  };
  struct Branch {
    std::string name;
    std::vector<Layer> stages;
    nn::Affine embed, head;
  };

  Var run_stage(const Branch& b, std::size_t i, const Var& x) const;
  BranchOutput run_head(const Branch& b, const Var& feat) const;

  ModelConfig cfg_;
  ShapePlan plan_;
  nn::ParamStore params_;
  std::optional<Branch> rgb_, pose_;
  std::optional<xfuse::FusionParams> fusion_;
};

// 1:1 probability fusion (elementwise mean).
Tensor fuse_probs(const Tensor& p_rgb, const Tensor& p_pose);

// Lowest index wins ties.
std::size_t argmax(std::span<const double> row);
double top1_accuracy(const Tensor& probs, std::span<const int> labels);

// ------------------------------------------------------------- checkpoints
//
// A checkpoint is a directory holding one tensorio blob per parameter plus
// index.txt with lines:
//   meta <key> <value>
//   param <name> <file> <d0,d1,...>
//   bank <branch> <file> <d0,d1> <rho>

struct BankRecord {
  Tensor prototypes;  // (K, D)
  double rho = 0.9;
};

struct Checkpoint {
  ModelConfig config;
  std::map<std::string, Tensor> params;
  std::map<std::string, BankRecord> banks;  // keyed by branch name
  std::map<std::string, std::string> meta;  // free-form extras (epoch, metrics)
};

Checkpoint snapshot(const Model& model);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);
// Copies every parameter the checkpoint holds; shapes must match exactly.
void load_params(Model& model, const Checkpoint& ckpt);

std::map<std::string, std::string> config_to_meta(const ModelConfig& cfg);
ModelConfig config_from_meta(const std::map<std::string, std::string>& meta);

}  // namespace mgc::net
