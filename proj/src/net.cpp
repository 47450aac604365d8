#include "mgc/net.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "mgc/errors.hpp"
#include "mgc/tensorio.hpp"

namespace mgc::net {

namespace fs = std::filesystem;

const char* to_string(Stage s) {
  switch (s) {
    case Stage::rgb_only: return "rgb";
    case Stage::pose_only: return "pose";
    case Stage::joint: return "joint";
  }
  return "?";
}

Stage parse_stage(const std::string& s) {
  if (s == "rgb" || s == "rgb_only") return Stage::rgb_only;
  if (s == "pose" || s == "pose_only") return Stage::pose_only;
  if (s == "joint") return Stage::joint;
  throw ValidationError("stage must be rgb, pose or joint (got '" + s + "')");
}

namespace {

std::vector<Shape> plan_branch(const BranchConfig& b, int t, int h, int w, const char* name) {
  const std::size_t n = b.stage_channels.size();
  if (n == 0 || b.temporal_strides.size() != n || b.spatial_strides.size() != n) {
    throw ValidationError(std::string(name) + ": stage_channels, temporal_strides and spatial_strides must be non-empty and equally long");
  }
  if (b.in_channels <= 0 || b.embed_dim <= 0) throw ValidationError(std::string(name) + ": channel counts must be positive");
  std::vector<Shape> out;
  std::size_t T = t, H = h, W = w;
  for (std::size_t i = 0; i < n; ++i) {
    if (b.stage_channels[i] <= 0 || b.temporal_strides[i] <= 0 || b.spatial_strides[i] <= 0) {
      throw ValidationError(std::string(name) + ": strides and channels must be positive");
    }
    // kernel 3, padding 1
    T = (T - 1) / b.temporal_strides[i] + 1;
    H = (H - 1) / b.spatial_strides[i] + 1;
    W = (W - 1) / b.spatial_strides[i] + 1;
    out.push_back({static_cast<std::size_t>(b.stage_channels[i]), T, H, W});
  }
  return out;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

void check_finite(const Var& v, const std::string& what) {
  if (!v->value.all_finite()) throw NumericalError("non-finite activation in " + what);
}

}  // namespace

ShapePlan plan_shapes(const ModelConfig& cfg) {
  if (cfg.num_classes <= 0) throw ValidationError("num_classes must be positive");
  if (cfg.t_rgb <= 0 || cfg.t_pose <= 0 || cfg.height <= 0 || cfg.width <= 0) {
    throw ValidationError("input extents must be positive");
  }
  ShapePlan plan;
  if (cfg.has_rgb()) plan.rgb_stages = plan_branch(cfg.rgb, cfg.t_rgb, cfg.height, cfg.width, "rgb");
  if (cfg.has_pose()) plan.pose_stages = plan_branch(cfg.pose, cfg.t_pose, cfg.height, cfg.width, "pose");
  if (cfg.stage != Stage::joint) return plan;

  if (plan.rgb_stages.size() != plan.pose_stages.size() || plan.rgb_stages.size() < 2) {
    throw ValidationError("joint model needs the same number (>= 2) of stages in both pathways");
  }
  const std::size_t t0 = plan.rgb_stages[0][1];
  if (plan.pose_stages[0][1] % t0 != 0) {
    throw ValidationError("temporal contract violated: pose stage-1 length " + std::to_string(plan.pose_stages[0][1]) +
                          " is not a multiple of rgb stage-1 length " + std::to_string(t0));
  }
  plan.stride_ratio = static_cast<int>(plan.pose_stages[0][1] / t0);
  for (std::size_t i = 0; i < plan.rgb_stages.size(); ++i) {
    const auto &r = plan.rgb_stages[i], &p = plan.pose_stages[i];
    if (p[1] != plan.stride_ratio * r[1]) {
      throw ValidationError("temporal contract violated at stage " + std::to_string(i + 1) + ": pose length " +
                            std::to_string(p[1]) + " != " + std::to_string(plan.stride_ratio) + " x " + std::to_string(r[1]));
    }
  }
  if (plan.rgb_stages[0][2] != plan.pose_stages[0][2] || plan.rgb_stages[0][3] != plan.pose_stages[0][3]) {
    throw ValidationError("lateral connections need equal stage-1 spatial extents in both pathways");
  }
  return plan;
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)), plan_(plan_shapes(cfg_)) {
  Rng rng(splitmix64(cfg_.seed ^ 0x6d67632d6e6574ull));
  const bool joint = cfg_.stage == Stage::joint;
  const int lateral = joint ? cfg_.fusion.lateral_channels : 0;

  auto make_stage = [&](Branch& b, const BranchConfig& bc, std::size_t i) {
    const int in = i == 0 ? bc.in_channels : bc.stage_channels[i - 1] + (i == 1 ? lateral : 0);
    const int out = bc.stage_channels[i];
    const std::string prefix = b.name + ".stage" + std::to_string(i + 1);
    const ops::ConvGeometry g{{bc.temporal_strides[i], bc.spatial_strides[i], bc.spatial_strides[i]}, {1, 1, 1}};
    Layer layer;
    layer.conv = nn::make_conv3d(params_, prefix + ".conv", in, out, {3, 3, 3}, g, rng);
    layer.norm = nn::make_group_norm(params_, prefix + ".norm", out, cfg_.norm_groups);
    b.stages.push_back(std::move(layer));
  };

  if (cfg_.has_rgb()) {
    rgb_.emplace();
    rgb_->name = "rgb";
    make_stage(*rgb_, cfg_.rgb, 0);
  }
  if (cfg_.has_pose()) {
    pose_.emplace();
    pose_->name = "pose";
    make_stage(*pose_, cfg_.pose, 0);
  }
  if (joint) {
    fusion_ = xfuse::make_params(params_, cfg_.fusion, cfg_.rgb.stage_channels[0], cfg_.pose.stage_channels[0],
                                 static_cast<int>(plan_.rgb_stages[0][1]), plan_.stride_ratio, rng);
  }
  for (auto* pair : {&rgb_, &pose_}) {
    if (!*pair) continue;
    Branch& b = **pair;
    const BranchConfig& bc = b.name == "rgb" ? cfg_.rgb : cfg_.pose;
    for (std::size_t i = 1; i < bc.stage_channels.size(); ++i) make_stage(b, bc, i);
    const int c = bc.stage_channels.back();
    b.embed = nn::make_affine(params_, b.name + ".embed", c, bc.embed_dim, rng);
    b.head = nn::make_affine(params_, b.name + ".head", c, cfg_.num_classes, rng);
  }
}

Var Model::run_stage(const Branch& b, std::size_t i, const Var& x) const {
  const Layer& l = b.stages[i];
  Var y = ops::silu(l.norm(l.conv(x)));
  check_finite(y, b.name + ".stage" + std::to_string(i + 1));
  return y;
}

BranchOutput Model::run_head(const Branch& b, const Var& feat) const {
  BranchOutput out;
  out.feat = feat;
  const Var pooled = ops::global_max_pool(feat);
  out.embed = b.embed(pooled);
  out.logits = b.head(pooled);
  check_finite(out.embed, b.name + ".embed");
  check_finite(out.logits, b.name + ".logits");
  out.probs = ops::softmax_rows(out.logits->value);
  return out;
}

EncodeOutput Model::encode(const Tensor& rgb, const Tensor& pose) const {
  std::size_t n = 0;
  auto check_input = [&](const Tensor& t, const BranchConfig& bc, int time, const char* what) {
    if (t.rank() != 5 || t.dim(1) != static_cast<std::size_t>(bc.in_channels) || t.dim(2) != static_cast<std::size_t>(time) ||
        t.dim(3) != static_cast<std::size_t>(cfg_.height) || t.dim(4) != static_cast<std::size_t>(cfg_.width)) {
      throw ValidationError(std::string(what) + " input shape " + shape_str(t.shape()) + " does not match the model (N," +
                            std::to_string(bc.in_channels) + "," + std::to_string(time) + "," + std::to_string(cfg_.height) +
                            "," + std::to_string(cfg_.width) + ")");
    }
    if (n != 0 && t.dim(0) != n) throw ValidationError("rgb and pose batch sizes differ");
    n = t.dim(0);
    if (!t.all_finite()) throw ValidationError(std::string(what) + " input holds non-finite values");
  };
  if (rgb_) check_input(rgb, cfg_.rgb, cfg_.t_rgb, "rgb");
  if (pose_) check_input(pose, cfg_.pose, cfg_.t_pose, "pose");

  Var x_rgb, x_pose;
  if (rgb_) x_rgb = run_stage(*rgb_, 0, ag::constant(rgb, "rgb_input"));
  if (pose_) x_pose = run_stage(*pose_, 0, ag::constant(pose, "pose_input"));

  EncodeOutput out;
  if (fusion_) {
    out.fusion = xfuse::exchange(x_rgb, x_pose, *fusion_, cfg_.fusion);
    check_finite(out.fusion->out_rgb, "fusion.rgb");
    check_finite(out.fusion->out_pose, "fusion.pose");
    x_rgb = out.fusion->out_rgb;
    x_pose = out.fusion->out_pose;
  }
  if (rgb_) {
    for (std::size_t i = 1; i < rgb_->stages.size(); ++i) x_rgb = run_stage(*rgb_, i, x_rgb);
    out.rgb = run_head(*rgb_, x_rgb);
  }
  if (pose_) {
    for (std::size_t i = 1; i < pose_->stages.size(); ++i) x_pose = run_stage(*pose_, i, x_pose);
    out.pose = run_head(*pose_, x_pose);
  }
  return out;
}

Tensor fuse_probs(const Tensor& p_rgb, const Tensor& p_pose) {
  if (p_rgb.rank() != 2) throw ValidationError("fuse_probs: expected (N,K) probabilities");
  require_shape(p_pose, p_rgb.shape(), "fuse_probs");
  Tensor out(p_rgb.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = 0.5 * (p_rgb[i] + p_pose[i]);
  return out;
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

double top1_accuracy(const Tensor& probs, std::span<const int> labels) {
  if (probs.rank() != 2 || probs.dim(0) == 0) throw ValidationError("top1_accuracy: empty batch");
  if (labels.size() != probs.dim(0)) throw ValidationError("top1_accuracy: label count mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= probs.dim(1)) {
      throw ValidationError("top1_accuracy: label out of range");
    }
    hits += argmax(probs.row(i)) == static_cast<std::size_t>(labels[i]);
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

// ------------------------------------------------------------- checkpoints

std::map<std::string, std::string> config_to_meta(const ModelConfig& cfg) {
  std::map<std::string, std::string> m;
  m["num_classes"] = std::to_string(cfg.num_classes);
  m["t_rgb"] = std::to_string(cfg.t_rgb);
  m["t_pose"] = std::to_string(cfg.t_pose);
  m["height"] = std::to_string(cfg.height);
  m["width"] = std::to_string(cfg.width);
  for (const auto& [name, b] : {std::pair{"rgb", &cfg.rgb}, std::pair{"pose", &cfg.pose}}) {
    const std::string p = name;
    m[p + ".in_channels"] = std::to_string(b->in_channels);
    m[p + ".stage_channels"] = join_ints(b->stage_channels);
    m[p + ".temporal_strides"] = join_ints(b->temporal_strides);
    m[p + ".spatial_strides"] = join_ints(b->spatial_strides);
    m[p + ".embed_dim"] = std::to_string(b->embed_dim);
  }
  m["fusion.hidden"] = std::to_string(cfg.fusion.hidden);
  m["fusion.lateral_channels"] = std::to_string(cfg.fusion.lateral_channels);
  m["fusion.attention_source"] = xfuse::to_string(cfg.fusion.source);
  m["fusion.gate_activation"] = xfuse::to_string(cfg.fusion.gate_activation);
  m["norm_groups"] = std::to_string(cfg.norm_groups);
  m["stage"] = to_string(cfg.stage);
  m["seed"] = std::to_string(cfg.seed);
  return m;
}

ModelConfig config_from_meta(const std::map<std::string, std::string>& meta) {
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = meta.find(k);
    if (it == meta.end()) throw ValidationError("checkpoint index lacks meta key " + k);
    return it->second;
  };
  try {
    ModelConfig cfg;
    cfg.num_classes = std::stoi(get("num_classes"));
    cfg.t_rgb = std::stoi(get("t_rgb"));
    cfg.t_pose = std::stoi(get("t_pose"));
    cfg.height = std::stoi(get("height"));
    cfg.width = std::stoi(get("width"));
    for (const auto& [name, b] : {std::pair{"rgb", &cfg.rgb}, std::pair{"pose", &cfg.pose}}) {
      const std::string p = name;
      b->in_channels = std::stoi(get(p + ".in_channels"));
      b->stage_channels = split_ints(get(p + ".stage_channels"));
      b->temporal_strides = split_ints(get(p + ".temporal_strides"));
      b->spatial_strides = split_ints(get(p + ".spatial_strides"));
      b->embed_dim = std::stoi(get(p + ".embed_dim"));
    }
    cfg.fusion.hidden = std::stoi(get("fusion.hidden"));
    cfg.fusion.lateral_channels = std::stoi(get("fusion.lateral_channels"));
    cfg.fusion.source = xfuse::parse_attention_source(get("fusion.attention_source"));
    cfg.fusion.gate_activation = xfuse::parse_gate_activation(get("fusion.gate_activation"));
    cfg.norm_groups = std::stoi(get("norm_groups"));
    cfg.stage = parse_stage(get("stage"));
    cfg.seed = std::stoull(get("seed"));
    return cfg;
  } catch (const std::logic_error& e) {  // stoi family
    throw ValidationError(std::string("malformed checkpoint meta value: ") + e.what());
  }
}

Checkpoint snapshot(const Model& model) {
  Checkpoint c;
  c.config = model.config();
  for (const auto& [name, v] : model.params().entries()) c.params[name] = v->value;
  return c;
}

namespace {

std::string dims_str(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string());
  std::ofstream idx(dir / "index.txt", std::ios::trunc);
  if (!idx) throw IoError("cannot write " + (dir / "index.txt").string());
  idx << "# mgc checkpoint v1\n";
  auto meta = config_to_meta(ckpt.config);
  for (const auto& [k, v] : ckpt.meta) meta["extra." + k] = v;
  for (const auto& [k, v] : meta) idx << "meta " << k << " " << v << "\n";
  for (const auto& [name, t] : ckpt.params) {
    const std::string file = name + ".mgc";
    tensorio::write_tensor(dir / file, tensorio::to_blob(t));
    idx << "param " << name << " " << file << " " << dims_str(t.shape()) << "\n";
  }
  for (const auto& [branch, bank] : ckpt.banks) {
    const std::string file = "bank_" + branch + ".mgc";
    tensorio::write_tensor(dir / file, tensorio::to_blob(bank.prototypes));
    char rho[32];
    std::snprintf(rho, sizeof rho, "%.17g", bank.rho);
    idx << "bank " << branch << " " << file << " " << dims_str(bank.prototypes.shape()) << " " << rho << "\n";
  }
  if (!idx) throw IoError("write failed for checkpoint index");
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream idx(dir / "index.txt");
  if (!idx) throw IoError("cannot open checkpoint index " + (dir / "index.txt").string());
  Checkpoint c;
  std::map<std::string, std::string> meta;
  std::string line;
  while (std::getline(idx, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string kind, name, file, dims;
    ss >> kind >> name;
    if (kind == "meta") {
      std::string value;
      std::getline(ss >> std::ws, value);
      if (name.rfind("extra.", 0) == 0) {
        c.meta[name.substr(6)] = value;
      } else {
        meta[name] = value;
      }
      continue;
    }
    ss >> file >> dims;
    const Tensor t = tensorio::from_blob(tensorio::read_tensor(dir / file));
    if (dims_str(t.shape()) != dims) throw ValidationError("checkpoint entry " + name + " shape disagrees with its index");
    if (kind == "param") {
      c.params[name] = t;
    } else if (kind == "bank") {
      BankRecord b;
      b.prototypes = t;
      if (!(ss >> b.rho)) throw ValidationError("bank record for " + name + " lacks rho");
      c.banks[name] = std::move(b);
    } else {
      throw ValidationError("unknown checkpoint record '" + kind + "'");
    }
  }
  c.config = config_from_meta(meta);
  return c;
}

void load_params(Model& model, const Checkpoint& ckpt) {
  for (const auto& [name, t] : ckpt.params) {
    auto v = model.params().get(name);
    require_shape(t, v->value.shape(), "checkpoint parameter " + name);
    v->value = t;
  }
}

}  // namespace mgc::net
