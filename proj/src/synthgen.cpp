#include "mgc/synthgen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "mgc/errors.hpp"
#include "mgc/rng.hpp"

namespace mgc::synthgen {

namespace fs = std::filesystem;
using std::numbers::pi;

void validate(const GenConfig& cfg) {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ValidationError(std::string(name) + " must be positive");
  };
  positive(cfg.num_classes, "num_classes");
  positive(cfg.t_rgb, "t_rgb");
  positive(cfg.t_pose, "t_pose");
  positive(cfg.height, "height");
  positive(cfg.width, "width");
  positive(cfg.joints, "joints");
  if (cfg.train_per_class < 0 || cfg.val_per_class < 0 || cfg.test_per_class < 0) {
    throw ValidationError("clips per class must be non-negative");
  }
  if (cfg.t_pose % cfg.t_rgb != 0) {
    throw ValidationError("t_pose (" + std::to_string(cfg.t_pose) + ") must be divisible by t_rgb (" +
                          std::to_string(cfg.t_rgb) + ")");
  }
  if (!(cfg.intra_noise >= 0.0) || !std::isfinite(cfg.intra_noise)) throw ValidationError("intra_noise must be >= 0");
  if (!(cfg.blob_sigma > 0.0)) throw ValidationError("blob_sigma must be > 0");
  for (const auto& p : cfg.ambiguous_pairs) {
    if (p.class_a == p.class_b) throw ValidationError("ambiguous pair classes must differ");
    if (p.class_a < 0 || p.class_b < 0 || p.class_a >= cfg.num_classes || p.class_b >= cfg.num_classes) {
      throw ValidationError("ambiguous pair class out of range");
    }
    if (!(p.offset > 0.0 && p.offset <= 1.0)) throw ValidationError("ambiguous pair offset must be in (0,1]");
  }
}

std::vector<MotionTemplate> make_templates(const GenConfig& cfg) {
  validate(cfg);
  Rng rng(derive_seed(cfg.seed, "templates"));
  const double size = std::min(cfg.height, cfg.width);
  const double cx = (cfg.width - 1) / 2.0, cy = (cfg.height - 1) / 2.0;
  const double radius = 0.28 * size, amp_scale = 0.15 * size;

  std::vector<MotionTemplate> out(cfg.num_classes);
  for (int k = 0; k < cfg.num_classes; ++k) {
    auto& t = out[k];
    t.label = k;
    t.frequency = 1.0 + static_cast<double>(rng.below(3));
    t.joints.resize(cfg.joints);
    for (int j = 0; j < cfg.joints; ++j) {
      auto& jm = t.joints[j];
      const double angle = 2.0 * pi * j / cfg.joints - pi / 2.0;
      jm.base_x = cx + radius * std::cos(angle);
      jm.base_y = cy + radius * std::sin(angle);
      jm.direction = rng.uniform(0.0, pi);
      jm.amplitude = amp_scale * rng.uniform(0.4, 1.0);
      jm.phase = rng.uniform(0.0, 2.0 * pi);
    }
  }
  for (const auto& p : cfg.ambiguous_pairs) {
    auto copy = out[p.class_a];
    copy.label = p.class_b;
    for (auto& jm : copy.joints) jm.phase += 2.0 * pi * p.offset;
    out[p.class_b] = std::move(copy);
  }
  return out;
}

std::vector<std::vector<Point>> jittered_trajectory(const MotionTemplate& tmpl, std::uint64_t jitter_seed,
                                                    const GenConfig& cfg) {
  Rng rng(jitter_seed);
  const double noise = cfg.intra_noise;
  const double dx = 2.0 * noise * rng.normal();
  const double dy = 2.0 * noise * rng.normal();
  std::vector<double> phase_jitter(tmpl.joints.size()), amp_factor(tmpl.joints.size());
  for (std::size_t j = 0; j < tmpl.joints.size(); ++j) {
    phase_jitter[j] = noise * rng.normal();
    amp_factor[j] = std::exp(0.3 * noise * rng.normal());
  }

  std::vector<std::vector<Point>> traj(cfg.t_pose, std::vector<Point>(tmpl.joints.size()));
  for (int t = 0; t < cfg.t_pose; ++t) {
    const double s = static_cast<double>(t) / cfg.t_pose;
    for (std::size_t j = 0; j < tmpl.joints.size(); ++j) {
      const auto& jm = tmpl.joints[j];
      const double disp =
          jm.amplitude * amp_factor[j] * std::sin(2.0 * pi * tmpl.frequency * s + jm.phase + phase_jitter[j]);
      const double x = jm.base_x + dx + disp * std::cos(jm.direction);
      const double y = jm.base_y + dy + disp * std::sin(jm.direction);
      traj[t][j] = {std::clamp(x, 0.0, cfg.width - 1.0), std::clamp(y, 0.0, cfg.height - 1.0)};
    }
  }
  return traj;
}

std::array<double, 3> joint_color(int joint, int joints) {
  // Fully saturated hue wheel.
  const double h = 6.0 * joint / joints;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  switch (sector) {
    case 0: return {1.0, f, 0.0};
    case 1: return {1.0 - f, 1.0, 0.0};
    case 2: return {0.0, 1.0, f};
    case 3: return {0.0, 1.0 - f, 1.0};
    case 4: return {f, 0.0, 1.0};
    default: return {1.0, 0.0, 1.0 - f};
  }
}

ClipSample render_clip(const MotionTemplate& tmpl, std::uint64_t jitter_seed, const GenConfig& cfg) {
  validate(cfg);
  const auto traj = jittered_trajectory(tmpl, jitter_seed, cfg);
  // Background brightness comes from a second stream derived from the clip seed.
  Rng bg_rng(splitmix64(jitter_seed));
  const double background = 0.25 * std::min(cfg.intra_noise, 1.0) * bg_rng.uniform();

  const std::size_t H = cfg.height, W = cfg.width, J = tmpl.joints.size();
  const double inv2s2 = 1.0 / (2.0 * cfg.blob_sigma * cfg.blob_sigma);
  auto blob = [&](const Point& p, std::size_t y, std::size_t x) {
    const double ddx = static_cast<double>(x) - p.x, ddy = static_cast<double>(y) - p.y;
    return std::exp(-(ddx * ddx + ddy * ddy) * inv2s2);
  };

  ClipSample clip;
  clip.label = tmpl.label;
  clip.pose = Tensor({static_cast<std::size_t>(cfg.t_pose), J, H, W});
  for (int t = 0; t < cfg.t_pose; ++t)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) clip.pose[((t * J + j) * H + y) * W + x] = blob(traj[t][j], y, x);

  const int step = cfg.t_pose / cfg.t_rgb;
  clip.rgb = Tensor({static_cast<std::size_t>(cfg.t_rgb), 3, H, W});
  for (int i = 0; i < cfg.t_rgb; ++i) {
    const auto& frame = traj[i * step];
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        std::array<double, 3> px{background, background, background};
        for (std::size_t j = 0; j < J; ++j) {
          const double b = blob(frame[j], y, x);
          const auto col = joint_color(static_cast<int>(j), static_cast<int>(J));
          for (int c = 0; c < 3; ++c) px[c] += col[c] * b;
        }
        for (int c = 0; c < 3; ++c) clip.rgb[((i * 3 + c) * H + y) * W + x] = std::clamp(px[c], 0.0, 1.0);
      }
  }
  return clip;
}

std::string clip_id(int label, tensorio::Split split, int index) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "c%02d_%s_%03d", label, tensorio::to_string(split), index);
  return buf;
}

tensorio::DatasetManifest generate(const GenConfig& cfg, const fs::path& out_dir) {
  validate(cfg);
  const auto templates = make_templates(cfg);
  std::error_code ec;
  fs::create_directories(out_dir / "rgb", ec);
  if (!ec) fs::create_directories(out_dir / "pose", ec);
  if (ec) throw IoError("cannot create dataset directory " + out_dir.string() + ": " + ec.message());

  tensorio::DatasetManifest m;
  m.num_classes = cfg.num_classes;
  m.base_dir = out_dir;
  for (int k = 0; k < cfg.num_classes; ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "gesture_%02d", k);
    m.class_names.emplace_back(name);
  }

  const std::pair<tensorio::Split, int> splits[] = {{tensorio::Split::train, cfg.train_per_class},
                                                    {tensorio::Split::val, cfg.val_per_class},
                                                    {tensorio::Split::test, cfg.test_per_class}};
  for (const auto& [split, count] : splits) {
    for (int k = 0; k < cfg.num_classes; ++k) {
      for (int i = 0; i < count; ++i) {
        tensorio::ManifestEntry e;
        e.clip_id = clip_id(k, split, i);
        e.label = k;
        e.split = split;
        e.rgb_path = fs::path("rgb") / (e.clip_id + ".mgc");
        e.pose_path = fs::path("pose") / (e.clip_id + ".mgc");
        const auto clip = render_clip(templates[k], derive_seed(cfg.seed, e.clip_id), cfg);
        tensorio::write_tensor(out_dir / e.rgb_path, tensorio::to_blob(clip.rgb));
        tensorio::write_tensor(out_dir / e.pose_path, tensorio::to_blob(clip.pose));
        m.entries.push_back(std::move(e));
      }
    }
  }
  tensorio::save_manifest(m, out_dir / "manifest.txt");
  return m;
}

}  // namespace mgc::synthgen
