#pragma once

// Deterministic synthetic micro-gesture clips. Every class owns a motion
// template: each joint oscillates along a class-specific direction with a
// class-specific frequency, amplitude and phase around a shared body layout.
// A clip jitters its template (translation, per-joint phase, amplitude) with
// scale `intra_noise` and renders it twice: as per-joint Gaussian heatmaps at
// pose rate and as coloured blobs at RGB rate.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mgc/tensor.hpp"
#include "mgc/tensorio.hpp"

namespace mgc::synthgen {

// Classes a and b share a template; b's phases are shifted by offset cycles.
struct AmbiguousPair {
  int class_a = 0;
  int class_b = 1;
  double offset = 0.05;
};

struct GenConfig {
  std::uint64_t seed = 7;
  int num_classes = 6;
  int train_per_class = 10;
  int val_per_class = 5;
  int test_per_class = 5;
  int t_rgb = 8;
  int t_pose = 32;
  int height = 16;
  int width = 16;
  int joints = 5;
  std::vector<AmbiguousPair> ambiguous_pairs;
  double intra_noise = 0.2;
  double blob_sigma = 1.5;
};

void validate(const GenConfig& cfg);

struct JointMotion {
  double base_x = 0, base_y = 0;  // pixels
  double direction = 0;           // radians
  double amplitude = 0;           // pixels
  double phase = 0;               // radians
};

struct MotionTemplate {
  int label = 0;
  double frequency = 1;  // cycles per clip
  std::vector<JointMotion> joints;
};

struct ClipSample {
  std::string clip_id;
  int label = 0;
  Tensor rgb;   // (t_rgb, 3, H, W), values in [0,1]
  Tensor pose;  // (t_pose, joints, H, W), values in [0,1]
};

std::vector<MotionTemplate> make_templates(const GenConfig& cfg);

// Jittered joint position (x, y) of `joint` at pose frame t; clamped to the frame.
struct Point {
  double x, y;
};
std::vector<std::vector<Point>> jittered_trajectory(const MotionTemplate& tmpl, std::uint64_t jitter_seed,
                                                    const GenConfig& cfg);

ClipSample render_clip(const MotionTemplate& tmpl, std::uint64_t jitter_seed, const GenConfig& cfg);

// RGB colour of a joint's blob, fixed per joint index.
std::array<double, 3> joint_color(int joint, int joints);

// Writes rgb/<id>.mgc, pose/<id>.mgc and manifest.txt under out_dir.
tensorio::DatasetManifest generate(const GenConfig& cfg, const std::filesystem::path& out_dir);

std::string clip_id(int label, tensorio::Split split, int index);

}  // namespace mgc::synthgen
