#pragma once

// Cross-modal fusion between the stage-1 feature maps of the RGB and pose
// pathways:
//
//   1. pool_project: 3-D conv to a shared hidden width C' at the RGB temporal
//      rate T', then spatial max-pool, giving a (C', T') descriptor.
//   2. channel_cross_attention: channels are the tokens (C' of them, each a
//      T'-vector). Queries come from the modality itself; keys and values
//      come from the other modality (`cross`) or from itself (`self`).
//   3. gate_modulate: temporal mean of the attended descriptor -> affine map to
//      the modality's own channel count -> activation -> per-channel scale,
//      plus a residual: X'' = g * X + X.
//   4. lateral_concat: each pathway receives the other's stage-1 map resampled
//      in time (strided conv down, transposed conv up) concatenated in front
//      of its own modulated map.

#include <utility>

#include "mgc/nn.hpp"

namespace mgc::xfuse {

using ag::Var;

enum class AttentionSource { cross, self, none };
enum class GateActivation { sigmoid, identity };

const char* to_string(AttentionSource s);
AttentionSource parse_attention_source(const std::string& s);
const char* to_string(GateActivation a);
GateActivation parse_gate_activation(const std::string& s);

struct FusionConfig {
  int hidden = 16;           // C'
  int lateral_channels = 8;  // channels contributed by the other pathway
  AttentionSource source = AttentionSource::cross;
  GateActivation gate_activation = GateActivation::sigmoid;
};

struct FusionParams {
  nn::Conv3d proj_rgb, proj_pose;
  nn::Affine q_rgb, k_rgb, v_rgb;
  nn::Affine q_pose, k_pose, v_pose;
  nn::Affine gate_rgb, gate_pose;
  nn::Conv3d lateral_down;        // pose time -> rgb time
  nn::ConvTranspose3d lateral_up; // rgb time -> pose time
  int stride_ratio = 1;
};

// Registers all fusion parameters under "fusion.*". `time_rgb` is T'.
FusionParams make_params(nn::ParamStore& ps, const FusionConfig& cfg, int channels_rgb, int channels_pose,
                         int time_rgb, int stride_ratio, Rng& rng);

struct FusionState {
  Var x_rgb, x_pose;          // stage-1 maps
  Var desc_rgb, desc_pose;    // (N, C', T')
  Var attn_rgb, attn_pose;    // (N, C', T'), null when attention is off
  Var mod_rgb, mod_pose;      // same shapes as x_*
  Var out_rgb, out_pose;      // lateral concatenations
};

// x (N,C,T,H,W) -> (N, C', T').
Var pool_project(const Var& x, const nn::Conv3d& proj);

// Single-head attention over channel tokens; inputs (N, C', T').
std::pair<Var, Var> channel_cross_attention(const Var& desc_rgb, const Var& desc_pose, const FusionParams& p,
                                            AttentionSource source);

// Scores before the softmax for one modality, exposed for inspection: (N, C', C').
Var attention_scores(const Var& query_desc, const Var& key_desc, const nn::Affine& wq, const nn::Affine& wk);

Var gate_modulate(const Var& attn, const Var& x, const nn::Affine& gate, GateActivation act);

std::pair<Var, Var> lateral_concat(const Var& x_rgb, const Var& x_pose, const Var& mod_rgb, const Var& mod_pose,
                                   const FusionParams& p);

FusionState exchange(const Var& x_rgb, const Var& x_pose, const FusionParams& p, const FusionConfig& cfg);

}  // namespace mgc::xfuse
