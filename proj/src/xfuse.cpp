#include "mgc/xfuse.hpp"

#include <cmath>

#include "mgc/errors.hpp"

namespace mgc::xfuse {

const char* to_string(AttentionSource s) {
  switch (s) {
    case AttentionSource::cross: return "cross";
    case AttentionSource::self: return "self";
    case AttentionSource::none: return "none";
  }
  return "?";
}

AttentionSource parse_attention_source(const std::string& s) {
  if (s == "cross") return AttentionSource::cross;
  if (s == "self") return AttentionSource::self;
  if (s == "none") return AttentionSource::none;
  throw ValidationError("attention source must be cross, self or none (got '" + s + "')");
}

const char* to_string(GateActivation a) { return a == GateActivation::sigmoid ? "sigmoid" : "identity"; }

GateActivation parse_gate_activation(const std::string& s) {
  if (s == "sigmoid") return GateActivation::sigmoid;
  if (s == "identity") return GateActivation::identity;
  throw ValidationError("gate activation must be sigmoid or identity (got '" + s + "')");
}

FusionParams make_params(nn::ParamStore& ps, const FusionConfig& cfg, int channels_rgb, int channels_pose,
                         int time_rgb, int stride_ratio, Rng& rng) {
  if (cfg.hidden <= 0 || cfg.lateral_channels <= 0) throw ValidationError("fusion widths must be positive");
  if (stride_ratio <= 0) throw ValidationError("stride ratio must be positive");
  const int r = stride_ratio;
  FusionParams p;
  p.stride_ratio = r;
  p.proj_rgb = nn::make_conv3d(ps, "fusion.proj_rgb", channels_rgb, cfg.hidden, {1, 3, 3}, {{1, 1, 1}, {0, 1, 1}}, rng);
  p.proj_pose = nn::make_conv3d(ps, "fusion.proj_pose", channels_pose, cfg.hidden, {r, 3, 3}, {{r, 1, 1}, {0, 1, 1}}, rng);
  p.q_rgb = nn::make_affine(ps, "fusion.q_rgb", time_rgb, time_rgb, rng);
  p.k_rgb = nn::make_affine(ps, "fusion.k_rgb", time_rgb, time_rgb, rng);
  p.v_rgb = nn::make_affine(ps, "fusion.v_rgb", time_rgb, time_rgb, rng);
  p.q_pose = nn::make_affine(ps, "fusion.q_pose", time_rgb, time_rgb, rng);
  p.k_pose = nn::make_affine(ps, "fusion.k_pose", time_rgb, time_rgb, rng);
  p.v_pose = nn::make_affine(ps, "fusion.v_pose", time_rgb, time_rgb, rng);
  p.gate_rgb = nn::make_affine(ps, "fusion.gate_rgb", cfg.hidden, channels_rgb, rng);
  p.gate_pose = nn::make_affine(ps, "fusion.gate_pose", cfg.hidden, channels_pose, rng);
  p.lateral_down =
      nn::make_conv3d(ps, "fusion.lateral_down", channels_pose, cfg.lateral_channels, {r, 1, 1}, {{r, 1, 1}, {0, 0, 0}}, rng);
  p.lateral_up = nn::make_conv_transpose3d(ps, "fusion.lateral_up", channels_rgb, cfg.lateral_channels, {r, 1, 1},
                                           {{r, 1, 1}, {0, 0, 0}}, rng);
  return p;
}

Var pool_project(const Var& x, const nn::Conv3d& proj) {
  if (x->value.rank() != 5) throw ValidationError("pool_project: expected (N,C,T,H,W), got " + shape_str(x->value.shape()));
  return ops::spatial_max_pool(proj(x));
}

Var attention_scores(const Var& query_desc, const Var& key_desc, const nn::Affine& wq, const nn::Affine& wk) {
  const Var q = wq(query_desc);
  const Var k = wk(key_desc);
  const double d = static_cast<double>(q->value.shape().back());
  return ops::scale(ops::matmul_nt(q, k), 1.0 / std::sqrt(d));
}

namespace {

Var attend(const Var& own, const Var& other, const nn::Affine& wq, const nn::Affine& wk, const nn::Affine& wv) {
  const Var weights = ops::softmax_lastdim(attention_scores(own, other, wq, wk));
  return ops::matmul(weights, wv(other));
}

}  // namespace

std::pair<Var, Var> channel_cross_attention(const Var& desc_rgb, const Var& desc_pose, const FusionParams& p,
                                            AttentionSource source) {
  if (desc_rgb->value.rank() != 3 || desc_rgb->value.shape() != desc_pose->value.shape()) {
    throw ValidationError("channel_cross_attention: descriptors must share shape (N,C',T'), got " +
                          shape_str(desc_rgb->value.shape()) + " and " + shape_str(desc_pose->value.shape()));
  }
  switch (source) {
    case AttentionSource::cross:
      // K and V for a modality come from the other one, through the other's own key/value maps.
      return {attend(desc_rgb, desc_pose, p.q_rgb, p.k_pose, p.v_pose),
              attend(desc_pose, desc_rgb, p.q_pose, p.k_rgb, p.v_rgb)};
    case AttentionSource::self:
      return {attend(desc_rgb, desc_rgb, p.q_rgb, p.k_rgb, p.v_rgb),
              attend(desc_pose, desc_pose, p.q_pose, p.k_pose, p.v_pose)};
    case AttentionSource::none: break;
  }
  throw ValidationError("channel_cross_attention called with attention disabled");
}

Var gate_modulate(const Var& attn, const Var& x, const nn::Affine& gate, GateActivation act) {
  if (attn->value.rank() != 3 || x->value.rank() != 5 || attn->value.dim(0) != x->value.dim(0)) {
    throw ValidationError("gate_modulate: attention " + shape_str(attn->value.shape()) + " does not match input " +
                          shape_str(x->value.shape()));
  }
  Var g = gate(ops::mean_lastdim(attn));
  if (act == GateActivation::sigmoid) g = ops::sigmoid(g);
  return ops::add(ops::scale_channels(x, g), x);
}

std::pair<Var, Var> lateral_concat(const Var& x_rgb, const Var& x_pose, const Var& mod_rgb, const Var& mod_pose,
                                   const FusionParams& p) {
  const std::size_t t_rgb = x_rgb->value.dim(2), t_pose = x_pose->value.dim(2);
  if (t_pose != static_cast<std::size_t>(p.stride_ratio) * t_rgb) {
    throw ValidationError("temporal contract violated: pose length " + std::to_string(t_pose) + " != " +
                          std::to_string(p.stride_ratio) + " x rgb length " + std::to_string(t_rgb));
  }
  return {ops::concat_channels(p.lateral_down(x_pose), mod_rgb), ops::concat_channels(p.lateral_up(x_rgb), mod_pose)};
}

FusionState exchange(const Var& x_rgb, const Var& x_pose, const FusionParams& p, const FusionConfig& cfg) {
  FusionState s;
  s.x_rgb = x_rgb;
  s.x_pose = x_pose;
  s.mod_rgb = x_rgb;
  s.mod_pose = x_pose;
  if (cfg.source != AttentionSource::none) {
    s.desc_rgb = pool_project(x_rgb, p.proj_rgb);
    s.desc_pose = pool_project(x_pose, p.proj_pose);
    std::tie(s.attn_rgb, s.attn_pose) = channel_cross_attention(s.desc_rgb, s.desc_pose, p, cfg.source);
    s.mod_rgb = gate_modulate(s.attn_rgb, x_rgb, p.gate_rgb, cfg.gate_activation);
    s.mod_pose = gate_modulate(s.attn_pose, x_pose, p.gate_pose, cfg.gate_activation);
  }
  std::tie(s.out_rgb, s.out_pose) = lateral_concat(x_rgb, x_pose, s.mod_rgb, s.mod_pose, p);
  return s;
}

}  // namespace mgc::xfuse
