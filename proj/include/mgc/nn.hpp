#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "mgc/autograd.hpp"
#include "mgc/ops.hpp"
#include "mgc/rng.hpp"

namespace mgc::nn {

// Named, insertion-ordered parameter registry. Names are dotted paths such as
// "rgb.stage1.conv.weight"; checkpoints and the optimiser iterate this order.
class ParamStore {
 public:
  ag::Var add(const std::string& name, Tensor init);
  ag::Var get(const std::string& name) const;
  bool contains(const std::string& name) const;
  const std::vector<std::pair<std::string, ag::Var>>& entries() const { return entries_; }
  std::vector<ag::Var> vars() const;
  std::size_t total_size() const;

 private:
  std::vector<std::pair<std::string, ag::Var>> entries_;
};

struct Conv3d {
  ag::Var weight, bias;  // (Co,Ci,kt,kh,kw), (Co)
  ops::ConvGeometry geometry;
  ag::Var operator()(const ag::Var& x) const { return ops::conv3d(x, weight, bias, geometry); }
};

struct ConvTranspose3d {
  ag::Var weight, bias;  // (Ci,Co,kt,kh,kw), (Co)
  ops::ConvGeometry geometry;
  ag::Var operator()(const ag::Var& x) const { return ops::conv_transpose3d(x, weight, bias, geometry); }
};

struct Affine {
  ag::Var weight, bias;  // (O,I), (O)
  ag::Var operator()(const ag::Var& x) const { return ops::linear(x, weight, bias); }
};

struct GroupNorm {
  ag::Var gamma, beta;
  int groups = 1;
  ag::Var operator()(const ag::Var& x) const { return ops::group_norm(x, gamma, beta, groups); }
};

using Kernel = std::array<int, 3>;

// He-uniform weights, zero bias.
Conv3d make_conv3d(ParamStore& ps, const std::string& name, int in, int out, Kernel k, ops::ConvGeometry g, Rng& rng);
ConvTranspose3d make_conv_transpose3d(ParamStore& ps, const std::string& name, int in, int out, Kernel k,
                                      ops::ConvGeometry g, Rng& rng);
// Uniform(-1/sqrt(in), 1/sqrt(in)) weights, zero bias.
Affine make_affine(ParamStore& ps, const std::string& name, int in, int out, Rng& rng);
GroupNorm make_group_norm(ParamStore& ps, const std::string& name, int channels, int max_groups);

}  // namespace mgc::nn
