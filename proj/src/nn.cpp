#include "mgc/nn.hpp"

#include <cmath>
#include <numeric>

#include "mgc/errors.hpp"

namespace mgc::nn {

ag::Var ParamStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw ValidationError("duplicate parameter " + name);
  auto v = ag::parameter(std::move(init), name);
  entries_.emplace_back(name, v);
  return v;
}

ag::Var ParamStore::get(const std::string& name) const {
  for (const auto& [n, v] : entries_) {
    if (n == name) return v;
  }
  throw ValidationError("unknown parameter " + name);
}

bool ParamStore::contains(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return true;
  }
  return false;
}

std::vector<ag::Var> ParamStore::vars() const {
  std::vector<ag::Var> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.second);
  return out;
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second->value.numel();
  return n;
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

Conv3d make_conv3d(ParamStore& ps, const std::string& name, int in, int out, Kernel k, ops::ConvGeometry g, Rng& rng) {
  const double fan_in = static_cast<double>(in) * k[0] * k[1] * k[2];
  Conv3d c;
  c.weight = ps.add(name + ".weight",
                    uniform_tensor({static_cast<std::size_t>(out), static_cast<std::size_t>(in), static_cast<std::size_t>(k[0]),
                                    static_cast<std::size_t>(k[1]), static_cast<std::size_t>(k[2])},
                                   std::sqrt(6.0 / fan_in), rng));
  c.bias = ps.add(name + ".bias", Tensor({static_cast<std::size_t>(out)}));
  c.geometry = g;
  return c;
}

ConvTranspose3d make_conv_transpose3d(ParamStore& ps, const std::string& name, int in, int out, Kernel k,
                                      ops::ConvGeometry g, Rng& rng) {
  // Each output receives ceil(k/stride) taps per axis from every input channel.
  double taps = in;
  for (int a = 0; a < 3; ++a) taps *= (k[a] + g.stride[a] - 1) / g.stride[a];
  ConvTranspose3d c;
  c.weight = ps.add(name + ".weight",
                    uniform_tensor({static_cast<std::size_t>(in), static_cast<std::size_t>(out), static_cast<std::size_t>(k[0]),
                                    static_cast<std::size_t>(k[1]), static_cast<std::size_t>(k[2])},
                                   std::sqrt(6.0 / taps), rng));
  c.bias = ps.add(name + ".bias", Tensor({static_cast<std::size_t>(out)}));
  c.geometry = g;
  return c;
}

Affine make_affine(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
  Affine a;
  a.weight = ps.add(name + ".weight", uniform_tensor({static_cast<std::size_t>(out), static_cast<std::size_t>(in)},
                                                     1.0 / std::sqrt(static_cast<double>(in)), rng));
  a.bias = ps.add(name + ".bias", Tensor({static_cast<std::size_t>(out)}));
  return a;
}

GroupNorm make_group_norm(ParamStore& ps, const std::string& name, int channels, int max_groups) {
  GroupNorm n;
  n.groups = std::gcd(channels, std::max(1, max_groups));
  n.gamma = ps.add(name + ".gamma", Tensor({static_cast<std::size_t>(channels)}, 1.0));
  n.beta = ps.add(name + ".beta", Tensor({static_cast<std::size_t>(channels)}));
  return n;
}

}  // namespace mgc::nn
