#include "mgc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mgc/errors.hpp"

namespace mgc::ops {

namespace {

// Dimensions of a forward convolution: input (N,Ci,T,H,W) -> output (N,Co,OT,OH,OW).
struct ConvDims {
  std::size_t n, ci, co;
  std::array<std::size_t, 3> in, out, k;
  std::array<int, 3> stride, pad;
};

// Range of output positions o for which i = o*s + k - p lands in [0, in).
inline void valid_range(std::size_t in, std::size_t out, std::size_t k, int s, int p, std::size_t& lo,
                        std::size_t& hi) {
  const long kk = static_cast<long>(k), pp = p, ss = s;
  long l = pp - kk;  // need o*s >= p - k
  l = l <= 0 ? 0 : (l + ss - 1) / ss;
  long h = static_cast<long>(in) - 1 + pp - kk;  // need o*s <= in - 1 + p - k
  h = h < 0 ? -1 : h / ss;
  h = std::min<long>(h, static_cast<long>(out) - 1);
  lo = static_cast<std::size_t>(l);
  hi = h < l ? lo : static_cast<std::size_t>(h + 1);  // exclusive
}

// y += conv(x, w)
void conv_forward_kernel(const ConvDims& d, const double* x, const double* w, double* y) {
  const std::size_t in_vol = d.in[0] * d.in[1] * d.in[2];
  const std::size_t out_vol = d.out[0] * d.out[1] * d.out[2];
  const std::size_t kvol = d.k[0] * d.k[1] * d.k[2];
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t co = 0; co < d.co; ++co) {
      double* yc = y + (n * d.co + co) * out_vol;
      for (std::size_t ci = 0; ci < d.ci; ++ci) {
        const double* xc = x + (n * d.ci + ci) * in_vol;
        const double* wk = w + (co * d.ci + ci) * kvol;
        for (std::size_t kt = 0; kt < d.k[0]; ++kt) {
          std::size_t t0, t1;
          valid_range(d.in[0], d.out[0], kt, d.stride[0], d.pad[0], t0, t1);
          for (std::size_t kh = 0; kh < d.k[1]; ++kh) {
            std::size_t h0, h1;
            valid_range(d.in[1], d.out[1], kh, d.stride[1], d.pad[1], h0, h1);
            for (std::size_t kw = 0; kw < d.k[2]; ++kw) {
              std::size_t w0, w1;
              valid_range(d.in[2], d.out[2], kw, d.stride[2], d.pad[2], w0, w1);
              const double wv = wk[(kt * d.k[1] + kh) * d.k[2] + kw];
              for (std::size_t ot = t0; ot < t1; ++ot) {
                const std::size_t it = ot * d.stride[0] + kt - d.pad[0];
                for (std::size_t oh = h0; oh < h1; ++oh) {
                  const std::size_t ih = oh * d.stride[1] + kh - d.pad[1];
                  const double* xr = xc + (it * d.in[1] + ih) * d.in[2];
                  const std::size_t c0 = kw - static_cast<std::size_t>(d.pad[2]);
                  double* yr = yc + (ot * d.out[1] + oh) * d.out[2];
                  const std::size_t sw = d.stride[2];
                  for (std::size_t ow = w0; ow < w1; ++ow) yr[ow] += wv * xr[ow * sw + c0];
                }
              }
            }
          }
        }
      }
    }
  }
}

// dx += conv^T(dy, w)
void conv_backward_input_kernel(const ConvDims& d, const double* dy, const double* w, double* dx) {
  const std::size_t in_vol = d.in[0] * d.in[1] * d.in[2];
  const std::size_t out_vol = d.out[0] * d.out[1] * d.out[2];
  const std::size_t kvol = d.k[0] * d.k[1] * d.k[2];
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t co = 0; co < d.co; ++co) {
      const double* gc = dy + (n * d.co + co) * out_vol;
      for (std::size_t ci = 0; ci < d.ci; ++ci) {
        double* xc = dx + (n * d.ci + ci) * in_vol;
        const double* wk = w + (co * d.ci + ci) * kvol;
        for (std::size_t kt = 0; kt < d.k[0]; ++kt) {
          std::size_t t0, t1;
          valid_range(d.in[0], d.out[0], kt, d.stride[0], d.pad[0], t0, t1);
          for (std::size_t kh = 0; kh < d.k[1]; ++kh) {
            std::size_t h0, h1;
            valid_range(d.in[1], d.out[1], kh, d.stride[1], d.pad[1], h0, h1);
            for (std::size_t kw = 0; kw < d.k[2]; ++kw) {
              std::size_t w0, w1;
              valid_range(d.in[2], d.out[2], kw, d.stride[2], d.pad[2], w0, w1);
              const double wv = wk[(kt * d.k[1] + kh) * d.k[2] + kw];
              for (std::size_t ot = t0; ot < t1; ++ot) {
                const std::size_t it = ot * d.stride[0] + kt - d.pad[0];
                for (std::size_t oh = h0; oh < h1; ++oh) {
                  const std::size_t ih = oh * d.stride[1] + kh - d.pad[1];
                  double* xr = xc + (it * d.in[1] + ih) * d.in[2];
                  const std::size_t c0 = kw - static_cast<std::size_t>(d.pad[2]);
                  const double* gr = gc + (ot * d.out[1] + oh) * d.out[2];
                  const std::size_t sw = d.stride[2];
                  for (std::size_t ow = w0; ow < w1; ++ow) xr[ow * sw + c0] += wv * gr[ow];
                }
              }
            }
          }
        }
      }
    }
  }
}

// dw += correlation(dy, x)
void conv_backward_weight_kernel(const ConvDims& d, const double* dy, const double* x, double* dw) {
  const std::size_t in_vol = d.in[0] * d.in[1] * d.in[2];
  const std::size_t out_vol = d.out[0] * d.out[1] * d.out[2];
  const std::size_t kvol = d.k[0] * d.k[1] * d.k[2];
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t co = 0; co < d.co; ++co) {
      const double* gc = dy + (n * d.co + co) * out_vol;
      for (std::size_t ci = 0; ci < d.ci; ++ci) {
        const double* xc = x + (n * d.ci + ci) * in_vol;
        double* wk = dw + (co * d.ci + ci) * kvol;
        for (std::size_t kt = 0; kt < d.k[0]; ++kt) {
          std::size_t t0, t1;
          valid_range(d.in[0], d.out[0], kt, d.stride[0], d.pad[0], t0, t1);
          for (std::size_t kh = 0; kh < d.k[1]; ++kh) {
            std::size_t h0, h1;
            valid_range(d.in[1], d.out[1], kh, d.stride[1], d.pad[1], h0, h1);
            for (std::size_t kw = 0; kw < d.k[2]; ++kw) {
              std::size_t w0, w1;
              valid_range(d.in[2], d.out[2], kw, d.stride[2], d.pad[2], w0, w1);
              double acc = 0.0;
              for (std::size_t ot = t0; ot < t1; ++ot) {
                const std::size_t it = ot * d.stride[0] + kt - d.pad[0];
                for (std::size_t oh = h0; oh < h1; ++oh) {
                  const std::size_t ih = oh * d.stride[1] + kh - d.pad[1];
                  const double* xr = xc + (it * d.in[1] + ih) * d.in[2];
                  const std::size_t c0 = kw - static_cast<std::size_t>(d.pad[2]);
                  const double* gr = gc + (ot * d.out[1] + oh) * d.out[2];
                  const std::size_t sw = d.stride[2];
                  for (std::size_t ow = w0; ow < w1; ++ow) acc += gr[ow] * xr[ow * sw + c0];
                }
              }
              wk[(kt * d.k[1] + kh) * d.k[2] + kw] += acc;
            }
          }
        }
      }
    }
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* arg) {
  if (t.rank() != rank) {
    throw ValidationError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) + ", got " +
                          shape_str(t.shape()));
  }
}

void add_bias_channels(Tensor& y, const Tensor& bias) {
  const std::size_t n = y.dim(0), c = y.dim(1), vol = y.numel() / (n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      double* p = y.data() + (i * c + j) * vol;
      for (std::size_t v = 0; v < vol; ++v) p[v] += bias[j];
    }
}

void accumulate_bias_grad(const Tensor& g, Tensor& db) {
  const std::size_t n = g.dim(0), c = g.dim(1), vol = g.numel() / (n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double* p = g.data() + (i * c + j) * vol;
      double acc = 0.0;
      for (std::size_t v = 0; v < vol; ++v) acc += p[v];
      db[j] += acc;
    }
}

std::array<std::size_t, 3> spatial3(const Tensor& t) { return {t.dim(2), t.dim(3), t.dim(4)}; }

}  // namespace

std::array<std::size_t, 3> conv_output_extent(std::array<std::size_t, 3> in, std::array<std::size_t, 3> kernel,
                                              const ConvGeometry& g) {
  std::array<std::size_t, 3> out{};
  for (int a = 0; a < 3; ++a) {
    const long span = static_cast<long>(in[a]) + 2L * g.pad[a] - static_cast<long>(kernel[a]);
    if (g.stride[a] <= 0 || span < 0) throw ValidationError("conv3d: kernel larger than padded input");
    out[a] = static_cast<std::size_t>(span / g.stride[a] + 1);
  }
  return out;
}

std::array<std::size_t, 3> conv_transpose_output_extent(std::array<std::size_t, 3> in,
                                                        std::array<std::size_t, 3> kernel, const ConvGeometry& g) {
  std::array<std::size_t, 3> out{};
  for (int a = 0; a < 3; ++a) {
    const long v = (static_cast<long>(in[a]) - 1) * g.stride[a] - 2L * g.pad[a] + static_cast<long>(kernel[a]);
    if (g.stride[a] <= 0 || v <= 0) throw ValidationError("conv_transpose3d: empty output");
    out[a] = static_cast<std::size_t>(v);
  }
  return out;
}

Var conv3d(const Var& x, const Var& w, const Var& bias, const ConvGeometry& g) {
  require_rank(x->value, 5, "conv3d", "input");
  require_rank(w->value, 5, "conv3d", "weight");
  if (w->value.dim(1) != x->value.dim(1)) {
    throw ValidationError("conv3d: weight expects " + std::to_string(w->value.dim(1)) + " input channels, input has " +
                          std::to_string(x->value.dim(1)));
  }
  ConvDims d{x->value.dim(0), x->value.dim(1), w->value.dim(0), spatial3(x->value), {}, spatial3(w->value),
             g.stride, g.pad};
  d.out = conv_output_extent(d.in, d.k, g);
  Tensor y({d.n, d.co, d.out[0], d.out[1], d.out[2]});
  conv_forward_kernel(d, x->value.data(), w->value.data(), y.data());
  if (bias) add_bias_channels(y, bias->value);
  std::vector<Var> inputs{x, w};
  if (bias) inputs.push_back(bias);
  return ag::make_op(std::move(y), std::move(inputs), [d](ag::Node& self) {
    const auto& xin = self.inputs[0];
    const auto& win = self.inputs[1];
    if (xin->requires_grad) conv_backward_input_kernel(d, self.grad.data(), win->value.data(), xin->grad_buffer().data());
    if (win->requires_grad) conv_backward_weight_kernel(d, self.grad.data(), xin->value.data(), win->grad_buffer().data());
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) accumulate_bias_grad(self.grad, self.inputs[2]->grad_buffer());
  });
}

Var conv_transpose3d(const Var& x, const Var& w, const Var& bias, const ConvGeometry& g) {
  require_rank(x->value, 5, "conv_transpose3d", "input");
  require_rank(w->value, 5, "conv_transpose3d", "weight");
  if (w->value.dim(0) != x->value.dim(1)) throw ValidationError("conv_transpose3d: input channel mismatch");
  // Expressed as the adjoint of a forward conv whose input is our output.
  const auto out = conv_transpose_output_extent(spatial3(x->value), spatial3(w->value), g);
  ConvDims d{x->value.dim(0), w->value.dim(1), w->value.dim(0), out, spatial3(x->value), spatial3(w->value),
             g.stride, g.pad};
  Tensor y({d.n, d.ci, out[0], out[1], out[2]});
  conv_backward_input_kernel(d, x->value.data(), w->value.data(), y.data());
  if (bias) add_bias_channels(y, bias->value);
  std::vector<Var> inputs{x, w};
  if (bias) inputs.push_back(bias);
  return ag::make_op(std::move(y), std::move(inputs), [d](ag::Node& self) {
    const auto& xin = self.inputs[0];
    const auto& win = self.inputs[1];
    if (xin->requires_grad) conv_forward_kernel(d, self.grad.data(), win->value.data(), xin->grad_buffer().data());
    if (win->requires_grad) conv_backward_weight_kernel(d, xin->value.data(), self.grad.data(), win->grad_buffer().data());
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) accumulate_bias_grad(self.grad, self.inputs[2]->grad_buffer());
  });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
  const Tensor& xv = x->value;
  if (xv.rank() < 2) throw ValidationError("group_norm: input needs a channel axis");
  const std::size_t n = xv.dim(0), c = xv.dim(1), vol = xv.numel() / (n * c);
  if (groups <= 0 || c % static_cast<std::size_t>(groups) != 0) {
    throw ValidationError("group_norm: " + std::to_string(c) + " channels not divisible into " + std::to_string(groups) +
                          " groups");
  }
  require_shape(gamma->value, {c}, "group_norm gamma");
  require_shape(beta->value, {c}, "group_norm beta");
  const std::size_t cpg = c / groups, gsize = cpg * vol;
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(n * groups);
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t off = (i * c + gi * cpg) * vol;
      double mean = 0.0;
      for (std::size_t j = 0; j < gsize; ++j) mean += xv[off + j];
      mean /= static_cast<double>(gsize);
      double var = 0.0;
      for (std::size_t j = 0; j < gsize; ++j) var += (xv[off + j] - mean) * (xv[off + j] - mean);
      var /= static_cast<double>(gsize);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[i * groups + gi] = is;
      for (std::size_t j = 0; j < gsize; ++j) {
        const std::size_t ch = gi * cpg + j / vol;
        const double h = (xv[off + j] - mean) * is;
        xhat[off + j] = h;
        y[off + j] = gamma->value[ch] * h + beta->value[ch];
      }
    }
  }
  return ag::make_op(std::move(y), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, vol, cpg, groups](ag::Node& self) {
                       const Tensor& g = self.grad;
                       const Tensor& gam = self.inputs[1]->value;
                       const std::size_t gsize = cpg * vol;
                       if (self.inputs[1]->requires_grad || self.inputs[2]->requires_grad) {
                         Tensor& dg = self.inputs[1]->grad_buffer();
                         Tensor& db = self.inputs[2]->grad_buffer();
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t ch = 0; ch < c; ++ch) {
                             const std::size_t off = (i * c + ch) * vol;
                             double a = 0.0, b = 0.0;
                             for (std::size_t v = 0; v < vol; ++v) {
                               a += g[off + v] * xhat[off + v];
                               b += g[off + v];
                             }
                             dg[ch] += a;
                             db[ch] += b;
                           }
                       }
                       if (!self.inputs[0]->requires_grad) return;
                       Tensor& dx = self.inputs[0]->grad_buffer();
                       for (std::size_t i = 0; i < n; ++i) {
                         for (int gi = 0; gi < groups; ++gi) {
                           const std::size_t off = (i * c + gi * cpg) * vol;
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t j = 0; j < gsize; ++j) {
                             const double dh = g[off + j] * gam[gi * cpg + j / vol];
                             m1 += dh;
                             m2 += dh * xhat[off + j];
                           }
                           m1 /= static_cast<double>(gsize);
                           m2 /= static_cast<double>(gsize);
                           const double is = inv_std[i * groups + gi];
                           for (std::size_t j = 0; j < gsize; ++j) {
                             const double dh = g[off + j] * gam[gi * cpg + j / vol];
                             dx[off + j] += is * (dh - m1 - xhat[off + j] * m2);
                           }
                         }
                       }
                     });
}

Var silu(const Var& x) {
  Tensor y(x->value.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) {
    const double v = x->value[i];
    y[i] = v / (1.0 + std::exp(-v));
  }
  return ag::make_op(std::move(y), {x}, [](ag::Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < xv.numel(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xv[i]));
      dx[i] += self.grad[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor y(x->value.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = 1.0 / (1.0 + std::exp(-x->value[i]));
  return ag::make_op(y, {x}, [y](ag::Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < y.numel(); ++i) dx[i] += self.grad[i] * y[i] * (1.0 - y[i]);
  });
}

Var add(const Var& a, const Var& b) {
  require_shape(b->value, a->value.shape(), "add");
  Tensor y = a->value;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += b->value[i];
  return ag::make_op(std::move(y), {a, b}, [](ag::Node& self) {
    for (int k = 0; k < 2; ++k) {
      if (!self.inputs[k]->requires_grad) continue;
      Tensor& d = self.inputs[k]->grad_buffer();
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] += self.grad[i];
    }
  });
}

Var scale(const Var& x, double s) {
  Tensor y = x->value;
  for (auto& v : y.storage()) v *= s;
  return ag::make_op(std::move(y), {x}, [s](ag::Node& self) {
    Tensor& d = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < d.numel(); ++i) d[i] += s * self.grad[i];
  });
}

Var scale_channels(const Var& x, const Var& g) {
  const Tensor& xv = x->value;
  const std::size_t n = xv.dim(0), c = xv.dim(1), vol = xv.numel() / (n * c);
  require_shape(g->value, {n, c}, "scale_channels gate");
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < n * c; ++i)
    for (std::size_t v = 0; v < vol; ++v) y[i * vol + v] = xv[i * vol + v] * g->value[i];
  return ag::make_op(std::move(y), {x, g}, [n, c, vol](ag::Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& gv = self.inputs[1]->value;
    const bool dx_needed = self.inputs[0]->requires_grad, dg_needed = self.inputs[1]->requires_grad;
    for (std::size_t i = 0; i < n * c; ++i) {
      double acc = 0.0;
      for (std::size_t v = 0; v < vol; ++v) {
        const double gr = self.grad[i * vol + v];
        if (dx_needed) self.inputs[0]->grad_buffer()[i * vol + v] += gr * gv[i];
        acc += gr * xv[i * vol + v];
      }
      if (dg_needed) self.inputs[1]->grad_buffer()[i] += acc;
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const Tensor &av = a->value, &bv = b->value;
  if (av.rank() != bv.rank() || av.dim(0) != bv.dim(0) ||
      !std::equal(av.shape().begin() + 2, av.shape().end(), bv.shape().begin() + 2)) {
    throw ValidationError("concat_channels: incompatible shapes " + shape_str(av.shape()) + " and " +
                          shape_str(bv.shape()));
  }
  const std::size_t n = av.dim(0), ca = av.dim(1), cb = bv.dim(1), vol = av.numel() / (n * ca);
  Shape s = av.shape();
  s[1] = ca + cb;
  Tensor y(s);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(av.data() + i * ca * vol, ca * vol, y.data() + i * (ca + cb) * vol);
    std::copy_n(bv.data() + i * cb * vol, cb * vol, y.data() + (i * (ca + cb) + ca) * vol);
  }
  return ag::make_op(std::move(y), {a, b}, [n, ca, cb, vol](ag::Node& self) {
    for (std::size_t i = 0; i < n; ++i) {
      if (self.inputs[0]->requires_grad) {
        double* d = self.inputs[0]->grad_buffer().data() + i * ca * vol;
        const double* g = self.grad.data() + i * (ca + cb) * vol;
        for (std::size_t v = 0; v < ca * vol; ++v) d[v] += g[v];
      }
      if (self.inputs[1]->requires_grad) {
        double* d = self.inputs[1]->grad_buffer().data() + i * cb * vol;
        const double* g = self.grad.data() + (i * (ca + cb) + ca) * vol;
        for (std::size_t v = 0; v < cb * vol; ++v) d[v] += g[v];
      }
    }
  });
}

namespace {

// Max over contiguous blocks of `block` elements; argmax keeps the first maximum.
Var block_max(const Var& x, Shape out_shape, std::size_t block) {
  const std::size_t rows = x->value.numel() / block;
  Tensor y(std::move(out_shape));
  std::vector<std::size_t> arg(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = x->value.data() + r * block;
    std::size_t best = 0;
    for (std::size_t j = 1; j < block; ++j)
      if (p[j] > p[best]) best = j;
    arg[r] = r * block + best;
    y[r] = p[best];
  }
  return ag::make_op(std::move(y), {x}, [arg = std::move(arg)](ag::Node& self) {
    Tensor& d = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < arg.size(); ++r) d[arg[r]] += self.grad[r];
  });
}

}  // namespace

Var spatial_max_pool(const Var& x) {
  require_rank(x->value, 5, "spatial_max_pool", "input");
  const auto& s = x->value.shape();
  return block_max(x, {s[0], s[1], s[2]}, s[3] * s[4]);
}

Var global_max_pool(const Var& x) {
  const auto& s = x->value.shape();
  if (s.size() < 3) throw ValidationError("global_max_pool: input needs spatial axes");
  return block_max(x, {s[0], s[1]}, x->value.numel() / (s[0] * s[1]));
}

Var global_avg_pool(const Var& x) {
  const auto& s = x->value.shape();
  if (s.size() < 3) throw ValidationError("global_avg_pool: input needs spatial axes");
  const std::size_t rows = s[0] * s[1], block = x->value.numel() / rows;
  Tensor y({s[0], s[1]});
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < block; ++j) acc += x->value[r * block + j];
    y[r] = acc / static_cast<double>(block);
  }
  return ag::make_op(std::move(y), {x}, [rows, block](ag::Node& self) {
    Tensor& d = self.inputs[0]->grad_buffer();
    const double inv = 1.0 / static_cast<double>(block);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < block; ++j) d[r * block + j] += self.grad[r] * inv;
  });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
  require_rank(w->value, 2, "linear", "weight");
  const std::size_t in = w->value.dim(1), out = w->value.dim(0);
  if (x->value.rank() == 0 || x->value.shape().back() != in) {
    throw ValidationError("linear: input " + shape_str(x->value.shape()) + " does not end in " + std::to_string(in));
  }
  if (bias) require_shape(bias->value, {out}, "linear bias");
  const std::size_t rows = x->value.numel() / in;
  Shape s = x->value.shape();
  s.back() = out;
  Tensor y(s);
  const double* W = w->value.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x->value.data() + r * in;
    for (std::size_t o = 0; o < out; ++o) {
      double acc = bias ? bias->value[o] : 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += W[o * in + i] * xr[i];
      y[r * out + o] = acc;
    }
  }
  std::vector<Var> inputs{x, w};
  if (bias) inputs.push_back(bias);
  return ag::make_op(std::move(y), std::move(inputs), [rows, in, out](ag::Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& wv = self.inputs[1]->value;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = self.grad.data() + r * out;
      if (self.inputs[0]->requires_grad) {
        double* dx = self.inputs[0]->grad_buffer().data() + r * in;
        for (std::size_t o = 0; o < out; ++o)
          for (std::size_t i = 0; i < in; ++i) dx[i] += g[o] * wv[o * in + i];
      }
      if (self.inputs[1]->requires_grad) {
        double* dw = self.inputs[1]->grad_buffer().data();
        for (std::size_t o = 0; o < out; ++o)
          for (std::size_t i = 0; i < in; ++i) dw[o * in + i] += g[o] * xv[r * in + i];
      }
      if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
        double* db = self.inputs[2]->grad_buffer().data();
        for (std::size_t o = 0; o < out; ++o) db[o] += g[o];
      }
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_rank(a->value, 3, "matmul_nt", "a");
  require_rank(b->value, 3, "matmul_nt", "b");
  const std::size_t B = a->value.dim(0), M = a->value.dim(1), K = a->value.dim(2), N = b->value.dim(1);
  if (b->value.dim(0) != B || b->value.dim(2) != K) throw ValidationError("matmul_nt: shape mismatch");
  Tensor y({B, M, N});
  for (std::size_t z = 0; z < B; ++z)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t n = 0; n < N; ++n) {
        double acc = 0.0;
        for (std::size_t k = 0; k < K; ++k) acc += a->value[(z * M + m) * K + k] * b->value[(z * N + n) * K + k];
        y[(z * M + m) * N + n] = acc;
      }
  return ag::make_op(std::move(y), {a, b}, [B, M, K, N](ag::Node& self) {
    const Tensor &av = self.inputs[0]->value, &bv = self.inputs[1]->value;
    for (std::size_t z = 0; z < B; ++z)
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t n = 0; n < N; ++n) {
          const double g = self.grad[(z * M + m) * N + n];
          if (self.inputs[0]->requires_grad) {
            double* da = self.inputs[0]->grad_buffer().data() + (z * M + m) * K;
            for (std::size_t k = 0; k < K; ++k) da[k] += g * bv[(z * N + n) * K + k];
          }
          if (self.inputs[1]->requires_grad) {
            double* db = self.inputs[1]->grad_buffer().data() + (z * N + n) * K;
            for (std::size_t k = 0; k < K; ++k) db[k] += g * av[(z * M + m) * K + k];
          }
        }
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a->value, 3, "matmul", "a");
  require_rank(b->value, 3, "matmul", "b");
  const std::size_t B = a->value.dim(0), M = a->value.dim(1), K = a->value.dim(2), N = b->value.dim(2);
  if (b->value.dim(0) != B || b->value.dim(1) != K) throw ValidationError("matmul: shape mismatch");
  Tensor y({B, M, N});
  for (std::size_t z = 0; z < B; ++z)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t k = 0; k < K; ++k) {
        const double av = a->value[(z * M + m) * K + k];
        for (std::size_t n = 0; n < N; ++n) y[(z * M + m) * N + n] += av * b->value[(z * K + k) * N + n];
      }
  return ag::make_op(std::move(y), {a, b}, [B, M, K, N](ag::Node& self) {
    const Tensor &av = self.inputs[0]->value, &bv = self.inputs[1]->value;
    for (std::size_t z = 0; z < B; ++z)
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t k = 0; k < K; ++k) {
          const double* g = self.grad.data() + (z * M + m) * N;
          if (self.inputs[0]->requires_grad) {
            double acc = 0.0;
            for (std::size_t n = 0; n < N; ++n) acc += g[n] * bv[(z * K + k) * N + n];
            self.inputs[0]->grad_buffer()[(z * M + m) * K + k] += acc;
          }
          if (self.inputs[1]->requires_grad) {
            double* db = self.inputs[1]->grad_buffer().data() + (z * K + k) * N;
            for (std::size_t n = 0; n < N; ++n) db[n] += av[(z * M + m) * K + k] * g[n];
          }
        }
  });
}

Var softmax_lastdim(const Var& x) {
  const std::size_t cols = x->value.shape().back(), rows = x->value.numel() / cols;
  Tensor y(x->value.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = x->value.data() + r * cols;
    const double mx = *std::max_element(p, p + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += (y[r * cols + j] = std::exp(p[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) y[r * cols + j] /= z;
  }
  return ag::make_op(y, {x}, [y, rows, cols](ag::Node& self) {
    Tensor& d = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += self.grad[r * cols + j] * y[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) d[r * cols + j] += y[r * cols + j] * (self.grad[r * cols + j] - dot);
    }
  });
}

Var mean_lastdim(const Var& x) {
  const std::size_t cols = x->value.shape().back(), rows = x->value.numel() / cols;
  Shape s(x->value.shape().begin(), x->value.shape().end() - 1);
  Tensor y(s);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < cols; ++j) acc += x->value[r * cols + j];
    y[r] = acc / static_cast<double>(cols);
  }
  return ag::make_op(std::move(y), {x}, [rows, cols](ag::Node& self) {
    Tensor& d = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < cols; ++j) d[r * cols + j] += self.grad[r] / static_cast<double>(cols);
  });
}

Tensor softmax_rows(const Tensor& logits) {
  ag::NoGradGuard guard;
  return softmax_lastdim(ag::constant(logits))->value;
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  require_rank(logits->value, 2, "cross_entropy", "logits");
  const std::size_t n = logits->value.dim(0), k = logits->value.dim(1);
  if (labels.size() != n || n == 0) throw ValidationError("cross_entropy: label count must equal batch size");
  Tensor probs = softmax_rows(logits->value);
  double loss = 0.0;
  std::vector<int> lab(labels.begin(), labels.end());
  for (std::size_t i = 0; i < n; ++i) {
    if (lab[i] < 0 || static_cast<std::size_t>(lab[i]) >= k) throw ValidationError("cross_entropy: label out of range");
    const double* p = logits->value.data() + i * k;
    const double mx = *std::max_element(p, p + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(p[j] - mx);
    loss += mx + std::log(z) - p[lab[i]];
  }
  loss /= static_cast<double>(n);
  return ag::make_op(Tensor({1}, {loss}), {logits}, [probs = std::move(probs), lab = std::move(lab), n, k](ag::Node& self) {
    Tensor& d = self.inputs[0]->grad_buffer();
    const double g = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j)
        d[i * k + j] += g * (probs[i * k + j] - (static_cast<int>(j) == lab[i] ? 1.0 : 0.0));
  });
}

Var weighted_sum(const Var& x, const Tensor& weights) {
  require_shape(weights, x->value.shape(), "weighted_sum");
  // Neumaier-compensated: finite-difference probes read this value directly.
  double acc = 0.0, comp = 0.0;
  for (std::size_t i = 0; i < weights.numel(); ++i) {
    const double term = weights[i] * x->value[i];
    const double t = acc + term;
    comp += std::abs(acc) >= std::abs(term) ? (acc - t) + term : (term - t) + acc;
    acc = t;
  }
  acc += comp;
  return ag::make_op(Tensor({1}, {acc}), {x}, [weights](ag::Node& self) {
    Tensor& d = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < weights.numel(); ++i) d[i] += self.grad[0] * weights[i];
  });
}

}  // namespace mgc::ops
