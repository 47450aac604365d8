#pragma once

#include <array>
#include <span>

#include "mgc/autograd.hpp"

namespace mgc::ops {

using ag::Var;

// Kernel extent comes from the weight tensor; geometry is per axis (t, h, w).
struct ConvGeometry {
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> pad{0, 0, 0};
};

// x (N,Ci,T,H,W), w (Co,Ci,kt,kh,kw), bias (Co) or null.
Var conv3d(const Var& x, const Var& w, const Var& bias, const ConvGeometry& g);
// x (N,Ci,T,H,W), w (Ci,Co,kt,kh,kw); out = (in-1)*stride - 2*pad + k per axis.
Var conv_transpose3d(const Var& x, const Var& w, const Var& bias, const ConvGeometry& g);

std::array<std::size_t, 3> conv_output_extent(std::array<std::size_t, 3> in, std::array<std::size_t, 3> kernel,
                                              const ConvGeometry& g);
std::array<std::size_t, 3> conv_transpose_output_extent(std::array<std::size_t, 3> in,
                                                        std::array<std::size_t, 3> kernel, const ConvGeometry& g);

// Per-sample normalisation over channel groups; x (N,C,...), gamma/beta (C).
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);

Var silu(const Var& x);
Var sigmoid(const Var& x);

Var add(const Var& a, const Var& b);
Var scale(const Var& x, double s);
// y[n,c,...] = x[n,c,...] * g[n,c]
Var scale_channels(const Var& x, const Var& g);
// Concatenates (N,Ca,...) and (N,Cb,...) along axis 1.
Var concat_channels(const Var& a, const Var& b);

// (N,C,T,H,W) -> (N,C,T): max over H and W.
Var spatial_max_pool(const Var& x);
// (N,C,...) -> (N,C)
Var global_max_pool(const Var& x);
Var global_avg_pool(const Var& x);

// Affine map over the last axis: x (...,I), w (O,I), bias (O) or null -> (...,O).
Var linear(const Var& x, const Var& w, const Var& bias);

// a (B,M,K), b (B,N,K) -> (B,M,N) = a b^T
Var matmul_nt(const Var& a, const Var& b);
// a (B,M,K), b (B,K,N) -> (B,M,N)
Var matmul(const Var& a, const Var& b);

Var softmax_lastdim(const Var& x);
Var mean_lastdim(const Var& x);

// Mean cross-entropy of softmax(logits) against integer labels.
Var cross_entropy(const Var& logits, std::span<const int> labels);

// Scalar sum(weights * x); weights is a constant with x's shape.
Var weighted_sum(const Var& x, const Tensor& weights);

// Row-wise softmax without graph capture; ties in later argmax go to the lowest index.
Tensor softmax_rows(const Tensor& logits);

}  // namespace mgc::ops
