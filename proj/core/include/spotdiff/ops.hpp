#pragma once

#include <vector>

#include "spotdiff/rng.hpp"
#include "spotdiff/tensor.hpp"

namespace spotdiff::ops {

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor silu(const Tensor& x);

/// x + y where y's shape equals x.shape()[axis, axis + y.ndim()) and is
/// broadcast over the remaining leading and trailing axes.
Tensor add_broadcast(const Tensor& x, const Tensor& y, int axis);
Tensor mul_broadcast(const Tensor& x, const Tensor& y, int axis);

// Reductions to a scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor abs_sum(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);          // [n,k] x [k,m]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x[...,in] w[in,out] b[out] (b optional)
Tensor bmm(const Tensor& a, const Tensor& b);             // [B,n,k] x [B,k,m]
Tensor transpose_last2(const Tensor& x);                   // [B,n,m] -> [B,m,n]
Tensor softmax_last(const Tensor& x);

// Image ops, NCHW layout.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding);
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor global_avg_pool(const Tensor& x);                   // [B,C,H,W] -> [B,C]
Tensor upsample2x(const Tensor& x);                        // nearest neighbour

// Shape manipulation.
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int length);
/// Swaps axes 1 and 2 of a rank-3 tensor: [B,C,N] -> [B,N,C].
Tensor swap_axes12(const Tensor& x);

/// Inverted dropout. Identity when !training or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

/// Row-wise v - (<v,u>/|u|^2) u for v,u of shape [R,d]. Rows with |u|^2 < eps
/// pass v through unchanged (and contribute no gradient to u).
Tensor project_out_rows(const Tensor& v, const Tensor& u, double eps);

/// Row-wise cosine similarity of a,b [R,d] -> [R]. Rows where either norm is
/// zero evaluate to 0 with zero gradient; the count of such rows is added to
/// *zero_rows when provided.
Tensor cosine_rows(const Tensor& a, const Tensor& b, int* zero_rows = nullptr);

/// Rows scaled to unit length; zero rows stay zero.
Tensor normalize_rows(const Tensor& x);

/// Mean softmax cross-entropy of logits [B,K] against integer labels.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace spotdiff::ops
