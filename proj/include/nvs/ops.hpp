#pragma once

#include "nvs/autograd.hpp"

#include <vector>

/// Differentiable tensor operations over the reverse-mode tape.
///
/// Feature maps are NHWC; "last axis" operations act on channels.
/// Instantiated for float and double.
namespace nvs::ag {

// Elementwise.
template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> scale(const Var<S>& a, S factor);
template <typename S> Var<S> add_scalar(const Var<S>& a, S offset);
/// a * c for a constant (non-differentiable) tensor c of the same shape.
template <typename S> Var<S> mul_const(const Var<S>& a, const Tensor<S>& c);
template <typename S> Var<S> swish(const Var<S>& a);
template <typename S> Var<S> relu(const Var<S>& a);
template <typename S> Var<S> sigmoid(const Var<S>& a);
template <typename S> Var<S> softplus(const Var<S>& a);

// Reductions.
template <typename S> Var<S> sum(const Var<S>& a);
template <typename S> Var<S> mean(const Var<S>& a);
/// Mean of (a - target)^2 over all elements.
template <typename S> Var<S> mse(const Var<S>& a, const Tensor<S>& target);
/// Sums columns of an (M, E) matrix into (M, groups) by `group_of[e]`.
template <typename S> Var<S> group_sum_cols(const Var<S>& a, const std::vector<int>& group_of, int groups);

// Shape manipulation.
template <typename S> Var<S> reshape(const Var<S>& a, Shape shape);
template <typename S> Var<S> concat_last(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> slice_last(const Var<S>& a, Index begin, Index count);
/// out[i] = a[index[i]] along the leading axis.
template <typename S> Var<S> gather_rows(const Var<S>& a, const std::vector<Index>& index);
/// Row i of `a` added into row index[i] of a zero tensor with `rows` rows.
template <typename S> Var<S> scatter_rows(const Var<S>& a, const std::vector<Index>& index, Index rows);
/// Concatenates along the leading axis.
template <typename S> Var<S> concat_rows(const std::vector<Var<S>>& parts);

// Linear algebra.
/// a (M,K) times b (K,N), or b^T when `transpose_b` (b is then (N,K)).
template <typename S> Var<S> matmul(const Var<S>& a, const Var<S>& b, bool transpose_b = false);
/// x (..., Cin) W (Cin, Cout) + bias (Cout). `bias` may be empty.
template <typename S> Var<S> dense(const Var<S>& x, const Var<S>& weight, const Var<S>& bias);
/// x (rows, C) * v (C) broadcast over rows.
template <typename S> Var<S> mul_row(const Var<S>& x, const Var<S>& v);
/// x (N, H, W, C) + v (N, C) broadcast over space.
template <typename S> Var<S> add_spatial(const Var<S>& x, const Var<S>& v);
/// x (N, ...) + v (...) broadcast over the leading axis.
template <typename S> Var<S> add_broadcast(const Var<S>& x, const Var<S>& v);

// Convolutional network layers.
/// 2-D convolution, NHWC input, kernel (k, k, Cin, Cout), SAME padding.
template <typename S> Var<S> conv2d(const Var<S>& x, const Var<S>& kernel, const Var<S>& bias, int stride = 1);
template <typename S>
Var<S> group_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, int groups, S epsilon = S(1e-6));
template <typename S> Var<S> avg_pool2(const Var<S>& x);
template <typename S> Var<S> upsample2(const Var<S>& x);
/// Multi-head scaled dot-product attention. q (N, Lq, C), k/v (N, Lk, C);
/// head h owns channels [h*C/heads, (h+1)*C/heads).
template <typename S> Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int heads);

}  // namespace nvs::ag
