#pragma once

// Differentiable primitives. Shapes follow numpy conventions: binary
// elementwise ops broadcast right-aligned, reductions and softmax act on the
// last axis unless an axis is given, and negative axes count from the end.

#include "gtmm/tensor/tensor.hpp"

#include <vector>

namespace gtmm {

// Elementwise, broadcasting.
template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b);

// Tensor-scalar.
template <typename S> Tensor<S> scale(const Tensor<S>& a, S factor);
template <typename S> Tensor<S> add_scalar(const Tensor<S>& a, S offset);
template <typename S> Tensor<S> neg(const Tensor<S>& a);

// Unary.
template <typename S> Tensor<S> sigmoid(const Tensor<S>& x);
template <typename S> Tensor<S> tanh(const Tensor<S>& x);
template <typename S> Tensor<S> softplus(const Tensor<S>& x);
template <typename S> Tensor<S> relu(const Tensor<S>& x);
template <typename S> Tensor<S> exp(const Tensor<S>& x);
template <typename S> Tensor<S> log(const Tensor<S>& x);
template <typename S> Tensor<S> square(const Tensor<S>& x);
template <typename S> Tensor<S> sqrt(const Tensor<S>& x);
/// Gradient passes only where lo <= x <= hi.
template <typename S> Tensor<S> clamp(const Tensor<S>& x, S lo, S hi);

// Linear algebra.
/// a: [..., k], b: [k, n] -> [..., n]
template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
/// a: [B, m, k] (or [B, k, m] when trans_a), b: [B, k, n] (or [B, n, k]) -> [B, m, n]
template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false, bool trans_b = false);

// Structure.
template <typename S> Tensor<S> reshape(const Tensor<S>& x, Shape shape);
template <typename S> Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis = -1);
template <typename S> Tensor<S> slice(const Tensor<S>& x, int axis, Index start, Index length);

// Reductions.
template <typename S> Tensor<S> sum(const Tensor<S>& x);
template <typename S> Tensor<S> mean(const Tensor<S>& x);
/// Removes `axis` unless keep_dim, in which case it becomes size 1.
template <typename S> Tensor<S> sum(const Tensor<S>& x, int axis, bool keep_dim = false);

template <typename S> Tensor<S> softmax(const Tensor<S>& x);

/// memory: [B, L, W], keys: [B, R, W] -> [B, R, L] cosine similarities,
/// <m, k> / ((|m| + eps) (|k| + eps)).
template <typename S>
Tensor<S> cosine_scores(const Tensor<S>& memory, const Tensor<S>& keys, S eps = S(1e-8));

struct Conv2dGeometry {
  Index stride = 1;
  Index padding = 0;
};

/// x: [N, C, H, W], weight: [O, C, KH, KW], bias: [O] or undefined.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                 Conv2dGeometry geometry);

/// Adjoint of conv2d. x: [N, C, H, W], weight: [C, O, KH, KW], bias: [O] or
/// undefined. Output spatial size is (H - 1) * stride - 2 * padding + KH.
template <typename S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                           Conv2dGeometry geometry);

/// Sorted free-list allocation over usage in [0, 1] along the last axis:
/// with slots ordered by ascending usage (ties toward lower index),
/// a[j] = (1 - u[j]) * prod of u over the slots ordered before j.
template <typename S> Tensor<S> least_used_allocation(const Tensor<S>& usage);

template <typename S> Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S> Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a) { return neg(a); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, S s) { return scale(a, s); }
template <typename S> Tensor<S> operator*(S s, const Tensor<S>& a) { return scale(a, s); }
template <typename S> Tensor<S> operator+(const Tensor<S>& a, S s) { return add_scalar(a, s); }
template <typename S> Tensor<S> operator-(S s, const Tensor<S>& a) { return add_scalar(neg(a), s); }

}  // namespace gtmm
