#pragma once

#include <span>
#include <vector>

#include "hifuse/tensor.hpp"

namespace hifuse {

enum class ElementwiseKind { Add, Sub, Mul, ScalarMul, Sigmoid, Gelu, Relu };

/// Numpy-style broadcast of two shapes (dimensions aligned from the back;
/// a size-1 dimension stretches). Throws naming both shapes on mismatch.
Shape broadcast_shape(const Shape& a, const Shape& b);

template <class T>
Tensor<T> elementwise(ElementwiseKind kind, const Tensor<T>& a, const Tensor<T>* b = nullptr,
                      double scalar = 1.0);

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise<T>(ElementwiseKind::Add, a, &b);
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise<T>(ElementwiseKind::Sub, a, &b);
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise<T>(ElementwiseKind::Mul, a, &b);
}
template <class T>
Tensor<T> scale(const Tensor<T>& a, double s) {
  return elementwise<T>(ElementwiseKind::ScalarMul, a, nullptr, s);
}
template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return elementwise<T>(ElementwiseKind::Sigmoid, a);
}
/// Exact GELU, x * Phi(x) with the erf-based normal CDF.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  return elementwise<T>(ElementwiseKind::Gelu, a);
}
template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return elementwise<T>(ElementwiseKind::Relu, a);
}

/// Batched contraction [..., M, K] x [..., K, N] -> [..., M, N]; leading
/// dimensions broadcast.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x[..., K] * weight[N, K]^T + bias[N]. `bias` may be undefined.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// x[B, Cin, H, W] with weight[Cout, Cin/groups, kh, kw]; `bias` may be
/// undefined. Output spatial size floor((H + 2p - k) / s) + 1.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions opt = {});

/// Normalizes over dimension `axis` (the channel axis: 1 for B,C,H,W
/// maps, -1 for channels-last tokens), then applies gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-6, int axis = 1);

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis);

enum class PoolKind { Avg, Max, GlobalAvg, GlobalMax };

/// Pooling over B,C,H,W without padding. Global kinds reduce H x W to 1 x 1
/// and ignore kernel/stride.
template <class T>
Tensor<T> pool2d(const Tensor<T>& x, PoolKind kind, int kernel = 0, int stride = 0);

enum class ReduceKind { Mean, Max };

/// Reduction along one axis, keeping it as size 1.
template <class T>
Tensor<T> reduce(const Tensor<T>& x, int axis, ReduceKind kind);

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, Index start, Index length);

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& order);

/// Cyclic shift: out[i] = x[(i - shift) mod n] along each listed axis.
template <class T>
Tensor<T> roll(const Tensor<T>& x, const std::vector<int>& axes, const std::vector<Index>& shifts);

template <class T>
Tensor<T> sum(const Tensor<T>& x);

template <class T>
Tensor<T> mean(const Tensor<T>& x);

/// Rows of table[R, D] selected by `rows` -> [rows.size(), D]; the backward
/// pass scatter-adds.
template <class T>
Tensor<T> take_rows(const Tensor<T>& table, std::span<const int> rows);

/// Mean over the batch of -log softmax(logits)[target], computed in the
/// log-sum-exp form.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets);

}  // namespace hifuse
