#pragma once

#include <cstdint>
#include <vector>

#include "hifuse/tensor.hpp"

namespace hifuse {

/// Token-pair lookup into the relative-position bias table of an M x M
/// window. Entry (i, j) is (dRow + M - 1) * (2M - 1) + (dCol + M - 1) with
/// dRow/dCol the displacement from token j to token i.
struct RelativePositionIndex {
  int window = 0;
  std::vector<int> index;  // row-major [M*M, M*M]

  int at(int i, int j) const { return index[static_cast<std::size_t>(i * window * window + j)]; }
};

RelativePositionIndex relative_position_index(int window);

template <class T>
struct WindowAttentionParams {
  Tensor<T> qkv_weight;   // [3C, C]
  Tensor<T> qkv_bias;     // [3C]
  Tensor<T> proj_weight;  // [C, C]
  Tensor<T> proj_bias;    // [C]
  Tensor<T> bias_table;   // [(2M-1)^2, heads]
  int heads = 1;
  int window = 1;
  RelativePositionIndex rel_index;

  void validate(Index channels) const;
};

/// [B, H, W, C] -> [B * (H/M) * (W/M), M*M, C]; windows in row-major order
/// per image, tokens row-major inside each window.
template <class T>
Tensor<T> window_partition(const Tensor<T>& x, int window);

/// Inverse of window_partition.
template <class T>
Tensor<T> window_reverse(const Tensor<T>& windows, int window, Index height, Index width);

/// Additive attention mask [numWindows, M*M, M*M] for a feature map that has
/// been rolled by (-shift, -shift): 0 between tokens of the same source
/// region, -100 otherwise.
template <class T>
Tensor<T> shift_mask(Index height, Index width, int window, int shift);

/// Windowed multi-head self-attention over a channels-last map. `mask`, when
/// given, has the shift_mask layout. If `probe` is non-null it receives the
/// post-softmax attention [B*nW, heads, N, N].
template <class T>
Tensor<T> wmsa(const Tensor<T>& x, const WindowAttentionParams<T>& p, const Tensor<T>* mask = nullptr,
               Tensor<T>* probe = nullptr);

/// Cyclic shift by (-shift, -shift), masked wmsa, and the inverse roll.
template <class T>
Tensor<T> shifted_wmsa(const Tensor<T>& x, const WindowAttentionParams<T>& p, int shift, Tensor<T>* probe = nullptr);

enum class AttentionKind { Msa, WindowMsa };

/// Multiply-accumulate count of one attention layer over an h x w map with
/// C channels: 4hwC^2 + 2(hw)^2 C globally, 4hwC^2 + 2M^2 hwC windowed.
std::uint64_t complexity_count(AttentionKind kind, Index h, Index w, Index channels, Index window);

}  // namespace hifuse
