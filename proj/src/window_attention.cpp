#include "hifuse/window_attention.hpp"

#include <cmath>

#include "hifuse/ops.hpp"

namespace hifuse {

RelativePositionIndex relative_position_index(int window) {
  if (window < 1) fail(ErrorKind::InvalidArgument, "relative_position_index: window must be >= 1");
  const int M = window, N = M * M, span = 2 * M - 1;
  RelativePositionIndex r;
  r.window = M;
  r.index.resize(static_cast<std::size_t>(N * N));
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) {
      const int drow = i / M - j / M;
      const int dcol = i % M - j % M;
      r.index[static_cast<std::size_t>(i * N + j)] = (drow + M - 1) * span + (dcol + M - 1);
    }
  return r;
}

template <class T>
void WindowAttentionParams<T>::validate(Index channels) const {
  if (heads < 1 || channels % heads != 0)
    fail(ErrorKind::InvalidArgument, "window attention: " + std::to_string(channels) +
                                         " channels not divisible by " + std::to_string(heads) + " heads");
  const Index span = 2 * window - 1;
  if (qkv_weight.shape() != Shape{3 * channels, channels} || qkv_bias.shape() != Shape{3 * channels} ||
      proj_weight.shape() != Shape{channels, channels} || proj_bias.shape() != Shape{channels})
    fail(ErrorKind::Shape, "window attention: projection shapes do not match " + std::to_string(channels) +
                               " channels");
  if (bias_table.shape() != Shape{span * span, heads})
    fail(ErrorKind::Shape, "window attention: bias table " + shape_str(bias_table.shape()) + " expected " +
                               shape_str(Shape{span * span, heads}));
  if (rel_index.window != window)
    fail(ErrorKind::InvalidArgument, "window attention: relative index built for a different window");
}

template <class T>
Tensor<T> window_partition(const Tensor<T>& x, int window) {
  if (x.rank() != 4) fail(ErrorKind::Shape, "window_partition expects B,H,W,C, got " + shape_str(x.shape()));
  const Index B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3), M = window;
  if (M < 1 || H % M != 0 || W % M != 0)
    fail(ErrorKind::Shape, "window_partition: " + std::to_string(H) + "x" + std::to_string(W) +
                               " not divisible by window " + std::to_string(M));
  auto t = reshape(x, Shape{B, H / M, M, W / M, M, C});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  return reshape(t, Shape{B * (H / M) * (W / M), M * M, C});
}

template <class T>
Tensor<T> window_reverse(const Tensor<T>& windows, int window, Index height, Index width) {
  const Index M = window;
  if (windows.rank() != 3 || M < 1 || height % M != 0 || width % M != 0 || windows.dim(1) != M * M)
    fail(ErrorKind::Shape, "window_reverse: windows " + shape_str(windows.shape()) + " inconsistent with " +
                               std::to_string(height) + "x" + std::to_string(width) + " and window " +
                               std::to_string(M));
  const Index per_image = (height / M) * (width / M);
  if (windows.dim(0) % per_image != 0)
    fail(ErrorKind::Shape, "window_reverse: " + std::to_string(windows.dim(0)) + " windows is not a multiple of " +
                               std::to_string(per_image));
  const Index B = windows.dim(0) / per_image, C = windows.dim(2);
  auto t = reshape(windows, Shape{B, height / M, width / M, M, M, C});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  return reshape(t, Shape{B, height, width, C});
}

template <class T>
Tensor<T> shift_mask(Index height, Index width, int window, int shift) {
  const Index M = window;
  if (M < 1 || height % M != 0 || width % M != 0)
    fail(ErrorKind::Shape, "shift_mask: map not divisible by window");
  if (shift <= 0 || shift >= window) fail(ErrorKind::InvalidArgument, "shift_mask: shift must be in (0, window)");
  // Region labels of the rolled map: three bands per axis.
  auto band = [&](Index v, Index extent) -> int {
    if (v < extent - M) return 0;
    if (v < extent - shift) return 1;
    return 2;
  };
  const Index wh = height / M, ww = width / M, N = M * M;
  Tensor<T> mask(Shape{wh * ww, N, N});
  auto md = mask.mutable_data();
  std::vector<int> label(static_cast<std::size_t>(N));
  for (Index wy = 0; wy < wh; ++wy)
    for (Index wx = 0; wx < ww; ++wx) {
      for (Index t = 0; t < N; ++t)
        label[static_cast<std::size_t>(t)] = band(wy * M + t / M, height) * 3 + band(wx * M + t % M, width);
      const Index w = wy * ww + wx;
      for (Index i = 0; i < N; ++i)
        for (Index j = 0; j < N; ++j)
          md[static_cast<std::size_t>((w * N + i) * N + j)] =
              label[static_cast<std::size_t>(i)] == label[static_cast<std::size_t>(j)] ? T(0) : T(-100);
    }
  return mask;
}

template <class T>
Tensor<T> wmsa(const Tensor<T>& x, const WindowAttentionParams<T>& p, const Tensor<T>* mask, Tensor<T>* probe) {
  if (x.rank() != 4) fail(ErrorKind::Shape, "wmsa expects B,H,W,C, got " + shape_str(x.shape()));
  const Index B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  p.validate(C);
  const Index M = p.window, N = M * M, heads = p.heads, hd = C / heads;
  auto win = window_partition(x, p.window);  // [Bw, N, C]
  const Index Bw = win.dim(0), nW = Bw / B;

  auto qkv = linear(win, p.qkv_weight, p.qkv_bias);  // [Bw, N, 3C]
  qkv = permute(reshape(qkv, Shape{Bw, N, 3, heads, hd}), {2, 0, 3, 1, 4});  // [3, Bw, h, N, d]
  auto part = [&](Index k) { return reshape(slice(qkv, 0, k, 1), Shape{Bw, heads, N, hd}); };
  auto q = scale(part(0), 1.0 / std::sqrt(static_cast<double>(hd)));
  auto k = part(1);
  auto v = part(2);

  auto attn = matmul(q, permute(k, {0, 1, 3, 2}));  // [Bw, h, N, N]
  auto bias = take_rows(p.bias_table, std::span<const int>(p.rel_index.index));
  bias = permute(reshape(bias, Shape{N, N, heads}), {2, 0, 1});  // [h, N, N]
  attn = add(attn, bias);
  if (mask) {
    if (mask->shape() != Shape{nW, N, N})
      fail(ErrorKind::Shape, "wmsa: mask " + shape_str(mask->shape()) + " expected " + shape_str(Shape{nW, N, N}));
    attn = reshape(attn, Shape{B, nW, heads, N, N});
    attn = add(attn, reshape(*mask, Shape{nW, 1, N, N}));
    attn = reshape(attn, Shape{Bw, heads, N, N});
  }
  attn = softmax(attn, -1);
  if (probe) *probe = attn;

  auto out = matmul(attn, v);                                             // [Bw, h, N, d]
  out = reshape(permute(out, {0, 2, 1, 3}), Shape{Bw, N, C});             // [Bw, N, C]
  out = linear(out, p.proj_weight, p.proj_bias);
  return window_reverse(out, p.window, H, W);
}

template <class T>
Tensor<T> shifted_wmsa(const Tensor<T>& x, const WindowAttentionParams<T>& p, int shift, Tensor<T>* probe) {
  if (shift <= 0 || shift >= p.window)
    fail(ErrorKind::InvalidArgument, "shifted_wmsa: shift " + std::to_string(shift) + " outside (0, " +
                                         std::to_string(p.window) + ")");
  if (x.rank() != 4) fail(ErrorKind::Shape, "shifted_wmsa expects B,H,W,C, got " + shape_str(x.shape()));
  const Tensor<T> mask = shift_mask<T>(x.dim(1), x.dim(2), p.window, shift);
  auto rolled = roll(x, {1, 2}, {-shift, -shift});
  auto out = wmsa(rolled, p, &mask, probe);
  return roll(out, {1, 2}, {shift, shift});
}

std::uint64_t complexity_count(AttentionKind kind, Index h, Index w, Index channels, Index window) {
  if (h <= 0 || w <= 0 || channels <= 0 || window <= 0)
    fail(ErrorKind::InvalidArgument, "complexity_count: dimensions must be positive");
  const auto hw = static_cast<std::uint64_t>(h * w);
  const auto C = static_cast<std::uint64_t>(channels);
  const auto M = static_cast<std::uint64_t>(window);
  const std::uint64_t projections = 4 * hw * C * C;
  if (kind == AttentionKind::Msa) return projections + 2 * hw * hw * C;
  return projections + 2 * M * M * hw * C;
}

#define HIFUSE_INSTANTIATE_WINDOW(T)                                                                        \
  template struct WindowAttentionParams<T>;                                                                 \
  template Tensor<T> window_partition<T>(const Tensor<T>&, int);                                            \
  template Tensor<T> window_reverse<T>(const Tensor<T>&, int, Index, Index);                                \
  template Tensor<T> shift_mask<T>(Index, Index, int, int);                                                 \
  template Tensor<T> wmsa<T>(const Tensor<T>&, const WindowAttentionParams<T>&, const Tensor<T>*, Tensor<T>*); \
  template Tensor<T> shifted_wmsa<T>(const Tensor<T>&, const WindowAttentionParams<T>&, int, Tensor<T>*);

HIFUSE_INSTANTIATE_WINDOW(float)
HIFUSE_INSTANTIATE_WINDOW(double)

}  // namespace hifuse
