#include "hifuse/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "hifuse/parallel.hpp"

namespace hifuse {
namespace {

using detail::finish;
using detail::grad_buffer;
using detail::tracking;

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    fail(ErrorKind::InvalidArgument,
         std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return a;
}

struct AxisSplit {
  Index outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  r.n = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

std::vector<Index> strides_of(const Shape& s) {
  std::vector<Index> st(s.size(), 1);
  for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(s.size()) - 2; i >= 0; --i)
    st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i) + 1] * s[static_cast<std::size_t>(i) + 1];
  return st;
}

// Offsets into a tensor of shape `in` for every element of the broadcast
// output shape `out`.
std::vector<Index> broadcast_offsets(const Shape& out, const Shape& in) {
  const std::size_t r = out.size();
  Shape padded(r, 1);
  std::copy(in.begin(), in.end(), padded.begin() + static_cast<std::ptrdiff_t>(r - in.size()));
  std::vector<Index> st = strides_of(padded);
  for (std::size_t i = 0; i < r; ++i)
    if (padded[i] == 1) st[i] = 0;
  const Index total = shape_numel(out);
  std::vector<Index> offs(static_cast<std::size_t>(total));
  std::vector<Index> idx(r, 0);
  Index off = 0;
  for (Index k = 0; k < total; ++k) {
    offs[static_cast<std::size_t>(k)] = off;
    for (std::ptrdiff_t d = static_cast<std::ptrdiff_t>(r) - 1; d >= 0; --d) {
      auto du = static_cast<std::size_t>(d);
      ++idx[du];
      off += st[du];
      if (idx[du] < out[du]) break;
      off -= st[du] * idx[du];
      idx[du] = 0;
    }
  }
  return offs;
}

// ---- dense kernels -----------------------------------------------------------

// C[M,N] (+)= A[M,K] * B[K,N], all row-major and contiguous. Each output
// element accumulates over k in increasing order regardless of blocking or
// threading, so results are reproducible bit-for-bit.
template <class T>
void gemm_nn(Index M, Index N, Index K, const T* A, const T* B, T* C, bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  constexpr Index kColBlock = 512;
  auto rows = [&](Index r0, Index r1) {
    for (Index j0 = 0; j0 < N; j0 += kColBlock) {
      const Index jn = std::min(kColBlock, N - j0);
      Index i = r0;
      for (; i + 4 <= r1; i += 4) {
        T* __restrict c0 = C + i * N + j0;
        T* __restrict c1 = c0 + N;
        T* __restrict c2 = c1 + N;
        T* __restrict c3 = c2 + N;
        const T* a0 = A + i * K;
        const T* a1 = a0 + K;
        const T* a2 = a1 + K;
        const T* a3 = a2 + K;
        for (Index k = 0; k < K; ++k) {
          const T* __restrict b = B + k * N + j0;
          const T x0 = a0[k], x1 = a1[k], x2 = a2[k], x3 = a3[k];
          for (Index j = 0; j < jn; ++j) {
            const T bj = b[j];
            c0[j] += x0 * bj;
            c1[j] += x1 * bj;
            c2[j] += x2 * bj;
            c3[j] += x3 * bj;
          }
        }
      }
      for (; i < r1; ++i) {
        T* __restrict c0 = C + i * N + j0;
        const T* a0 = A + i * K;
        for (Index k = 0; k < K; ++k) {
          const T* __restrict b = B + k * N + j0;
          const T x0 = a0[k];
          for (Index j = 0; j < jn; ++j) c0[j] += x0 * b[j];
        }
      }
    }
  };
  const Index work = M * N * K;
  if (work < (Index(1) << 18) || M < 8) {
    rows(0, M);
    return;
  }
  // Row chunks in multiples of 4 keep the blocking identical across threads.
  const Index chunks = (M + 3) / 4;
  parallel_for(chunks, 1, [&](Index b, Index e) { rows(b * 4, std::min(M, e * 4)); });
}

template <class T>
std::vector<T> transposed(const T* src, Index rows, Index cols) {
  std::vector<T> out(static_cast<std::size_t>(rows * cols));
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) out[static_cast<std::size_t>(c * rows + r)] = src[r * cols + c];
  return out;
}

void tally_conv(std::uint64_t macs) {
  if (FlopTally* t = active_flop_tally()) t->conv += macs;
}
void tally_linear(std::uint64_t macs) {
  if (FlopTally* t = active_flop_tally()) t->linear += macs;
}
void tally_matmul(std::uint64_t macs) {
  if (FlopTally* t = active_flop_tally()) t->matmul += macs;
}

template <class T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const Index da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const Index db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      fail(ErrorKind::Shape, "shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcast-compatible");
    out[i] = std::max(da, db);
  }
  return out;
}

// ---- elementwise -------------------------------------------------------------

template <class T>
Tensor<T> elementwise(ElementwiseKind kind, const Tensor<T>& a, const Tensor<T>* b, double scalar) {
  const bool binary = kind == ElementwiseKind::Add || kind == ElementwiseKind::Sub || kind == ElementwiseKind::Mul;
  if (binary) {
    if (!b || !b->defined()) fail(ErrorKind::InvalidArgument, "binary elementwise op needs a second operand");
    const Shape out_shape = broadcast_shape(a.shape(), b->shape());
    const bool same = a.shape() == b->shape();
    std::vector<Index> oa, ob;
    if (!same) {
      oa = broadcast_offsets(out_shape, a.shape());
      ob = broadcast_offsets(out_shape, b->shape());
    }
    Tensor<T> out(out_shape);
    auto o = out.mutable_data();
    auto ad = a.data();
    auto bd = b->data();
    const Index n = out.numel();
    for (Index i = 0; i < n; ++i) {
      const auto iu = static_cast<std::size_t>(i);
      const T x = same ? ad[iu] : ad[static_cast<std::size_t>(oa[iu])];
      const T y = same ? bd[iu] : bd[static_cast<std::size_t>(ob[iu])];
      o[iu] = kind == ElementwiseKind::Add ? x + y : kind == ElementwiseKind::Sub ? x - y : x * y;
    }
    const bool track = tracking<T>({&a, b});
    auto an = a.node_ptr();
    auto bn = b->node_ptr();
    const char* name = kind == ElementwiseKind::Add ? "add" : kind == ElementwiseKind::Sub ? "sub" : "mul";
    return finish<T>(std::move(out), name, track,
                  [an, bn, kind, same, oa = std::move(oa), ob = std::move(ob), n](const std::vector<T>& g) {
                    auto off_a = [&](Index i) { return same ? i : oa[static_cast<std::size_t>(i)]; };
                    auto off_b = [&](Index i) { return same ? i : ob[static_cast<std::size_t>(i)]; };
                    if (an->requires_grad) {
                      T* ga = grad_buffer(*an);
                      for (Index i = 0; i < n; ++i) {
                        const T gi = g[static_cast<std::size_t>(i)];
                        ga[off_a(i)] += kind == ElementwiseKind::Mul ? gi * bn->data[static_cast<std::size_t>(off_b(i))] : gi;
                      }
                    }
                    if (bn->requires_grad) {
                      T* gb = grad_buffer(*bn);
                      for (Index i = 0; i < n; ++i) {
                        const T gi = g[static_cast<std::size_t>(i)];
                        gb[off_b(i)] += kind == ElementwiseKind::Mul   ? gi * an->data[static_cast<std::size_t>(off_a(i))]
                                        : kind == ElementwiseKind::Sub ? -gi
                                                                       : gi;
                      }
                    }
                  });
  }

  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto ad = a.data();
  const T s = static_cast<T>(scalar);
  for (std::size_t i = 0; i < o.size(); ++i) {
    const T x = ad[i];
    switch (kind) {
      case ElementwiseKind::ScalarMul: o[i] = x * s; break;
      case ElementwiseKind::Sigmoid: o[i] = T(1) / (T(1) + std::exp(-x)); break;
      case ElementwiseKind::Gelu: o[i] = gelu_scalar(x); break;
      case ElementwiseKind::Relu: o[i] = x > T(0) ? x : T(0); break;
      default: break;
    }
  }
  const bool track = tracking<T>({&a});
  auto an = a.node_ptr();
  auto on = out.node_ptr();
  const char* name = kind == ElementwiseKind::ScalarMul ? "scale"
                     : kind == ElementwiseKind::Sigmoid ? "sigmoid"
                     : kind == ElementwiseKind::Gelu    ? "gelu"
                                                        : "relu";
  // The rule reads the output values through a weak handle to avoid a
  // node -> tape -> node cycle.
  std::weak_ptr<TensorNode<T>> weak_out = on;
  return finish<T>(std::move(out), name, track, [an, weak_out, kind, s](const std::vector<T>& g) {
    T* ga = grad_buffer(*an);
    auto outp = weak_out.lock();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = an->data[i];
      switch (kind) {
        case ElementwiseKind::ScalarMul: ga[i] += g[i] * s; break;
        case ElementwiseKind::Sigmoid: {
          const T y = outp->data[i];
          ga[i] += g[i] * y * (T(1) - y);
          break;
        }
        case ElementwiseKind::Gelu: ga[i] += g[i] * gelu_grad(x); break;
        case ElementwiseKind::Relu: ga[i] += x > T(0) ? g[i] : T(0); break;
        default: break;
      }
    }
  });
}

// ---- matmul / linear -----------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    fail(ErrorKind::Shape, "matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                               shape_str(b.shape()));
  const Index M = a.dim(-2), K = a.dim(-1), K2 = b.dim(-2), N = b.dim(-1);
  if (K != K2)
    fail(ErrorKind::Shape, "matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Shape ab(a.shape().begin(), a.shape().end() - 2);
  Shape bb(b.shape().begin(), b.shape().end() - 2);
  const Shape batch = broadcast_shape(ab, bb);
  const Index nb = shape_numel(batch);
  std::vector<Index> oa = broadcast_offsets(batch, ab);
  std::vector<Index> ob = broadcast_offsets(batch, bb);
  Shape out_shape = batch;
  out_shape.push_back(M);
  out_shape.push_back(N);
  Tensor<T> out(out_shape);
  const T* A = a.data().data();
  const T* B = b.data().data();
  T* C = out.mutable_data().data();
  for (Index i = 0; i < nb; ++i)
    gemm_nn(M, N, K, A + oa[static_cast<std::size_t>(i)] * M * K, B + ob[static_cast<std::size_t>(i)] * K * N,
            C + i * M * N, false);
  tally_matmul(static_cast<std::uint64_t>(nb * M * N * K));
  const bool track = tracking<T>({&a, &b});
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return finish<T>(std::move(out), "matmul", track,
                [an, bn, oa = std::move(oa), ob = std::move(ob), nb, M, N, K](const std::vector<T>& g) {
                  for (Index i = 0; i < nb; ++i) {
                    const T* gC = g.data() + i * M * N;
                    const Index offa = oa[static_cast<std::size_t>(i)] * M * K;
                    const Index offb = ob[static_cast<std::size_t>(i)] * K * N;
                    if (an->requires_grad) {
                      auto bt = transposed(bn->data.data() + offb, K, N);  // [N, K]
                      gemm_nn(M, K, N, gC, bt.data(), grad_buffer(*an) + offa, true);
                    }
                    if (bn->requires_grad) {
                      auto at = transposed(an->data.data() + offa, M, K);  // [K, M]
                      gemm_nn(K, N, M, at.data(), gC, grad_buffer(*bn) + offb, true);
                    }
                  }
                });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2) fail(ErrorKind::Shape, "linear weight must be 2-D, got " + shape_str(weight.shape()));
  const Index N = weight.dim(0), K = weight.dim(1);
  if (x.rank() < 1 || x.dim(-1) != K)
    fail(ErrorKind::Shape, "linear input " + shape_str(x.shape()) + " does not match weight " +
                               shape_str(weight.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != N))
    fail(ErrorKind::Shape, "linear bias " + shape_str(bias.shape()) + " does not match weight " +
                               shape_str(weight.shape()));
  const Index R = x.numel() / K;
  Shape out_shape = x.shape();
  out_shape.back() = N;
  Tensor<T> out(out_shape);
  auto wt = transposed(weight.data().data(), N, K);  // [K, N]
  T* C = out.mutable_data().data();
  if (bias.defined()) {
    auto bd = bias.data();
    for (Index r = 0; r < R; ++r) std::copy(bd.begin(), bd.end(), C + r * N);
  }
  gemm_nn(R, N, K, x.data().data(), wt.data(), C, bias.defined());
  tally_linear(static_cast<std::uint64_t>(R * N * K));
  const bool track = tracking<T>({&x, &weight, &bias});
  auto xn = x.node_ptr();
  auto wn = weight.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : nullptr;
  return finish<T>(std::move(out), "linear", track, [xn, wn, bn, R, N, K](const std::vector<T>& g) {
    if (xn->requires_grad) gemm_nn(R, K, N, g.data(), wn->data.data(), grad_buffer(*xn), true);
    if (wn->requires_grad) {
      auto gt = transposed(g.data(), R, N);  // [N, R]
      gemm_nn(N, K, R, gt.data(), xn->data.data(), grad_buffer(*wn), true);
    }
    if (bn && bn->requires_grad) {
      T* gb = grad_buffer(*bn);
      for (Index r = 0; r < R; ++r)
        for (Index j = 0; j < N; ++j) gb[j] += g[static_cast<std::size_t>(r * N + j)];
    }
  });
}

// ---- conv2d ----------------------------------------------------------------------

namespace {

struct ConvGeom {
  Index B, Cin, H, W, Cout, kh, kw, Ho, Wo, stride, pad, groups, cin_g, cout_g;
  Index cols_rows() const { return cin_g * kh * kw; }
  Index pixels() const { return Ho * Wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  bool depthwise() const { return cin_g == 1 && cout_g == 1; }
};

// cols[(c*kh + ky)*kw + kx, oy*Wo + ox] = x[c, oy*s - p + ky, ox*s - p + kx]
template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  for (Index c = 0; c < g.cin_g; ++c)
    for (Index ky = 0; ky < g.kh; ++ky)
      for (Index kx = 0; kx < g.kw; ++kx) {
        T* row = cols + ((c * g.kh + ky) * g.kw + kx) * g.pixels();
        for (Index oy = 0; oy < g.Ho; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky;
          for (Index ox = 0; ox < g.Wo; ++ox) {
            const Index ix = ox * g.stride - g.pad + kx;
            row[oy * g.Wo + ox] =
                (iy >= 0 && iy < g.H && ix >= 0 && ix < g.W) ? x[(c * g.H + iy) * g.W + ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx) {
  for (Index c = 0; c < g.cin_g; ++c)
    for (Index ky = 0; ky < g.kh; ++ky)
      for (Index kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + ((c * g.kh + ky) * g.kw + kx) * g.pixels();
        for (Index oy = 0; oy < g.Ho; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.H) continue;
          for (Index ox = 0; ox < g.Wo; ++ox) {
            const Index ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.W) dx[(c * g.H + iy) * g.W + ix] += row[oy * g.Wo + ox];
          }
        }
      }
}

}  // namespace

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opt) {
  if (x.rank() != 4) fail(ErrorKind::Shape, "conv2d input must be B,C,H,W, got " + shape_str(x.shape()));
  if (weight.rank() != 4) fail(ErrorKind::Shape, "conv2d weight must be 4-D, got " + shape_str(weight.shape()));
  if (opt.stride < 1 || opt.padding < 0 || opt.groups < 1)
    fail(ErrorKind::InvalidArgument, "conv2d: invalid stride/padding/groups");
  ConvGeom g{};
  g.B = x.dim(0);
  g.Cin = x.dim(1);
  g.H = x.dim(2);
  g.W = x.dim(3);
  g.Cout = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = opt.stride;
  g.pad = opt.padding;
  g.groups = opt.groups;
  if (g.Cin % g.groups != 0 || g.Cout % g.groups != 0)
    fail(ErrorKind::InvalidArgument, "conv2d: channels " + std::to_string(g.Cin) + "->" + std::to_string(g.Cout) +
                                         " not divisible by groups " + std::to_string(g.groups));
  g.cin_g = g.Cin / g.groups;
  g.cout_g = g.Cout / g.groups;
  if (weight.dim(1) != g.cin_g)
    fail(ErrorKind::Shape, "conv2d weight " + shape_str(weight.shape()) + " does not match input " +
                               shape_str(x.shape()) + " with groups " + std::to_string(g.groups));
  if (g.H + 2 * g.pad < g.kh || g.W + 2 * g.pad < g.kw)
    fail(ErrorKind::Shape, "conv2d kernel " + shape_str(weight.shape()) + " larger than padded input " +
                               shape_str(x.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.Cout))
    fail(ErrorKind::Shape, "conv2d bias " + shape_str(bias.shape()) + " does not match " + std::to_string(g.Cout));
  g.Ho = (g.H + 2 * g.pad - g.kh) / g.stride + 1;
  g.Wo = (g.W + 2 * g.pad - g.kw) / g.stride + 1;

  Tensor<T> out(Shape{g.B, g.Cout, g.Ho, g.Wo});
  T* O = out.mutable_data().data();
  const T* X = x.data().data();
  const T* Wt = weight.data().data();
  const Index P = g.pixels(), R = g.cols_rows();
  if (bias.defined()) {
    auto bd = bias.data();
    for (Index b = 0; b < g.B; ++b)
      for (Index c = 0; c < g.Cout; ++c) std::fill_n(O + (b * g.Cout + c) * P, P, bd[static_cast<std::size_t>(c)]);
  }
  if (g.depthwise()) {
    parallel_for(g.B * g.Cout, 4, [&](Index lo, Index hi) {
      for (Index bc = lo; bc < hi; ++bc) {
        const Index c = bc % g.Cout;
        const T* xin = X + bc * g.H * g.W;
        const T* k = Wt + c * g.kh * g.kw;
        T* o = O + bc * P;
        for (Index oy = 0; oy < g.Ho; ++oy)
          for (Index ox = 0; ox < g.Wo; ++ox) {
            T acc = o[oy * g.Wo + ox];
            for (Index ky = 0; ky < g.kh; ++ky) {
              const Index iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.H) continue;
              for (Index kx = 0; kx < g.kw; ++kx) {
                const Index ix = ox * g.stride - g.pad + kx;
                if (ix >= 0 && ix < g.W) acc += k[ky * g.kw + kx] * xin[iy * g.W + ix];
              }
            }
            o[oy * g.Wo + ox] = acc;
          }
      }
    });
  } else {
    std::vector<T> cols(g.pointwise() ? 0 : static_cast<std::size_t>(R * P));
    for (Index b = 0; b < g.B; ++b)
      for (Index gr = 0; gr < g.groups; ++gr) {
        const T* xg = X + (b * g.Cin + gr * g.cin_g) * g.H * g.W;
        const T* src = xg;
        if (!g.pointwise()) {
          im2col(xg, g, cols.data());
          src = cols.data();
        }
        gemm_nn(g.cout_g, P, R, Wt + gr * g.cout_g * R, src, O + (b * g.Cout + gr * g.cout_g) * P, true);
      }
  }
  tally_conv(static_cast<std::uint64_t>(g.B * g.Cout * R * P));

  const bool track = tracking<T>({&x, &weight, &bias});
  auto xn = x.node_ptr();
  auto wn = weight.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : nullptr;
  return finish<T>(std::move(out), "conv2d", track, [xn, wn, bn, g](const std::vector<T>& gout) {
    const Index P = g.pixels(), R = g.cols_rows();
    const T* X = xn->data.data();
    const T* Wt = wn->data.data();
    if (bn && bn->requires_grad) {
      T* gb = grad_buffer(*bn);
      for (Index b = 0; b < g.B; ++b)
        for (Index c = 0; c < g.Cout; ++c) {
          const T* go = gout.data() + (b * g.Cout + c) * P;
          T acc = 0;
          for (Index p = 0; p < P; ++p) acc += go[p];
          gb[c] += acc;
        }
    }
    if (g.depthwise()) {
      T* gx = xn->requires_grad ? grad_buffer(*xn) : nullptr;
      T* gw = wn->requires_grad ? grad_buffer(*wn) : nullptr;
      for (Index bc = 0; bc < g.B * g.Cout; ++bc) {
        const Index c = bc % g.Cout;
        const T* xin = X + bc * g.H * g.W;
        const T* k = Wt + c * g.kh * g.kw;
        const T* go = gout.data() + bc * P;
        for (Index oy = 0; oy < g.Ho; ++oy)
          for (Index ox = 0; ox < g.Wo; ++ox) {
            const T gv = go[oy * g.Wo + ox];
            for (Index ky = 0; ky < g.kh; ++ky) {
              const Index iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.H) continue;
              for (Index kx = 0; kx < g.kw; ++kx) {
                const Index ix = ox * g.stride - g.pad + kx;
                if (ix < 0 || ix >= g.W) continue;
                if (gx) gx[bc * g.H * g.W + iy * g.W + ix] += gv * k[ky * g.kw + kx];
                if (gw) gw[c * g.kh * g.kw + ky * g.kw + kx] += gv * xin[iy * g.W + ix];
              }
            }
          }
      }
      return;
    }
    std::vector<T> cols(static_cast<std::size_t>(R * P));
    std::vector<std::vector<T>> wt_groups;
    if (xn->requires_grad)
      for (Index gr = 0; gr < g.groups; ++gr) wt_groups.push_back(transposed(Wt + gr * g.cout_g * R, g.cout_g, R));
    for (Index b = 0; b < g.B; ++b)
      for (Index gr = 0; gr < g.groups; ++gr) {
        const T* go = gout.data() + (b * g.Cout + gr * g.cout_g) * P;
        if (wn->requires_grad) {
          const T* xg = X + (b * g.Cin + gr * g.cin_g) * g.H * g.W;
          std::vector<T> colsT;
          if (g.pointwise()) {
            colsT = transposed(xg, R, P);
          } else {
            im2col(xg, g, cols.data());
            colsT = transposed(cols.data(), R, P);
          }
          gemm_nn(g.cout_g, R, P, go, colsT.data(), grad_buffer(*wn) + gr * g.cout_g * R, true);
        }
        if (xn->requires_grad) {
          T* gx = grad_buffer(*xn) + (b * g.Cin + gr * g.cin_g) * g.H * g.W;
          if (g.pointwise()) {
            gemm_nn(R, P, g.cout_g, wt_groups[static_cast<std::size_t>(gr)].data(), go, gx, true);
          } else {
            gemm_nn(R, P, g.cout_g, wt_groups[static_cast<std::size_t>(gr)].data(), go, cols.data(), false);
            col2im_add(cols.data(), g, gx);
          }
        }
      }
  });
}

// ---- normalization / softmax -------------------------------------------------------

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps, int axis) {
  const int ax = normalize_axis(axis, x.rank(), "layer_norm");
  const AxisSplit sp = split_at(x.shape(), ax);
  if (gamma.numel() != sp.n || beta.numel() != sp.n)
    fail(ErrorKind::Shape, "layer_norm: gamma/beta length " + std::to_string(gamma.numel()) + "/" +
                               std::to_string(beta.numel()) + " does not match channel count " +
                               std::to_string(sp.n));
  if (!(eps > 0)) fail(ErrorKind::InvalidArgument, "layer_norm: eps must be positive");
  Tensor<T> out(x.shape());
  const T* X = x.data().data();
  const T* G = gamma.data().data();
  const T* Bt = beta.data().data();
  T* O = out.mutable_data().data();
  const Index groups = sp.outer * sp.inner;
  std::vector<T> means(static_cast<std::size_t>(groups)), rstds(static_cast<std::size_t>(groups));
  for (Index o = 0; o < sp.outer; ++o)
    for (Index i = 0; i < sp.inner; ++i) {
      const Index base = o * sp.n * sp.inner + i;
      // Statistics accumulate in double: a constant row then normalizes to
      // exactly zero.
      double s = 0;
      for (Index c = 0; c < sp.n; ++c) s += static_cast<double>(X[base + c * sp.inner]);
      const double mu = s / static_cast<double>(sp.n);
      double v = 0;
      for (Index c = 0; c < sp.n; ++c) {
        const double d = static_cast<double>(X[base + c * sp.inner]) - mu;
        v += d * d;
      }
      v /= static_cast<double>(sp.n);
      const T mean_t = static_cast<T>(mu);
      const T rstd = static_cast<T>(1.0 / std::sqrt(v + eps));
      means[static_cast<std::size_t>(o * sp.inner + i)] = mean_t;
      rstds[static_cast<std::size_t>(o * sp.inner + i)] = rstd;
      for (Index c = 0; c < sp.n; ++c) {
        const Index k = base + c * sp.inner;
        O[k] = (X[k] - mean_t) * rstd * G[c] + Bt[c];
      }
    }
  const bool track = tracking<T>({&x, &gamma, &beta});
  auto xn = x.node_ptr();
  auto gn = gamma.node_ptr();
  auto bn = beta.node_ptr();
  return finish<T>(std::move(out), "layer_norm", track,
                [xn, gn, bn, sp, means = std::move(means), rstds = std::move(rstds)](const std::vector<T>& g) {
                  const T* X = xn->data.data();
                  const T* G = gn->data.data();
                  T* gx = xn->requires_grad ? grad_buffer(*xn) : nullptr;
                  T* gg = gn->requires_grad ? grad_buffer(*gn) : nullptr;
                  T* gb = bn->requires_grad ? grad_buffer(*bn) : nullptr;
                  std::vector<T> xhat(static_cast<std::size_t>(sp.n)), gy(static_cast<std::size_t>(sp.n));
                  for (Index o = 0; o < sp.outer; ++o)
                    for (Index i = 0; i < sp.inner; ++i) {
                      const Index base = o * sp.n * sp.inner + i;
                      const T mu = means[static_cast<std::size_t>(o * sp.inner + i)];
                      const T rstd = rstds[static_cast<std::size_t>(o * sp.inner + i)];
                      T mg = 0, mgx = 0;
                      for (Index c = 0; c < sp.n; ++c) {
                        const Index k = base + c * sp.inner;
                        const auto cu = static_cast<std::size_t>(c);
                        xhat[cu] = (X[k] - mu) * rstd;
                        gy[cu] = g[static_cast<std::size_t>(k)] * G[c];
                        mg += gy[cu];
                        mgx += gy[cu] * xhat[cu];
                        if (gg) gg[c] += g[static_cast<std::size_t>(k)] * xhat[cu];
                        if (gb) gb[c] += g[static_cast<std::size_t>(k)];
                      }
                      if (!gx) continue;
                      mg /= static_cast<T>(sp.n);
                      mgx /= static_cast<T>(sp.n);
                      for (Index c = 0; c < sp.n; ++c) {
                        const auto cu = static_cast<std::size_t>(c);
                        gx[base + c * sp.inner] += rstd * (gy[cu] - mg - xhat[cu] * mgx);
                      }
                    }
                });
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int ax = normalize_axis(axis, x.rank(), "softmax");
  const AxisSplit sp = split_at(x.shape(), ax);
  Tensor<T> out(x.shape());
  const T* X = x.data().data();
  T* O = out.mutable_data().data();
  parallel_for(sp.outer, 64, [&](Index lo, Index hi) {
    for (Index o = lo; o < hi; ++o)
      for (Index i = 0; i < sp.inner; ++i) {
        const Index base = o * sp.n * sp.inner + i;
        T mx = -std::numeric_limits<T>::infinity();
        for (Index c = 0; c < sp.n; ++c) mx = std::max(mx, X[base + c * sp.inner]);
        T s = 0;
        for (Index c = 0; c < sp.n; ++c) {
          const T e = std::exp(X[base + c * sp.inner] - mx);
          O[base + c * sp.inner] = e;
          s += e;
        }
        const T inv = T(1) / s;
        for (Index c = 0; c < sp.n; ++c) O[base + c * sp.inner] *= inv;
      }
  });
  const bool track = tracking<T>({&x});
  auto xn = x.node_ptr();
  std::weak_ptr<TensorNode<T>> weak_out = out.node_ptr();
  return finish<T>(std::move(out), "softmax", track, [xn, weak_out, sp](const std::vector<T>& g) {
    auto on = weak_out.lock();
    const T* Y = on->data.data();
    T* gx = grad_buffer(*xn);
    for (Index o = 0; o < sp.outer; ++o)
      for (Index i = 0; i < sp.inner; ++i) {
        const Index base = o * sp.n * sp.inner + i;
        T dot = 0;
        for (Index c = 0; c < sp.n; ++c) dot += g[static_cast<std::size_t>(base + c * sp.inner)] * Y[base + c * sp.inner];
        for (Index c = 0; c < sp.n; ++c) {
          const Index k = base + c * sp.inner;
          gx[k] += Y[k] * (g[static_cast<std::size_t>(k)] - dot);
        }
      }
  });
}

// ---- pooling / reductions ------------------------------------------------------------

template <class T>
Tensor<T> pool2d(const Tensor<T>& x, PoolKind kind, int kernel, int stride) {
  if (x.rank() != 4) fail(ErrorKind::Shape, "pool2d input must be B,C,H,W, got " + shape_str(x.shape()));
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Index kh, kw, s;
  const bool global = kind == PoolKind::GlobalAvg || kind == PoolKind::GlobalMax;
  if (global) {
    kh = H;
    kw = W;
    s = 1;
  } else {
    if (kernel < 1) fail(ErrorKind::InvalidArgument, "pool2d: kernel must be >= 1");
    if (kernel > H || kernel > W)
      fail(ErrorKind::Shape, "pool2d: kernel " + std::to_string(kernel) + " exceeds input " + shape_str(x.shape()));
    kh = kw = kernel;
    s = stride > 0 ? stride : kernel;
  }
  const bool is_max = kind == PoolKind::Max || kind == PoolKind::GlobalMax;
  const Index Ho = (H - kh) / s + 1, Wo = (W - kw) / s + 1;
  Tensor<T> out(Shape{B, C, Ho, Wo});
  T* O = out.mutable_data().data();
  const T* X = x.data().data();
  std::vector<Index> argmax(is_max ? static_cast<std::size_t>(out.numel()) : 0);
  for (Index bc = 0; bc < B * C; ++bc)
    for (Index oy = 0; oy < Ho; ++oy)
      for (Index ox = 0; ox < Wo; ++ox) {
        const Index oidx = (bc * Ho + oy) * Wo + ox;
        if (is_max) {
          Index best = -1;
          T bv = 0;
          for (Index ky = 0; ky < kh; ++ky)
            for (Index kx = 0; kx < kw; ++kx) {
              const Index k = (bc * H + oy * s + ky) * W + ox * s + kx;
              if (best < 0 || X[k] > bv) {
                best = k;
                bv = X[k];
              }
            }
          O[oidx] = bv;
          argmax[static_cast<std::size_t>(oidx)] = best;
        } else {
          double acc = 0;
          for (Index ky = 0; ky < kh; ++ky)
            for (Index kx = 0; kx < kw; ++kx) acc += static_cast<double>(X[(bc * H + oy * s + ky) * W + ox * s + kx]);
          O[oidx] = static_cast<T>(acc / static_cast<double>(kh * kw));
        }
      }
  const bool track = tracking<T>({&x});
  auto xn = x.node_ptr();
  return finish<T>(std::move(out), is_max ? "max_pool" : "avg_pool", track,
                [xn, is_max, argmax = std::move(argmax), B, C, H, W, Ho, Wo, kh, kw, s](const std::vector<T>& g) {
                  T* gx = grad_buffer(*xn);
                  if (is_max) {
                    for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
                    return;
                  }
                  const T inv = T(1) / static_cast<T>(kh * kw);
                  for (Index bc = 0; bc < B * C; ++bc)
                    for (Index oy = 0; oy < Ho; ++oy)
                      for (Index ox = 0; ox < Wo; ++ox) {
                        const T gv = g[static_cast<std::size_t>((bc * Ho + oy) * Wo + ox)] * inv;
                        for (Index ky = 0; ky < kh; ++ky)
                          for (Index kx = 0; kx < kw; ++kx) gx[(bc * H + oy * s + ky) * W + ox * s + kx] += gv;
                      }
                });
}

template <class T>
Tensor<T> reduce(const Tensor<T>& x, int axis, ReduceKind kind) {
  const int ax = normalize_axis(axis, x.rank(), "reduce");
  const AxisSplit sp = split_at(x.shape(), ax);
  Shape os = x.shape();
  os[static_cast<std::size_t>(ax)] = 1;
  Tensor<T> out(os);
  const T* X = x.data().data();
  T* O = out.mutable_data().data();
  std::vector<Index> argmax(kind == ReduceKind::Max ? static_cast<std::size_t>(out.numel()) : 0);
  for (Index o = 0; o < sp.outer; ++o)
    for (Index i = 0; i < sp.inner; ++i) {
      const Index base = o * sp.n * sp.inner + i;
      const Index oi = o * sp.inner + i;
      if (kind == ReduceKind::Max) {
        Index best = base;
        for (Index c = 1; c < sp.n; ++c)
          if (X[base + c * sp.inner] > X[best]) best = base + c * sp.inner;
        O[oi] = X[best];
        argmax[static_cast<std::size_t>(oi)] = best;
      } else {
        double acc = 0;
        for (Index c = 0; c < sp.n; ++c) acc += static_cast<double>(X[base + c * sp.inner]);
        O[oi] = static_cast<T>(acc / static_cast<double>(sp.n));
      }
    }
  const bool track = tracking<T>({&x});
  auto xn = x.node_ptr();
  return finish<T>(std::move(out), kind == ReduceKind::Max ? "reduce_max" : "reduce_mean", track,
                [xn, kind, sp, argmax = std::move(argmax)](const std::vector<T>& g) {
                  T* gx = grad_buffer(*xn);
                  if (kind == ReduceKind::Max) {
                    for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
                    return;
                  }
                  const T inv = T(1) / static_cast<T>(sp.n);
                  for (Index o = 0; o < sp.outer; ++o)
                    for (Index i = 0; i < sp.inner; ++i) {
                      const T gv = g[static_cast<std::size_t>(o * sp.inner + i)] * inv;
                      for (Index c = 0; c < sp.n; ++c) gx[o * sp.n * sp.inner + c * sp.inner + i] += gv;
                    }
                });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += static_cast<double>(v);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  const bool track = tracking<T>({&x});
  auto xn = x.node_ptr();
  return finish<T>(std::move(out), "sum", track, [xn](const std::vector<T>& g) {
    T* gx = grad_buffer(*xn);
    for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += g[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// ---- shape manipulation -------------------------------------------------------------

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) fail(ErrorKind::InvalidArgument, "concat of zero tensors");
  const int ax = normalize_axis(axis, parts[0].rank(), "concat");
  Shape os = parts[0].shape();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank())
      fail(ErrorKind::Shape, "concat rank mismatch: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    for (int d = 0; d < p.rank(); ++d)
      if (d != ax && p.dim(d) != parts[0].dim(d))
        fail(ErrorKind::Shape, "concat shape mismatch off the concat axis: " + shape_str(p.shape()) + " vs " +
                                   shape_str(parts[0].shape()));
    total += p.dim(ax);
  }
  os[static_cast<std::size_t>(ax)] = total;
  Tensor<T> out(os);
  const AxisSplit so = split_at(os, ax);
  T* O = out.mutable_data().data();
  Index offset = 0;
  std::vector<Index> offsets, sizes;
  for (const auto& p : parts) {
    const Index n = p.dim(ax);
    const T* P = p.data().data();
    for (Index o = 0; o < so.outer; ++o)
      std::copy_n(P + o * n * so.inner, n * so.inner, O + (o * total + offset) * so.inner);
    offsets.push_back(offset);
    sizes.push_back(n);
    offset += n;
  }
  bool track = false;
  for (const auto& p : parts) track = track || tracking<T>({&p});
  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  return finish<T>(std::move(out), "concat", track, [nodes, offsets, sizes, so, total](const std::vector<T>& g) {
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (!nodes[k]->requires_grad) continue;
      T* gp = grad_buffer(*nodes[k]);
      const Index n = sizes[k];
      for (Index o = 0; o < so.outer; ++o) {
        const T* src = g.data() + (o * total + offsets[k]) * so.inner;
        T* dst = gp + o * n * so.inner;
        for (Index j = 0; j < n * so.inner; ++j) dst[j] += src[j];
      }
    }
  });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, Index start, Index length) {
  const int ax = normalize_axis(axis, x.rank(), "slice");
  const AxisSplit sp = split_at(x.shape(), ax);
  if (start < 0 || length < 1 || start + length > sp.n)
    fail(ErrorKind::InvalidArgument, "slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                         ") out of range for " + shape_str(x.shape()));
  Shape os = x.shape();
  os[static_cast<std::size_t>(ax)] = length;
  Tensor<T> out(os);
  const T* X = x.data().data();
  T* O = out.mutable_data().data();
  for (Index o = 0; o < sp.outer; ++o)
    std::copy_n(X + (o * sp.n + start) * sp.inner, length * sp.inner, O + o * length * sp.inner);
  const bool track = tracking<T>({&x});
  auto xn = x.node_ptr();
  return finish<T>(std::move(out), "slice", track, [xn, sp, start, length](const std::vector<T>& g) {
    T* gx = grad_buffer(*xn);
    for (Index o = 0; o < sp.outer; ++o) {
      T* dst = gx + (o * sp.n + start) * sp.inner;
      const T* src = g.data() + o * length * sp.inner;
      for (Index j = 0; j < length * sp.inner; ++j) dst[j] += src[j];
    }
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  Index known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) fail(ErrorKind::InvalidArgument, "reshape: more than one inferred dimension");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0 && x.numel() % known == 0) shape[static_cast<std::size_t>(infer)] = x.numel() / known;
  if (shape_numel(shape) != x.numel())
    fail(ErrorKind::Shape, "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  Tensor<T> out(shape, std::vector<T>(x.data().begin(), x.data().end()));
  const bool track = tracking<T>({&x});
  auto xn = x.node_ptr();
  return finish<T>(std::move(out), "reshape", track, [xn](const std::vector<T>& g) {
    T* gx = grad_buffer(*xn);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& order) {
  const int r = x.rank();
  if (static_cast<int>(order.size()) != r)
    fail(ErrorKind::InvalidArgument, "permute order length does not match rank of " + shape_str(x.shape()));
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int a : order) {
    if (a < 0 || a >= r || seen[static_cast<std::size_t>(a)])
      fail(ErrorKind::InvalidArgument, "permute order is not a permutation");
    seen[static_cast<std::size_t>(a)] = true;
  }
  const Shape& is = x.shape();
  const auto ist = strides_of(is);
  Shape os(static_cast<std::size_t>(r));
  std::vector<Index> src_stride(static_cast<std::size_t>(r));
  for (int d = 0; d < r; ++d) {
    os[static_cast<std::size_t>(d)] = is[static_cast<std::size_t>(order[static_cast<std::size_t>(d)])];
    src_stride[static_cast<std::size_t>(d)] = ist[static_cast<std::size_t>(order[static_cast<std::size_t>(d)])];
  }
  Tensor<T> out(os);
  const Index n = out.numel();
  // Source offset of every output element, reused by the backward pass.
  std::vector<Index> src(static_cast<std::size_t>(n));
  {
    std::vector<Index> idx(static_cast<std::size_t>(r), 0);
    Index off = 0;
    for (Index k = 0; k < n; ++k) {
      src[static_cast<std::size_t>(k)] = off;
      for (int d = r - 1; d >= 0; --d) {
        const auto du = static_cast<std::size_t>(d);
        ++idx[du];
        off += src_stride[du];
        if (idx[du] < os[du]) break;
        off -= src_stride[du] * idx[du];
        idx[du] = 0;
      }
    }
  }
  const T* X = x.data().data();
  T* O = out.mutable_data().data();
  for (Index k = 0; k < n; ++k) O[k] = X[src[static_cast<std::size_t>(k)]];
  const bool track = tracking<T>({&x});
  auto xn = x.node_ptr();
  return finish<T>(std::move(out), "permute", track, [xn, src = std::move(src)](const std::vector<T>& g) {
    T* gx = grad_buffer(*xn);
    for (std::size_t k = 0; k < g.size(); ++k) gx[src[k]] += g[k];
  });
}

template <class T>
Tensor<T> roll(const Tensor<T>& x, const std::vector<int>& axes, const std::vector<Index>& shifts) {
  if (axes.size() != shifts.size()) fail(ErrorKind::InvalidArgument, "roll: axes and shifts differ in length");
  const int r = x.rank();
  const Shape& s = x.shape();
  const auto st = strides_of(s);
  std::vector<Index> shift(static_cast<std::size_t>(r), 0);
  for (std::size_t i = 0; i < axes.size(); ++i) {
    const int a = normalize_axis(axes[i], r, "roll");
    const Index n = s[static_cast<std::size_t>(a)];
    shift[static_cast<std::size_t>(a)] = ((shifts[i] % n) + n) % n;
  }
  Tensor<T> out(s);
  const Index n = out.numel();
  std::vector<Index> src(static_cast<std::size_t>(n));
  std::vector<Index> idx(static_cast<std::size_t>(r), 0);
  for (Index k = 0; k < n; ++k) {
    Index off = 0;
    for (int d = 0; d < r; ++d) {
      const auto du = static_cast<std::size_t>(d);
      Index si = idx[du] - shift[du];
      if (si < 0) si += s[du];
      off += si * st[du];
    }
    src[static_cast<std::size_t>(k)] = off;
    for (int d = r - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      if (++idx[du] < s[du]) break;
      idx[du] = 0;
    }
  }
  const T* X = x.data().data();
  T* O = out.mutable_data().data();
  for (Index k = 0; k < n; ++k) O[k] = X[src[static_cast<std::size_t>(k)]];
  const bool track = tracking<T>({&x});
  auto xn = x.node_ptr();
  return finish<T>(std::move(out), "roll", track, [xn, src = std::move(src)](const std::vector<T>& g) {
    T* gx = grad_buffer(*xn);
    for (std::size_t k = 0; k < g.size(); ++k) gx[src[k]] += g[k];
  });
}

template <class T>
Tensor<T> take_rows(const Tensor<T>& table, std::span<const int> rows) {
  if (table.rank() != 2) fail(ErrorKind::Shape, "take_rows table must be 2-D, got " + shape_str(table.shape()));
  const Index R = table.dim(0), D = table.dim(1);
  for (int r : rows)
    if (r < 0 || r >= R) fail(ErrorKind::InvalidArgument, "take_rows index " + std::to_string(r) + " out of range");
  if (rows.empty()) fail(ErrorKind::InvalidArgument, "take_rows with no rows");
  Tensor<T> out(Shape{static_cast<Index>(rows.size()), D});
  const T* Tb = table.data().data();
  T* O = out.mutable_data().data();
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(Tb + rows[i] * D, D, O + static_cast<Index>(i) * D);
  const bool track = tracking<T>({&table});
  auto tn = table.node_ptr();
  std::vector<int> idx(rows.begin(), rows.end());
  return finish<T>(std::move(out), "take_rows", track, [tn, idx = std::move(idx), D](const std::vector<T>& g) {
    T* gt = grad_buffer(*tn);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (Index j = 0; j < D; ++j) gt[idx[i] * D + j] += g[i * static_cast<std::size_t>(D) + static_cast<std::size_t>(j)];
  });
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  if (logits.rank() != 2) fail(ErrorKind::Shape, "cross_entropy expects [B, K] logits, got " + shape_str(logits.shape()));
  const Index B = logits.dim(0), K = logits.dim(1);
  if (static_cast<Index>(targets.size()) != B)
    fail(ErrorKind::Shape, "cross_entropy: " + std::to_string(targets.size()) + " targets for batch " + std::to_string(B));
  for (int t : targets)
    if (t < 0 || t >= K)
      fail(ErrorKind::InvalidArgument, "cross_entropy: target " + std::to_string(t) + " outside [0, " +
                                           std::to_string(K) + ")");
  const T* L = logits.data().data();
  std::vector<T> probs(static_cast<std::size_t>(B * K));
  double total = 0;
  for (Index b = 0; b < B; ++b) {
    const T* row = L + b * K;
    const T mx = *std::max_element(row, row + K);
    T s = 0;
    for (Index k = 0; k < K; ++k) s += std::exp(row[k] - mx);
    const T lse = mx + std::log(s);
    for (Index k = 0; k < K; ++k) probs[static_cast<std::size_t>(b * K + k)] = std::exp(row[k] - lse);
    total += static_cast<double>(lse - row[targets[static_cast<std::size_t>(b)]]);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(B)));
  const bool track = tracking<T>({&logits});
  auto ln = logits.node_ptr();
  std::vector<int> tg(targets.begin(), targets.end());
  return finish<T>(std::move(out), "cross_entropy", track,
                [ln, probs = std::move(probs), tg = std::move(tg), B, K](const std::vector<T>& g) {
                  T* gl = grad_buffer(*ln);
                  const T sc = g[0] / static_cast<T>(B);
                  for (Index b = 0; b < B; ++b)
                    for (Index k = 0; k < K; ++k) {
                      const T onehot = k == tg[static_cast<std::size_t>(b)] ? T(1) : T(0);
                      gl[b * K + k] += sc * (probs[static_cast<std::size_t>(b * K + k)] - onehot);
                    }
                });
}

#define HIFUSE_INSTANTIATE_OPS(T)                                                                        \
  template Tensor<T> elementwise<T>(ElementwiseKind, const Tensor<T>&, const Tensor<T>*, double);        \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dOptions);     \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double, int);   \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);                                                  \
  template Tensor<T> pool2d<T>(const Tensor<T>&, PoolKind, int, int);                                    \
  template Tensor<T> reduce<T>(const Tensor<T>&, int, ReduceKind);                                       \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);                                      \
  template Tensor<T> slice<T>(const Tensor<T>&, int, Index, Index);                                      \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<int>&);                              \
  template Tensor<T> roll<T>(const Tensor<T>&, const std::vector<int>&, const std::vector<Index>&);      \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                           \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                          \
  template Tensor<T> take_rows<T>(const Tensor<T>&, std::span<const int>);                               \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, std::span<const int>);

HIFUSE_INSTANTIATE_OPS(float)
HIFUSE_INSTANTIATE_OPS(double)

}  // namespace hifuse
