#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "hifuse/gradcheck.hpp"
#include "hifuse/ops.hpp"
#include "hifuse/selfcheck.hpp"
#include "test_util.hpp"

using namespace hifuse;
using testutil::bit_equal;
using testutil::randn;

namespace {

// Maclaurin series; converges quickly for |x| <= 3.
double series_erf(double x) {
  double term = x, total = x;
  for (int n = 1; n < 80; ++n) {
    term *= -x * x / n;
    total += term / (2 * n + 1);
  }
  return 2.0 / std::sqrt(std::numbers::pi) * total;
}

// Straight nested-loop convolution, no padding tricks beyond bounds checks.
std::vector<double> naive_conv(const Tensor<float>& x, const Tensor<float>& w, int stride, int pad, int groups) {
  const Index B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index Cout = w.dim(0), cpg = w.dim(1), k = w.dim(2);
  const Index Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  const Index opg = Cout / groups;
  std::vector<double> out(static_cast<std::size_t>(B * Cout * Ho * Wo), 0.0);
  for (Index b = 0; b < B; ++b)
    for (Index co = 0; co < Cout; ++co)
      for (Index i = 0; i < Ho; ++i)
        for (Index j = 0; j < Wo; ++j) {
          double acc = 0;
          const Index g = co / opg;
          for (Index ci = 0; ci < cpg; ++ci)
            for (Index u = 0; u < k; ++u)
              for (Index v = 0; v < k; ++v) {
                const Index y = i * stride - pad + u, xx = j * stride - pad + v;
                if (y < 0 || y >= H || xx < 0 || xx >= W) continue;
                acc += static_cast<double>(x.at({b, g * cpg + ci, y, xx})) * w.at({co, ci, u, v});
              }
          out[static_cast<std::size_t>(((b * Cout + co) * Ho + i) * Wo + j)] = acc;
        }
  (void)Cin;
  return out;
}

}  // namespace

TEST(Elementwise, GeluFixedPointsAndErfOracle) {
  const auto x = Tensor<double>({3}, std::vector<double>{0.0, 1.0, -1.5});
  const auto y = gelu(x);
  EXPECT_EQ(y.data()[0], 0.0);
  for (int i = 1; i < 3; ++i) {
    const double v = x.data()[i];
    EXPECT_NEAR(y.data()[i], v * 0.5 * (1 + series_erf(v / std::sqrt(2.0))), 1e-12);
  }
  EXPECT_NEAR(gelu(Tensor<float>::scalar(1.0f)).item(), 0.841345, 1e-5);
}

TEST(Elementwise, SigmoidOfZeroIsHalf) { EXPECT_EQ(sigmoid(Tensor<float>::scalar(0.0f)).item(), 0.5f); }

TEST(Elementwise, BroadcastShapesAndErrors) {
  EXPECT_EQ(broadcast_shape({2, 3, 4}, {3, 1}), (Shape{2, 3, 4}));
  EXPECT_THROW(broadcast_shape({2, 3}, {4}), Error);
  const Tensor<float> a({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  const Tensor<float> b({3}, std::vector<float>{10, 20, 30});
  const auto c = add(a, b);
  EXPECT_EQ(c.at({1, 2}), 36.0f);
}

TEST(Matmul, IdentityAndHandContraction) {
  RngState rng{3, 0};
  const auto X = randn({3, 4}, rng);
  Tensor<float> I({3, 3});
  for (int i = 0; i < 3; ++i) I.mutable_data()[static_cast<std::size_t>(i * 4)] = 1;
  EXPECT_TRUE(bit_equal(matmul(I, X), X));
  const Tensor<float> A({2, 2}, std::vector<float>{1, 2, 3, 4});
  const Tensor<float> B({2, 1}, std::vector<float>{1, 1});
  const auto C = matmul(A, B);
  EXPECT_EQ(C.shape(), (Shape{2, 1}));
  EXPECT_EQ(C.data()[0], 3.0f);
  EXPECT_EQ(C.data()[1], 7.0f);
}

TEST(Matmul, GradientOfSumIsBTransposeBroadcast) {
  RngState rng{4, 0};
  Tensor<double> A = randn<double>({3, 4}, rng);
  const Tensor<double> B = randn<double>({4, 2}, rng);
  A.set_requires_grad(true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(sum(matmul(A, B)));
  }
  // d/dA_ik sum_j (AB)_ij = sum_j B_kj
  for (Index i = 0; i < 3; ++i)
    for (Index k = 0; k < 4; ++k)
      EXPECT_NEAR(A.grad()[static_cast<std::size_t>(i * 4 + k)], B.at({k, 0}) + B.at({k, 1}), 1e-12);
  GradCheckOptions opt;
  opt.h = 1e-3;
  opt.fourth_order = false;
  const Tensor<double> Bc = B;
  const auto r = grad_check<double>([&] { return sum(matmul(A, Bc)); }, {{"A", A}}, opt);
  EXPECT_LT(r.max_error, 1e-6) << r.worst;
}

TEST(Conv2d, DepthwiseOnesCountsOverlap) {
  const auto x = Tensor<float>::ones({1, 1, 3, 3});
  const auto w = Tensor<float>::ones({1, 1, 3, 3});
  const auto y = conv2d(x, w, Tensor<float>{}, {1, 1, 1});
  EXPECT_EQ(y.at({0, 0, 1, 1}), 9.0f);
  EXPECT_EQ(y.at({0, 0, 0, 0}), 4.0f);
  EXPECT_EQ(y.at({0, 0, 2, 2}), 4.0f);
}

TEST(Conv2d, StemStrideArithmetic) {
  const auto x = Tensor<float>::zeros({1, 3, 224, 224});
  const auto w = Tensor<float>::zeros({96, 3, 4, 4});
  EXPECT_EQ(conv2d(x, w, Tensor<float>{}, {4, 0, 1}).shape(), (Shape{1, 96, 56, 56}));
}

TEST(Conv2d, GroupedMatchesNestedLoopOracle) {
  RngState rng{5, 0};
  const auto x = randn({2, 4, 8, 8}, rng);
  const auto w = randn({6, 2, 3, 3}, rng);
  const auto y = conv2d(x, w, Tensor<float>{}, {1, 1, 2});
  const auto ref = naive_conv(x, w, 1, 1, 2);
  ASSERT_EQ(y.numel(), static_cast<Index>(ref.size()));
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-4);
  // Same result as two independent convolutions concatenated.
  const auto y0 = conv2d(slice(x, 1, 0, 2), slice(w, 0, 0, 3), Tensor<float>{}, {1, 1, 1});
  const auto y1 = conv2d(slice(x, 1, 2, 2), slice(w, 0, 3, 3), Tensor<float>{}, {1, 1, 1});
  EXPECT_LT(testutil::max_abs_diff(y, concat(std::vector{y0, y1}, 1)), 1e-5);
}

TEST(Conv2d, StridedWithBiasMatchesOracle) {
  RngState rng{6, 0};
  const auto x = randn({1, 3, 9, 9}, rng);
  const auto w = randn({4, 3, 3, 3}, rng);
  const auto b = randn({4}, rng);
  const auto y = conv2d(x, w, b, {2, 1, 1});
  const auto ref = naive_conv(x, w, 2, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 4, 5, 5}));
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i] + b.data()[i / 25], 1e-4);
}

TEST(LayerNorm, ConstantInputGivesBeta) {
  const auto x = Tensor<float>({1, 4, 2, 2}, 3.5f);
  const Tensor<float> g({4}, std::vector<float>{1, 2, 3, 4});
  const Tensor<float> b({4}, std::vector<float>{0.1f, -0.2f, 0.3f, -0.4f});
  const auto y = layer_norm(x, g, b);
  for (Index c = 0; c < 4; ++c) EXPECT_EQ(y.at({0, c, 1, 1}), b.data()[static_cast<std::size_t>(c)]);
}

TEST(LayerNorm, TwoValuesNormalizeToPlusMinusOne) {
  const Tensor<float> x({1, 2}, std::vector<float>{1, 3});
  const auto y = layer_norm(x, Tensor<float>::ones({2}), Tensor<float>::zeros({2}), 1e-6, 1);
  EXPECT_NEAR(y.data()[0], -1.0, 1e-3);
  EXPECT_NEAR(y.data()[1], 1.0, 1e-3);
}

TEST(LayerNorm, ChannelMeanIsZero) {
  RngState rng{7, 0};
  const auto x = randn({2, 16, 3, 3}, rng, 3.0);
  const auto y = layer_norm(x, Tensor<float>::ones({16}), Tensor<float>::zeros({16}));
  const auto m = reduce(y, 1, ReduceKind::Mean);
  for (float v : m.data()) EXPECT_NEAR(v, 0.0, 1e-5);
}

TEST(Softmax, ClosedForms) {
  const auto u = softmax(Tensor<float>({7}, 0.3f), 0);
  for (float v : u.data()) EXPECT_NEAR(v, 1.0 / 7, 1e-7);
  const Tensor<double> x({2}, std::vector<double>{0.0, std::log(3.0)});
  const auto s = softmax(x, 0);
  EXPECT_NEAR(s.data()[0], 0.25, 1e-15);
  EXPECT_NEAR(s.data()[1], 0.75, 1e-15);
}

TEST(Softmax, ShiftInvariantAndNormalized) {
  RngState rng{8, 0};
  const auto x = randn({4, 9}, rng, 4.0);
  const auto a = softmax(x, -1);
  const auto b = softmax(add(x, Tensor<float>::scalar(12.5f)), -1);
  EXPECT_LE(testutil::max_abs_diff(a, b), 1e-6);
  for (Index r = 0; r < 4; ++r) {
    double s = 0;
    for (Index c = 0; c < 9; ++c) {
      EXPECT_GE(a.at({r, c}), 0.0f);
      s += a.at({r, c});
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Pool2d, Basics) {
  EXPECT_EQ(pool2d(Tensor<float>({1, 2, 5, 5}, 2.25f), PoolKind::GlobalAvg).at({0, 1, 0, 0}), 2.25f);
  const Tensor<float> x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  EXPECT_EQ(pool2d(x, PoolKind::Max, 2, 2).item(), 4.0f);
  EXPECT_EQ(pool2d(x, PoolKind::Avg, 2, 2).item(), 2.5f);
  EXPECT_EQ(pool2d(Tensor<float>::zeros({1, 96, 56, 56}), PoolKind::Avg, 2, 2).shape(), (Shape{1, 96, 28, 28}));
}

TEST(Concat, ChannelAdditivityAndRoundTrip) {
  RngState rng{9, 0};
  std::vector<Tensor<float>> parts;
  for (int i = 0; i < 3; ++i) parts.push_back(randn({1, 96, 4, 4}, rng));
  const auto c = concat(parts, 1);
  EXPECT_EQ(c.shape(), (Shape{1, 288, 4, 4}));
  for (int i = 0; i < 3; ++i) EXPECT_TRUE(bit_equal(slice(c, 1, 96 * i, 96), parts[static_cast<std::size_t>(i)]));
  // Stage-1 fusion input width.
  const std::vector<Tensor<float>> stage1{Tensor<float>::zeros({2, 96, 56, 56}), Tensor<float>::zeros({2, 96, 56, 56}),
                                          Tensor<float>::zeros({2, 96, 56, 56})};
  EXPECT_EQ(concat(stage1, 1).shape(), (Shape{2, 288, 56, 56}));
}

TEST(ShapeOps, ReshapePermuteRollRoundTrips) {
  RngState rng{10, 0};
  const auto x = randn({2, 3, 4, 5}, rng);
  EXPECT_TRUE(bit_equal(reshape(reshape(x, Shape{6, 20}), x.shape()), x));
  EXPECT_TRUE(bit_equal(permute(permute(x, {0, 2, 3, 1}), {0, 3, 1, 2}), x));
  EXPECT_TRUE(bit_equal(roll(roll(x, {2, 3}, {-1, 2}), {2, 3}, {1, -2}), x));
  const Tensor<float> r({4}, std::vector<float>{0, 1, 2, 3});
  const auto s = roll(r, {0}, {1});
  EXPECT_EQ(s.data()[0], 3.0f);
  EXPECT_EQ(s.data()[1], 0.0f);
}

TEST(Backward, SumAndSquare) {
  RngState rng{11, 0};
  Tensor<float> x = randn({3, 4}, rng);
  x.set_requires_grad(true);
  {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    tape.backward(sum(x));
  }
  for (float g : x.grad()) EXPECT_EQ(g, 1.0f);
  x.zero_grad();
  {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    tape.backward(sum(mul(x, x)));
  }
  for (std::size_t i = 0; i < x.data().size(); ++i) EXPECT_EQ(x.grad()[i], 2 * x.data()[i]);
}

TEST(Backward, FanOutAccumulatesAdditively) {
  Tensor<double> x({2}, std::vector<double>{1.5, -2.0});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  const auto y = add(mul(x, x), scale(x, 3.0));
  tape.backward(sum(y));
  EXPECT_EQ(x.grad()[0], 2 * 1.5 + 3);
  EXPECT_EQ(x.grad()[1], 2 * -2.0 + 3);
}

TEST(Backward, NoTapeMeansNoGradient) {
  Tensor<float> x({2}, 1.0f);
  x.set_requires_grad(true);
  const auto y = sum(mul(x, x));
  EXPECT_FALSE(x.has_grad());
  EXPECT_EQ(y.item(), 2.0f);
}

TEST(NanCheck, NamesTheOperation) {
  set_nan_check(true);
  const Tensor<float> x({1}, std::vector<float>{1e30f});
  try {
    (void)mul(x, x);
    set_nan_check(false);
    FAIL() << "expected a numeric error";
  } catch (const Error& e) {
    set_nan_check(false);
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
    EXPECT_NE(std::string(e.what()).find("mul"), std::string::npos) << e.what();
  }
}

TEST(TruncNormal, BoundsDeterminismAndMean) {
  RngState a{42, 0}, b{42, 0};
  const auto t = trunc_normal_init<float>({100000}, 0.02, a);
  const auto u = trunc_normal_init<float>({100000}, 0.02, b);
  EXPECT_TRUE(bit_equal(t, u));
  double s = 0;
  for (float v : t.data()) {
    ASSERT_GE(v, -0.04f);
    ASSERT_LE(v, 0.04f);
    s += v;
  }
  EXPECT_LT(std::abs(s / 1e5), 3 * 0.02 / std::sqrt(1e5) * 5);
}

TEST(Rng, CounterBasedReplay) {
  RngState a{7, 0};
  std::vector<std::uint64_t> first;
  for (int i = 0; i < 10; ++i) first.push_back(a.next_u64());
  RngState b{7, 5};
  for (int i = 5; i < 10; ++i) EXPECT_EQ(b.next_u64(), first[static_cast<std::size_t>(i)]);
  RngState c{8, 0};
  EXPECT_NE(c.next_u64(), first[0]);
  RngState d{9, 0};
  for (int i = 0; i < 1000; ++i) {
    const double u = d.next_uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

TEST(GradCheck, OpsPassInBothPrecisions) {
  for (const auto& r : selfcheck_grad_ops()) EXPECT_TRUE(r.pass) << r.name << ": " << r.detail;
}
