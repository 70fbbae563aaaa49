#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "hifuse/gradcheck.hpp"
#include "hifuse/ops.hpp"
#include "hifuse/window_attention.hpp"
#include "test_util.hpp"

using namespace hifuse;
using testutil::bit_equal;
using testutil::randn;

namespace {

template <class T = float>
WindowAttentionParams<T> random_params(Index C, int heads, int window, RngState& rng, double stddev = 0.3) {
  WindowAttentionParams<T> p;
  p.qkv_weight = randn<T>({3 * C, C}, rng, stddev);
  p.qkv_bias = randn<T>({3 * C}, rng, stddev);
  p.proj_weight = randn<T>({C, C}, rng, stddev);
  p.proj_bias = randn<T>({C}, rng, stddev);
  const Index buckets = (2 * window - 1) * (2 * window - 1);
  p.bias_table = randn<T>({buckets, heads}, rng, stddev);
  p.heads = heads;
  p.window = window;
  p.rel_index = relative_position_index(window);
  return p;
}

Tensor<float> eye(Index n) {
  Tensor<float> t({n, n});
  for (Index i = 0; i < n; ++i) t.mutable_data()[static_cast<std::size_t>(i * n + i)] = 1;
  return t;
}

}  // namespace

TEST(WindowPartition, TinyStageOneTiling) {
  const auto x = Tensor<float>::zeros({1, 56, 56, 96});
  const auto w = window_partition(x, 7);
  EXPECT_EQ(w.shape(), (Shape{64, 49, 96}));
  EXPECT_EQ(window_reverse(w, 7, 56, 56).shape(), (Shape{1, 56, 56, 96}));
}

TEST(WindowPartition, RoundTripIsBitExact) {
  RngState rng{1, 0};
  for (const auto& [H, W, M] : std::vector<std::array<Index, 3>>{{8, 8, 4}, {12, 8, 4}, {7, 14, 7}, {6, 6, 2}}) {
    const auto x = randn({2, H, W, 3}, rng);
    EXPECT_TRUE(bit_equal(window_reverse(window_partition(x, static_cast<int>(M)), static_cast<int>(M), H, W), x));
  }
}

TEST(WindowPartition, SingleWindowIsFlattenedInput) {
  RngState rng{2, 0};
  const auto x = randn({1, 4, 4, 3}, rng);
  const auto w = window_partition(x, 4);
  EXPECT_EQ(w.shape(), (Shape{1, 16, 3}));
  EXPECT_TRUE(std::equal(w.data().begin(), w.data().end(), x.data().begin()));
}

TEST(WindowPartition, TokenOrderIsRowMajorInsideWindows) {
  // Value = spatial position; check window 1 (top-right) of a 4x4 map, M=2.
  Tensor<float> x({1, 4, 4, 1});
  for (Index i = 0; i < 16; ++i) x.mutable_data()[static_cast<std::size_t>(i)] = static_cast<float>(i);
  const auto w = window_partition(x, 2);
  const std::vector<float> expect{2, 3, 6, 7};
  for (Index t = 0; t < 4; ++t) EXPECT_EQ(w.at({1, t, 0}), expect[static_cast<std::size_t>(t)]);
}

TEST(WindowReverse, PermutingWindowContentsOnlyTouchesThatTile) {
  RngState rng{3, 0};
  const auto x = randn({1, 8, 8, 2}, rng);
  auto w = window_partition(x, 4).clone();
  auto d = w.mutable_data();
  // Swap two tokens in window 3.
  const std::size_t base = 3 * 16 * 2;
  for (int c = 0; c < 2; ++c) std::swap(d[base + 0 * 2 + c], d[base + 5 * 2 + c]);
  const auto y = window_reverse(w, 4, 8, 8);
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 8; ++j)
      for (Index c = 0; c < 2; ++c) {
        if (i < 4 || j < 4) {
          EXPECT_EQ(y.at({0, i, j, c}), x.at({0, i, j, c}));
        }
      }
  EXPECT_EQ(y.at({0, 4, 4, 0}), x.at({0, 5, 5, 0}));
  EXPECT_EQ(y.at({0, 5, 5, 1}), x.at({0, 4, 4, 1}));
}

TEST(RelativePositionIndex, DegenerateAndSevenByseven) {
  const auto one = relative_position_index(1);
  ASSERT_EQ(one.index.size(), 1u);
  EXPECT_EQ(one.index[0], 0);
  const auto r = relative_position_index(7);
  std::set<int> distinct(r.index.begin(), r.index.end());
  EXPECT_EQ(distinct.size(), 169u);
  EXPECT_EQ(*distinct.begin(), 0);
  EXPECT_EQ(*distinct.rbegin(), 168);
  for (int i = 0; i < 49; ++i) EXPECT_EQ(r.at(i, i), r.at(0, 0));
  // Independent enumeration of the displacement formula.
  for (int i = 0; i < 49; ++i)
    for (int j = 0; j < 49; ++j) {
      const int dr = i / 7 - j / 7, dc = i % 7 - j % 7;
      ASSERT_EQ(r.at(i, j), (dr + 6) * 13 + (dc + 6));
    }
}

TEST(ShiftMask, ValuesAndSymmetry) {
  const auto m = shift_mask<float>(8, 8, 4, 2);
  ASSERT_EQ(m.shape(), (Shape{4, 16, 16}));
  for (Index w = 0; w < 4; ++w)
    for (Index i = 0; i < 16; ++i)
      for (Index j = 0; j < 16; ++j) {
        const float v = m.at({w, i, j});
        EXPECT_TRUE(v == 0.0f || v == -100.0f);
        EXPECT_EQ(v, m.at({w, j, i}));
      }
}

TEST(ShiftMask, OnlySeamWindowsAreMaskedAtTinyStageOne) {
  // Region labels of the rolled map: rows/cols split at H-M and H-shift.
  const int H = 56, M = 7, s = 3;
  const auto m = shift_mask<float>(H, H, M, s);
  ASSERT_EQ(m.shape(), (Shape{64, 49, 49}));
  auto band = [&](int v) { return v < H - M ? 0 : (v < H - s ? 1 : 2); };
  int masked_windows = 0;
  for (int wr = 0; wr < 8; ++wr)
    for (int wc = 0; wc < 8; ++wc) {
      const Index w = wr * 8 + wc;
      bool any = false;
      for (int i = 0; i < 49; ++i)
        for (int j = 0; j < 49; ++j) {
          const int li = band(wr * 7 + i / 7) * 3 + band(wc * 7 + i % 7);
          const int lj = band(wr * 7 + j / 7) * 3 + band(wc * 7 + j % 7);
          const float expect = li == lj ? 0.0f : -100.0f;
          ASSERT_EQ(m.at({w, i, j}), expect);
          any = any || expect != 0.0f;
        }
      // Masking appears only in the last window row or column, where the wrap seam lies.
      EXPECT_EQ(any, wr == 7 || wc == 7) << "window " << wr << "," << wc;
      masked_windows += any;
    }
  EXPECT_EQ(masked_windows, 15);
}

TEST(Wmsa, ProbeRowsSumToOne) {
  RngState rng{4, 0};
  const auto p = random_params(8, 2, 4, rng);
  const auto x = randn({2, 8, 8, 8}, rng);
  Tensor<float> probe;
  (void)wmsa(x, p, static_cast<const Tensor<float>*>(nullptr), &probe);
  ASSERT_EQ(probe.shape(), (Shape{8, 2, 16, 16}));
  for (Index r = 0; r < probe.numel() / 16; ++r) {
    double s = 0;
    for (Index j = 0; j < 16; ++j) s += probe.data()[static_cast<std::size_t>(r * 16 + j)];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Wmsa, ZeroWeightsGiveProjectionBias) {
  RngState rng{5, 0};
  auto p = random_params(6, 3, 2, rng);
  p.qkv_weight = Tensor<float>::zeros({18, 6});
  p.qkv_bias = Tensor<float>::zeros({18});
  p.bias_table = Tensor<float>::zeros({9, 3});
  const auto y = wmsa(randn({1, 4, 4, 6}, rng), p);
  for (Index t = 0; t < 16; ++t)
    for (Index c = 0; c < 6; ++c) EXPECT_EQ(y.data()[static_cast<std::size_t>(t * 6 + c)], p.proj_bias.data()[static_cast<std::size_t>(c)]);
}

TEST(Wmsa, FourTokenHandComputedAttention) {
  // Q = K = V = x (C = 2), identity projection, zero biases.
  WindowAttentionParams<double> p;
  Tensor<double> qkv({6, 2});
  auto q = qkv.mutable_data();
  for (int r = 0; r < 3; ++r) {
    q[static_cast<std::size_t>((2 * r) * 2 + 0)] = 1;
    q[static_cast<std::size_t>((2 * r + 1) * 2 + 1)] = 1;
  }
  p.qkv_weight = qkv;
  p.qkv_bias = Tensor<double>::zeros({6});
  p.proj_weight = Tensor<double>({2, 2}, std::vector<double>{1, 0, 0, 1});
  p.proj_bias = Tensor<double>::zeros({2});
  p.bias_table = Tensor<double>::zeros({9, 1});
  p.heads = 1;
  p.window = 2;
  p.rel_index = relative_position_index(2);
  const std::vector<double> xs{1.0, 0.0, 0.0, 1.0, 0.5, -0.5, 2.0, 1.0};
  const Tensor<double> x({1, 2, 2, 2}, xs);
  const auto y = wmsa(x, p);
  for (int i = 0; i < 4; ++i) {
    double logits[4], z = 0;
    for (int j = 0; j < 4; ++j) {
      logits[j] = (xs[2 * i] * xs[2 * j] + xs[2 * i + 1] * xs[2 * j + 1]) / std::sqrt(2.0);
      z += std::exp(logits[j]);
    }
    for (int c = 0; c < 2; ++c) {
      double v = 0;
      for (int j = 0; j < 4; ++j) v += std::exp(logits[j]) / z * xs[2 * j + c];
      EXPECT_NEAR(y.data()[static_cast<std::size_t>(2 * i + c)], v, 1e-12);
    }
  }
}

TEST(Wmsa, WindowsAreIndependentOfOrder) {
  RngState rng{6, 0};
  const auto p = random_params(4, 2, 2, rng);
  const auto x = randn({1, 4, 4, 4}, rng);
  // Swap the top-left and bottom-right 2x2 tiles.
  auto swap_tiles = [](const Tensor<float>& t) {
    auto out = t.clone();
    auto d = out.mutable_data();
    for (Index i = 0; i < 2; ++i)
      for (Index j = 0; j < 2; ++j)
        for (Index c = 0; c < 4; ++c)
          std::swap(d[static_cast<std::size_t>((i * 4 + j) * 4 + c)], d[static_cast<std::size_t>(((i + 2) * 4 + j + 2) * 4 + c)]);
    return out;
  };
  EXPECT_TRUE(bit_equal(wmsa(swap_tiles(x), p), swap_tiles(wmsa(x, p))));
}

TEST(Wmsa, ConstantInputGivesConstantOutput) {
  RngState rng{7, 0};
  auto p = random_params(4, 1, 2, rng);
  p.bias_table = Tensor<float>::zeros({9, 1});
  const auto y = wmsa(Tensor<float>({1, 4, 4, 4}, 0.7f), p);
  for (Index t = 1; t < 16; ++t)
    for (Index c = 0; c < 4; ++c)
      EXPECT_NEAR(y.data()[static_cast<std::size_t>(t * 4 + c)], y.data()[static_cast<std::size_t>(c)], 1e-6);
}

TEST(ShiftedWmsa, SelfAttentionPassthroughRoundTrips) {
  // A huge zero-displacement bias makes attention one-hot on the token itself.
  const Index C = 3;
  WindowAttentionParams<float> p;
  Tensor<float> qkv({3 * C, C});
  for (Index i = 0; i < C; ++i) qkv.mutable_data()[static_cast<std::size_t>((2 * C + i) * C + i)] = 1;
  p.qkv_weight = qkv;
  p.qkv_bias = Tensor<float>::zeros({3 * C});
  p.proj_weight = eye(C);
  p.proj_bias = Tensor<float>::zeros({C});
  p.window = 4;
  p.heads = 1;
  p.rel_index = relative_position_index(4);
  p.bias_table = Tensor<float>::zeros({49, 1});
  p.bias_table.mutable_data()[static_cast<std::size_t>(p.rel_index.at(0, 0))] = 1000.0f;
  RngState rng{8, 0};
  const auto x = randn({1, 8, 8, C}, rng);
  EXPECT_TRUE(bit_equal(shifted_wmsa(x, p, 2), x));
}

TEST(ShiftedWmsa, MaskedPairsCarryNegligibleMass) {
  RngState rng{9, 0};
  // The e^-100 bound assumes unmasked logits span far less than 100, as
  // they do at trained-network scales; weights are 15x the init std here.
  const auto p = random_params(8, 2, 7, rng, 0.3);
  const auto x = randn({1, 14, 14, 8}, rng);
  Tensor<float> probe;
  (void)shifted_wmsa(x, p, 3, &probe);
  const auto mask = shift_mask<float>(14, 14, 7, 3);
  double worst = 0;
  int masked = 0;
  for (Index w = 0; w < 4; ++w)
    for (Index h = 0; h < 2; ++h)
      for (Index i = 0; i < 49; ++i)
        for (Index j = 0; j < 49; ++j)
          if (mask.at({w, i, j}) != 0.0f) {
            ++masked;
            worst = std::max(worst, static_cast<double>(probe.at({w, h, i, j})));
          }
  EXPECT_GT(masked, 0);
  EXPECT_LT(worst, 1e-6);
  EXPECT_LT(49 * std::exp(-100.0), 1e-6);
}

TEST(Complexity, ClosedFormValues) {
  EXPECT_EQ(complexity_count(AttentionKind::WindowMsa, 56, 56, 96, 7), 145108992u);
  EXPECT_EQ(complexity_count(AttentionKind::Msa, 56, 56, 96, 7), 2003828736u);
  EXPECT_EQ(complexity_count(AttentionKind::WindowMsa, 7, 7, 768, 7), complexity_count(AttentionKind::Msa, 7, 7, 768, 7));
  for (Index h : {14, 28, 56})
    EXPECT_LT(complexity_count(AttentionKind::WindowMsa, h, h, 64, 7), complexity_count(AttentionKind::Msa, h, h, 64, 7));
}

TEST(Complexity, CountedMacsMatchClosedForm) {
  RngState rng{10, 0};
  const auto p = random_params(8, 2, 4, rng);
  const auto x = randn({1, 8, 8, 8}, rng);
  FlopTally tally;
  {
    FlopCounterScope scope(tally);
    (void)wmsa(x, p);
  }
  EXPECT_EQ(tally.total(), complexity_count(AttentionKind::WindowMsa, 8, 8, 8, 4));
}

TEST(Wmsa, GradientCheckOnSevenBySevenInput) {
  RngState rng{11, 0};
  auto p = random_params<double>(8, 2, 7, rng);
  Tensor<double> x = randn<double>({1, 7, 7, 8}, rng);
  GradTargets<double> wrt{{"x", x},           {"qkv_weight", p.qkv_weight}, {"qkv_bias", p.qkv_bias},
                          {"proj_weight", p.proj_weight}, {"proj_bias", p.proj_bias}, {"bias_table", p.bias_table}};
  const auto r = grad_check<double>([&] { return wmsa(x, p); }, wrt);
  EXPECT_LT(r.max_error, 1e-6) << r.worst;
  const auto rs = grad_check<double>([&] { return shifted_wmsa(x, p, 3); }, wrt);
  EXPECT_LT(rs.max_error, 1e-6) << rs.worst;
}

TEST(WindowParams, ValidateRejectsIndivisibleHeads) {
  RngState rng{12, 0};
  const auto p = random_params(8, 3, 2, rng);
  EXPECT_THROW(p.validate(8), Error);
}
