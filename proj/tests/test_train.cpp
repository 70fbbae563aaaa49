#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "hifuse/gradcheck.hpp"
#include "hifuse/ops.hpp"
#include "hifuse/synthetic.hpp"
#include "hifuse/train.hpp"
#include "test_util.hpp"

using namespace hifuse;
using testutil::bit_equal;
using testutil::randn;

namespace {

TrainRunConfig desk_train(int epochs = 30) {
  TrainRunConfig t;
  t.epochs = epochs;
  t.seed = 0;
  return t;
}

Dataset toy(int n, std::uint64_t seed = 0) {
  PreprocessOptions opt;
  opt.image_size = 32;
  return synthetic_dataset(n, opt, seed);
}

ConfusionMatrix cm_from(const std::vector<int>& targets, const std::vector<int>& preds, int k) {
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < targets.size(); ++i) cm.add(targets[i], preds[i]);
  return cm;
}

}  // namespace

TEST(CrossEntropy, UniformAndSaturated) {
  const auto u = cross_entropy(Tensor<double>({2, 7}, 0.4), std::vector<int>{3, 6});
  EXPECT_NEAR(u.item(), std::log(7.0), 1e-12);
  EXPECT_NEAR(u.item(), 1.94591, 1e-5);
  Tensor<double> m({1, 3}, std::vector<double>{0.0, 20.0, 0.0});
  EXPECT_LT(cross_entropy(m, std::vector<int>{1}).item(), 1e-8);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHotOverN) {
  RngState rng{1, 0};
  Tensor<double> z = randn<double>({3, 4}, rng, 2.0);
  const std::vector<int> t{2, 0, 3};
  z.set_requires_grad(true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(cross_entropy(z, t));
  }
  for (Index b = 0; b < 3; ++b) {
    double zmax = -1e300, s = 0;
    for (Index k = 0; k < 4; ++k) zmax = std::max(zmax, z.at({b, k}));
    for (Index k = 0; k < 4; ++k) s += std::exp(z.at({b, k}) - zmax);
    for (Index k = 0; k < 4; ++k) {
      const double p = std::exp(z.at({b, k}) - zmax) / s;
      const double expect = (p - (k == t[static_cast<std::size_t>(b)] ? 1.0 : 0.0)) / 3.0;
      EXPECT_NEAR(z.grad()[static_cast<std::size_t>(b * 4 + k)], expect, 1e-12);
    }
  }
  z.set_requires_grad(false);
  z.zero_grad();
  const auto r = grad_check<double>([&] { return cross_entropy(z, t); }, {{"logits", z}});
  EXPECT_LT(r.max_error, 1e-6) << r.worst;
}

TEST(CrossEntropy, MatchesSoftmaxThenLog) {
  RngState rng{2, 0};
  const auto z = randn<float>({5, 7}, rng, 3.0);
  const std::vector<int> t{0, 6, 3, 3, 1};
  const auto p = softmax(z, -1);
  double naive = 0;
  for (Index b = 0; b < 5; ++b) naive -= std::log(static_cast<double>(p.at({b, t[static_cast<std::size_t>(b)]})));
  EXPECT_NEAR(cross_entropy(z, t).item(), naive / 5, 1e-6);
}

TEST(AdamW, ScalarOracleReplay) {
  const double lr = 1e-4, wd = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ParamSet<double> ps;
  ps.add("p", Tensor<double>({1}, std::vector<double>{1.0}), true);
  OptimState<double> st;
  st.init(ps);
  // Standalone replay of decoupled decay + bias-corrected Adam.
  double p = 1.0, m = 0, v = 0;
  const double grads[3] = {1.0, -0.5, 2.0};
  for (int t = 1; t <= 3; ++t) {
    auto& param = ps.get("p");
    param.set_requires_grad(true);
    param.node().grad.assign(1, grads[t - 1]);
    adamw_step(ps, st, lr, AdamWHyper{wd, b1, b2, eps});
    p = p - lr * wd * p;
    m = b1 * m + (1 - b1) * grads[t - 1];
    v = b2 * v + (1 - b2) * grads[t - 1] * grads[t - 1];
    p -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    EXPECT_NEAR(ps.get("p").data()[0], p, 1e-15) << "step " << t;
    if (t == 1) EXPECT_NEAR(p, 1.0 - lr * wd - lr * (1.0 / (1.0 + eps)), 1e-15);
  }
  EXPECT_EQ(st.step, 3);
  EXPECT_EQ(st.m[0].shape(), ps.get("p").shape());
}

TEST(AdamW, ZeroGradWithoutDecayAndZeroLrLeaveParams) {
  HiFuseModel<float> model(ModelConfig::desk(), 3);
  std::vector<Tensor<float>> before;
  for (const auto& e : model.params().entries()) before.push_back(e.tensor.clone());
  model.params().set_requires_grad(true);
  for (auto& e : model.params().entries()) e.tensor.node().grad.assign(static_cast<std::size_t>(e.tensor.numel()), 0.0f);
  OptimState<float> st;
  adamw_step(model.params(), st, 1e-3, AdamWHyper{0.0});
  RngState rng{3, 0};
  for (auto& e : model.params().entries())
    for (auto& g : e.tensor.mutable_grad()) g = static_cast<float>(rng.next_normal());
  adamw_step(model.params(), st, 0.0, AdamWHyper{0.0});
  for (std::size_t i = 0; i < before.size(); ++i)
    EXPECT_TRUE(bit_equal(before[i], model.params().entries()[i].tensor)) << model.params().entries()[i].name;
}

TEST(AdamW, DecayExcludesBiasesAndNorms) {
  HiFuseModel<float> model(ModelConfig::desk(), 4);
  for (const auto& e : model.params().entries()) {
    const bool bias_or_norm = e.name.ends_with(".bias") || e.name.find(".norm.") != std::string::npos;
    EXPECT_EQ(e.decay, !bias_or_norm) << e.name;
  }
}

TEST(AdamW, MissingGradientIsAStateError) {
  ParamSet<float> ps;
  ps.add("w", Tensor<float>({2}, 1.0f), true);
  OptimState<float> st;
  try {
    adamw_step(ps, st, 1e-3, AdamWHyper{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::State);
  }
}

TEST(Schedule, WarmupEndpointsAndMidpoint) {
  TrainRunConfig cfg;
  const std::int64_t total = 1001, warmup = 50;
  EXPECT_NEAR(lr_at(0, total, warmup, cfg), 1e-4 / 50, 1e-18);
  EXPECT_DOUBLE_EQ(lr_at(warmup, total, warmup, cfg), 1e-4);
  EXPECT_NEAR(lr_at(total - 1, total, warmup, cfg), 1e-6, 1e-9);
  EXPECT_NEAR(lr_at(525, total, warmup, cfg), (1e-4 + 1e-6) / 2, 1e-9);
  // Any step against the closed form.
  for (std::int64_t s = warmup; s < total; s += 37) {
    const double t = static_cast<double>(s - warmup) / static_cast<double>(total - 1 - warmup);
    EXPECT_NEAR(lr_at(s, total, warmup, cfg), 1e-6 + (1e-4 - 1e-6) * 0.5 * (1 + std::cos(std::numbers::pi * t)), 1e-15);
  }
  for (std::int64_t s = 0; s + 1 < warmup; ++s) EXPECT_LT(lr_at(s, total, warmup, cfg), lr_at(s + 1, total, warmup, cfg));
  cfg.schedule = "constant";
  EXPECT_EQ(lr_at(700, total, warmup, cfg), 1e-4);
  EXPECT_THROW(lr_at(total, total, warmup, cfg), Error);
}

TEST(Metrics, HandCountedTwoByTwo) {
  const auto cm = cm_from({0, 1, 1, 1}, {0, 0, 1, 1}, 2);
  EXPECT_EQ(cm.at(0, 0), 1);
  EXPECT_EQ(cm.at(0, 1), 0);
  EXPECT_EQ(cm.at(1, 0), 1);
  EXPECT_EQ(cm.at(1, 1), 2);
  const auto m = compute_metrics(cm);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.75);
  EXPECT_DOUBLE_EQ(m.per_class[0].precision, 0.5);
  EXPECT_DOUBLE_EQ(m.per_class[0].recall, 1.0);
  EXPECT_NEAR(m.per_class[0].f1, 2.0 / 3, 1e-15);
  EXPECT_DOUBLE_EQ(m.per_class[1].precision, 1.0);
  EXPECT_NEAR(m.per_class[1].recall, 2.0 / 3, 1e-15);
  EXPECT_NEAR(m.per_class[1].f1, 0.8, 1e-15);
  EXPECT_NEAR(m.macro_f1, (2.0 / 3 + 0.8) / 2, 1e-15);
  EXPECT_NEAR(m.macro_f1, 0.7333, 1e-4);
}

TEST(Metrics, DiagonalIsPerfect) {
  const auto m = compute_metrics(cm_from({0, 1, 2, 2, 1}, {0, 1, 2, 2, 1}, 3));
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_EQ(m.macro_precision, 1.0);
  EXPECT_EQ(m.macro_recall, 1.0);
  EXPECT_EQ(m.macro_f1, 1.0);
}

TEST(Metrics, RandomDrawsAgainstBruteForce) {
  RngState rng{5, 0};
  const int K = 7, N = 1000;
  std::vector<int> t(N), p(N);
  for (int i = 0; i < N; ++i) {
    t[static_cast<std::size_t>(i)] = static_cast<int>(rng.next_u64() % K);
    p[static_cast<std::size_t>(i)] = static_cast<int>(rng.next_u64() % K);
  }
  const auto cm = cm_from(t, p, K);
  const auto m = compute_metrics(cm);
  EXPECT_EQ(cm.total(), N);
  EXPECT_DOUBLE_EQ(m.accuracy, static_cast<double>(cm.trace()) / static_cast<double>(cm.total()));
  double maxf1 = 0;
  for (int k = 0; k < K; ++k) {
    const auto& c = m.per_class[static_cast<std::size_t>(k)];
    // F1 two ways.
    const double harmonic = c.precision + c.recall > 0 ? 2 * c.precision * c.recall / (c.precision + c.recall) : 0;
    const double counts = static_cast<double>(2 * c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
    EXPECT_NEAR(c.f1, harmonic, 1e-12);
    EXPECT_NEAR(c.f1, counts, 1e-12);
    maxf1 = std::max(maxf1, c.f1);
    for (double v : {c.precision, c.recall, c.f1}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_LE(m.macro_f1, maxf1);
}

TEST(Metrics, ArgmaxTiesGoLow) {
  const std::vector<float> row{0.5f, 2.0f, 2.0f, -1.0f};
  EXPECT_EQ(argmax<float>(row), 1);
}

TEST(Evaluate, ConstantPredictorFillsOneColumn) {
  HiFuseModel<float> model(ModelConfig::desk(), 6);
  for (auto& v : model.params().get("head.fc.weight").mutable_data()) v = 0;
  auto b = model.params().get("head.fc.bias").mutable_data();
  b[0] = 5;
  b[1] = 0;
  const Dataset data = toy(10);
  const auto r = evaluate(model, data, 4);
  EXPECT_EQ(r.cm.total(), 10);
  EXPECT_EQ(r.cm.at(0, 0) + r.cm.at(1, 0), 10);
  EXPECT_EQ(r.cm.at(0, 1) + r.cm.at(1, 1), 0);
}

TEST(Evaluate, LeavesParametersUntouched) {
  HiFuseModel<float> model(ModelConfig::desk(), 7);
  std::vector<Tensor<float>> before;
  for (const auto& e : model.params().entries()) before.push_back(e.tensor.clone());
  (void)evaluate(model, toy(6), 4);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(bit_equal(before[i], model.params().entries()[i].tensor));
}

TEST(TrainEpoch, TwoStepsPerEpochLossFallsAndRunsReplay) {
  const Dataset data = toy(64);
  const auto cfg = desk_train();
  EXPECT_EQ(steps_per_epoch(64, 32), 2);
  EXPECT_EQ(steps_per_epoch(65, 32), 3);
  auto run = [&](std::vector<EpochSummary>& out) {
    HiFuseModel<float> model(ModelConfig::desk(), cfg.seed);
    TrainState st = make_train_state(model, cfg);
    for (int e = 0; e < 5; ++e) {
      out.push_back(train_epoch(model, data, st, cfg));
      st.epoch = out.back().epoch;
    }
    EXPECT_EQ(st.optim.step, 10);
    return model.params().entries();
  };
  std::vector<EpochSummary> a, b;
  const auto pa = run(a);
  const auto pb = run(b);
  for (const auto& s : a) EXPECT_EQ(s.steps, 2);
  for (int e = 1; e < 5; ++e) EXPECT_LT(a[static_cast<std::size_t>(e)].mean_loss, a[static_cast<std::size_t>(e - 1)].mean_loss) << "epoch " << e + 1;
  for (std::size_t e = 0; e < a.size(); ++e) {
    EXPECT_EQ(a[e].mean_loss, b[e].mean_loss);
    EXPECT_EQ(a[e].lrs, b[e].lrs);
  }
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(bit_equal(pa[i].tensor, pb[i].tensor)) << pa[i].name;
}

TEST(Csv, HeadersAndRowShape) {
  EXPECT_STREQ(kMetricsCsvHeader, "epoch,split,acc,macro_f1,macro_prec,macro_recall,loss,lr");
  const auto m = compute_metrics(cm_from({0, 1, 1, 1}, {0, 0, 1, 1}, 2));
  const std::string row = metrics_csv_row(3, "val", m, 0.5, 1e-4);
  EXPECT_EQ(row.rfind("3,val,0.75,", 0), 0u) << row;
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 7);
  const std::string pc = per_class_csv_rows(3, "val", m, {"a", "b"});
  EXPECT_EQ(std::count(pc.begin(), pc.end(), '\n'), 2);
}
