#include "hifuse/selfcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "hifuse/census.hpp"
#include "hifuse/checkpoint.hpp"
#include "hifuse/gradcheck.hpp"
#include "hifuse/model.hpp"
#include "hifuse/ops.hpp"
#include "hifuse/train.hpp"
#include "hifuse/window_attention.hpp"

namespace hifuse {

bool SelfcheckReport::all_pass() const { return failures() == 0; }

int SelfcheckReport::failures() const {
  return static_cast<int>(std::count_if(results.begin(), results.end(), [](const CheckResult& r) { return !r.pass; }));
}

const std::vector<std::string>& selfcheck_suites() {
  static const std::vector<std::string> names{"grad", "window", "flops", "metrics", "schedule", "persist"};
  return names;
}

namespace {

std::string fmt(const char* f, double a, double b = 0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

Tensor<float> randn(const Shape& s, RngState& rng, double stddev = 1.0) {
  Tensor<float> t(s);
  for (auto& v : t.mutable_data()) v = static_cast<float>(stddev * rng.next_normal());
  return t;
}

ParamSet<double> shadow(const ParamSet<float>& ps) {
  ParamSet<double> out;
  for (const auto& e : ps.entries()) out.add(e.name, e.tensor.cast<double>(), e.decay);
  return out;
}

// Runs `body(params, inputs)` twice: f32 analytic gradients against f64
// central differences, then the pure f64 check. Both sides see identical
// values since the f64 shadow is a widening copy.
template <class Body>
void grad_case(std::vector<CheckResult>& out, const std::string& name, const ParamSet<float>& ps32,
               const std::vector<Tensor<float>>& in32, Body body, int max_checks = 16) {
  ParamSet<float> p32;
  for (const auto& e : ps32.entries()) p32.add(e.name, e.tensor.clone(), e.decay);
  ParamSet<double> p64 = shadow(ps32);
  std::vector<Tensor<float>> x32;
  std::vector<Tensor<double>> x64;
  for (const auto& t : in32) {
    x32.push_back(t.clone());
    x64.push_back(t.cast<double>());
  }
  GradTargets<float> w32;
  GradTargets<double> w64;
  for (std::size_t i = 0; i < x32.size(); ++i) {
    w32.push_back({"input" + std::to_string(i), x32[i]});
    w64.push_back({"input" + std::to_string(i), x64[i]});
  }
  for (std::size_t i = 0; i < p32.size(); ++i) {
    w32.push_back({p32.entries()[i].name, p32.entries()[i].tensor});
    w64.push_back({p64.entries()[i].name, p64.entries()[i].tensor});
  }
  GradCheckOptions opt;
  opt.max_checks_per_tensor = max_checks;
  const std::function<Tensor<float>()> f32 = [&] { return body(p32, x32); };
  const std::function<Tensor<double>()> f64 = [&] { return body(p64, x64); };
  const GradCheckReport r32 = grad_check<float, double>(f32, w32, f64, w64, opt);
  const GradCheckReport r64 = grad_check<double>(f64, w64, opt);
  out.push_back({"grad", name + " f32", r32.max_error < kGradTolF32,
                 fmt("max rel err %.3g over ", r32.max_error) + std::to_string(r32.checked) + " entries; worst " + r32.worst});
  out.push_back({"grad", name + " f64", r64.max_error < kGradTolF64,
                 fmt("max rel err %.3g over ", r64.max_error) + std::to_string(r64.checked) + " entries; worst " + r64.worst});
}

// Inputs only, no parameters.
template <class Body>
void op_case(std::vector<CheckResult>& out, const std::string& name, const std::vector<Tensor<float>>& in, Body body) {
  grad_case(out, "op " + name, ParamSet<float>{}, in, [&](const auto&, auto& x) { return body(x); }, 64);
}

}  // namespace

std::vector<CheckResult> selfcheck_grad_ops() {
  std::vector<CheckResult> out;
  RngState rng{101, 0};
  op_case(out, "add (broadcast)", {randn({2, 3, 4}, rng), randn({3, 1}, rng)}, [](auto& x) { return add(x[0], x[1]); });
  op_case(out, "sub", {randn({3, 4}, rng), randn({4}, rng)}, [](auto& x) { return sub(x[0], x[1]); });
  op_case(out, "mul (broadcast)", {randn({2, 3, 4}, rng), randn({2, 1, 4}, rng)}, [](auto& x) { return mul(x[0], x[1]); });
  op_case(out, "scale", {randn({5, 4}, rng)}, [](auto& x) { return scale(x[0], -1.75); });
  op_case(out, "sigmoid", {randn({4, 8}, rng)}, [](auto& x) { return sigmoid(x[0]); });
  op_case(out, "gelu", {randn({4, 8}, rng)}, [](auto& x) { return gelu(x[0]); });
  op_case(out, "relu", {randn({4, 8}, rng)}, [](auto& x) { return relu(x[0]); });
  op_case(out, "matmul", {randn({2, 3, 5}, rng), randn({5, 4}, rng)}, [](auto& x) { return matmul(x[0], x[1]); });
  op_case(out, "linear", {randn({2, 3, 6}, rng), randn({4, 6}, rng), randn({4}, rng)},
          [](auto& x) { return linear(x[0], x[1], x[2]); });
  op_case(out, "conv2d 3x3 pad 1", {randn({1, 2, 5, 5}, rng), randn({3, 2, 3, 3}, rng), randn({3}, rng)},
          [](auto& x) { return conv2d(x[0], x[1], x[2], {1, 1, 1}); });
  op_case(out, "conv2d 2x2 stride 2", {randn({2, 2, 4, 4}, rng), randn({3, 2, 2, 2}, rng), randn({3}, rng)},
          [](auto& x) { return conv2d(x[0], x[1], x[2], {2, 0, 1}); });
  op_case(out, "conv2d depthwise", {randn({1, 4, 4, 4}, rng), randn({4, 1, 3, 3}, rng), randn({4}, rng)},
          [](auto& x) { return conv2d(x[0], x[1], x[2], {1, 1, 4}); });
  op_case(out, "layer_norm channels", {randn({2, 4, 3, 2}, rng), randn({4}, rng), randn({4}, rng)},
          [](auto& x) { return layer_norm(x[0], x[1], x[2], 1e-6, 1); });
  op_case(out, "layer_norm last axis", {randn({2, 3, 6}, rng), randn({6}, rng), randn({6}, rng)},
          [](auto& x) { return layer_norm(x[0], x[1], x[2], 1e-6, -1); });
  op_case(out, "softmax", {randn({3, 2, 5}, rng)}, [](auto& x) { return softmax(x[0], -1); });
  op_case(out, "avg pool", {randn({1, 2, 4, 4}, rng)}, [](auto& x) { return pool2d(x[0], PoolKind::Avg, 2, 2); });
  op_case(out, "max pool", {randn({1, 2, 4, 4}, rng)}, [](auto& x) { return pool2d(x[0], PoolKind::Max, 2, 2); });
  op_case(out, "global avg pool", {randn({2, 3, 3, 3}, rng)}, [](auto& x) { return pool2d(x[0], PoolKind::GlobalAvg); });
  op_case(out, "global max pool", {randn({2, 3, 3, 3}, rng)}, [](auto& x) { return pool2d(x[0], PoolKind::GlobalMax); });
  op_case(out, "reduce mean", {randn({2, 4, 3}, rng)}, [](auto& x) { return reduce(x[0], 1, ReduceKind::Mean); });
  op_case(out, "reduce max", {randn({2, 4, 3}, rng)}, [](auto& x) { return reduce(x[0], 1, ReduceKind::Max); });
  op_case(out, "concat", {randn({2, 3}, rng), randn({2, 5}, rng)}, [](auto& x) {
    return concat(std::vector{x[0], x[1]}, 1);
  });
  op_case(out, "slice", {randn({4, 6}, rng)}, [](auto& x) { return slice(x[0], 1, 2, 3); });
  op_case(out, "reshape", {randn({4, 6}, rng)}, [](auto& x) { return reshape(x[0], Shape{2, 12}); });
  op_case(out, "permute", {randn({2, 3, 4}, rng)}, [](auto& x) { return permute(x[0], {2, 0, 1}); });
  op_case(out, "roll", {randn({1, 4, 4, 2}, rng)}, [](auto& x) { return roll(x[0], {1, 2}, {-2, 1}); });
  op_case(out, "sum", {randn({3, 5}, rng)}, [](auto& x) { return sum(x[0]); });
  op_case(out, "mean", {randn({3, 5}, rng)}, [](auto& x) { return mean(x[0]); });
  op_case(out, "take_rows", {randn({5, 3}, rng)}, [](auto& x) {
    static const int rows[] = {4, 0, 4, 2, 1, 4};
    return take_rows(x[0], std::span<const int>(rows));
  });
  op_case(out, "cross_entropy", {randn({4, 7}, rng)}, [](auto& x) {
    static const int targets[] = {0, 6, 3, 3};
    return cross_entropy(x[0], std::span<const int>(targets));
  });
  return out;
}

std::vector<CheckResult> selfcheck_grad_blocks() {
  std::vector<CheckResult> out;
  const ModelConfig desk = ModelConfig::desk();
  RngState rng{202, 0};
  auto init = [&](auto reg) {
    ParamSet<float> ps;
    reg(ps);
    return ps;
  };
  // Stage-1 desk shapes unless noted: C = 8 on an 8x8 map, window 4.
  const int C = desk.channels[0], M = desk.window, H = desk.stage_size(0);
  grad_case(out, "local block", init([&](auto& ps) { register_local_block(ps, "b", C, rng); }),
            {randn({1, C, H, H}, rng)}, [](const auto& ps, auto& x) { return local_block(x[0], ps, "b"); });
  grad_case(out, "global block (W-MSA + SW-MSA)",
            init([&](auto& ps) { register_global_block(ps, "b", C, desk.heads[0], M, rng); }),
            {randn({1, H, H, C}, rng)},
            [&](const auto& ps, auto& x) { return global_block(x[0], ps, "b", desk.heads[0], M, M / 2); });
  const int C2 = desk.channels[1], H2 = desk.stage_size(1);
  grad_case(out, "channel attention",
            init([&](auto& ps) { register_channel_attention(ps, "b", C2, desk.ca_reduction, rng); }),
            {randn({1, C2, H2, H2}, rng)}, [](const auto& ps, auto& x) { return channel_attention(x[0], ps, "b"); });
  grad_case(out, "spatial attention", init([&](auto& ps) { register_spatial_attention(ps, "b", rng); }),
            {randn({1, C2, H2, H2}, rng)}, [](const auto& ps, auto& x) { return spatial_attention(x[0], ps, "b"); });
  grad_case(out, "IRMLP", init([&](auto& ps) { register_irmlp(ps, "b", C2, rng); }), {randn({1, C2, H2, H2}, rng)},
            [](const auto& ps, auto& x) { return irmlp(x[0], ps, "b"); });
  grad_case(out, "HFF (first stage)",
            init([&](auto& ps) { register_hff_block(ps, "b", C, 0, desk.ca_reduction, AblationFlags{}, rng); }),
            {randn({1, C, H, H}, rng), randn({1, C, H, H}, rng)},
            [](const auto& ps, auto& x) {
              const std::decay_t<decltype(x[0])>* none = nullptr;
              return hff_block(x[0], x[1], none, ps, "b");
            });
  grad_case(out, "HFF (with previous stage)",
            init([&](auto& ps) { register_hff_block(ps, "b", C2, C, desk.ca_reduction, AblationFlags{}, rng); }),
            {randn({1, C2, H2, H2}, rng), randn({1, C2, H2, H2}, rng), randn({1, C, H, H}, rng)},
            [](const auto& ps, auto& x) { return hff_block(x[0], x[1], &x[2], ps, "b"); });
  const int C4 = desk.channels[3];
  grad_case(out, "classifier head",
            init([&](auto& ps) { register_classifier_head(ps, "b", C4, desk.num_classes, rng); }),
            {randn({2, C4, 2, 2}, rng)}, [](const auto& ps, auto& x) { return classifier_head(x[0], ps, "b"); });
  grad_case(out, "local stem", init([&](auto& ps) { register_local_stem(ps, "b", 3, C, rng); }),
            {randn({1, 3, 8, 8}, rng)}, [](const auto& ps, auto& x) { return local_stem(x[0], ps, "b"); });
  grad_case(out, "global stem", init([&](auto& ps) { register_global_stem(ps, "b", 3, C, rng); }),
            {randn({1, 3, 8, 8}, rng)}, [](const auto& ps, auto& x) { return global_stem(x[0], ps, "b"); });
  grad_case(out, "local downsample", init([&](auto& ps) { register_local_downsample(ps, "b", C, rng); }),
            {randn({1, C, 4, 4}, rng)}, [](const auto& ps, auto& x) { return local_downsample(x[0], ps, "b"); });
  grad_case(out, "patch merging", init([&](auto& ps) { register_patch_merging(ps, "b", C, rng); }),
            {randn({1, 4, 4, C}, rng)}, [](const auto& ps, auto& x) { return patch_merging(x[0], ps, "b"); });
  return out;
}

std::vector<CheckResult> selfcheck_grad_model() {
  std::vector<CheckResult> out;
  const ModelConfig desk = ModelConfig::desk();
  HiFuseModel<float> m32(desk, 303);
  HiFuseModel<double> m64(desk, 303);
  for (std::size_t i = 0; i < m32.params().size(); ++i)
    m64.params().entries()[i].tensor = m32.params().entries()[i].tensor.cast<double>();
  RngState rng{303, 1};
  Tensor<float> x32 = randn({2, desk.in_channels, desk.image_size, desk.image_size}, rng);
  Tensor<double> x64 = x32.cast<double>();
  GradTargets<float> w32{{"input", x32}};
  GradTargets<double> w64{{"input", x64}};
  for (std::size_t i = 0; i < m32.params().size(); ++i) {
    w32.push_back({m32.params().entries()[i].name, m32.params().entries()[i].tensor});
    w64.push_back({m64.params().entries()[i].name, m64.params().entries()[i].tensor});
  }
  GradCheckOptions opt;
  opt.max_checks_per_tensor = 2;
  const std::function<Tensor<float>()> f32 = [&] { return m32.forward(x32); };
  const std::function<Tensor<double>()> f64 = [&] { return m64.forward(x64); };
  const GradCheckReport r32 = grad_check<float, double>(f32, w32, f64, w64, opt);
  const GradCheckReport r64 = grad_check<double>(f64, w64, opt);
  out.push_back({"grad", "desk model end to end f32", r32.max_error < kGradTolF32,
                 fmt("max rel err %.3g over ", r32.max_error) + std::to_string(r32.checked) + " entries; worst " + r32.worst});
  out.push_back({"grad", "desk model end to end f64", r64.max_error < kGradTolF64,
                 fmt("max rel err %.3g over ", r64.max_error) + std::to_string(r64.checked) + " entries; worst " + r64.worst});
  return out;
}

namespace {

std::vector<CheckResult> window_suite() {
  std::vector<CheckResult> out;
  RngState rng{404, 0};
  // Partition/reverse round trip.
  {
    const Tensor<float> x = randn({2, 8, 12, 3}, rng);
    const Tensor<float> back = window_reverse(window_partition(x, 4), 4, 8, 12);
    const bool same = std::equal(x.data().begin(), x.data().end(), back.data().begin(), back.data().end());
    out.push_back({"window", "partition/reverse round trip", same, same ? "bit-exact" : "values differ"});
  }
  // Masked pairs after the shift carry no attention mass.
  {
    const int C = 8, M = 4, heads = 2, S = 8;
    WindowAttentionParams<float> p;
    p.qkv_weight = randn({3 * C, C}, rng, 0.5);
    p.qkv_bias = randn({3 * C}, rng, 0.1);
    p.proj_weight = randn({C, C}, rng, 0.5);
    p.proj_bias = randn({C}, rng, 0.1);
    p.bias_table = randn({(2 * M - 1) * (2 * M - 1), heads}, rng, 0.5);
    p.heads = heads;
    p.window = M;
    p.rel_index = relative_position_index(M);
    Tensor<float> probe;
    shifted_wmsa(randn({1, S, S, C}, rng), p, M / 2, &probe);
    const Tensor<float> mask = shift_mask<float>(S, S, M, M / 2);
    const Index N = M * M, nW = (S / M) * (S / M);
    double worst = 0;
    Index masked = 0;
    for (Index w = 0; w < nW; ++w)
      for (Index h = 0; h < heads; ++h)
        for (Index i = 0; i < N; ++i)
          for (Index j = 0; j < N; ++j) {
            if (mask.data()[static_cast<std::size_t>((w * N + i) * N + j)] == 0.0f) continue;
            ++masked;
            worst = std::max(worst, static_cast<double>(probe.data()[static_cast<std::size_t>(((w * heads + h) * N + i) * N + j)]));
          }
    out.push_back({"window", "shifted mask leakage", masked > 0 && worst < 1e-6,
                   fmt("max post-softmax mass on masked pairs %.3g", worst) + " (" + std::to_string(masked) + " pairs)"});
  }
  // Perturbing fusion parameters leaves both branches untouched.
  {
    const ModelConfig desk = ModelConfig::desk();
    HiFuseModel<float> model(desk, 7);
    const Tensor<float> x = randn({1, 3, desk.image_size, desk.image_size}, rng);
    ForwardTrace<float> before, after;
    ForwardOptions<float> fo;
    fo.trace = &before;
    model.forward(x, fo);
    for (auto& e : model.params().entries())
      if (e.name.rfind("fusion.", 0) == 0)
        for (auto& v : e.tensor.mutable_data()) v += static_cast<float>(0.5 * rng.next_normal());
    fo.trace = &after;
    model.forward(x, fo);
    auto same = [](const Tensor<float>& a, const Tensor<float>& b) {
      return std::equal(a.data().begin(), a.data().end(), b.data().begin(), b.data().end());
    };
    const bool ok = same(before.G[3], after.G[3]) && same(before.L[3], after.L[3]) && !same(before.F[3], after.F[3]);
    out.push_back({"window", "branch independence under fusion perturbation", ok,
                   ok ? "G4 and L4 bit-identical, F4 changed" : "branch outputs moved or fusion had no effect"});
  }
  // Stage schedule of the default variant.
  {
    const auto sched = stage_schedule(ModelConfig::tiny());
    const Index sizes[] = {56, 28, 14, 7}, chans[] = {96, 192, 384, 768};
    bool ok = true;
    std::string got;
    for (int s = 0; s < 4; ++s) {
      ok = ok && sched[static_cast<std::size_t>(s)].size == sizes[s] && sched[static_cast<std::size_t>(s)].channels == chans[s];
      got += std::to_string(sched[static_cast<std::size_t>(s)].size) + "x" +
             std::to_string(sched[static_cast<std::size_t>(s)].size) + "," +
             std::to_string(sched[static_cast<std::size_t>(s)].channels) + (s < 3 ? " " : "");
    }
    out.push_back({"window", "tiny stage schedule", ok, got});
  }
  return out;
}

std::vector<CheckResult> flops_suite() {
  std::vector<CheckResult> out;
  RngState rng{505, 0};
  // Desk forward under the counter equals the closed-form census.
  {
    const ModelConfig desk = ModelConfig::desk();
    HiFuseModel<float> model(desk, 1);
    FlopTally tally;
    {
      FlopCounterScope scope(tally);
      model.forward(randn({1, 3, desk.image_size, desk.image_size}, rng));
    }
    const FlopCensus fc = count_flops(desk);
    const bool ok = tally.conv == fc.conv && tally.linear == fc.linear && tally.matmul == fc.matmul;
    out.push_back({"flops", "desk forward counter vs census", ok,
                   "counted " + std::to_string(tally.total()) + ", census " + std::to_string(fc.total())});
  }
  // Per-stage attention of the tiny variant: one counted window unit per
  // stage (plain and shifted), against the closed form.
  const ModelConfig tiny = ModelConfig::tiny();
  const FlopCensus fc = count_flops(tiny);
  for (int s = 0; s < 4; ++s) {
    const Index S = tiny.stage_size(s), C = tiny.channels[static_cast<std::size_t>(s)];
    const int M = tiny.stage_window(s), heads = tiny.heads[static_cast<std::size_t>(s)];
    WindowAttentionParams<float> p;
    p.qkv_weight = Tensor<float>({3 * C, C});
    p.qkv_bias = Tensor<float>({3 * C});
    p.proj_weight = Tensor<float>({C, C});
    p.proj_bias = Tensor<float>({C});
    p.bias_table = Tensor<float>({(2 * M - 1) * (2 * M - 1), heads});
    p.heads = heads;
    p.window = M;
    p.rel_index = relative_position_index(M);
    const Tensor<float> x({1, S, S, C});
    FlopTally plain, shifted;
    {
      FlopCounterScope scope(plain);
      wmsa(x, p);
    }
    {
      FlopCounterScope scope(shifted);
      if (tiny.stage_shift(s) > 0)
        shifted_wmsa(x, p, tiny.stage_shift(s));
      else
        wmsa(x, p);
    }
    const std::uint64_t depth = static_cast<std::uint64_t>(tiny.depths[static_cast<std::size_t>(s)]);
    const std::uint64_t counted = depth * (plain.total() + shifted.total());
    const std::uint64_t formula = depth * 2 * complexity_count(AttentionKind::WindowMsa, S, S, C, M);
    const bool ok = counted == formula && formula == fc.attention[static_cast<std::size_t>(s)];
    out.push_back({"flops", "tiny stage " + std::to_string(s + 1) + " attention counter vs closed form", ok,
                   "counted " + std::to_string(counted) + ", formula " + std::to_string(formula)});
  }
  return out;
}

std::vector<CheckResult> metrics_suite() {
  std::vector<CheckResult> out;
  RngState rng{606, 0};
  const int K = 7, n = 1000;
  std::vector<int> pred(n), target(n);
  ConfusionMatrix cm(K);
  for (int i = 0; i < n; ++i) {
    target[static_cast<std::size_t>(i)] = static_cast<int>(rng.next_u64() % K);
    pred[static_cast<std::size_t>(i)] = static_cast<int>(rng.next_u64() % K);
    cm.add(target[static_cast<std::size_t>(i)], pred[static_cast<std::size_t>(i)]);
  }
  const Metrics m = compute_metrics(cm);
  // Brute force straight from the pairs.
  double worst = 0;
  int correct = 0;
  double sp = 0, sr = 0, sf = 0;
  for (int i = 0; i < n; ++i) correct += pred[static_cast<std::size_t>(i)] == target[static_cast<std::size_t>(i)];
  for (int c = 0; c < K; ++c) {
    int tp = 0, fp = 0, fn = 0;
    for (int i = 0; i < n; ++i) {
      const bool p = pred[static_cast<std::size_t>(i)] == c, t = target[static_cast<std::size_t>(i)] == c;
      tp += p && t;
      fp += p && !t;
      fn += !p && t;
    }
    const double prec = tp + fp ? static_cast<double>(tp) / (tp + fp) : 0.0;
    const double rec = tp + fn ? static_cast<double>(tp) / (tp + fn) : 0.0;
    const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    const auto& pc = m.per_class[static_cast<std::size_t>(c)];
    worst = std::max({worst, std::abs(prec - pc.precision), std::abs(rec - pc.recall), std::abs(f1 - pc.f1)});
    if (pc.tp != tp || pc.fp != fp || pc.fn != fn) worst = 1;
    sp += prec;
    sr += rec;
    sf += f1;
  }
  worst = std::max({worst, std::abs(static_cast<double>(correct) / n - m.accuracy), std::abs(sp / K - m.macro_precision),
                    std::abs(sr / K - m.macro_recall), std::abs(sf / K - m.macro_f1)});
  out.push_back({"metrics", "1000 draws over 7 classes vs brute-force counter", worst <= 1e-12,
                 fmt("max abs difference %.3g", worst)});
  return out;
}

std::vector<CheckResult> schedule_suite() {
  std::vector<CheckResult> out;
  TrainRunConfig cfg;
  const std::int64_t total = 1001, warmup = 50;
  const double at_warm = lr_at(warmup, total, warmup, cfg);
  const double at_end = lr_at(total - 1, total, warmup, cfg);
  out.push_back({"schedule", "base lr at end of warm-up", std::abs(at_warm - 1e-4) <= 1e-15, fmt("%.17g", at_warm)});
  out.push_back({"schedule", "min lr at final step", std::abs(at_end - 1e-6) <= 1e-9, fmt("%.17g", at_end)});
  // Cosine span is steps warmup .. total-1; its midpoint has cos(pi/2) = 0.
  const std::int64_t mid = warmup + (total - 1 - warmup) / 2;
  const double expect = (1e-4 + 1e-6) / 2;
  const double got = lr_at(mid, total, warmup, cfg);
  out.push_back({"schedule", "cosine midpoint", std::abs(got - expect) <= 1e-9, fmt("got %.17g expected %.17g", got, expect)});
  return out;
}

std::vector<CheckResult> persist_suite() {
  std::vector<CheckResult> out;
  RngState rng{707, 0};
  RunConfig cfg;
  cfg.model = ModelConfig::desk();
  HiFuseModel<float> model(cfg.model, 11);
  TrainState state = make_train_state(model, cfg.train);
  const Tensor<float> x = randn({2, 3, cfg.model.image_size, cfg.model.image_size}, rng);
  const Tensor<float> before = model.forward(x);
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(capture_checkpoint(model, &state, cfg)));
  HiFuseModel<float> other(cfg.model, 12);
  TrainState other_state = make_train_state(other, cfg.train);
  restore_checkpoint(ck, other, &other_state);
  const Tensor<float> after = other.forward(x);
  const bool same = std::equal(before.data().begin(), before.data().end(), after.data().begin(), after.data().end());
  out.push_back({"persist", "checkpoint round trip forward", same, same ? "bit-identical logits" : "logits differ"});
  const bool rng_ok = other_state.rng == state.rng;
  out.push_back({"persist", "checkpoint round trip rng state", rng_ok, rng_ok ? "restored" : "differs"});
  return out;
}

}  // namespace

SelfcheckReport run_selfcheck(const std::vector<std::string>& only,
                              const std::function<void(const CheckResult&)>& progress) {
  for (const auto& name : only)
    if (std::find(selfcheck_suites().begin(), selfcheck_suites().end(), name) == selfcheck_suites().end())
      fail(ErrorKind::InvalidArgument, "unknown selfcheck suite '" + name + "'");
  auto wanted = [&](const std::string& s) { return only.empty() || std::find(only.begin(), only.end(), s) != only.end(); };
  const auto start = std::chrono::steady_clock::now();
  SelfcheckReport report;
  auto take = [&](std::vector<CheckResult> rs) {
    for (auto& r : rs) {
      if (progress) progress(r);
      report.results.push_back(std::move(r));
    }
  };
  // A suite that throws records the failure and the run goes on.
  auto guarded = [&](const std::string& suite, const std::function<std::vector<CheckResult>()>& fn) {
    try {
      take(fn());
    } catch (const std::exception& e) {
      take({{suite, "suite aborted", false, e.what()}});
    }
  };
  if (wanted("grad")) {
    guarded("grad", selfcheck_grad_ops);
    guarded("grad", selfcheck_grad_blocks);
    guarded("grad", selfcheck_grad_model);
  }
  if (wanted("window")) guarded("window", window_suite);
  if (wanted("flops")) guarded("flops", flops_suite);
  if (wanted("metrics")) guarded("metrics", metrics_suite);
  if (wanted("schedule")) guarded("schedule", schedule_suite);
  if (wanted("persist")) guarded("persist", persist_suite);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace hifuse
