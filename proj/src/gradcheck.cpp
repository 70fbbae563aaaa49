#include "hifuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "hifuse/dataset.hpp"
#include "hifuse/ops.hpp"

namespace hifuse {

template <class A, class N>
GradCheckReport grad_check(const std::function<Tensor<A>()>& fa, GradTargets<A> wrt_a,
                           const std::function<Tensor<N>()>& fn, GradTargets<N> wrt_n,
                           const GradCheckOptions& opt) {
  if (wrt_a.size() != wrt_n.size()) fail(ErrorKind::InvalidArgument, "grad_check: target lists differ in length");
  for (std::size_t i = 0; i < wrt_a.size(); ++i)
    if (wrt_a[i].second.shape() != wrt_n[i].second.shape())
      fail(ErrorKind::Shape, "grad_check: target '" + wrt_a[i].first + "' differs in shape between precisions");
  RngState rng{opt.seed, 0};

  // Analytic gradients.
  for (auto& [name, t] : wrt_a) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  std::vector<double> projection;
  std::vector<std::vector<double>> analytic(wrt_a.size());
  {
    Tape<A> tape;
    TapeScope<A> scope(tape);
    const Tensor<A> y = fa();
    Tensor<A> r(y.shape());
    for (auto& v : r.mutable_data()) {
      v = static_cast<A>(rng.next_normal());
      projection.push_back(static_cast<double>(v));
    }
    tape.backward(sum(mul(y, r)));
  }
  for (std::size_t k = 0; k < wrt_a.size(); ++k) {
    auto& t = wrt_a[k].second;
    if (t.has_grad())
      analytic[k].assign(t.grad().begin(), t.grad().end());
    else
      analytic[k].assign(static_cast<std::size_t>(t.numel()), 0.0);
    t.zero_grad();
    t.set_requires_grad(false);
  }

  auto loss = [&] {
    const Tensor<N> y = fn();
    if (static_cast<std::size_t>(y.numel()) != projection.size())
      fail(ErrorKind::Shape, "grad_check: the two precisions produce different output sizes");
    double s = 0;
    auto yd = y.data();
    for (std::size_t i = 0; i < yd.size(); ++i) s += projection[i] * static_cast<double>(yd[i]);
    return s;
  };

  GradCheckReport report;
  for (std::size_t k = 0; k < wrt_n.size(); ++k) {
    auto& [name, t] = wrt_n[k];
    const auto n = static_cast<std::size_t>(t.numel());
    std::vector<std::size_t> picks;
    if (n > static_cast<std::size_t>(opt.max_checks_per_tensor)) {
      picks = shuffled_indices(n, rng);
      picks.resize(static_cast<std::size_t>(opt.max_checks_per_tensor));
      std::sort(picks.begin(), picks.end());
    } else {
      for (std::size_t i = 0; i < n; ++i) picks.push_back(i);
    }
    auto data = t.mutable_data();
    for (std::size_t i : picks) {
      const N saved = data[i];
      auto at = [&](double offset) {
        data[i] = static_cast<N>(static_cast<double>(saved) + offset);
        return loss();
      };
      double numeric;
      if (opt.fourth_order)
        numeric = (-at(2 * opt.h) + 8 * at(opt.h) - 8 * at(-opt.h) + at(-2 * opt.h)) / (12 * opt.h);
      else
        numeric = (at(opt.h) - at(-opt.h)) / (2 * opt.h);
      data[i] = saved;
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric) / std::max({opt.floor, std::abs(a), std::abs(numeric)});
      ++report.checked;
      if (report.worst.empty() || err > report.max_error) {
        report.max_error = err;
        char buf[200];
        std::snprintf(buf, sizeof buf, "%s[%zu] analytic %.9g numeric %.9g", name.c_str(), i, a, numeric);
        report.worst = buf;
      }
    }
  }
  return report;
}

template GradCheckReport grad_check<float, double>(const std::function<Tensor<float>()>&, GradTargets<float>,
                                                   const std::function<Tensor<double>()>&, GradTargets<double>,
                                                   const GradCheckOptions&);
template GradCheckReport grad_check<double, double>(const std::function<Tensor<double>()>&, GradTargets<double>,
                                                    const std::function<Tensor<double>()>&, GradTargets<double>,
                                                    const GradCheckOptions&);
template GradCheckReport grad_check<float, float>(const std::function<Tensor<float>()>&, GradTargets<float>,
                                                  const std::function<Tensor<float>()>&, GradTargets<float>,
                                                  const GradCheckOptions&);

}  // namespace hifuse
