#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "hifuse/tensor.hpp"

namespace hifuse {

struct GradCheckOptions {
  double h = 1e-4;                 // central-difference step
  bool fourth_order = true;        // 4-point central stencil, else the 2-point one
  int max_checks_per_tensor = 16;  // sampled elements per tensor (all if fewer)
  double floor = 1e-3;             // error = |a - n| / max(floor, |a|, |n|)
  std::uint64_t seed = 1;
};

struct GradCheckReport {
  double max_error = 0;
  std::string worst;  // "<tensor>[<flat index>] analytic a numeric n"
  int checked = 0;
};

template <class T>
using GradTargets = std::vector<std::pair<std::string, Tensor<T>>>;

/// Reverse-mode gradients of L = sum(r * fa()) in precision A against central
/// differences of L = sum(r * fn()) in precision N, r a fixed random
/// projection. `wrt_a` and `wrt_n` list the same tensors (equal values) in
/// each precision; the numeric side is perturbed in place and restored, so
/// `fn` must read those tensors.
template <class A, class N>
GradCheckReport grad_check(const std::function<Tensor<A>()>& fa, GradTargets<A> wrt_a,
                           const std::function<Tensor<N>()>& fn, GradTargets<N> wrt_n,
                           const GradCheckOptions& opt = {});

/// Same-precision check.
template <class T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& fn, GradTargets<T> wrt,
                           const GradCheckOptions& opt = {}) {
  return grad_check<T, T>(fn, wrt, fn, wrt, opt);
}

}  // namespace hifuse
