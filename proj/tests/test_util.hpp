#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>

#include "hifuse/tensor.hpp"

namespace testutil {

template <class T = float>
hifuse::Tensor<T> randn(const hifuse::Shape& s, hifuse::RngState& rng, double stddev = 1.0) {
  hifuse::Tensor<T> t(s);
  for (auto& v : t.mutable_data()) v = static_cast<T>(stddev * rng.next_normal());
  return t;
}

template <class T>
bool bit_equal(const hifuse::Tensor<T>& a, const hifuse::Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(T)) == 0;
}

template <class T>
double max_abs_diff(const hifuse::Tensor<T>& a, const hifuse::Tensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return m;
}

// Fresh empty directory under the system temp dir.
inline std::string scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("hifuse_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace testutil
