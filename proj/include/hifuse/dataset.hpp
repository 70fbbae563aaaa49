#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hifuse/image_io.hpp"
#include "hifuse/tensor.hpp"

namespace hifuse {

struct Sample {
  std::string path;  // empty for in-memory samples
  int label = 0;
  Tensor<float> image;  // preprocessed [C, S, S]
};

struct Dataset {
  std::vector<std::string> classes;
  std::vector<Sample> samples;
  std::string split = "all";

  std::size_t size() const { return samples.size(); }
  int num_classes() const { return static_cast<int>(classes.size()); }
};

/// One subdirectory per class under `root`, classes sorted by name; files
/// (.ppm, .pgm, .hft) sorted by path and decoded eagerly.
Dataset load_image_folder(const std::string& root, const PreprocessOptions& opt);

/// Overall split sizes: n * ratio rounded by largest remainder (ties to the
/// earlier split) so the three sizes sum to n.
std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& ratios);

/// Stratified seeded split into train / val / test. Each class is shuffled
/// and cut contiguously; per-class counts are apportioned so every class
/// reaches every split when it has enough samples and the split totals equal
/// split_sizes(). Samples keep their original relative order.
std::array<Dataset, 3> split_dataset(const Dataset& data, const std::array<double, 3>& ratios, std::uint64_t seed);

/// Stacks the selected samples into [B, C, S, S] and their labels.
Tensor<float> stack_images(const Dataset& data, std::span<const std::size_t> indices);
std::vector<int> gather_labels(const Dataset& data, std::span<const std::size_t> indices);

/// Seeded Fisher-Yates permutation of [0, n).
std::vector<std::size_t> shuffled_indices(std::size_t n, RngState& rng);

/// Seed of an independent stream derived from `seed` and a tag.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);

}  // namespace hifuse
