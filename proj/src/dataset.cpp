#include "hifuse/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

namespace fs = std::filesystem;

namespace hifuse {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  RngState r{seed ^ (tag * 0xD1B54A32D192ED03ull), 0};
  return r.next_u64();
}

std::vector<std::size_t> shuffled_indices(std::size_t n, RngState& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.next_u64() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

Dataset load_image_folder(const std::string& root, const PreprocessOptions& opt) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) fail(ErrorKind::Io, "dataset directory not found: " + root);
  Dataset ds;
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) fail(ErrorKind::InvalidArgument, "no class subdirectories in " + root);
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[c])) {
      if (!entry.is_regular_file()) continue;
      const std::string ext = entry.path().extension().string();
      // Heatmaps written by gradcam sit next to their inputs; never train on them.
      if (entry.path().stem().extension() == ".gradcam") continue;
      if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm" || ext == ".hft") files.push_back(entry.path());
    }
    if (files.empty()) fail(ErrorKind::InvalidArgument, "class directory has no images: " + class_dirs[c].string());
    std::sort(files.begin(), files.end());
    ds.classes.push_back(class_dirs[c].filename().string());
    for (const auto& f : files)
      ds.samples.push_back(Sample{f.string(), static_cast<int>(c), load_model_input(f.string(), opt)});
  }
  return ds;
}

namespace {

void check_ratios(const std::array<double, 3>& ratios) {
  double total = 0;
  for (double r : ratios) {
    if (!(r > 0)) fail(ErrorKind::InvalidArgument, "split ratios must all be positive");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) fail(ErrorKind::InvalidArgument, "split ratios must sum to 1");
}

}  // namespace

std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& ratios) {
  check_ratios(ratios);
  std::array<std::size_t, 3> out{};
  std::array<double, 3> frac{};
  std::size_t used = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double q = static_cast<double>(n) * ratios[k];
    out[k] = static_cast<std::size_t>(std::floor(q + 1e-9));
    frac[k] = q - static_cast<double>(out[k]);
    used += out[k];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; used < n; ++i, ++used) ++out[order[i % 3]];
  return out;
}

std::array<Dataset, 3> split_dataset(const Dataset& data, const std::array<double, 3>& ratios, std::uint64_t seed) {
  const auto totals = split_sizes(data.size(), ratios);
  static const char* names[3] = {"train", "val", "test"};
  for (std::size_t k = 0; k < 3; ++k)
    if (totals[k] == 0)
      fail(ErrorKind::InvalidArgument, std::string("split '") + names[k] + "' would receive no samples out of " +
                                           std::to_string(data.size()));

  const std::size_t K = static_cast<std::size_t>(std::max(1, data.num_classes()));
  std::vector<std::vector<std::size_t>> members(K);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int label = data.samples[i].label;
    if (label < 0 || static_cast<std::size_t>(label) >= K)
      fail(ErrorKind::InvalidArgument, "sample label out of range");
    members[static_cast<std::size_t>(label)].push_back(i);
  }

  // Per-class counts: floors of the exact quotas, at least one per split
  // when the class allows it, then the remaining units go to the cells with
  // the largest fractional quota until class and split totals both match.
  std::vector<std::array<std::size_t, 3>> cnt(K);
  std::vector<std::array<double, 3>> frac(K);
  for (std::size_t c = 0; c < K; ++c) {
    const double n = static_cast<double>(members[c].size());
    for (std::size_t k = 0; k < 3; ++k) {
      const double q = n * ratios[k];
      cnt[c][k] = static_cast<std::size_t>(std::floor(q + 1e-9));
      frac[c][k] = q - static_cast<double>(cnt[c][k]);
    }
    if (members[c].size() >= 3)
      for (std::size_t k = 0; k < 3; ++k)
        if (cnt[c][k] == 0) {
          const auto big = static_cast<std::size_t>(std::max_element(cnt[c].begin(), cnt[c].end()) - cnt[c].begin());
          if (cnt[c][big] > 1) {
            --cnt[c][big];
            ++cnt[c][k];
          }
        }
  }
  auto col_sum = [&](std::size_t k) {
    std::size_t s = 0;
    for (std::size_t c = 0; c < K; ++c) s += cnt[c][k];
    return s;
  };
  auto row_sum = [&](std::size_t c) { return cnt[c][0] + cnt[c][1] + cnt[c][2]; };
  // Columns pushed over their total by the minimum-one rule give units back.
  for (std::size_t k = 0; k < 3; ++k)
    while (col_sum(k) > totals[k]) {
      std::size_t best = K;
      for (std::size_t c = 0; c < K; ++c)
        if (cnt[c][k] > 1 && (best == K || cnt[c][k] > cnt[best][k])) best = c;
      if (best == K) break;
      --cnt[best][k];
    }
  struct Cell {
    double frac;
    std::size_t c, k;
  };
  std::vector<Cell> cells;
  for (std::size_t c = 0; c < K; ++c)
    for (std::size_t k = 0; k < 3; ++k) cells.push_back({frac[c][k], c, k});
  std::stable_sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) { return a.frac > b.frac; });
  bool progress = true;
  while (progress) {
    progress = false;
    for (const auto& cell : cells) {
      if (row_sum(cell.c) < members[cell.c].size() && col_sum(cell.k) < totals[cell.k]) {
        ++cnt[cell.c][cell.k];
        progress = true;
      }
    }
  }

  std::array<Dataset, 3> out;
  std::array<std::vector<std::size_t>, 3> chosen;
  RngState rng{derive_seed(seed, 0x73706c6974ull), 0};
  for (std::size_t c = 0; c < K; ++c) {
    auto perm = shuffled_indices(members[c].size(), rng);
    std::size_t at = 0;
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t j = 0; j < cnt[c][k] && at < perm.size(); ++j) chosen[k].push_back(members[c][perm[at++]]);
  }
  for (std::size_t k = 0; k < 3; ++k) {
    std::sort(chosen[k].begin(), chosen[k].end());
    out[k].classes = data.classes;
    out[k].split = names[k];
    for (std::size_t i : chosen[k]) out[k].samples.push_back(data.samples[i]);
  }
  return out;
}

Tensor<float> stack_images(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) fail(ErrorKind::InvalidArgument, "stack_images: empty batch");
  const Shape& s0 = data.samples.at(indices[0]).image.shape();
  const Index per = shape_numel(s0);
  Shape shape{static_cast<Index>(indices.size())};
  shape.insert(shape.end(), s0.begin(), s0.end());
  std::vector<float> buf(static_cast<std::size_t>(per) * indices.size());
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& img = data.samples.at(indices[b]).image;
    if (img.shape() != s0) fail(ErrorKind::Shape, "stack_images: samples have different shapes");
    std::copy(img.data().begin(), img.data().end(), buf.begin() + static_cast<std::ptrdiff_t>(b) * per);
  }
  return Tensor<float>(std::move(shape), std::move(buf));
}

std::vector<int> gather_labels(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(data.samples.at(i).label);
  return out;
}

}  // namespace hifuse
