#include "hifuse/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "hifuse/image_io.hpp"

namespace hifuse {

Tensor<float> synthetic_image(int label, int size, RngState& rng) {
  Tensor<float> img(Shape{1, size, size});
  auto px = img.mutable_data();
  const double s = static_cast<double>(size);
  if (label == 0) {
    const int blobs = 1 + static_cast<int>(rng.next_u64() % 3);
    for (int b = 0; b < blobs; ++b) {
      const double cy = s * (0.2 + 0.6 * rng.next_uniform()), cx = s * (0.2 + 0.6 * rng.next_uniform());
      const double sigma = s * (0.06 + 0.08 * rng.next_uniform());
      const double amp = 0.6 + 0.4 * rng.next_uniform();
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          px[static_cast<std::size_t>(y * size + x)] += static_cast<float>(amp * std::exp(-d2 / (2 * sigma * sigma)));
        }
    }
  } else {
    const double angle = std::numbers::pi * rng.next_uniform();
    const double period = s * (0.12 + 0.18 * rng.next_uniform());
    const double phase = 2 * std::numbers::pi * rng.next_uniform();
    const double c = std::cos(angle), sn = std::sin(angle);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        px[static_cast<std::size_t>(y * size + x)] =
            static_cast<float>(0.5 + 0.4 * std::sin(2 * std::numbers::pi * (x * c + y * sn) / period + phase));
  }
  for (auto& v : px) v = static_cast<float>(std::clamp(static_cast<double>(v) + 0.05 * rng.next_normal(), 0.0, 1.0));
  return img;
}

namespace {

template <class Fn>
void generate(int n, int size, std::uint64_t seed, Fn&& sink) {
  RngState rng{derive_seed(seed, 0x73796e7468), 0};
  for (int i = 0; i < n; ++i) {
    const int label = i % 2;
    Tensor<float> img = synthetic_image(label, size, rng);
    // Quantized to 8 bits so the in-memory and on-disk sets agree exactly.
    for (auto& v : img.mutable_data()) v = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
    sink(i, label, img);
  }
}

}  // namespace

Dataset synthetic_dataset(int n, const PreprocessOptions& opt, std::uint64_t seed) {
  Dataset d;
  d.classes = {"blobs", "stripes"};
  generate(n, opt.image_size, seed, [&](int, int label, const Tensor<float>& img) {
    d.samples.push_back({"", label, preprocess(img, opt)});
  });
  return d;
}

void write_synthetic_folder(const std::string& root, int n, int size, std::uint64_t seed) {
  namespace fs = std::filesystem;
  const char* names[2] = {"blobs", "stripes"};
  for (const char* c : names) fs::create_directories(fs::path(root) / c);
  generate(n, size, seed, [&](int i, int label, const Tensor<float>& img) {
    Image8 out;
    out.width = out.height = size;
    out.channels = 1;
    for (float v : img.data()) out.pixels.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
    char name[32];
    std::snprintf(name, sizeof name, "%03d.pgm", i);
    write_pnm((fs::path(root) / names[label] / name).string(), out);
  });
}

}  // namespace hifuse
