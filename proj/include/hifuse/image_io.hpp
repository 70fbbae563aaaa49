#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "hifuse/tensor.hpp"

namespace hifuse {

/// 8-bit image with interleaved channels (1 = gray, 3 = RGB).
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;  // row-major, channel fastest

  std::uint8_t at(int x, int y, int c) const {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
};

/// Binary PGM (P5) or PPM (P6) with maxval 255; '#' comments allowed in
/// the header.
Image8 decode_pnm(const std::string& bytes, const std::string& name = "<memory>");
Image8 read_pnm(const std::string& path);
/// P5 for one channel, P6 for three.
std::string encode_pnm(const Image8& image);
void write_pnm(const std::string& path, const Image8& image);

/// HFT1 tensor stream: "HFT1", u32 rank, rank x u64 dims, little-endian f32.
void write_hft(std::ostream& out, const Tensor<float>& t);
Tensor<float> read_hft(std::istream& in, const std::string& name = "<stream>");
void write_hft_file(const std::string& path, const Tensor<float>& t);
Tensor<float> read_hft_file(const std::string& path);

/// Bilinear resize of a [C, H, W] tensor with corner-aligned sampling:
/// output (i, j) reads source (i (H-1)/(H'-1), j (W-1)/(W'-1)).
Tensor<float> resize_bilinear(const Tensor<float>& chw, int out_h, int out_w);

/// 8-bit image -> [C, H, W] floats in [0, 1].
Tensor<float> image_to_tensor(const Image8& image);

struct PreprocessOptions {
  int image_size = 224;
  int channels = 3;
  double mean = 0.5;
  double std = 0.5;
};

/// Channel adaptation (gray replicated to 3 channels), resize to
/// image_size^2, then (v - mean) / std. Input values are in [0, 1].
Tensor<float> preprocess(const Tensor<float>& chw, const PreprocessOptions& opt);

/// Reads a .ppm/.pgm or .hft file (values in [0, 1]) and preprocesses it.
Tensor<float> load_model_input(const std::string& path, const PreprocessOptions& opt);

}  // namespace hifuse
