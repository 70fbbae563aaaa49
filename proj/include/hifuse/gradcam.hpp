#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "hifuse/image_io.hpp"
#include "hifuse/model.hpp"

namespace hifuse {

struct Heatmap {
  Tensor<float> map;  // [H', W'], values in [0, 1]
  std::string layer;
  int target_class = 0;
};

/// Grad-CAM at the feature map tagged `layer` ("F4" by default; any of
/// G1..G4, L1..L4, F1..F4): channel weights are the spatial means of the
/// target logit's gradient, map = ReLU(sum_c w_c A_c) divided by its max
/// (an all-zero map stays zero). `image` is one preprocessed input,
/// [C, S, S] or [1, C, S, S]. Parameters are left untouched.
Heatmap grad_cam(const HiFuseModel<float>& model, const Tensor<float>& image, int target_class,
                 const std::string& layer = "F4");

/// Predicted class (argmax, ties to the lowest index) for one input.
int predict_class(const HiFuseModel<float>& model, const Tensor<float>& image);

/// 256-entry blue-to-red lookup: entry v is (v, 255 - |2v - 255|, 255 - v).
const std::array<std::array<std::uint8_t, 3>, 256>& colormap();

/// Heat value in [0, 1] -> colormap index round(255 h).
std::uint8_t heat_index(float h);

/// Bilinear resize with half-pixel centers (edge samples clamped).
Tensor<float> upsample_heatmap(const Tensor<float>& map, int out_h, int out_w);

/// Grayscale rendering of the bare map at its native resolution.
Image8 heatmap_image(const Heatmap& hm);

/// Map upsampled to the image size, colored, and blended 50/50 with the
/// image: out = (pixel + color + 1) / 2 in integer arithmetic. Gray images
/// are treated as RGB with equal channels.
Image8 overlay_heatmap(const Heatmap& hm, const Image8& image);

/// Writes `<stem>.gradcam.pgm` and `<stem>.gradcam.ppm` next to `input_path`
/// and returns the two paths.
std::array<std::string, 2> write_gradcam_files(const std::string& input_path, const Heatmap& hm,
                                               const Image8& original);

/// Original 8-bit image of a model input file (.ppm/.pgm decoded; .hft
/// values in [0, 1] scaled to bytes).
Image8 load_display_image(const std::string& path);

}  // namespace hifuse
