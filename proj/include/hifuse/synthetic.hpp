#pragma once

#include <cstdint>
#include <string>

#include "hifuse/dataset.hpp"

namespace hifuse {

/// Two-class toy images in [0, 1], gray, `size` x `size`: class "blobs"
/// holds 1-3 Gaussian spots, class "stripes" a sinusoidal grating at a
/// random angle, period and phase. Both get mild pixel noise. Images
/// alternate between the classes; everything is a function of `seed`.
Tensor<float> synthetic_image(int label, int size, RngState& rng);

/// `n` preprocessed samples (labels alternating 0, 1, ...).
Dataset synthetic_dataset(int n, const PreprocessOptions& opt, std::uint64_t seed);

/// Writes the same images as 8-bit PGM files under root/blobs and
/// root/stripes.
void write_synthetic_folder(const std::string& root, int n, int size, std::uint64_t seed);

}  // namespace hifuse
