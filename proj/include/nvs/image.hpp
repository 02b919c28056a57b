#pragma once

#include "nvs/tensor.hpp"

#include <filesystem>

namespace nvs {

/// (H, W, 3) float image. Renders and metrics use [0, 1]; the denoiser uses [-1, 1].
using Image = Tensor<float>;

Image read_png(const std::filesystem::path& path);
/// Writes an 8-bit RGB PNG; values are clipped to [0, 1] and rounded.
void write_png(const std::filesystem::path& path, const Image& image);

/// Rounds to the 8-bit grid a PNG round trip would produce.
Image quantize(const Image& image);

inline Image to_signed(const Image& unit) {
  Image out(unit.shape());
  out.array() = unit.array() * 2.0f - 1.0f;
  return out;
}

inline Image to_unit(const Image& signed_image) {
  Image out(signed_image.shape());
  out.array() = ((signed_image.array() + 1.0f) * 0.5f).cwiseMax(0.0f).cwiseMin(1.0f);
  return out;
}

}  // namespace nvs
