#pragma once

#include <cstdint>
#include <string>

#include "dplc/tensor.hpp"

namespace dplc {

/// Decode a PNG or JPEG file, center-crop to square, bilinearly resize to
/// (resolution, resolution), and return a (3, res, res) tensor in [-1, 1].
Tensor load_image_chw(const std::string& path, std::int64_t resolution);

/// Write a (3, h, w) or (1, h, w) tensor in [-1, 1] as an 8-bit PNG.
void save_image_chw(const Tensor& image, const std::string& path);

/// Raw 8-bit RGB PNG writer used by the plot rasterizer.
void write_png_rgb8(const std::string& path, const std::uint8_t* rgb,
                    int width, int height);

}  // namespace dplc
