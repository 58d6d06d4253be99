#pragma once

#include <filesystem>
#include <string>

#include "fot/tensor.hpp"

namespace fot {

// Raster I/O. Images are exchanged with the rest of the library as (C,H,W)
// tensors, RGB order, values in [0,1]. Decoding failures throw fot::Error.
Tensor load_image(const std::filesystem::path& path);

// 8-bit PNG/JPEG encode; values are clamped to [0,1] and quantized to 0..255.
void save_image(const std::filesystem::path& path, const Tensor& chw);

// One-channel 8-bit grayscale, used for saliency maps and masks.
Tensor load_gray(const std::filesystem::path& path);

// Writes to a temp file in the same directory, then renames into place.
void save_gray_atomic(const std::filesystem::path& path, const Tensor& map_1hw);

bool has_image_extension(const std::filesystem::path& path);

}  // namespace fot
