#pragma once

#include <string>
#include <vector>

#include "ett/data.hpp"

namespace ett {

// 8-bit RGB PNG. Pixel values in [-1, 1] map linearly to [0, 255] and are
// clamped first.
void write_png(const std::string& path, const Image& image);
Image read_png(const std::string& path);

// Flat little-endian image stack: "ETTIMG1\0", u32 count, u32 height,
// u32 width, then count * height * width * 3 float32 values.
void write_image_stack(const std::string& path, const std::vector<Image>& images);
std::vector<Image> read_image_stack(const std::string& path);

// Reads either format, chosen by file signature.
std::vector<Image> read_images(const std::string& path);

// Images laid out left to right with a `gap`-pixel separator of `fill`.
// Rows of the grid are the outer vector.
Image tile_images(const std::vector<std::vector<Image>>& rows, int gap = 1, float fill = 1.0f);

Image clamp_image(Image image);
double image_mse(const Image& a, const Image& b);

}  // namespace ett
