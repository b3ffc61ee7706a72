#pragma once

#include <filesystem>
#include <optional>

#include "refusion/tensor.hpp"

namespace refusion::imageio {

struct LoadedImage {
  Tensor lum;                     // [H,W], values in [0,1]
  std::optional<Tensor> chroma;   // [2,H,W] CbCr in [0,1]; present for color input
  int bit_depth = 8;
};

// Reads 8/16-bit gray or color PNG (palette and alpha are expanded/stripped).
// Color is converted to BT.601 luminance; chroma is retained for later
// recombination.
LoadedImage read_png(const std::filesystem::path& path);

void write_png_gray8(const std::filesystem::path& path, const Tensor& img);   // [H,W]
void write_png_rgb8(const std::filesystem::path& path, const Tensor& rgb);    // [3,H,W]

Tensor rgb_to_lum(const Tensor& rgb);                       // [3,H,W] -> [H,W]
Tensor rgb_to_chroma(const Tensor& rgb);                    // [3,H,W] -> [2,H,W]
Tensor ycbcr_to_rgb(const Tensor& lum, const Tensor& chroma);

}  // namespace refusion::imageio
