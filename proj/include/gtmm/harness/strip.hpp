#pragma once

// Sequence strips: frames laid left to right, one sequence per row, with
// 1-pixel white separators. Values are quantized as floor(255 v + 0.5).

#include "gtmm/nets/nets.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace gtmm {

struct GrayImage {
  Index width = 0;
  Index height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

std::uint8_t quantize(double v);

/// sequences[n][t] is one frame of dims.pixels() values in [0, 1]; channels
/// are averaged.
GrayImage layout_strip(const std::vector<std::vector<std::vector<float>>>& sequences, ImageDims dims);

/// Format by extension: .png, .pgm or .ppm.
void write_image(const std::filesystem::path& path, const GrayImage& img);
/// Reads binary PGM (P5) or PPM (P6, first channel).
GrayImage read_pnm(const std::filesystem::path& path);

void dump_sequence_strip(const std::vector<std::vector<std::vector<float>>>& sequences, ImageDims dims,
                         const std::filesystem::path& path);

}  // namespace gtmm
