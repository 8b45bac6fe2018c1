#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "pban/tensor.hpp"

namespace pban {

/// RGB image with values in [0,1], stored as [3,H,W].
struct ImageRGB {
    Index width = 0;
    Index height = 0;
    TensorF pixels;
};

/// PNG (8-bit gray/RGB/RGBA, alpha dropped) or binary PPM (P6, maxval 255).
/// Throws FormatError on an unknown magic and DecodeError on truncation.
ImageRGB decode_image(std::span<const std::uint8_t> bytes);

/// Reads and decodes a file. IoError if it cannot be read.
ImageRGB read_image(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// 8-bit grayscale PNG, row-major `pixels` of size width*height.
std::vector<std::uint8_t> encode_png_gray(Index width, Index height,
                                          std::span<const std::uint8_t> pixels);

/// Row-major grid of floor(H/size)*floor(W/size) non-overlapping [3,size,size]
/// patches. Right and bottom remainders are dropped.
std::vector<TensorF> extract_patches(const ImageRGB& img, Index size = 32);

}  // namespace pban
