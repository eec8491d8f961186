#pragma once

#include "gshdl/grid.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace gshdl {

/// 8-bit raster as stored on disk, interleaved per pixel.
struct Image8 {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0; ///< 1 or 3
    std::vector<std::uint8_t> pixels;

    friend bool operator==(const Image8&, const Image8&) = default;
};

/// Reads PNG (8-bit gray, gray+alpha, RGB, RGBA or palette) and binary
/// PGM/PPM. Alpha is dropped; palette images expand to RGB.
[[nodiscard]] Image8 read_image8(const std::filesystem::path& path);
/// Writes PNG or PGM/PPM depending on the extension.
void write_image8(const std::filesystem::path& path, const Image8& image);

/// Values scaled to [0, 1], one channel per colour channel.
[[nodiscard]] Grid2D to_grid(const Image8& image);
/// Inverse of to_grid: clamps to [0, 1] and rounds to the nearest code.
[[nodiscard]] Image8 to_image8(const Grid2D& grid);

/// Raw single-channel mask codes. Palette PNGs yield palette indices rather
/// than colours; multi-channel images are rejected.
[[nodiscard]] std::vector<int> read_mask_codes(const std::filesystem::path& path, std::size_t& height,
                                               std::size_t& width);
/// 8-bit gray PNG/PGM of label codes (void pixels written as 255).
void write_mask(const std::filesystem::path& path, const LabelGrid& labels);

} // namespace gshdl
