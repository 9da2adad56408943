#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ganseg {

/// Grayscale raster with intensities in [0,1], row-major.
struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<float> pixels;

    float at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
    float& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

/// Reads an 8- or 16-bit PNG as grayscale in [0,1]. Color inputs are
/// converted by luminance; palette and low-bit-depth files are expanded.
GrayImage read_png_gray(const std::string& path);

/// Writes an 8-bit grayscale PNG.
void write_png_gray8(const std::string& path, int width, int height,
                     const std::vector<std::uint8_t>& pixels);

/// Writes an 8-bit RGB PNG (3 bytes per pixel).
void write_png_rgb8(const std::string& path, int width, int height,
                    const std::vector<std::uint8_t>& pixels);

}  // namespace ganseg
