#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace cdetr {

// Interleaved HWC pixels in [0, 1].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 3;
    std::vector<double> pixels;

    Image() = default;
    Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
        : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

    double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
    bool operator==(const Image&) const = default;
};

// Bilinear resampling (pixel-center aligned).
Image resize_image(const Image& src, std::size_t height, std::size_t width);

// Binary Netpbm: P6 (RGB) and P5 (gray, expanded to RGB). 8-bit only.
Image read_netpbm(const std::filesystem::path& path);
void write_ppm(const Image& image, const std::filesystem::path& path);

}  // namespace cdetr
