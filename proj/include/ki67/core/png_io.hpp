#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ki67/core/types.hpp"

namespace ki67 {

struct PngError : Error {
    explicit PngError(const std::string& what) : Error(what) {}
};

// 8-bit RGB. Grayscale/palette/alpha inputs are expanded or stripped to RGB.
RgbImage read_png_rgb8(const std::string& path);
void write_png_rgb8(const std::string& path, const RgbImage& img);

// 16-bit single-channel, used for heat-map labels. Values round-trip exactly.
struct Gray16Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint16_t> data;

    Gray16Image() = default;
    Gray16Image(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0) {}
};

Gray16Image read_png_gray16(const std::string& path);
void write_png_gray16(const std::string& path, const Gray16Image& img);

}  // namespace ki67
