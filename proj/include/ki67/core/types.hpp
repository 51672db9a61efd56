#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ki67 {

// Base for all library errors so callers can catch one type at the boundary.
struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// PI is undefined when an image yields no cells at all.
struct ZeroCellsError : Error {
    explicit ZeroCellsError(const std::string& what) : Error(what) {}
};

enum class Ki67Class : std::uint8_t {
    Neg = 0,  // hematoxylin-only (blue) nucleus
    Pos = 1,  // DAB-stained (brown) nucleus
};

inline const char* to_string(Ki67Class c) { return c == Ki67Class::Pos ? "pos" : "neg"; }

// Interleaved 8-bit RGB raster, row-major.
struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;  // width*height*3 bytes, RGB per pixel

    RgbImage() = default;
    RgbImage(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, 0) {}

    std::uint8_t& at(int x, int y, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
    std::uint8_t at(int x, int y, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
    bool same_shape(const RgbImage& o) const { return width == o.width && height == o.height; }
};

// Planar CIELAB raster (D65, values in the usual L*∈[0,100], a*/b* roughly ±128).
struct LabImage {
    int width = 0;
    int height = 0;
    std::vector<float> L, a, b;

    LabImage() = default;
    LabImage(int w, int h)
        : width(w),
          height(h),
          L(static_cast<std::size_t>(w) * h, 0.f),
          a(static_cast<std::size_t>(w) * h, 0.f),
          b(static_cast<std::size_t>(w) * h, 0.f) {}

    std::size_t idx(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
};

// A detected or annotated nucleus centre, in pixel coordinates.
// x grows right, y grows down; a pixel (ix,iy) covers [ix,ix+1)x[iy,iy+1),
// so its centre is (ix+0.5, iy+0.5).
struct Centroid {
    float x = 0.f;
    float y = 0.f;
    Ki67Class cls = Ki67Class::Neg;
};

// Point annotations for one image plus the calibration needed to reason in microns.
struct CentroidSet {
    std::vector<Centroid> points;
    int width = 0;   // extent of the image the points live in
    int height = 0;
    float microns_per_pixel = 0.5f;

    long count(Ki67Class c) const {
        long n = 0;
        for (const auto& p : points) n += (p.cls == c);
        return n;
    }
    long pos_count() const { return count(Ki67Class::Pos); }
    long neg_count() const { return count(Ki67Class::Neg); }
};

struct PiScore {
    double value = 0.0;  // percent, in [0,100]
    long pos_count = 0;
    long neg_count = 0;
};

// PI = 100 * pos / (pos + neg). Throws ZeroCellsError when there are no cells.
PiScore compute_pi(long pos_count, long neg_count);

// |a - b| in percentage points.
double delta_pi(const PiScore& a, const PiScore& b);

}  // namespace ki67
