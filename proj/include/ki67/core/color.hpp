#pragma once

#include <array>
#include <cmath>

#include "ki67/core/types.hpp"
#include "ki67/kernels/parallel.hpp"

namespace ki67 {

// sRGB (8-bit, D65) -> CIELAB for a single pixel.
std::array<float, 3> srgb_to_lab(std::uint8_t r, std::uint8_t g, std::uint8_t b);

// CIELAB -> sRGB, gamut-clamped to [0,255]. Round trip is not exact for
// out-of-gamut colours; in-gamut colours survive within quantisation error.
std::array<std::uint8_t, 3> lab_to_srgb(float L, float a, float b);

// Whole-image conversion. Per-pixel map, so serial and parallel execution are
// bit-identical; the policy only controls threading.
LabImage rgb_to_lab(const RgbImage& img, kernels::Exec exec = kernels::Exec::Parallel);

inline float lab_chroma(float a, float b) { return std::sqrt(a * a + b * b); }

}  // namespace ki67
