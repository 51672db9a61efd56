#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "ki67/core/color.hpp"
#include "ki67/core/types.hpp"
#include "ki67/kernels/parallel.hpp"

namespace ki67::ihcch {

struct EmptyTissueError : Error {
    explicit EmptyTissueError(const std::string& what) : Error(what) {}
};

struct IhcchConfig {
    int median_window = 3;          // vector median filter window (odd, >= 3)
    float background_l_min = 85.f;  // L* above this AND chroma below -> background
    float background_chroma_max = 10.f;
    float stain_chroma_min = 10.f;  // pixels below this are chroma-neutral residue
    int histogram_bins = 256;
    int peak_min_separation = 5;    // bins between the two histogram peaks
    float min_nucleus_radius_px = 2.5f;
    float max_nucleus_radius_px = 12.f;
    float microns_per_pixel = 0.5f;
};

// How the blue/brown split threshold was obtained.
enum class ThresholdMode { HistogramValley, FixedZero };

struct StainMasks {
    std::vector<std::uint8_t> tissue;  // 1 = not background
    std::vector<std::uint8_t> blue;    // hematoxylin nuclei candidates
    std::vector<std::uint8_t> brown;   // DAB (Ki-67+) candidates
    int width = 0;
    int height = 0;
    float b_threshold = 0.f;
    ThresholdMode threshold_mode = ThresholdMode::FixedZero;
};

// Background = bright and nearly achromatic (L* > l_min and chroma < chroma_max).
// Returns 1 for tissue pixels.
std::vector<std::uint8_t> subtract_background(const LabImage& lab, const IhcchConfig& cfg);

// Splits tissue into blue vs brown by the deepest valley between the two
// dominant peaks of the b* histogram, taken over chromatic tissue pixels
// (chroma >= stain_chroma_min; the near-neutral residue would otherwise bury
// the stain modes under a third peak). Pixels with b* above the threshold go
// to brown, the rest to blue; the residue joins neither mask. Falls back to a
// fixed threshold of b* = 0 when no two separated peaks exist. Throws
// EmptyTissueError when fewer than 64 tissue pixels are present.
StainMasks separate_stains(const LabImage& lab, const std::vector<std::uint8_t>& tissue,
                           const IhcchConfig& cfg);

// Per-class nuclei detection on a stain mask: connected components, exact
// Euclidean distance transform, then local maxima kept greedily in decreasing
// depth order. A kept maximum suppresses later candidates of the same
// component closer than its own depth value (clamped to the configured radius
// range), so the acceptance radius adapts per candidate. Components smaller
// than a minimal nucleus disc are discarded as debris.
std::vector<Centroid> detect_nuclei(const std::vector<std::uint8_t>& mask, int width, int height,
                                    Ki67Class cls, const IhcchConfig& cfg,
                                    kernels::Exec exec = kernels::Exec::Parallel);

struct IhcchResult {
    CentroidSet centroids;
    StainMasks masks;
};

// Full unsupervised pipeline: vector median filter -> CIELAB -> background
// subtraction -> stain separation -> per-class nuclei detection.
IhcchResult run_pipeline(const RgbImage& img, const IhcchConfig& cfg = {},
                         kernels::Exec exec = kernels::Exec::Parallel);

}  // namespace ki67::ihcch
