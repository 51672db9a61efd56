#pragma once

#include <vector>

#include "ki67/core/types.hpp"

namespace ki67::labels {

// Two-channel detection target in [0,1]: channel 0 = Neg, channel 1 = Pos.
struct Heatmap {
    int width = 0;
    int height = 0;
    std::vector<float> neg, pos;

    Heatmap() = default;
    Heatmap(int w, int h)
        : width(w),
          height(h),
          neg(static_cast<std::size_t>(w) * h, 0.f),
          pos(static_cast<std::size_t>(w) * h, 0.f) {}

    std::vector<float>& channel(Ki67Class c) { return c == Ki67Class::Pos ? pos : neg; }
    const std::vector<float>& channel(Ki67Class c) const { return c == Ki67Class::Pos ? pos : neg; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
};

struct DecodeConfig {
    // Trained heat maps rarely reach the full peak height of a rendered
    // label, so the decode threshold sits well below the 1.0 peaks while
    // staying above the exp(-2) saddles two labelled bumps can form.
    float peak_threshold = 0.3f;
    float min_separation_px = 6.f;  // ~3 sigma for the default kernel
};

// Renders centroids as Gaussian bumps (std sigma_px, truncated at 3 sigma).
// Overlapping bumps combine by max, and the pixel nearest each centroid is
// forced to exactly 1, so each annotated nucleus keeps a full-strength peak
// no matter how close its neighbours are.
Heatmap centroids_to_heatmap(const CentroidSet& set, float sigma_px = 2.f);

// Inverse of the renderer: thresholded local maxima per channel, kept
// greedily in decreasing value order with a minimal separation. Candidate
// order ties break on (y, x), making the decode deterministic.
CentroidSet heatmap_to_centroids(const Heatmap& hm, const DecodeConfig& cfg = {},
                                 float microns_per_pixel = 0.5f);

}  // namespace ki67::labels
