#include "ki67/labels/heatmap.hpp"

#include <algorithm>
#include <cmath>

namespace ki67::labels {

namespace {

int nearest_pixel(float v, int extent) {
    return std::clamp(static_cast<int>(std::floor(v)), 0, extent - 1);
}

}  // namespace

Heatmap centroids_to_heatmap(const CentroidSet& set, float sigma_px) {
    if (sigma_px <= 0.f) throw Error("centroids_to_heatmap: sigma must be positive");
    Heatmap hm(set.width, set.height);
    const float r = 3.f * sigma_px;
    const float inv2s2 = 1.f / (2.f * sigma_px * sigma_px);
    for (const auto& p : set.points) {
        auto& ch = hm.channel(p.cls);
        const int x0 = std::max(0, static_cast<int>(std::floor(p.x - r)));
        const int x1 = std::min(set.width - 1, static_cast<int>(std::ceil(p.x + r)));
        const int y0 = std::max(0, static_cast<int>(std::floor(p.y - r)));
        const int y1 = std::min(set.height - 1, static_cast<int>(std::ceil(p.y + r)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const float dx = (x + 0.5f) - p.x, dy = (y + 0.5f) - p.y;
                const float d2 = dx * dx + dy * dy;
                if (d2 > r * r) continue;
                const float g = std::exp(-d2 * inv2s2);
                auto& v = ch[static_cast<std::size_t>(y) * set.width + x];
                v = std::max(v, g);
            }
        // The nearest pixel carries a full-strength peak even when the bump
        // was clipped or its neighbour dominates.
        const int nx = nearest_pixel(p.x, set.width), ny = nearest_pixel(p.y, set.height);
        ch[static_cast<std::size_t>(ny) * set.width + nx] = 1.f;
    }
    return hm;
}

CentroidSet heatmap_to_centroids(const Heatmap& hm, const DecodeConfig& cfg,
                                 float microns_per_pixel) {
    CentroidSet out;
    out.width = hm.width;
    out.height = hm.height;
    out.microns_per_pixel = microns_per_pixel;

    struct Cand {
        float v;
        int x, y;
    };
    for (const Ki67Class cls : {Ki67Class::Neg, Ki67Class::Pos}) {
        const auto& ch = hm.channel(cls);
        std::vector<Cand> cands;
        for (int y = 0; y < hm.height; ++y)
            for (int x = 0; x < hm.width; ++x) {
                const float v = ch[static_cast<std::size_t>(y) * hm.width + x];
                if (v < cfg.peak_threshold) continue;
                bool is_max = true;
                for (int dy = -1; dy <= 1 && is_max; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (!dx && !dy) continue;
                        const int nx = x + dx, ny = y + dy;
                        if (nx < 0 || nx >= hm.width || ny < 0 || ny >= hm.height) continue;
                        if (ch[static_cast<std::size_t>(ny) * hm.width + nx] > v) {
                            is_max = false;
                            break;
                        }
                    }
                if (is_max) cands.push_back({v, x, y});
            }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.v != b.v) return a.v > b.v;
            if (a.y != b.y) return a.y < b.y;
            return a.x < b.x;
        });
        std::vector<std::pair<float, float>> kept;
        const float min_d2 = cfg.min_separation_px * cfg.min_separation_px;
        for (const auto& c : cands) {
            const float cx = c.x + 0.5f, cy = c.y + 0.5f;
            bool ok = true;
            for (const auto& [kx, ky] : kept) {
                const float dx = kx - cx, dy = ky - cy;
                if (dx * dx + dy * dy < min_d2) {
                    ok = false;
                    break;
                }
            }
            if (!ok) continue;
            kept.emplace_back(cx, cy);
            out.points.push_back({cx, cy, cls});
        }
    }
    return out;
}

}  // namespace ki67::labels
