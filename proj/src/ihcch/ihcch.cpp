#include "ki67/ihcch/ihcch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ki67/kernels/distance_transform.hpp"
#include "ki67/kernels/vector_median.hpp"

namespace ki67::ihcch {

namespace {

// A stain mode is several bins wide and count fluctuations would make nearly
// every slope bin a raw local maximum, so peaks are found on a box-smoothed
// copy and must dominate their whole +-sep window: that leaves one apex per
// mode. Returns (bin, smoothed count) pairs in bin order; plateaus collapse
// to their middle bin.
std::vector<std::pair<int, double>> histogram_peaks(const std::vector<long>& hist, int sep) {
    const int n = static_cast<int>(hist.size());
    std::vector<double> s(hist.begin(), hist.end());
    std::vector<double> t(static_cast<std::size_t>(n));
    for (int pass = 0; pass < 2; ++pass) {
        for (int i = 0; i < n; ++i) {
            const int lo = std::max(0, i - sep), hi = std::min(n - 1, i + sep);
            double acc = 0.0;
            for (int j = lo; j <= hi; ++j) acc += s[static_cast<std::size_t>(j)];
            t[static_cast<std::size_t>(i)] = acc / (hi - lo + 1);
        }
        s.swap(t);
    }
    std::vector<std::pair<int, double>> peaks;
    int i = 0;
    while (i < n) {
        if (s[static_cast<std::size_t>(i)] <= 0.0) {
            ++i;
            continue;
        }
        int j = i;
        while (j + 1 < n && s[static_cast<std::size_t>(j + 1)] == s[static_cast<std::size_t>(i)])
            ++j;  // plateau [i, j]
        const int lo = std::max(0, i - sep), hi = std::min(n - 1, j + sep);
        bool dominant = true;
        for (int k = lo; k <= hi && dominant; ++k)
            dominant = s[static_cast<std::size_t>(k)] <= s[static_cast<std::size_t>(i)];
        if (dominant) peaks.emplace_back((i + j) / 2, s[static_cast<std::size_t>(i)]);
        i = j + 1;
    }
    return peaks;
}

// A secondary peak below this fraction of the primary is treated as noise
// (e.g. a few outlier pixels in an effectively unimodal histogram), and the
// split falls back to the fixed b* = 0 threshold. Low enough that a genuine
// minority stain mode survives even at a few percent PI.
constexpr double kMinPeakFraction = 0.02;

}  // namespace

std::vector<std::uint8_t> subtract_background(const LabImage& lab, const IhcchConfig& cfg) {
    std::vector<std::uint8_t> tissue(lab.pixel_count());
    for (std::size_t i = 0; i < tissue.size(); ++i) {
        const bool bg =
            lab.L[i] > cfg.background_l_min && lab_chroma(lab.a[i], lab.b[i]) < cfg.background_chroma_max;
        tissue[i] = bg ? 0 : 1;
    }
    return tissue;
}

StainMasks separate_stains(const LabImage& lab, const std::vector<std::uint8_t>& tissue,
                           const IhcchConfig& cfg) {
    if (tissue.size() != lab.pixel_count())
        throw Error("separate_stains: mask size mismatch");
    const long tissue_px = std::count(tissue.begin(), tissue.end(), std::uint8_t(1));
    if (tissue_px < 64)
        throw EmptyTissueError("separate_stains: only " + std::to_string(tissue_px) +
                               " tissue pixels (need 64)");

    StainMasks m;
    m.width = lab.width;
    m.height = lab.height;
    m.tissue = tissue;
    m.blue.assign(tissue.size(), 0);
    m.brown.assign(tissue.size(), 0);

    // b* histogram over chromatic tissue pixels.
    float bmin = 0.f, bmax = 0.f;
    bool any = false;
    for (std::size_t i = 0; i < tissue.size(); ++i) {
        if (!tissue[i] || lab_chroma(lab.a[i], lab.b[i]) < cfg.stain_chroma_min) continue;
        if (!any || lab.b[i] < bmin) bmin = lab.b[i];
        if (!any || lab.b[i] > bmax) bmax = lab.b[i];
        any = true;
    }

    m.threshold_mode = ThresholdMode::FixedZero;
    m.b_threshold = 0.f;
    if (any && bmax > bmin) {
        const int nbins = cfg.histogram_bins;
        std::vector<long> hist(nbins, 0);
        const float scale = nbins / (bmax - bmin);
        auto bin_of = [&](float b) {
            return std::clamp(static_cast<int>((b - bmin) * scale), 0, nbins - 1);
        };
        for (std::size_t i = 0; i < tissue.size(); ++i) {
            if (!tissue[i] || lab_chroma(lab.a[i], lab.b[i]) < cfg.stain_chroma_min) continue;
            ++hist[bin_of(lab.b[i])];
        }
        auto bin_center = [&](int bin) { return bmin + (bin + 0.5f) * (bmax - bmin) / nbins; };

        // The dominance window scales with the histogram: a stain mode spans
        // a fixed share of the observed b* range (the range itself is set by
        // the two stains), so nbins/16 suppresses within-mode sub-peaks while
        // real stain apexes, always about half the range apart, both survive.
        const int window = std::max(cfg.peak_min_separation, nbins / 16);
        const auto peaks = histogram_peaks(hist, window);
        // Primary peak: largest smoothed count (lowest bin on ties). Secondary:
        // largest remaining peak at least peak_min_separation bins away that
        // carries non-negligible mass.
        int p1 = -1, p2 = -1;
        double v1 = 0.0, v2 = 0.0;
        for (const auto& [bin, cnt] : peaks)
            if (p1 < 0 || cnt > v1) { p1 = bin; v1 = cnt; }
        for (const auto& [bin, cnt] : peaks) {
            if (std::abs(bin - p1) < cfg.peak_min_separation) continue;
            if (cnt < kMinPeakFraction * v1) continue;
            if (p2 < 0 || cnt > v2) { p2 = bin; v2 = cnt; }
        }
        if (p1 >= 0 && p2 >= 0) {
            const int lo = std::min(p1, p2), hi = std::max(p1, p2);
            // Deepest valley strictly between the peaks; ties resolve toward
            // the bin whose centre is closest to b* = 0, then the lower bin.
            int valley = -1;
            for (int bin = lo + 1; bin < hi; ++bin) {
                if (valley < 0 || hist[bin] < hist[valley] ||
                    (hist[bin] == hist[valley] &&
                     std::fabs(bin_center(bin)) < std::fabs(bin_center(valley))))
                    valley = bin;
            }
            if (valley >= 0) {
                m.b_threshold = bin_center(valley);
                m.threshold_mode = ThresholdMode::HistogramValley;
            }
        }
    }

    for (std::size_t i = 0; i < tissue.size(); ++i) {
        if (!tissue[i] || lab_chroma(lab.a[i], lab.b[i]) < cfg.stain_chroma_min) continue;
        if (lab.b[i] > m.b_threshold)
            m.brown[i] = 1;
        else
            m.blue[i] = 1;
    }
    return m;
}

std::vector<Centroid> detect_nuclei(const std::vector<std::uint8_t>& mask, int width, int height,
                                    Ki67Class cls, const IhcchConfig& cfg, kernels::Exec exec) {
    std::vector<std::int32_t> labels;
    const int ncomp = kernels::connected_components(mask, width, height, labels);
    if (ncomp == 0) return {};

    // Debris filter: drop components smaller than the smallest plausible
    // nucleus disc.
    std::vector<long> area(ncomp + 1, 0);
    for (const auto lbl : labels) ++area[lbl];
    const double min_area = 3.14159265358979323846 * cfg.min_nucleus_radius_px * cfg.min_nucleus_radius_px;
    std::vector<std::uint8_t> keep(ncomp + 1, 0);
    for (int c = 1; c <= ncomp; ++c) keep[c] = area[c] >= min_area;

    const auto edt = kernels::distance_transform(mask, width, height, exec);

    struct Cand {
        float depth;
        int x, y;
        std::int32_t comp;
    };
    std::vector<Cand> cands;
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * width + x;
            if (!mask[i] || !keep[labels[i]]) continue;
            const float v = edt[i];
            if (v < cfg.min_nucleus_radius_px) continue;
            bool is_max = true;
            for (int dy = -1; dy <= 1 && is_max; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (!dx && !dy) continue;
                    const int nx = x + dx, ny = y + dy;
                    if (nx < 0 || nx >= width || ny < 0 || ny >= height) continue;
                    if (edt[static_cast<std::size_t>(ny) * width + nx] > v) {
                        is_max = false;
                        break;
                    }
                }
            if (is_max) cands.push_back({v, x, y, labels[i]});
        }

    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.depth != b.depth) return a.depth > b.depth;
        if (a.y != b.y) return a.y < b.y;
        return a.x < b.x;
    });

    // Greedy: a candidate survives if no previously accepted centre of the
    // same component lies within its own (clamped) depth.
    std::vector<Centroid> out;
    std::vector<std::pair<float, float>> accepted_xy;
    std::vector<std::int32_t> accepted_comp;
    for (const auto& c : cands) {
        const float cx = c.x + 0.5f, cy = c.y + 0.5f;
        const float radius =
            std::clamp(c.depth, cfg.min_nucleus_radius_px, cfg.max_nucleus_radius_px);
        bool ok = true;
        for (std::size_t k = 0; k < accepted_xy.size(); ++k) {
            if (accepted_comp[k] != c.comp) continue;
            const float dx = accepted_xy[k].first - cx, dy = accepted_xy[k].second - cy;
            if (dx * dx + dy * dy < radius * radius) {
                ok = false;
                break;
            }
        }
        if (!ok) continue;
        accepted_xy.emplace_back(cx, cy);
        accepted_comp.push_back(c.comp);
        out.push_back({cx, cy, cls});
    }
    return out;
}

IhcchResult run_pipeline(const RgbImage& img, const IhcchConfig& cfg, kernels::Exec exec) {
    const RgbImage smoothed = kernels::vector_median_filter(img, cfg.median_window, exec);
    const LabImage lab = rgb_to_lab(smoothed, exec);
    const auto tissue = subtract_background(lab, cfg);
    IhcchResult res;
    res.masks = separate_stains(lab, tissue, cfg);
    res.centroids.width = img.width;
    res.centroids.height = img.height;
    res.centroids.microns_per_pixel = cfg.microns_per_pixel;
    auto blue = detect_nuclei(res.masks.blue, img.width, img.height, Ki67Class::Neg, cfg, exec);
    auto brown = detect_nuclei(res.masks.brown, img.width, img.height, Ki67Class::Pos, cfg, exec);
    res.centroids.points = std::move(blue);
    res.centroids.points.insert(res.centroids.points.end(), brown.begin(), brown.end());
    return res;
}

}  // namespace ki67::ihcch
