#include "ki67/synth/generator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ki67/core/color.hpp"
#include "ki67/core/rng.hpp"

namespace ki67::synth {

namespace {

struct PlacedNucleus {
    float x, y;            // centre, px
    float r_major, r_minor;  // px
    float angle;
    float r_eq;            // (major + minor) / 2, for spacing
};

// Coverage of one pixel by the ellipse, 4x4 supersampling.
float pixel_coverage(const PlacedNucleus& nu, int px, int py) {
    const float ca = std::cos(nu.angle), sa = std::sin(nu.angle);
    int inside = 0;
    for (int sy = 0; sy < 4; ++sy)
        for (int sx = 0; sx < 4; ++sx) {
            const float x = px + (sx + 0.5f) / 4.f - nu.x;
            const float y = py + (sy + 0.5f) / 4.f - nu.y;
            const float u = (x * ca + y * sa) / nu.r_major;
            const float v = (-x * sa + y * ca) / nu.r_minor;
            if (u * u + v * v <= 1.f) ++inside;
        }
    return inside / 16.f;
}

void composite(RgbImage& img, int x, int y, const std::array<std::uint8_t, 3>& rgb, float alpha) {
    for (int c = 0; c < 3; ++c) {
        const float v = alpha * rgb[c] + (1.f - alpha) * img.at(x, y, c);
        img.at(x, y, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.f, 255.f)));
    }
}

void paint_matrix(RgbImage& img, const DomainParams& p, Rng rng) {
    // Low-frequency mottling: normals on a coarse grid, bilinear in between,
    // applied to L* only.
    constexpr int kCell = 16;
    const int gw = img.width / kCell + 2, gh = img.height / kCell + 2;
    std::vector<float> node(static_cast<std::size_t>(gw) * gh);
    for (auto& v : node)
        v = std::clamp(static_cast<float>(rng.normal(0.0, p.matrix_mottle_lab)),
                       -2.f * p.matrix_mottle_lab, 2.f * p.matrix_mottle_lab);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const float gx = static_cast<float>(x) / kCell, gy = static_cast<float>(y) / kCell;
            const int x0 = static_cast<int>(gx), y0 = static_cast<int>(gy);
            const float fx = gx - x0, fy = gy - y0;
            const float dl = (1 - fx) * (1 - fy) * node[static_cast<std::size_t>(y0) * gw + x0] +
                             fx * (1 - fy) * node[static_cast<std::size_t>(y0) * gw + x0 + 1] +
                             (1 - fx) * fy * node[static_cast<std::size_t>(y0 + 1) * gw + x0] +
                             fx * fy * node[static_cast<std::size_t>(y0 + 1) * gw + x0 + 1];
            const auto rgb =
                lab_to_srgb(p.tissue_matrix_lab.L + dl, p.tissue_matrix_lab.a, p.tissue_matrix_lab.b);
            img.at(x, y, 0) = rgb[0];
            img.at(x, y, 1) = rgb[1];
            img.at(x, y, 2) = rgb[2];
        }
}

void apply_box_gaussian_blur(RgbImage& img) {
    // Separable Gaussian, sigma 2, radius 5.
    constexpr int kR = 5;
    float w[2 * kR + 1];
    float sum = 0.f;
    for (int i = -kR; i <= kR; ++i) {
        w[i + kR] = std::exp(-(i * i) / (2.f * 2.f * 2.f));
        sum += w[i + kR];
    }
    for (auto& v : w) v /= sum;

    RgbImage tmp = img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                float acc = 0.f;
                for (int i = -kR; i <= kR; ++i)
                    acc += w[i + kR] * img.at(std::clamp(x + i, 0, img.width - 1), y, c);
                tmp.at(x, y, c) = static_cast<std::uint8_t>(std::lround(acc));
            }
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                float acc = 0.f;
                for (int i = -kR; i <= kR; ++i)
                    acc += w[i + kR] * tmp.at(x, std::clamp(y + i, 0, img.height - 1), c);
                img.at(x, y, c) = static_cast<std::uint8_t>(std::lround(acc));
            }
}

void apply_artifact(RgbImage& img, Rng& rng) {
    switch (rng.below(3)) {
        case 0:
            apply_box_gaussian_blur(img);
            break;
        case 1: {  // tissue fold: dark band across the image
            const float px = static_cast<float>(rng.uniform(0.0, img.width));
            const float py = static_cast<float>(rng.uniform(0.0, img.height));
            const float theta = static_cast<float>(rng.uniform(0.0, 3.14159265358979323846));
            const float nx = std::cos(theta), ny = std::sin(theta);
            const float half_w = static_cast<float>(rng.uniform(4.0, 8.0));
            for (int y = 0; y < img.height; ++y)
                for (int x = 0; x < img.width; ++x) {
                    const float d = std::fabs((x + 0.5f - px) * nx + (y + 0.5f - py) * ny);
                    if (d > half_w) continue;
                    for (int c = 0; c < 3; ++c)
                        img.at(x, y, c) = static_cast<std::uint8_t>(img.at(x, y, c) * 0.6f);
                }
            break;
        }
        default: {  // dust specks
            const int k = 5 + static_cast<int>(rng.below(11));
            const std::array<std::uint8_t, 3> dust{60, 50, 45};
            for (int i = 0; i < k; ++i) {
                const float cx = static_cast<float>(rng.uniform(0.0, img.width));
                const float cy = static_cast<float>(rng.uniform(0.0, img.height));
                const float r = static_cast<float>(rng.uniform(2.0, 5.0));
                PlacedNucleus disc{cx, cy, r, r, 0.f, r};
                const int x0 = std::max(0, static_cast<int>(cx - r - 1));
                const int x1 = std::min(img.width - 1, static_cast<int>(cx + r + 1));
                const int y0 = std::max(0, static_cast<int>(cy - r - 1));
                const int y1 = std::min(img.height - 1, static_cast<int>(cy + r + 1));
                for (int y = y0; y <= y1; ++y)
                    for (int x = x0; x <= x1; ++x) {
                        const float a = 0.85f * pixel_coverage(disc, x, y);
                        if (a > 0.f) composite(img, x, y, dust, a);
                    }
            }
            break;
        }
    }
}

}  // namespace

SynthImage generate(const DomainParams& p, double target_pi, std::uint64_t seed, int width,
                    int height) {
    if (target_pi < 0.0 || target_pi > 100.0) throw Error("generate: target_pi outside [0,100]");
    if (width < 32 || height < 32) throw Error("generate: image too small");
    if (p.cell_density <= 0.f || p.microns_per_pixel <= 0.f)
        throw Error("generate: density and calibration must be positive");
    if (p.overlap_fraction < 0.f || p.overlap_fraction > 0.5f)
        throw Error("generate: overlap_fraction must be in [0, 0.5]");

    const double um_w = width * p.microns_per_pixel, um_h = height * p.microns_per_pixel;
    const long n = std::lround(p.cell_density * (um_w / 100.0) * (um_h / 100.0));
    if (n <= 0) throw Error("generate: density gives no nuclei at this size");

    Rng radii_rng = Rng::substream(seed, "radii");
    Rng place_rng = Rng::substream(seed, "place");
    Rng class_rng = Rng::substream(seed, "class");
    Rng color_rng = Rng::substream(seed, "color");

    // Dart throwing with a global attempt budget.
    std::vector<PlacedNucleus> placed;
    placed.reserve(n);
    long attempts_left = 1000 * n;
    for (long i = 0; i < n; ++i) {
        PlacedNucleus nu{};
        nu.r_major = static_cast<float>(
            std::clamp(radii_rng.normal(p.nucleus_radius_um, p.nucleus_radius_sigma_um),
                       0.5 * p.nucleus_radius_um, 1.5 * p.nucleus_radius_um)) /
                     p.microns_per_pixel;
        const float ratio = static_cast<float>(radii_rng.uniform(0.7, 1.0));
        nu.r_minor = nu.r_major * ratio;
        nu.angle = static_cast<float>(radii_rng.uniform(0.0, 3.14159265358979323846));
        nu.r_eq = 0.5f * (nu.r_major + nu.r_minor);

        const float margin = nu.r_major + 1.f;
        if (2 * margin >= width || 2 * margin >= height)
            throw Error("generate: nuclei larger than the image");
        for (;;) {
            if (attempts_left-- <= 0)
                throw PlacementOverflowError("generate: dart throwing exhausted " +
                                             std::to_string(1000 * n) + " attempts at nucleus " +
                                             std::to_string(placed.size()));
            nu.x = static_cast<float>(place_rng.uniform(margin, width - margin));
            nu.y = static_cast<float>(place_rng.uniform(margin, height - margin));
            bool ok = true;
            for (const auto& other : placed) {
                const float dx = nu.x - other.x, dy = nu.y - other.y;
                const float min_d = (1.f - p.overlap_fraction) * (nu.r_eq + other.r_eq);
                if (dx * dx + dy * dy < min_d * min_d) {
                    ok = false;
                    break;
                }
            }
            if (ok) break;
        }
        placed.push_back(nu);
    }

    // Exact class counts.
    const long n_pos = std::lround(target_pi / 100.0 * static_cast<double>(n));
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    class_rng.shuffle(order);
    std::vector<Ki67Class> cls(n, Ki67Class::Neg);
    for (long i = 0; i < n_pos; ++i) cls[order[i]] = Ki67Class::Pos;

    // Canvas: plain background or the mottled tissue wash.
    SynthImage out;
    out.image = RgbImage(width, height);
    if (p.tissue_matrix) {
        paint_matrix(out.image, p, Rng::substream(seed, "matrix"));
    } else {
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x)
                for (int c = 0; c < 3; ++c) out.image.at(x, y, c) = p.background_rgb[c];
    }

    std::vector<std::uint8_t> covered(static_cast<std::size_t>(width) * height, 0);
    for (long i = 0; i < n; ++i) {
        const auto& nu = placed[i];
        const LabColor base = cls[i] == Ki67Class::Pos ? p.brown_stain : p.blue_stain;
        const auto rgb = lab_to_srgb(
            base.L + static_cast<float>(color_rng.normal(0.0, p.stain_jitter_lab)),
            base.a + static_cast<float>(color_rng.normal(0.0, p.stain_jitter_lab)),
            base.b + static_cast<float>(color_rng.normal(0.0, p.stain_jitter_lab)));
        const int x0 = std::max(0, static_cast<int>(nu.x - nu.r_major - 1));
        const int x1 = std::min(width - 1, static_cast<int>(nu.x + nu.r_major + 1));
        const int y0 = std::max(0, static_cast<int>(nu.y - nu.r_major - 1));
        const int y1 = std::min(height - 1, static_cast<int>(nu.y + nu.r_major + 1));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const float a = pixel_coverage(nu, x, y);
                if (a <= 0.f) continue;
                composite(out.image, x, y, rgb, a);
                if (a >= 0.5f) covered[static_cast<std::size_t>(y) * width + x] = 1;
            }

        out.nuclei.push_back({nu.x, nu.y, cls[i], nu.r_major, nu.r_minor, nu.angle});
        out.truth.points.push_back({nu.x, nu.y, cls[i]});
    }
    out.truth.width = width;
    out.truth.height = height;
    out.truth.microns_per_pixel = p.microns_per_pixel;
    out.true_pi = compute_pi(n_pos, n - n_pos);
    out.nuclei_coverage =
        static_cast<double>(std::count(covered.begin(), covered.end(), std::uint8_t(1))) /
        static_cast<double>(covered.size());

    if (p.artifact_rate > 0.f) {
        Rng artifact_rng = Rng::substream(seed, "artifact");
        if (artifact_rng.uniform() < p.artifact_rate) apply_artifact(out.image, artifact_rng);
    }

    if (p.sensor_noise_sigma > 0.f) {
        Rng noise_rng = Rng::substream(seed, "noise");
        for (auto& v : out.image.data) {
            const double noisy = v + noise_rng.normal(0.0, p.sensor_noise_sigma);
            v = static_cast<std::uint8_t>(std::lround(std::clamp(noisy, 0.0, 255.0)));
        }
    }
    return out;
}

SynthImage gen_patch(const DomainParams& params, double target_pi, std::uint64_t seed, int size) {
    return generate(params, target_pi, seed, size, size);
}

SynthImage gen_tma(const DomainParams& params, double target_pi, std::uint64_t seed, int size) {
    return generate(params, target_pi, seed, size, size);
}

DomainParams shift_domain(const DomainParams& params, double severity, std::uint64_t seed) {
    if (severity < 0.0 || severity > 1.0) throw Error("shift_domain: severity must be in [0,1]");
    Rng rng(seed);
    DomainParams out = params;

    // Per-channel shift of magnitude (0.6..1.0) * scale * severity, random sign.
    auto shift = [&](float v, double scale) {
        const double sign = rng.below(2) ? 1.0 : -1.0;
        return static_cast<float>(v + sign * rng.uniform(0.6, 1.0) * scale * severity);
    };

    for (LabColor* stain : {&out.blue_stain, &out.brown_stain}) {
        stain->L = shift(stain->L, 8.0);
        stain->a = shift(stain->a, 8.0);
        stain->b = shift(stain->b, 8.0);
    }
    for (auto& c : out.background_rgb) {
        const float v = shift(static_cast<float>(c), 5.0);
        c = static_cast<std::uint8_t>(std::lround(std::clamp(v, 235.f, 255.f)));
    }
    out.tissue_matrix_lab.L = std::min(shift(out.tissue_matrix_lab.L, 2.0), 84.f);
    out.tissue_matrix_lab.a = shift(out.tissue_matrix_lab.a, 1.5);
    out.tissue_matrix_lab.b = shift(out.tissue_matrix_lab.b, 1.5);
    const float mc = lab_chroma(out.tissue_matrix_lab.a, out.tissue_matrix_lab.b);
    if (mc > 8.5f) {  // keep the wash out of the stain histogram
        out.tissue_matrix_lab.a *= 8.5f / mc;
        out.tissue_matrix_lab.b *= 8.5f / mc;
    }
    out.sensor_noise_sigma =
        params.sensor_noise_sigma + static_cast<float>(rng.uniform(0.6, 1.0) * 4.0 * severity);
    const double rsign = rng.below(2) ? 1.0 : -1.0;
    const float rscale =
        static_cast<float>(1.0 + rsign * rng.uniform(0.6, 1.0) * 0.2 * severity);
    out.nucleus_radius_um = params.nucleus_radius_um * rscale;
    out.nucleus_radius_sigma_um = params.nucleus_radius_sigma_um * rscale;
    return out;
}

DomainParams source_preset() { return DomainParams{}; }

DomainParams target_preset() { return shift_domain(source_preset(), 0.6, kTargetShiftSeed); }

}  // namespace ki67::synth
