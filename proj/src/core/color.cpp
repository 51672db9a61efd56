#include "ki67/core/color.hpp"

#include <algorithm>
#include <cmath>

namespace ki67 {

namespace {

// D65 reference white and the sRGB <-> XYZ matrices.
constexpr double kXn = 0.95047, kYn = 1.0, kZn = 1.08883;
constexpr double kM[3][3] = {
    {0.4124564, 0.3575761, 0.1804375},
    {0.2126729, 0.7151522, 0.0721750},
    {0.0193339, 0.1191920, 0.9503041},
};
constexpr double kMinv[3][3] = {
    {3.2404542, -1.5371385, -0.4985314},
    {-0.9692660, 1.8760108, 0.0415560},
    {0.0556434, -0.2040259, 1.0572252},
};
constexpr double kEps = 216.0 / 24389.0;
constexpr double kKappa = 24389.0 / 27.0;

double srgb_decode(double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); }

double srgb_encode(double c) {
    return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}

double lab_f(double t) { return t > kEps ? std::cbrt(t) : (kKappa * t + 16.0) / 116.0; }

double lab_f_inv(double ft) {
    const double t3 = ft * ft * ft;
    return t3 > kEps ? t3 : (116.0 * ft - 16.0) / kKappa;
}

}  // namespace

std::array<float, 3> srgb_to_lab(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
    const double r = srgb_decode(r8 / 255.0);
    const double g = srgb_decode(g8 / 255.0);
    const double b = srgb_decode(b8 / 255.0);
    const double X = kM[0][0] * r + kM[0][1] * g + kM[0][2] * b;
    const double Y = kM[1][0] * r + kM[1][1] * g + kM[1][2] * b;
    const double Z = kM[2][0] * r + kM[2][1] * g + kM[2][2] * b;
    const double fx = lab_f(X / kXn), fy = lab_f(Y / kYn), fz = lab_f(Z / kZn);
    return {static_cast<float>(116.0 * fy - 16.0), static_cast<float>(500.0 * (fx - fy)),
            static_cast<float>(200.0 * (fy - fz))};
}

std::array<std::uint8_t, 3> lab_to_srgb(float L, float a, float b) {
    const double fy = (L + 16.0) / 116.0;
    const double fx = fy + a / 500.0;
    const double fz = fy - b / 200.0;
    const double X = kXn * lab_f_inv(fx);
    const double Y = kYn * lab_f_inv(fy);
    const double Z = kZn * lab_f_inv(fz);
    std::array<std::uint8_t, 3> out{};
    for (int c = 0; c < 3; ++c) {
        const double lin = kMinv[c][0] * X + kMinv[c][1] * Y + kMinv[c][2] * Z;
        const double v = srgb_encode(std::clamp(lin, 0.0, 1.0));
        out[c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
    return out;
}

LabImage rgb_to_lab(const RgbImage& img, kernels::Exec exec) {
    LabImage lab(img.width, img.height);
    kernels::parallel_for(exec, img.height, [&](int y) {
        for (int x = 0; x < img.width; ++x) {
            const auto v = srgb_to_lab(img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2));
            const auto i = lab.idx(x, y);
            lab.L[i] = v[0];
            lab.a[i] = v[1];
            lab.b[i] = v[2];
        }
    });
    return lab;
}

}  // namespace ki67
