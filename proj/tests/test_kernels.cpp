#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "ki67/core/rng.hpp"
#include "ki67/core/types.hpp"
#include "ki67/kernels/conv2d.hpp"
#include "ki67/kernels/distance_transform.hpp"
#include "ki67/kernels/vector_median.hpp"

using namespace ki67;
using kernels::Conv2dLayer;
using kernels::Exec;

namespace {

// Straightforward zero-padded correlation with double accumulation; the
// production kernel must agree up to float summation order.
template <typename T>
std::vector<T> conv_forward_ref(const std::vector<T>& in, int h, int w,
                                const Conv2dLayer<T>& L) {
    const int r = L.k / 2;
    std::vector<T> out(static_cast<std::size_t>(L.out_c) * h * w, T(0));
    for (int oc = 0; oc < L.out_c; ++oc)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = L.b[oc];
                for (int c = 0; c < L.in_c; ++c)
                    for (int ky = 0; ky < L.k; ++ky)
                        for (int kx = 0; kx < L.k; ++kx) {
                            const int sy = y + ky - r, sx = x + kx - r;
                            if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                            acc += static_cast<double>(L.wat(oc, c)[ky * L.k + kx]) *
                                   in[(static_cast<std::size_t>(c) * h + sy) * w + sx];
                        }
                out[(static_cast<std::size_t>(oc) * h + y) * w + x] = static_cast<T>(acc);
            }
    return out;
}

template <typename T>
std::vector<T> conv_backward_input_ref(const std::vector<T>& gout, int h, int w,
                                       const Conv2dLayer<T>& L) {
    const int r = L.k / 2;
    std::vector<double> gin(static_cast<std::size_t>(L.in_c) * h * w, 0.0);
    for (int oc = 0; oc < L.out_c; ++oc)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double g = gout[(static_cast<std::size_t>(oc) * h + y) * w + x];
                for (int c = 0; c < L.in_c; ++c)
                    for (int ky = 0; ky < L.k; ++ky)
                        for (int kx = 0; kx < L.k; ++kx) {
                            const int sy = y + ky - r, sx = x + kx - r;
                            if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                            gin[(static_cast<std::size_t>(c) * h + sy) * w + sx] +=
                                static_cast<double>(L.wat(oc, c)[ky * L.k + kx]) * g;
                        }
            }
    std::vector<T> out(gin.size());
    for (std::size_t i = 0; i < gin.size(); ++i) out[i] = static_cast<T>(gin[i]);
    return out;
}

template <typename T>
void conv_backward_params_ref(const std::vector<T>& gout, const std::vector<T>& in, int h, int w,
                              const Conv2dLayer<T>& L, std::vector<T>& gw, std::vector<T>& gb) {
    const int r = L.k / 2;
    gw.assign(L.w.size(), T(0));
    gb.assign(L.b.size(), T(0));
    for (int oc = 0; oc < L.out_c; ++oc) {
        double bacc = 0.0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                bacc += gout[(static_cast<std::size_t>(oc) * h + y) * w + x];
        gb[oc] = static_cast<T>(bacc);
        for (int c = 0; c < L.in_c; ++c)
            for (int ky = 0; ky < L.k; ++ky)
                for (int kx = 0; kx < L.k; ++kx) {
                    double acc = 0.0;
                    for (int y = 0; y < h; ++y)
                        for (int x = 0; x < w; ++x) {
                            const int sy = y + ky - r, sx = x + kx - r;
                            if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                            acc += static_cast<double>(
                                       gout[(static_cast<std::size_t>(oc) * h + y) * w + x]) *
                                   in[(static_cast<std::size_t>(c) * h + sy) * w + sx];
                        }
                    gw[(static_cast<std::size_t>(oc) * L.in_c + c) * L.k * L.k + ky * L.k + kx] =
                        static_cast<T>(acc);
                }
    }
}

Conv2dLayer<float> random_layer(int ic, int oc, int k, Rng& rng) {
    Conv2dLayer<float> L(ic, oc, k);
    for (auto& v : L.w) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (auto& v : L.b) v = static_cast<float>(rng.uniform(-0.5, 0.5));
    return L;
}

std::vector<float> random_planes(int c, int h, int w, Rng& rng) {
    std::vector<float> v(static_cast<std::size_t>(c) * h * w);
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    return v;
}

void check_close(const std::vector<float>& a, const std::vector<float>& b, double tol) {
    REQUIRE(a.size() == b.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, static_cast<double>(std::fabs(a[i] - b[i])));
    CHECK(worst < tol);
}

// Brute-force exact EDT; pixels beyond the border count as foreground, so
// only in-image zeros terminate a distance.
std::vector<float> edt_ref(const std::vector<std::uint8_t>& mask, int w, int h) {
    std::vector<float> d(mask.size(), 0.f);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!mask[static_cast<std::size_t>(y) * w + x]) continue;
            double best = std::numeric_limits<double>::max();
            for (int sy = 0; sy < h; ++sy)
                for (int sx = 0; sx < w; ++sx) {
                    if (mask[static_cast<std::size_t>(sy) * w + sx]) continue;
                    const double dx = x - sx, dy = y - sy;
                    best = std::min(best, dx * dx + dy * dy);
                }
            d[static_cast<std::size_t>(y) * w + x] =
                best == std::numeric_limits<double>::max()
                    ? std::numeric_limits<float>::infinity()
                    : static_cast<float>(std::sqrt(best));
        }
    return d;
}

}  // namespace

TEST_CASE("conv2d forward matches reference and policies agree") {
    Rng rng(101);
    for (int trial = 0; trial < 6; ++trial) {
        const int ic = 1 + static_cast<int>(rng.below(4));
        const int oc = 1 + static_cast<int>(rng.below(6));
        const int k = rng.below(2) ? 3 : 1;
        const int h = 5 + static_cast<int>(rng.below(12));
        const int w = 5 + static_cast<int>(rng.below(12));
        const auto L = random_layer(ic, oc, k, rng);
        const auto in = random_planes(ic, h, w, rng);

        std::vector<float> out_p(static_cast<std::size_t>(oc) * h * w);
        std::vector<float> out_1(out_p.size());
        std::vector<float> out_s(out_p.size());
        kernels::conv2d_forward(in.data(), h, w, L, out_p.data(), Exec::Parallel);
        kernels::conv2d_forward(in.data(), h, w, L, out_1.data(), Exec::Serial);
        kernels::conv2d_forward_serial(in.data(), h, w, L, out_s.data());
        CHECK(out_p == out_1);  // bit-identical across execution policies
        const auto ref = conv_forward_ref(in, h, w, L);
        check_close(out_p, ref, 1e-4);  // reference impl sums in a different order
        check_close(out_s, ref, 1e-4);
    }
}

TEST_CASE("conv2d zero padding: border output only sees in-image pixels") {
    Conv2dLayer<float> L(1, 1, 3);
    for (auto& v : L.w) v = 1.f;
    L.b[0] = 0.f;
    const int h = 4, w = 4;
    std::vector<float> in(16, 1.f);
    std::vector<float> out(16);
    kernels::conv2d_forward(in.data(), h, w, L, out.data());
    CHECK(out[0] == doctest::Approx(4.f));   // corner: 2x2 window
    CHECK(out[1] == doctest::Approx(6.f));   // edge: 2x3 window
    CHECK(out[5] == doctest::Approx(9.f));   // interior: full 3x3
}

TEST_CASE("conv2d backward input matches reference") {
    Rng rng(202);
    for (int trial = 0; trial < 4; ++trial) {
        const int ic = 1 + static_cast<int>(rng.below(3));
        const int oc = 1 + static_cast<int>(rng.below(4));
        const int k = trial % 2 ? 1 : 3;
        const int h = 6 + static_cast<int>(rng.below(8));
        const int w = 6 + static_cast<int>(rng.below(8));
        const auto L = random_layer(ic, oc, k, rng);
        const auto gout = random_planes(oc, h, w, rng);

        std::vector<float> gin_p(static_cast<std::size_t>(ic) * h * w);
        std::vector<float> gin_1(gin_p.size());
        std::vector<float> gin_s(gin_p.size());
        kernels::conv2d_backward_input(gout.data(), h, w, L, gin_p.data(), Exec::Parallel);
        kernels::conv2d_backward_input(gout.data(), h, w, L, gin_1.data(), Exec::Serial);
        kernels::conv2d_backward_input_serial(gout.data(), h, w, L, gin_s.data());
        CHECK(gin_p == gin_1);
        const auto ref = conv_backward_input_ref(gout, h, w, L);
        check_close(gin_p, ref, 1e-4);
        check_close(gin_s, ref, 1e-4);
    }
}

TEST_CASE("conv2d backward params matches reference and accumulates") {
    Rng rng(303);
    const auto L = random_layer(3, 4, 3, rng);
    const int h = 11, w = 9;
    const auto in = random_planes(3, h, w, rng);
    const auto gout = random_planes(4, h, w, rng);

    std::vector<float> gw(L.w.size(), 0.f), gb(L.b.size(), 0.f);
    std::vector<float> gw_1(L.w.size(), 0.f), gb_1(L.b.size(), 0.f);
    std::vector<float> gw_s(L.w.size(), 0.f), gb_s(L.b.size(), 0.f);
    kernels::conv2d_backward_params(gout.data(), in.data(), h, w, L, gw.data(), gb.data(),
                                    Exec::Parallel);
    kernels::conv2d_backward_params(gout.data(), in.data(), h, w, L, gw_1.data(), gb_1.data(),
                                    Exec::Serial);
    kernels::conv2d_backward_params_serial(gout.data(), in.data(), h, w, L, gw_s.data(),
                                           gb_s.data());
    CHECK(gw == gw_1);
    CHECK(gb == gb_1);

    std::vector<float> gw_ref, gb_ref;
    conv_backward_params_ref(gout, in, h, w, L, gw_ref, gb_ref);
    check_close(gw, gw_ref, 1e-3);
    check_close(gb, gb_ref, 1e-3);
    check_close(gw_s, gw_ref, 1e-3);
    check_close(gb_s, gb_ref, 1e-3);

    // Second call accumulates on top instead of overwriting.
    kernels::conv2d_backward_params(gout.data(), in.data(), h, w, L, gw.data(), gb.data());
    for (std::size_t i = 0; i < gw.size(); ++i)
        CHECK(gw[i] == doctest::Approx(2.f * gw_ref[i]).epsilon(1e-3).scale(1.0));
}

TEST_CASE("vector median filter matches brute-force definition") {
    Rng rng(404);
    RgbImage img(13, 9);
    // Few distinct colors so distance ties actually occur.
    const std::uint8_t palette[4][3] = {{10, 200, 30}, {10, 200, 31}, {240, 10, 10}, {0, 0, 0}};
    for (int i = 0; i < img.width * img.height; ++i) {
        const auto& p = palette[rng.below(4)];
        img.data[i * 3 + 0] = p[0];
        img.data[i * 3 + 1] = p[1];
        img.data[i * 3 + 2] = p[2];
    }
    const RgbImage out = kernels::vector_median_filter(img, 3);
    const RgbImage out_s = kernels::vector_median_filter_serial(img, 3);
    CHECK(out.data == out_s.data);

    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            // Window with edge replication, row-major order; minimal summed
            // Euclidean distance, first member winning ties.
            std::vector<std::array<float, 3>> wnd;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int sx = std::clamp(x + dx, 0, img.width - 1);
                    const int sy = std::clamp(y + dy, 0, img.height - 1);
                    wnd.push_back({static_cast<float>(img.at(sx, sy, 0)),
                                   static_cast<float>(img.at(sx, sy, 1)),
                                   static_cast<float>(img.at(sx, sy, 2))});
                }
            int best = 0;
            float best_sum = 0.f;
            for (std::size_t i = 0; i < wnd.size(); ++i) {
                float s = 0.f;
                for (const auto& q : wnd) {
                    const float d0 = wnd[i][0] - q[0], d1 = wnd[i][1] - q[1],
                                d2 = wnd[i][2] - q[2];
                    s += std::sqrt(d0 * d0 + d1 * d1 + d2 * d2);
                }
                if (i == 0 || s < best_sum) {
                    best = static_cast<int>(i);
                    best_sum = s;
                }
            }
            CHECK(out.at(x, y, 0) == static_cast<std::uint8_t>(wnd[best][0]));
            CHECK(out.at(x, y, 1) == static_cast<std::uint8_t>(wnd[best][1]));
            CHECK(out.at(x, y, 2) == static_cast<std::uint8_t>(wnd[best][2]));
        }
}

TEST_CASE("vector median output comes from the input palette") {
    Rng rng(405);
    RgbImage img(24, 18);
    for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.below(256));
    const RgbImage out = kernels::vector_median_filter(img, 5);
    std::vector<std::array<std::uint8_t, 3>> palette;
    for (int i = 0; i < img.width * img.height; ++i)
        palette.push_back({img.data[i * 3], img.data[i * 3 + 1], img.data[i * 3 + 2]});
    for (int i = 0; i < out.width * out.height; ++i) {
        const std::array<std::uint8_t, 3> px{out.data[i * 3], out.data[i * 3 + 1],
                                             out.data[i * 3 + 2]};
        CHECK(std::find(palette.begin(), palette.end(), px) != palette.end());
    }
    CHECK_THROWS_AS(kernels::vector_median_filter(img, 4), Error);
    CHECK_THROWS_AS(kernels::vector_median_filter(img, 1), Error);
}

TEST_CASE("distance transform matches brute force") {
    Rng rng(506);
    for (int trial = 0; trial < 5; ++trial) {
        const int w = 20 + static_cast<int>(rng.below(20));
        const int h = 15 + static_cast<int>(rng.below(15));
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(w) * h);
        for (auto& m : mask) m = rng.uniform() < 0.7 ? 1 : 0;
        mask[0] = 0;  // keep at least one background pixel

        const auto d = kernels::distance_transform(mask, w, h, Exec::Parallel);
        const auto d_s = kernels::distance_transform_serial(mask, w, h);
        CHECK(d == d_s);

        const auto ref = edt_ref(mask, w, h);
        double worst = 0.0;
        for (std::size_t i = 0; i < d.size(); ++i)
            worst = std::max(worst, static_cast<double>(std::fabs(d[i] - ref[i])));
        CHECK(worst < 1e-3);
    }
}

TEST_CASE("distance transform treats the border as foreground") {
    // One background pixel at the centre; the corner distance must be the
    // full diagonal, not the distance to a phantom border.
    const int w = 9, h = 9;
    std::vector<std::uint8_t> mask(81, 1);
    mask[4 * 9 + 4] = 0;
    const auto d = kernels::distance_transform(mask, w, h);
    CHECK(d[0] == doctest::Approx(std::sqrt(32.0)));
    CHECK(d[4 * 9 + 4] == 0.f);
    CHECK(d[4 * 9 + 3] == doctest::Approx(1.f));
}

TEST_CASE("connected components are 8-connected, labeled in discovery order") {
    // Two diagonal pixels belong to one component; an isolated pixel later in
    // row-major order gets the next label.
    const int w = 5, h = 4;
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(w) * h, 0);
    mask[0 * w + 0] = 1;
    mask[1 * w + 1] = 1;  // diagonal of (0,0)
    mask[0 * w + 3] = 1;  // separate
    mask[3 * w + 4] = 1;  // separate
    std::vector<std::int32_t> labels;
    const int n = kernels::connected_components(mask, w, h, labels);
    CHECK(n == 3);
    CHECK(labels[0] == 1);
    CHECK(labels[1 * w + 1] == 1);
    CHECK(labels[0 * w + 3] == 2);
    CHECK(labels[3 * w + 4] == 3);
    CHECK(labels[2] == 0);
}
