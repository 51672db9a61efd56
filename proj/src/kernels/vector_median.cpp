#include "ki67/kernels/vector_median.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace ki67::kernels {

namespace {

RgbImage vmf_impl(const RgbImage& img, int window, Exec exec) {
    if (window < 3 || window % 2 == 0)
        throw Error("vector_median_filter: window must be odd and >= 3");
    const int r = window / 2;
    const int w = img.width, h = img.height;
    RgbImage out(w, h);

    parallel_for(exec, h, [&](int y) {
        const int n = window * window;
        std::vector<float> px(static_cast<std::size_t>(n) * 3);
        for (int x = 0; x < w; ++x) {
            // Gather the window with edge replication, row-major scan order.
            int m = 0;
            for (int dy = -r; dy <= r; ++dy) {
                const int sy = std::clamp(y + dy, 0, h - 1);
                for (int dx = -r; dx <= r; ++dx) {
                    const int sx = std::clamp(x + dx, 0, w - 1);
                    px[m * 3 + 0] = img.at(sx, sy, 0);
                    px[m * 3 + 1] = img.at(sx, sy, 1);
                    px[m * 3 + 2] = img.at(sx, sy, 2);
                    ++m;
                }
            }
            // Member with minimal total distance to the rest; first wins ties.
            int best = 0;
            float best_sum = 0.f;
            for (int i = 0; i < n; ++i) {
                float sum = 0.f;
                for (int j = 0; j < n; ++j) {
                    const float d0 = px[i * 3 + 0] - px[j * 3 + 0];
                    const float d1 = px[i * 3 + 1] - px[j * 3 + 1];
                    const float d2 = px[i * 3 + 2] - px[j * 3 + 2];
                    sum += std::sqrt(d0 * d0 + d1 * d1 + d2 * d2);
                }
                if (i == 0 || sum < best_sum) {
                    best = i;
                    best_sum = sum;
                }
            }
            out.at(x, y, 0) = static_cast<std::uint8_t>(px[best * 3 + 0]);
            out.at(x, y, 1) = static_cast<std::uint8_t>(px[best * 3 + 1]);
            out.at(x, y, 2) = static_cast<std::uint8_t>(px[best * 3 + 2]);
        }
    });
    return out;
}

}  // namespace

RgbImage vector_median_filter(const RgbImage& img, int window, Exec exec) {
    return vmf_impl(img, window, exec);
}

RgbImage vector_median_filter_serial(const RgbImage& img, int window) {
    return vmf_impl(img, window, Exec::Serial);
}

}  // namespace ki67::kernels
