#include "ki67/kernels/distance_transform.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "ki67/core/types.hpp"

namespace ki67::kernels {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1D squared distance transform (lower envelope of parabolas). f holds squared
// sources (kInf where no source); d receives min over q of (x-q)^2 + f[q].
void edt_1d(const double* f, int n, double* d, int* v, double* z) {
    int k = 0;
    v[0] = -1;  // sentinel: no parabola yet
    for (int q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        if (v[0] == -1) {
            v[0] = q;
            z[0] = -kInf;
            z[1] = kInf;
            continue;
        }
        double s;
        for (;;) {
            const int p = v[k];
            s = ((f[q] + static_cast<double>(q) * q) - (f[p] + static_cast<double>(p) * p)) /
                (2.0 * (q - p));
            if (s <= z[k]) {
                --k;
                if (k < 0) {  // q replaces everything so far
                    k = 0;
                    v[0] = q;
                    z[0] = -kInf;
                    z[1] = kInf;
                    s = kInf;
                    break;
                }
            } else {
                ++k;
                v[k] = q;
                z[k] = s;
                z[k + 1] = kInf;
                break;
            }
        }
    }
    if (v[0] == -1) {
        for (int x = 0; x < n; ++x) d[x] = kInf;
        return;
    }
    int j = 0;
    for (int x = 0; x < n; ++x) {
        while (z[j + 1] < x) ++j;
        const int q = v[j];
        d[x] = static_cast<double>(x - q) * (x - q) + f[q];
    }
}

std::vector<float> edt_impl(const std::vector<std::uint8_t>& mask, int width, int height,
                            Exec exec) {
    if (static_cast<std::size_t>(width) * height != mask.size())
        throw Error("distance_transform: mask size mismatch");
    // Vertical pass: per-column distance (not squared) to the nearest zero
    // pixel in that column; kInf when the column has none.
    std::vector<double> g(mask.size());
    parallel_for(exec, width, [&](int x) {
        double d = kInf;
        for (int y = 0; y < height; ++y) {
            d = mask[static_cast<std::size_t>(y) * width + x] ? d + 1.0 : 0.0;
            g[static_cast<std::size_t>(y) * width + x] = d;
        }
        d = kInf;
        for (int y = height - 1; y >= 0; --y) {
            const std::size_t i = static_cast<std::size_t>(y) * width + x;
            d = mask[i] ? d + 1.0 : 0.0;
            if (d < g[i]) g[i] = d;
        }
    });

    std::vector<float> out(mask.size());
    const float far = static_cast<float>(std::hypot(width, height)) + 1.f;
    parallel_for(exec, height, [&](int y) {
        std::vector<double> f(width), d(width), z(width + 1);
        std::vector<int> v(width);
        for (int x = 0; x < width; ++x) {
            const double gy = g[static_cast<std::size_t>(y) * width + x];
            f[x] = gy == kInf ? kInf : gy * gy;
        }
        edt_1d(f.data(), width, d.data(), v.data(), z.data());
        for (int x = 0; x < width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * width + x;
            out[i] = d[x] == kInf ? far : static_cast<float>(std::sqrt(d[x]));
        }
    });
    return out;
}

}  // namespace

std::vector<float> distance_transform(const std::vector<std::uint8_t>& mask, int width, int height,
                                      Exec exec) {
    return edt_impl(mask, width, height, exec);
}

std::vector<float> distance_transform_serial(const std::vector<std::uint8_t>& mask, int width,
                                             int height) {
    return edt_impl(mask, width, height, Exec::Serial);
}

int connected_components(const std::vector<std::uint8_t>& mask, int width, int height,
                         std::vector<std::int32_t>& labels) {
    if (static_cast<std::size_t>(width) * height != mask.size())
        throw Error("connected_components: mask size mismatch");
    labels.assign(mask.size(), 0);
    std::vector<std::size_t> stack;
    int next = 0;
    for (std::size_t start = 0; start < mask.size(); ++start) {
        if (!mask[start] || labels[start]) continue;
        ++next;
        labels[start] = next;
        stack.push_back(start);
        while (!stack.empty()) {
            const std::size_t i = stack.back();
            stack.pop_back();
            const int x = static_cast<int>(i % width), y = static_cast<int>(i / width);
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (!dx && !dy) continue;
                    const int nx = x + dx, ny = y + dy;
                    if (nx < 0 || nx >= width || ny < 0 || ny >= height) continue;
                    const std::size_t j = static_cast<std::size_t>(ny) * width + nx;
                    if (mask[j] && !labels[j]) {
                        labels[j] = next;
                        stack.push_back(j);
                    }
                }
        }
    }
    return next;
}

}  // namespace ki67::kernels
