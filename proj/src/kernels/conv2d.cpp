#include "ki67/kernels/conv2d.hpp"

#include <algorithm>
#include <cstring>

namespace ki67::kernels {

namespace {

template <typename T>
void check_k(const Conv2dLayer<T>& layer) {
    if (layer.k != 1 && layer.k != 3)
        throw ShapeMismatchError("conv2d: kernel size must be 1 or 3");
}

// One output row of a 3x3 conv for a pair of output channels.
template <typename T>
void fwd3_row(const T* in, int h, int w, const Conv2dLayer<T>& layer, T* out, int oc0, int noc,
              int y) {
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    T* r0 = out + oc0 * plane + static_cast<std::size_t>(y) * w;
    T* r1 = noc > 1 ? r0 + plane : nullptr;
    for (int x = 0; x < w; ++x) r0[x] = layer.b[oc0];
    if (r1)
        for (int x = 0; x < w; ++x) r1[x] = layer.b[oc0 + 1];

    for (int ic = 0; ic < layer.in_c; ++ic) {
        const T* ip = in + ic * plane;
        const T* w0 = layer.wat(oc0, ic);
        const T* w1 = r1 ? layer.wat(oc0 + 1, ic) : nullptr;
        for (int ky = 0; ky < 3; ++ky) {
            const int iy = y + ky - 1;
            if (iy < 0 || iy >= h) continue;
            const T* row = ip + static_cast<std::size_t>(iy) * w;
            const T a0 = w0[ky * 3 + 0], a1 = w0[ky * 3 + 1], a2 = w0[ky * 3 + 2];
            if (r1) {
                const T b0 = w1[ky * 3 + 0], b1 = w1[ky * 3 + 1], b2 = w1[ky * 3 + 2];
                for (int x = 1; x < w - 1; ++x) {
                    const T v0 = row[x - 1], v1 = row[x], v2 = row[x + 1];
                    r0[x] += a0 * v0 + a1 * v1 + a2 * v2;
                    r1[x] += b0 * v0 + b1 * v1 + b2 * v2;
                }
                r0[0] += a1 * row[0] + a2 * row[1];
                r1[0] += b1 * row[0] + b2 * row[1];
                r0[w - 1] += a0 * row[w - 2] + a1 * row[w - 1];
                r1[w - 1] += b0 * row[w - 2] + b1 * row[w - 1];
            } else {
                for (int x = 1; x < w - 1; ++x)
                    r0[x] += a0 * row[x - 1] + a1 * row[x] + a2 * row[x + 1];
                r0[0] += a1 * row[0] + a2 * row[1];
                r0[w - 1] += a0 * row[w - 2] + a1 * row[w - 1];
            }
        }
    }
}

template <typename T>
void fwd1_row(const T* in, int h, int w, const Conv2dLayer<T>& layer, T* out, int oc, int y) {
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    T* r = out + oc * plane + static_cast<std::size_t>(y) * w;
    for (int x = 0; x < w; ++x) r[x] = layer.b[oc];
    for (int ic = 0; ic < layer.in_c; ++ic) {
        const T wv = layer.wat(oc, ic)[0];
        const T* row = in + ic * plane + static_cast<std::size_t>(y) * w;
        for (int x = 0; x < w; ++x) r[x] += wv * row[x];
    }
}

}  // namespace

template <typename T>
void conv2d_forward(const T* in, int h, int w, const Conv2dLayer<T>& layer, T* out, Exec exec) {
    check_k(layer);
    if (w < 2 || h < 2) throw ShapeMismatchError("conv2d: image must be at least 2x2");
    if (layer.k == 1) {
        parallel_for(exec, layer.out_c * h, [&](int i) {
            fwd1_row(in, h, w, layer, out, i / h, i % h);
        });
        return;
    }
    const int pairs = (layer.out_c + 1) / 2;
    parallel_for(exec, pairs * h, [&](int i) {
        const int p = i / h, y = i % h;
        const int oc0 = p * 2;
        fwd3_row(in, h, w, layer, out, oc0, layer.out_c - oc0 >= 2 ? 2 : 1, y);
    });
}

template <typename T>
void conv2d_forward_serial(const T* in, int h, int w, const Conv2dLayer<T>& layer, T* out) {
    check_k(layer);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const int r = layer.k / 2;
    for (int oc = 0; oc < layer.out_c; ++oc)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                T acc = layer.b[oc];
                for (int ic = 0; ic < layer.in_c; ++ic) {
                    const T* wp = layer.wat(oc, ic);
                    for (int ky = 0; ky < layer.k; ++ky)
                        for (int kx = 0; kx < layer.k; ++kx) {
                            const int iy = y + ky - r, ix = x + kx - r;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            acc += wp[ky * layer.k + kx] * in[ic * plane + iy * static_cast<std::size_t>(w) + ix];
                        }
                }
                out[oc * plane + y * static_cast<std::size_t>(w) + x] = acc;
            }
}

template <typename T>
void conv2d_backward_input(const T* gout, int h, int w, const Conv2dLayer<T>& layer, T* gin,
                           Exec exec) {
    check_k(layer);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    if (layer.k == 1) {
        parallel_for(exec, layer.in_c * h, [&](int i) {
            const int ic = i / h, y = i % h;
            T* r = gin + ic * plane + static_cast<std::size_t>(y) * w;
            for (int x = 0; x < w; ++x) r[x] = T(0);
            for (int oc = 0; oc < layer.out_c; ++oc) {
                const T wv = layer.wat(oc, ic)[0];
                const T* row = gout + oc * plane + static_cast<std::size_t>(y) * w;
                for (int x = 0; x < w; ++x) r[x] += wv * row[x];
            }
        });
        return;
    }
    if (w < 2 || h < 2) throw ShapeMismatchError("conv2d: image must be at least 2x2");
    parallel_for(exec, layer.in_c * h, [&](int i) {
        const int ic = i / h, y = i % h;
        T* r = gin + ic * plane + static_cast<std::size_t>(y) * w;
        for (int x = 0; x < w; ++x) r[x] = T(0);
        // gin[ic][y][x] = sum_{oc,ky,kx} w[oc][ic][ky][kx] * gout[oc][y+1-ky][x+1-kx]
        for (int oc = 0; oc < layer.out_c; ++oc) {
            const T* wp = layer.wat(oc, ic);
            const T* gp = gout + oc * plane;
            for (int ky = 0; ky < 3; ++ky) {
                const int gy = y + 1 - ky;
                if (gy < 0 || gy >= h) continue;
                const T* grow = gp + static_cast<std::size_t>(gy) * w;
                const T a0 = wp[ky * 3 + 0], a1 = wp[ky * 3 + 1], a2 = wp[ky * 3 + 2];
                for (int x = 1; x < w - 1; ++x)
                    r[x] += a0 * grow[x + 1] + a1 * grow[x] + a2 * grow[x - 1];
                r[0] += a0 * grow[1] + a1 * grow[0];
                r[w - 1] += a1 * grow[w - 1] + a2 * grow[w - 2];
            }
        }
    });
}

template <typename T>
void conv2d_backward_input_serial(const T* gout, int h, int w, const Conv2dLayer<T>& layer,
                                  T* gin) {
    check_k(layer);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const int r = layer.k / 2;
    std::memset(gin, 0, sizeof(T) * layer.in_c * plane);
    for (int ic = 0; ic < layer.in_c; ++ic)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                T acc = T(0);
                for (int oc = 0; oc < layer.out_c; ++oc) {
                    const T* wp = layer.wat(oc, ic);
                    for (int ky = 0; ky < layer.k; ++ky)
                        for (int kx = 0; kx < layer.k; ++kx) {
                            const int gy = y + r - ky, gx = x + r - kx;
                            if (gy < 0 || gy >= h || gx < 0 || gx >= w) continue;
                            acc += wp[ky * layer.k + kx] * gout[oc * plane + gy * static_cast<std::size_t>(w) + gx];
                        }
                }
                gin[ic * plane + y * static_cast<std::size_t>(w) + x] = acc;
            }
}

template <typename T>
void conv2d_backward_params(const T* gout, const T* in, int h, int w, const Conv2dLayer<T>& layer,
                            T* gw, T* gb, Exec exec) {
    check_k(layer);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const int r = layer.k / 2;
    const int kk = layer.k * layer.k;
    // Each (oc,ic) pair owns its k*k taps. A tap is one long dot product; a
    // plain `acc += a*b` chain cannot be vectorized without reassociation, so the
    // sum is split over kLanes independent accumulators (lane l takes columns
    // x0 + l mod kLanes within each block). The order is fixed, hence results
    // are identical for either execution policy.
    constexpr int kLanes = 16;
    parallel_for(exec, layer.out_c * layer.in_c, [&](int i) {
        const int oc = i / layer.in_c, ic = i % layer.in_c;
        const T* gp = gout + oc * plane;
        const T* ip = in + ic * plane;
        T* taps = gw + static_cast<std::size_t>(i) * kk;
        for (int ky = 0; ky < layer.k; ++ky)
            for (int kx = 0; kx < layer.k; ++kx) {
                const int y0 = std::max(0, r - ky), y1 = std::min(h, h + r - ky);
                const int x0 = std::max(0, r - kx), x1 = std::min(w, w + r - kx);
                T lanes[kLanes] = {};
                T tail = T(0);
                for (int oy = y0; oy < y1; ++oy) {
                    const T* grow = gp + static_cast<std::size_t>(oy) * w;
                    const T* irow = ip + static_cast<std::size_t>(oy + ky - r) * w + (kx - r);
                    int ox = x0;
                    for (; ox + kLanes <= x1; ox += kLanes)
                        for (int l = 0; l < kLanes; ++l) lanes[l] += grow[ox + l] * irow[ox + l];
                    for (; ox < x1; ++ox) tail += grow[ox] * irow[ox];
                }
                T acc = T(0);
                for (int l = 0; l < kLanes; ++l) acc += lanes[l];
                taps[ky * layer.k + kx] += acc + tail;
            }
    });
    parallel_for(exec, layer.out_c, [&](int oc) {
        const T* gp = gout + oc * plane;
        T lanes[kLanes] = {};
        T tail = T(0);
        std::size_t j = 0;
        for (; j + kLanes <= plane; j += kLanes)
            for (int l = 0; l < kLanes; ++l) lanes[l] += gp[j + l];
        for (; j < plane; ++j) tail += gp[j];
        T acc = T(0);
        for (int l = 0; l < kLanes; ++l) acc += lanes[l];
        gb[oc] += acc + tail;
    });
}

template <typename T>
void conv2d_backward_params_serial(const T* gout, const T* in, int h, int w,
                                   const Conv2dLayer<T>& layer, T* gw, T* gb) {
    check_k(layer);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const int r = layer.k / 2;
    const int kk = layer.k * layer.k;
    for (int oc = 0; oc < layer.out_c; ++oc)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const T g = gout[oc * plane + y * static_cast<std::size_t>(w) + x];
                gb[oc] += g;
                for (int ic = 0; ic < layer.in_c; ++ic)
                    for (int ky = 0; ky < layer.k; ++ky)
                        for (int kx = 0; kx < layer.k; ++kx) {
                            const int iy = y + ky - r, ix = x + kx - r;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            gw[(static_cast<std::size_t>(oc) * layer.in_c + ic) * kk + ky * layer.k + kx] +=
                                g * in[ic * plane + iy * static_cast<std::size_t>(w) + ix];
                        }
            }
}

#define KI67_INSTANTIATE(T)                                                                        \
    template void conv2d_forward<T>(const T*, int, int, const Conv2dLayer<T>&, T*, Exec);          \
    template void conv2d_forward_serial<T>(const T*, int, int, const Conv2dLayer<T>&, T*);         \
    template void conv2d_backward_input<T>(const T*, int, int, const Conv2dLayer<T>&, T*, Exec);   \
    template void conv2d_backward_input_serial<T>(const T*, int, int, const Conv2dLayer<T>&, T*);  \
    template void conv2d_backward_params<T>(const T*, const T*, int, int, const Conv2dLayer<T>&,   \
                                            T*, T*, Exec);                                         \
    template void conv2d_backward_params_serial<T>(const T*, const T*, int, int,                   \
                                                   const Conv2dLayer<T>&, T*, T*);

KI67_INSTANTIATE(float)
KI67_INSTANTIATE(double)
#undef KI67_INSTANTIATE

}  // namespace ki67::kernels
