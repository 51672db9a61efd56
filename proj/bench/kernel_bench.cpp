// Timing harness for the optimized kernels against their naive serial
// references. Run manually: bench/kernel_bench [iterations]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "ki67/core/color.hpp"
#include "ki67/core/rng.hpp"
#include "ki67/core/types.hpp"
#include "ki67/kernels/conv2d.hpp"
#include "ki67/kernels/distance_transform.hpp"
#include "ki67/kernels/vector_median.hpp"

using namespace ki67;
using kernels::Exec;

namespace {

double now_s() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

template <typename F>
double time_best(int iters, F&& fn) {
    double best = 1e300;
    for (int i = 0; i < iters; ++i) {
        const double t0 = now_s();
        fn();
        best = std::min(best, now_s() - t0);
    }
    return best;
}

volatile float g_sink;

void report(const char* name, double serial_s, double optimized_s, double work,
            const char* unit) {
    std::printf("%-28s serial %8.2f ms   optimized %8.2f ms   speedup %5.2fx   %7.2f %s\n", name,
                serial_s * 1e3, optimized_s * 1e3, serial_s / optimized_s, work / optimized_s,
                unit);
}

}  // namespace

int main(int argc, char** argv) {
    const int iters = argc > 1 ? std::atoi(argv[1]) : 5;
    Rng rng(42);

    {
        const int h = 256, w = 256, ic = 8, oc = 16;
        kernels::Conv2dLayer<float> layer(ic, oc, 3);
        for (auto& v : layer.w) v = static_cast<float>(rng.normal()) * 0.1f;
        std::vector<float> in(static_cast<std::size_t>(ic) * h * w);
        for (auto& v : in) v = static_cast<float>(rng.uniform());
        std::vector<float> out(static_cast<std::size_t>(oc) * h * w);
        const double flops = 2.0 * oc * ic * 9.0 * h * w;

        const double ts = time_best(iters, [&] {
            kernels::conv2d_forward_serial(in.data(), h, w, layer, out.data());
            g_sink = out[0];
        });
        const double to = time_best(iters, [&] {
            kernels::conv2d_forward(in.data(), h, w, layer, out.data(), Exec::Parallel);
            g_sink = out[0];
        });
        report("conv2d 3x3 8->16 256x256", ts, to, flops / 1e9, "GFLOP/s");

        std::vector<float> gin(in.size());
        const double tbs = time_best(iters, [&] {
            kernels::conv2d_backward_input_serial(out.data(), h, w, layer, gin.data());
            g_sink = gin[0];
        });
        const double tbo = time_best(iters, [&] {
            kernels::conv2d_backward_input(out.data(), h, w, layer, gin.data(), Exec::Parallel);
            g_sink = gin[0];
        });
        report("conv2d backward input", tbs, tbo, flops / 1e9, "GFLOP/s");

        std::vector<float> gw(layer.w.size()), gb(layer.b.size());
        const double tps = time_best(iters, [&] {
            std::fill(gw.begin(), gw.end(), 0.f);
            std::fill(gb.begin(), gb.end(), 0.f);
            kernels::conv2d_backward_params_serial(out.data(), in.data(), h, w, layer, gw.data(),
                                                   gb.data());
            g_sink = gw[0];
        });
        const double tpo = time_best(iters, [&] {
            std::fill(gw.begin(), gw.end(), 0.f);
            std::fill(gb.begin(), gb.end(), 0.f);
            kernels::conv2d_backward_params(out.data(), in.data(), h, w, layer, gw.data(),
                                            gb.data(), Exec::Parallel);
            g_sink = gw[0];
        });
        report("conv2d backward params", tps, tpo, flops / 1e9, "GFLOP/s");
    }

    {
        const int n = 512;
        RgbImage img(n, n);
        for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.below(256));
        const double mpx = n * static_cast<double>(n) / 1e6;

        const double ts = time_best(iters, [&] {
            auto o = kernels::vector_median_filter_serial(img, 3);
            g_sink = o.data[0];
        });
        const double to = time_best(iters, [&] {
            auto o = kernels::vector_median_filter(img, 3, Exec::Parallel);
            g_sink = o.data[0];
        });
        report("vector median 3x3 512x512", ts, to, mpx, "Mpx/s");
    }

    {
        const int n = 1024;
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(n) * n);
        for (auto& v : mask) v = rng.uniform() < 0.6 ? 1 : 0;
        const double mpx = n * static_cast<double>(n) / 1e6;

        const double ts = time_best(iters, [&] {
            auto d = kernels::distance_transform_serial(mask, n, n);
            g_sink = d[0];
        });
        const double to = time_best(iters, [&] {
            auto d = kernels::distance_transform(mask, n, n, Exec::Parallel);
            g_sink = d[0];
        });
        report("distance transform 1024^2", ts, to, mpx, "Mpx/s");
    }

    {
        const int n = 1024;
        RgbImage img(n, n);
        for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.below(256));
        const double mpx = n * static_cast<double>(n) / 1e6;

        const double ts = time_best(iters, [&] {
            auto lab = rgb_to_lab(img, Exec::Serial);
            g_sink = lab.L[0];
        });
        const double to = time_best(iters, [&] {
            auto lab = rgb_to_lab(img, Exec::Parallel);
            g_sink = lab.L[0];
        });
        report("rgb->lab 1024^2", ts, to, mpx, "Mpx/s");
    }

    return 0;
}
