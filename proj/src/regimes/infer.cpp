#include "ki67/regimes/infer.hpp"

#include <algorithm>

namespace ki67::regimes {

Tensor<float> image_to_tensor(const RgbImage& img) {
    Tensor<float> t(3, img.height, img.width);
    for (int c = 0; c < 3; ++c) {
        float* p = t.plane(c);
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                p[static_cast<std::size_t>(y) * img.width + x] = img.at(x, y, c) / 255.f;
    }
    return t;
}

labels::Heatmap predict_heatmap(const MiniDetector<float>& m, const RgbImage& img, int tile,
                                kernels::Exec exec) {
    // Influence radius of an input pixel on the output is 3 (three 3x3
    // convolutions); a halo of 8 keeps every tile core bit-identical to a
    // whole-image pass.
    constexpr int kHalo = 8;
    labels::Heatmap hm(img.width, img.height);
    if (tile < 2 * kHalo + 1) throw Error("predict_heatmap: tile too small");

    ForwardCache<float> cache;
    if (img.width <= tile && img.height <= tile) {
        forward(m, image_to_tensor(img), cache, exec);
        std::copy(cache.y.plane(0), cache.y.plane(0) + hm.pixel_count(), hm.neg.begin());
        std::copy(cache.y.plane(1), cache.y.plane(1) + hm.pixel_count(), hm.pos.begin());
        return hm;
    }

    for (int ty = 0; ty < img.height; ty += tile)
        for (int tx = 0; tx < img.width; tx += tile) {
            const int cx1 = std::min(img.width, tx + tile);
            const int cy1 = std::min(img.height, ty + tile);
            const int ex0 = std::max(0, tx - kHalo), ey0 = std::max(0, ty - kHalo);
            const int ex1 = std::min(img.width, cx1 + kHalo);
            const int ey1 = std::min(img.height, cy1 + kHalo);
            const int ew = ex1 - ex0, eh = ey1 - ey0;

            RgbImage sub(ew, eh);
            for (int y = 0; y < eh; ++y)
                for (int x = 0; x < ew; ++x)
                    for (int c = 0; c < 3; ++c) sub.at(x, y, c) = img.at(ex0 + x, ey0 + y, c);
            forward(m, image_to_tensor(sub), cache, exec);

            for (int y = ty; y < cy1; ++y) {
                const std::size_t src = static_cast<std::size_t>(y - ey0) * ew + (tx - ex0);
                const std::size_t dst = static_cast<std::size_t>(y) * img.width + tx;
                std::copy(cache.y.plane(0) + src, cache.y.plane(0) + src + (cx1 - tx),
                          hm.neg.begin() + dst);
                std::copy(cache.y.plane(1) + src, cache.y.plane(1) + src + (cx1 - tx),
                          hm.pos.begin() + dst);
            }
        }
    return hm;
}

CentroidSet detect(const MiniDetector<float>& m, const RgbImage& img,
                   const labels::DecodeConfig& decode, float microns_per_pixel, int tile,
                   kernels::Exec exec) {
    return labels::heatmap_to_centroids(predict_heatmap(m, img, tile, exec), decode,
                                        microns_per_pixel);
}

}  // namespace ki67::regimes
