#pragma once

#include "ki67/core/types.hpp"
#include "ki67/labels/heatmap.hpp"
#include "ki67/regimes/model.hpp"

namespace ki67::regimes {

// Normalizes an RGB patch to a 3 x H x W float tensor in [0,1].
Tensor<float> image_to_tensor(const RgbImage& img);

// Full-image heat map. Large images run tiled (tile x tile cores with an
// overlap halo wider than the receptive field), which is exactly equivalent
// to one whole-image forward pass.
labels::Heatmap predict_heatmap(const MiniDetector<float>& m, const RgbImage& img, int tile = 512,
                                kernels::Exec exec = kernels::Exec::Parallel);

// predict_heatmap + peak decoding.
CentroidSet detect(const MiniDetector<float>& m, const RgbImage& img,
                   const labels::DecodeConfig& decode = {}, float microns_per_pixel = 0.5f,
                   int tile = 512, kernels::Exec exec = kernels::Exec::Parallel);

}  // namespace ki67::regimes
