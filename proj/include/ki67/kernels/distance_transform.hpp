#pragma once

#include <cstdint>
#include <vector>

#include "ki67/kernels/parallel.hpp"

namespace ki67::kernels {

// Exact Euclidean distance transform (Felzenszwalb-Huttenlocher) of a binary
// mask: for every nonzero pixel, the distance to the nearest zero pixel of the
// same image. Pixels beyond the image border are treated as foreground, so a
// blob touching the edge keeps the distance profile of its visible part
// instead of being cut off by a phantom border.
// Returns distances in pixels (0 on background). Column and row passes are
// parallel over independent 1D problems; results are policy-invariant.
std::vector<float> distance_transform(const std::vector<std::uint8_t>& mask, int width, int height,
                                      Exec exec = Exec::Parallel);

std::vector<float> distance_transform_serial(const std::vector<std::uint8_t>& mask, int width,
                                             int height);

// 8-connected components of a binary mask. Labels start at 1, assigned in
// row-major discovery order; 0 is background. Returns the number of components.
int connected_components(const std::vector<std::uint8_t>& mask, int width, int height,
                         std::vector<std::int32_t>& labels);

}  // namespace ki67::kernels
