#pragma once

#include "ki67/core/types.hpp"
#include "ki67/kernels/parallel.hpp"

namespace ki67::kernels {

// Vector median filter over RGB: each output pixel is the window member with
// the smallest summed Euclidean distance (in RGB space) to every other member,
// so output colours always come from the input palette. Edges replicate.
// Ties go to the earliest pixel in window scan order (row-major), which makes
// the result independent of the execution policy. window must be odd and >= 3.
RgbImage vector_median_filter(const RgbImage& img, int window, Exec exec = Exec::Parallel);

RgbImage vector_median_filter_serial(const RgbImage& img, int window);

}  // namespace ki67::kernels
