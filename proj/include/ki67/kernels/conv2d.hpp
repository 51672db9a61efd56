#pragma once

#include <cstddef>
#include <vector>

#include "ki67/core/types.hpp"
#include "ki67/kernels/parallel.hpp"

namespace ki67::kernels {

struct ShapeMismatchError : Error {
    explicit ShapeMismatchError(const std::string& what) : Error(what) {}
};

// 2D convolution with zero padding, stride 1, kernel size 1 or 3, so spatial
// size is preserved. Tensors are planar CHW; weights are [oc][ic][ky][kx].
//
// The optimized paths process output rows with a pair of row accumulators per
// channel block, which GCC vectorizes well. Each output element is owned by
// one thread and accumulated in a fixed instruction sequence, so results are
// bit-identical across Exec policies and thread counts. The *_serial overloads
// are the naive reference loops kept for the tests and the benchmark; they
// agree with the optimized path up to floating-point summation order.

template <typename T>
struct Conv2dLayer {
    int in_c = 0;
    int out_c = 0;
    int k = 3;  // 1 or 3
    std::vector<T> w;  // out_c*in_c*k*k
    std::vector<T> b;  // out_c

    Conv2dLayer() = default;
    Conv2dLayer(int ic, int oc, int ksize)
        : in_c(ic),
          out_c(oc),
          k(ksize),
          w(static_cast<std::size_t>(oc) * ic * ksize * ksize, T(0)),
          b(static_cast<std::size_t>(oc), T(0)) {}

    std::size_t param_count() const { return w.size() + b.size(); }
    const T* wat(int oc, int ic) const {
        return w.data() + (static_cast<std::size_t>(oc) * in_c + ic) * k * k;
    }
    T* wat(int oc, int ic) { return w.data() + (static_cast<std::size_t>(oc) * in_c + ic) * k * k; }
};

template <typename T>
void conv2d_forward(const T* in, int h, int w, const Conv2dLayer<T>& layer, T* out,
                    Exec exec = Exec::Parallel);

template <typename T>
void conv2d_forward_serial(const T* in, int h, int w, const Conv2dLayer<T>& layer, T* out);

// grad wrt input: gin gets d(loss)/d(in) given gout = d(loss)/d(out).
template <typename T>
void conv2d_backward_input(const T* gout, int h, int w, const Conv2dLayer<T>& layer, T* gin,
                           Exec exec = Exec::Parallel);

template <typename T>
void conv2d_backward_input_serial(const T* gout, int h, int w, const Conv2dLayer<T>& layer, T* gin);

// grad wrt weights and biases, ACCUMULATED into gw/gb (callers zero them when
// starting a batch). Each (oc,ic) weight tap is summed in serial row-major
// order regardless of policy or thread count.
template <typename T>
void conv2d_backward_params(const T* gout, const T* in, int h, int w, const Conv2dLayer<T>& layer,
                            T* gw, T* gb, Exec exec = Exec::Parallel);

template <typename T>
void conv2d_backward_params_serial(const T* gout, const T* in, int h, int w,
                                   const Conv2dLayer<T>& layer, T* gw, T* gb);

}  // namespace ki67::kernels
