#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ki67/core/rng.hpp"
#include "ki67/kernels/conv2d.hpp"
#include "ki67/kernels/parallel.hpp"
#include "ki67/regimes/tensor.hpp"

namespace ki67::regimes {

// Compact fully-convolutional detector. All convolutions are zero-padded and
// stride 1, so any input H x W maps to a 2 x H x W sigmoid heat map
// (channel 0 = Neg, channel 1 = Pos).
//
//   conv 3x3, 3 -> 8, ReLU
//   conv 3x3, 8 -> 16, ReLU
//   conv 3x3, 16 -> 8, ReLU   <- "feature layer", used for embeddings
//   conv 1x1, 8 -> 2, sigmoid
template <typename T>
struct MiniDetector {
    static constexpr const char* kArch = "minidet-3x8-8x16-16x8-8x2";
    static constexpr std::size_t kParamCount = 2570;

    kernels::Conv2dLayer<T> l1{3, 8, 3};
    kernels::Conv2dLayer<T> l2{8, 16, 3};
    kernels::Conv2dLayer<T> l3{16, 8, 3};
    kernels::Conv2dLayer<T> l4{8, 2, 1};

    std::size_t param_count() const {
        return l1.param_count() + l2.param_count() + l3.param_count() + l4.param_count();
    }

    // He-normal weights, zero biases.
    void init(std::uint64_t seed);

    // Flat parameter view in declared layer order (w then b per layer); used
    // by the optimizer, gradient checks and checkpoints.
    std::vector<T*> param_blocks();
    std::vector<const T*> param_blocks() const;
    std::vector<std::size_t> param_sizes() const;

    std::vector<T> flatten() const;
    void unflatten(const std::vector<T>& flat);
};

template <typename T>
struct ForwardCache {
    Tensor<T> input;        // 3 x H x W
    Tensor<T> z1, a1;       // 8
    Tensor<T> z2, a2;       // 16
    Tensor<T> z3, a3;       // 8, a3 is the feature layer
    Tensor<T> z4, y;        // 2, y = sigmoid(z4)
};

template <typename T>
struct Gradients {
    kernels::Conv2dLayer<T> l1{3, 8, 3}, l2{8, 16, 3}, l3{16, 8, 3}, l4{8, 2, 1};

    void zero();
    void scale(T s);
    std::vector<T*> param_blocks();
    std::vector<std::size_t> param_sizes() const;
};

template <typename T>
void forward(const MiniDetector<T>& m, const Tensor<T>& input, ForwardCache<T>& cache,
             kernels::Exec exec = kernels::Exec::Parallel);

// Accumulates parameter gradients into g given dL/dy; cache must come from a
// forward() call on the same input.
template <typename T>
void backward(const MiniDetector<T>& m, const ForwardCache<T>& cache, const Tensor<T>& grad_y,
              Gradients<T>& g, kernels::Exec exec = kernels::Exec::Parallel);

// Mean over pixels of the feature layer; the 8-dim descriptor used for
// embeddings.
template <typename T>
std::array<double, 8> feature_descriptor(const MiniDetector<T>& m, const Tensor<T>& input,
                                         kernels::Exec exec = kernels::Exec::Parallel);

// --- checkpoints -----------------------------------------------------------
//
// Binary format: 8-byte magic "KI67MDL1", uint32 LE header length, JSON
// header, then float32 LE tensors in flatten() order. The header records the
// architecture string, training seed, regime name and the content hash of the
// parent checkpoint ("" for a fresh model).

struct CheckpointMeta {
    std::string arch;
    std::uint64_t seed = 0;
    std::string regime;
    std::string parent_hash;
};

struct CheckpointError : Error {
    explicit CheckpointError(const std::string& what) : Error(what) {}
};

void save_checkpoint(const std::string& path, const MiniDetector<float>& m,
                     const CheckpointMeta& meta);
MiniDetector<float> load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr);

// FNV-1a over the checkpoint file bytes, hex-encoded; used for parent links.
std::string checkpoint_hash(const std::string& path);

}  // namespace ki67::regimes
