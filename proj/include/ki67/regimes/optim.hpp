#pragma once

#include <cstdint>
#include <vector>

#include "ki67/regimes/tensor.hpp"

namespace ki67::regimes {

// Huber loss averaged over all elements (channels x pixels). Returns the loss
// and writes dL/dpred into grad (same shape as pred).
template <typename T>
double huber_loss(const Tensor<T>& pred, const Tensor<T>& target, double delta, Tensor<T>& grad);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// First/second moment state for one flat parameter vector.
template <typename T>
struct AdamState {
    std::vector<T> m, v;
    long t = 0;  // completed steps

    explicit AdamState(std::size_t n = 0) : m(n, T(0)), v(n, T(0)) {}
};

// One bias-corrected Adam update, in place: params -= lr * mhat/(sqrt(vhat)+eps).
// Increments state.t.
template <typename T>
void adam_step(T* params, const T* grads, std::size_t n, AdamState<T>& state,
               const AdamConfig& cfg);

}  // namespace ki67::regimes
