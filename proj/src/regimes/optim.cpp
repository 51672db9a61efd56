#include "ki67/regimes/optim.hpp"

#include <cmath>

namespace ki67::regimes {

template <typename T>
double huber_loss(const Tensor<T>& pred, const Tensor<T>& target, double delta, Tensor<T>& grad) {
    Tensor<T>::require_same_shape(pred, target, "huber_loss");
    if (delta <= 0.0) throw Error("huber_loss: delta must be positive");
    if (!grad.same_shape(pred)) grad = Tensor<T>(pred.c, pred.h, pred.w);
    const double n = static_cast<double>(pred.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < pred.v.size(); ++i) {
        const double r = static_cast<double>(pred.v[i]) - static_cast<double>(target.v[i]);
        const double a = std::fabs(r);
        if (a <= delta) {
            loss += 0.5 * r * r;
            grad.v[i] = static_cast<T>(r / n);
        } else {
            loss += delta * (a - 0.5 * delta);
            grad.v[i] = static_cast<T>((r > 0 ? delta : -delta) / n);
        }
    }
    return loss / n;
}

template <typename T>
void adam_step(T* params, const T* grads, std::size_t n, AdamState<T>& state,
               const AdamConfig& cfg) {
    if (state.m.size() != n || state.v.size() != n)
        throw ShapeMismatchError("adam_step: state size does not match parameter count");
    state.t += 1;
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < n; ++i) {
        const double g = static_cast<double>(grads[i]);
        const double m = b1 * static_cast<double>(state.m[i]) + (1.0 - b1) * g;
        const double v = b2 * static_cast<double>(state.v[i]) + (1.0 - b2) * g * g;
        state.m[i] = static_cast<T>(m);
        state.v[i] = static_cast<T>(v);
        const double mhat = m / corr1;
        const double vhat = v / corr2;
        params[i] = static_cast<T>(static_cast<double>(params[i]) -
                                   cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon));
    }
}

#define KI67_INSTANTIATE(T)                                                                      \
    template double huber_loss<T>(const Tensor<T>&, const Tensor<T>&, double, Tensor<T>&);       \
    template void adam_step<T>(T*, const T*, std::size_t, AdamState<T>&, const AdamConfig&);

KI67_INSTANTIATE(float)
KI67_INSTANTIATE(double)
#undef KI67_INSTANTIATE

}  // namespace ki67::regimes
