#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ki67/core/types.hpp"

namespace ki67::regimes {

struct ShapeMismatchError : Error {
    explicit ShapeMismatchError(const std::string& what) : Error(what) {}
};

// Dense planar CHW tensor.
template <typename T>
struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<T> v;

    Tensor() = default;
    Tensor(int c_, int h_, int w_)
        : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * h_ * w_, T(0)) {}

    std::size_t size() const { return v.size(); }
    T* plane(int ci) { return v.data() + static_cast<std::size_t>(ci) * h * w; }
    const T* plane(int ci) const { return v.data() + static_cast<std::size_t>(ci) * h * w; }
    T& at(int ci, int y, int x) {
        return v[(static_cast<std::size_t>(ci) * h + y) * w + x];
    }
    T at(int ci, int y, int x) const {
        return v[(static_cast<std::size_t>(ci) * h + y) * w + x];
    }
    bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }

    static void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
        if (!a.same_shape(b))
            throw ShapeMismatchError(std::string(who) + ": tensor shapes differ (" +
                                     std::to_string(a.c) + "x" + std::to_string(a.h) + "x" +
                                     std::to_string(a.w) + " vs " + std::to_string(b.c) + "x" +
                                     std::to_string(b.h) + "x" + std::to_string(b.w) + ")");
    }
};

}  // namespace ki67::regimes
