#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "common.hpp"

namespace dfml {

// Allocator whose no-argument construct leaves trivial elements
// uninitialized; lets hot paths claim buffers they fully overwrite.
template <class T>
struct uninit_alloc {
    using value_type = T;
    uninit_alloc() = default;
    template <class U>
    uninit_alloc(const uninit_alloc<U>&) {}
    T* allocate(size_t n) { return std::allocator<T>().allocate(n); }
    void deallocate(T* p, size_t n) { std::allocator<T>().deallocate(p, n); }
    template <class U>
    void construct(U* p) noexcept {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
    bool operator==(const uninit_alloc&) const { return true; }
    bool operator!=(const uninit_alloc&) const { return false; }
};

struct uninit_t {};
inline constexpr uninit_t uninit{};

// Rank-4 NHWC tensor. Vectors travel as (n, 1, 1, c); the channel axis is the
// contiguous one, which is what every inner loop in the engine relies on.
template <class T>
struct Tensor {
    int n = 0, h = 0, w = 0, c = 0;
    std::vector<T, uninit_alloc<T>> v;

    Tensor() = default;
    Tensor(int n_, int h_, int w_, int c_)
        : n(n_), h(h_), w(w_), c(c_), v(size_t(n_) * h_ * w_ * c_, T(0)) {}
    Tensor(uninit_t, int n_, int h_, int w_, int c_) : n(n_), h(h_), w(w_), c(c_), v(size_t(n_) * h_ * w_ * c_) {}

    size_t size() const { return v.size(); }
    size_t idx(int b, int y, int x, int ch) const {
        return ((size_t(b) * h + y) * w + x) * c + ch;
    }
    T& at(int b, int y, int x, int ch) { return v[idx(b, y, x, ch)]; }
    const T& at(int b, int y, int x, int ch) const { return v[idx(b, y, x, ch)]; }

    T* row(int b, int y, int x) { return v.data() + idx(b, y, x, 0); }
    const T* row(int b, int y, int x) const { return v.data() + idx(b, y, x, 0); }

    bool same_shape(const Tensor& o) const {
        return n == o.n && h == o.h && w == o.w && c == o.c;
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <class T, class U>
Tensor<T> convert(const Tensor<U>& src) {
    Tensor<T> out(src.n, src.h, src.w, src.c);
    for (size_t i = 0; i < src.v.size(); ++i) out.v[i] = T(double(src.v[i]));
    return out;
}

}  // namespace dfml
