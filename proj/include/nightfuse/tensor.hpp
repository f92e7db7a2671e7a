#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "nightfuse/error.hpp"

namespace nightfuse {

/// Dense channels x height x width array. Vectors are stored as (n, 1, 1).
template <class T>
struct Tensor {
    int c = 0;
    int h = 0;
    int w = 0;
    std::vector<T> data;

    Tensor() = default;
    Tensor(int channels, int height, int width, T fill = T(0))
        : c(channels), h(height), w(width), data(static_cast<std::size_t>(channels) * height * width, fill)
    {
    }

    static Tensor vector(int n, T fill = T(0)) { return Tensor(n, 1, 1, fill); }

    std::size_t size() const noexcept { return data.size(); }
    int plane() const noexcept { return h * w; }
    bool same_shape(const Tensor& o) const noexcept { return c == o.c && h == o.h && w == o.w; }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }
    T& at(int ch, int y, int x) { return data[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
    const T& at(int ch, int y, int x) const { return data[(static_cast<std::size_t>(ch) * h + y) * w + x]; }

    T* channel(int ch) { return data.data() + static_cast<std::size_t>(ch) * plane(); }
    const T* channel(int ch) const { return data.data() + static_cast<std::size_t>(ch) * plane(); }

    std::span<T> span() { return data; }
    std::span<const T> span() const { return data; }

    void zero() { std::fill(data.begin(), data.end(), T(0)); }

    template <class U>
    Tensor<U> cast() const
    {
        Tensor<U> out(c, h, w);
        std::transform(data.begin(), data.end(), out.data.begin(), [](T v) { return static_cast<U>(v); });
        return out;
    }
};

template <class T>
void require_shape(const Tensor<T>& t, int c, int h, int w, const char* what)
{
    if (t.c != c || t.h != h || t.w != w)
        throw ShapeError(std::string(what) + ": expected " + std::to_string(c) + "x" + std::to_string(h) + "x" +
                         std::to_string(w) + ", got " + std::to_string(t.c) + "x" + std::to_string(t.h) + "x" +
                         std::to_string(t.w));
}

/// Single-channel 32x32 (or other square) image patch used by the samplers.
using Patch = Tensor<float>;

} // namespace nightfuse
