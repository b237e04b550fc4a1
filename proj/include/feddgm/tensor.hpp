#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "feddgm/error.hpp"

namespace feddgm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

/// Dense row-major tensor. Precision is a template parameter; the library
/// instantiates float and double.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> values;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T{}) : shape(std::move(s)), values(numel(shape), fill) {}
    Tensor(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
        if (values.size() != numel(shape)) {
            throw ShapeError("tensor of shape " + to_string(shape) + " given " +
                             std::to_string(values.size()) + " values");
        }
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    std::size_t size() const noexcept { return values.size(); }
    T& operator[](std::size_t i) { return values[i]; }
    const T& operator[](std::size_t i) const { return values[i]; }
    T item() const {
        if (values.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape));
        return values[0];
    }

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(shape, std::vector<U>(values.begin(), values.end()));
    }

    bool all_finite() const {
        for (const T& v : values) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

} // namespace feddgm
