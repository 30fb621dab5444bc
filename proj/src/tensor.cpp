#include "edlab/tensor.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>

#include "edlab/error.hpp"

namespace edlab {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape s) : shape(std::move(s)), data(numel(shape), 0.0f) {
    for (auto e : shape)
        if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
}

Tensor::Tensor(Shape s, std::vector<float> values) : shape(std::move(s)), data(std::move(values)) {
    for (auto e : shape)
        if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
    if (numel(shape) != data.size())
        throw DimensionError("shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
}

Tensor Tensor::filled(Shape s, float value) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), value);
    return t;
}

Tensor Tensor::vector(std::initializer_list<float> values) {
    return Tensor({values.size()}, std::vector<float>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<float> values) {
    return Tensor({rows, cols}, std::vector<float>(values));
}

bool Tensor::all_finite() const {
    for (float v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

bool Tensor::bitwise_equal(const Tensor& other) const {
    return shape == other.shape &&
           (data.empty() || std::memcmp(data.data(), other.data.data(), data.size() * sizeof(float)) == 0);
}

}  // namespace edlab
