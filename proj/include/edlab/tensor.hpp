#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace edlab {

using Shape = std::vector<std::size_t>;
using Token = std::int32_t;
using Mask = std::vector<std::uint8_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float32 array. Gradients are held by the Graph that
// records operations over a Tensor, not by the Tensor itself.
struct Tensor {
    Shape shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(Shape s);  // zero-filled
    Tensor(Shape s, std::vector<float> values);

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor filled(Shape s, float value);
    static Tensor vector(std::initializer_list<float> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<float> values);

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    // A rank-r tensor is viewed as rows x cols with cols = last extent.
    std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
    std::size_t rows() const { return cols() == 0 ? 0 : data.size() / cols(); }

    std::span<float> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
    std::span<const float> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

    float& operator[](std::size_t i) { return data[i]; }
    float operator[](std::size_t i) const { return data[i]; }
    float at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    bool all_finite() const;
    bool bitwise_equal(const Tensor& other) const;
};

}  // namespace edlab
