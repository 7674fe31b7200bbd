#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "btlm/error.hpp"

namespace btlm {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        os << (i ? "x" : "") << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major array. Everything the model touches is 1-D or 2-D; a 1-D
// array of length n behaves as a 1 x n matrix for row/column queries.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
        for (auto d : shape_) {
            if (d == 0) {
                throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
            }
        }
    }

    Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
        if (shape_numel(shape_) != data_.size()) {
            throw DimensionError("shape " + shape_str(shape_) + " does not hold " + std::to_string(data_.size()) +
                                 " values");
        }
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values) {
        return Tensor({rows, cols}, std::move(values));
    }

    static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t rows() const noexcept { return shape_.size() >= 2 ? shape_[0] : (shape_.empty() ? 0 : 1); }
    std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> span() noexcept { return data_; }
    std::span<const T> span() const noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

    T item() const {
        if (data_.size() != 1) {
            throw ContractError("item() on tensor of shape " + shape_str(shape_));
        }
        return data_[0];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <class U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    Shape shape_;
    std::vector<T> data_;
};

template <class T>
Tensor<T> zeros_like(const Tensor<T>& t) {
    return Tensor<T>(t.shape(), T(0));
}

}  // namespace btlm
