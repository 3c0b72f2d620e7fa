#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace sfuda {

template <typename S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VectorX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using MatMap = Eigen::Map<MatrixX<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const MatrixX<S>>;

// Dense row-major n-d array. Images and feature maps use HxWxC layout,
// batches BxHxWxC.
template <typename S>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(numel_of(shape_)), S(0));
    }
    Tensor(std::initializer_list<int> shape) : Tensor(std::vector<int>(shape)) {}

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }

    S& operator[](std::size_t i) { return data_[i]; }
    const S& operator[](std::size_t i) const { return data_[i]; }

    S& at4(int b, int h, int w, int c) {
        return data_[static_cast<std::size_t>(((b * shape_[1] + h) * shape_[2] + w) * shape_[3] + c)];
    }
    const S& at4(int b, int h, int w, int c) const {
        return data_[static_cast<std::size_t>(((b * shape_[1] + h) * shape_[2] + w) * shape_[3] + c)];
    }
    S& at3(int h, int w, int c) {
        return data_[static_cast<std::size_t>((h * shape_[1] + w) * shape_[2] + c)];
    }
    const S& at3(int h, int w, int c) const {
        return data_[static_cast<std::size_t>((h * shape_[1] + w) * shape_[2] + c)];
    }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

    // View as a (rows x cols) row-major matrix; product must match numel.
    MatMap<S> as_matrix(int rows, int cols) {
        check_view(rows, cols);
        return MatMap<S>(data_.data(), rows, cols);
    }
    ConstMatMap<S> as_matrix(int rows, int cols) const {
        check_view(rows, cols);
        return ConstMatMap<S>(data_.data(), rows, cols);
    }

    // Slice of a batch tensor: the b-th item as a new tensor with the
    // leading dimension dropped.
    Tensor slice(int b) const {
        std::vector<int> s(shape_.begin() + 1, shape_.end());
        Tensor out(s);
        const std::int64_t n = out.numel();
        std::copy(data_.begin() + b * n, data_.begin() + (b + 1) * n, out.data_.begin());
        return out;
    }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<T>(data_[i]);
        return out;
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    static std::int64_t numel_of(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

private:
    void check_view(int rows, int cols) const {
        if (static_cast<std::int64_t>(rows) * cols != numel())
            throw std::invalid_argument("tensor: matrix view shape mismatch");
    }

    std::vector<int> shape_;
    std::vector<S> data_;
};

// Stack per-item tensors (all same shape) into a batch tensor.
template <typename S>
Tensor<S> stack(const std::vector<Tensor<S>>& items) {
    if (items.empty()) throw std::invalid_argument("stack: empty batch");
    std::vector<int> shape;
    shape.push_back(static_cast<int>(items.size()));
    for (int d : items[0].shape()) shape.push_back(d);
    Tensor<S> out(shape);
    const std::int64_t n = items[0].numel();
    for (std::size_t b = 0; b < items.size(); ++b) {
        if (!items[b].same_shape(items[0]))
            throw std::invalid_argument("stack: inconsistent item shapes");
        std::copy(items[b].data(), items[b].data() + n, out.data() + static_cast<std::int64_t>(b) * n);
    }
    return out;
}

inline std::string shape_to_string(const std::vector<int>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ", ";
    }
    out += ")";
    return out;
}

}  // namespace sfuda
