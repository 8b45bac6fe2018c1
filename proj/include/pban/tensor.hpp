#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pban/errors.hpp"

namespace pban {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using MatrixMap = Eigen::Map<MatrixX<Scalar>>;

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const MatrixX<Scalar>>;

/// Dense row-major N-d array. A rank-0 tensor (empty shape) holds one scalar.
template <typename Scalar_>
class Tensor {
public:
    using Scalar = Scalar_;

    Tensor() : shape_{0} {}

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        check_extents();
        data_ = VectorX<Scalar>::Zero(shape_numel(shape_));
    }

    Tensor(Shape shape, VectorX<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        if (data_.size() != shape_numel(shape_)) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
        }
    }

    Tensor(Shape shape, std::initializer_list<Scalar> values)
        : Tensor(std::move(shape), VectorX<Scalar>::Map(values.begin(), Index(values.size()))) {}

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor constant(Shape shape, Scalar value) {
        Tensor t(std::move(shape));
        t.data_.setConstant(value);
        return t;
    }

    static Tensor ones(Shape shape) { return constant(std::move(shape), Scalar(1)); }

    static Tensor scalar(Scalar value) { return Tensor(Shape{}, {value}); }

    const Shape& shape() const { return shape_; }
    Index rank() const { return Index(shape_.size()); }
    Index dim(Index axis) const { return shape_.at(std::size_t(axis < 0 ? rank() + axis : axis)); }
    Index size() const { return data_.size(); }

    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }

    VectorX<Scalar>& vec() { return data_; }
    const VectorX<Scalar>& vec() const { return data_; }

    Scalar& operator[](Index i) { return data_[i]; }
    Scalar operator[](Index i) const { return data_[i]; }

    Scalar& at(std::initializer_list<Index> idx) { return data_[offset(idx)]; }
    Scalar at(std::initializer_list<Index> idx) const { return data_[offset(idx)]; }

    /// Value of a single-element tensor.
    Scalar item() const {
        if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != size()) {
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    template <typename Other>
    Tensor<Other> cast() const {
        return Tensor<Other>(shape_, data_.template cast<Other>());
    }

    bool all_finite() const { return data_.allFinite(); }

    bool operator==(const Tensor& other) const {
        return shape_ == other.shape_ && data_ == other.data_;
    }

private:
    void check_extents() const {
        for (Index e : shape_) {
            if (e < 0) throw DimensionError("negative extent in shape " + shape_str(shape_));
        }
    }

    Index offset(std::initializer_list<Index> idx) const {
        if (Index(idx.size()) != rank()) {
            throw DimensionError("index rank " + std::to_string(idx.size()) + " for shape " +
                                 shape_str(shape_));
        }
        Index off = 0;
        std::size_t a = 0;
        for (Index i : idx) off = off * shape_[a++] + i;
        return off;
    }

    Shape shape_;
    VectorX<Scalar> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace pban
