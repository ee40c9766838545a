#ifndef COLORIZER_CORE_TENSOR_HPP
#define COLORIZER_CORE_TENSOR_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace colorizer {

/// Dense n-d array (rank <= 4), row-major logical layout over a flat Eigen
/// array. Shapes used across the pipeline: {N}, {rows,cols}, {C,H,W},
/// {B,C,H,W}.
template <class Scalar>
class Tensor {
public:
    using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
    using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapRM = Eigen::Map<MatrixRM>;
    using ConstMapRM = Eigen::Map<const MatrixRM>;

    Tensor() = default;

    explicit Tensor(std::vector<Eigen::Index> shape) : shape_(std::move(shape)) {
        data_.setZero(count(shape_));
    }

    Tensor(std::vector<Eigen::Index> shape, Storage data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count(shape_))
            throw std::invalid_argument("Tensor: data size does not match shape");
    }

    static Tensor zeros(std::vector<Eigen::Index> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<Eigen::Index> shape, Scalar v) {
        Tensor t(std::move(shape));
        t.data_.setConstant(v);
        return t;
    }

    static Tensor scalar(Scalar v) { return full({1}, v); }

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const std::vector<Eigen::Index>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    Eigen::Index dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    Eigen::Index size() const { return data_.size(); }
    bool empty() const { return data_.size() == 0; }

    Storage& array() { return data_; }
    const Storage& array() const { return data_; }
    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }

    Scalar& operator[](Eigen::Index i) { return data_[i]; }
    Scalar operator[](Eigen::Index i) const { return data_[i]; }

    Scalar& operator()(Eigen::Index i, Eigen::Index j) {
        return data_[i * shape_[1] + j];
    }
    Scalar operator()(Eigen::Index i, Eigen::Index j) const {
        return data_[i * shape_[1] + j];
    }
    Scalar& operator()(Eigen::Index c, Eigen::Index y, Eigen::Index x) {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }
    Scalar operator()(Eigen::Index c, Eigen::Index y, Eigen::Index x) const {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }
    Scalar& operator()(Eigen::Index b, Eigen::Index c, Eigen::Index y, Eigen::Index x) {
        return data_[((b * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    Scalar operator()(Eigen::Index b, Eigen::Index c, Eigen::Index y, Eigen::Index x) const {
        return data_[((b * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    /// View the flat data as a rows x cols row-major matrix.
    MapRM as_matrix(Eigen::Index rows, Eigen::Index cols) {
        if (rows * cols != data_.size())
            throw std::invalid_argument("Tensor::as_matrix: size mismatch");
        return MapRM(data_.data(), rows, cols);
    }
    ConstMapRM as_matrix(Eigen::Index rows, Eigen::Index cols) const {
        if (rows * cols != data_.size())
            throw std::invalid_argument("Tensor::as_matrix: size mismatch");
        return ConstMapRM(data_.data(), rows, cols);
    }

    /// Reinterpret with a new shape of identical element count.
    Tensor reshaped(std::vector<Eigen::Index> shape) const {
        if (count(shape) != data_.size())
            throw std::invalid_argument("Tensor::reshaped: size mismatch");
        return Tensor(std::move(shape), data_);
    }

    void set_shape(std::vector<Eigen::Index> shape) {
        if (count(shape) != data_.size())
            throw std::invalid_argument("Tensor::set_shape: size mismatch");
        shape_ = std::move(shape);
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    template <class S2>
    Tensor<S2> cast() const {
        Tensor<S2> out(shape_);
        out.array() = data_.template cast<S2>();
        return out;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
        os << ")";
        return os.str();
    }

    static Eigen::Index count(const std::vector<Eigen::Index>& shape) {
        Eigen::Index n = 1;
        for (auto d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= d;
        }
        return shape.empty() ? 0 : n;
    }

private:
    std::vector<Eigen::Index> shape_;
    Storage data_;
};

template <class Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* where) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(where) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
}

}  // namespace colorizer

#endif
