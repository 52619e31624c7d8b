#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace nac {

using Index = Eigen::Index;

/// Dense n-dimensional array, row-major, with an optional same-shape
/// gradient buffer. All network activations and parameters live in one
/// of these; Eigen maps expose matrix views for the GEMM-shaped work.
template <typename Scalar>
class DenseTensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using MatrixRM =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapRM = Eigen::Map<MatrixRM>;
  using ConstMapRM = Eigen::Map<const MatrixRM>;

  DenseTensor() = default;

  explicit DenseTensor(std::vector<Index> shape)
      : shape_(std::move(shape)), values_(Array::Zero(count(shape_))) {}

  DenseTensor(std::vector<Index> shape, Array values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != count(shape_)) {
      throw std::invalid_argument("tensor: value count does not match shape");
    }
  }

  static Index count(const std::vector<Index>& shape) {
    Index n = 1;
    for (Index d : shape) {
      if (d <= 0) throw std::invalid_argument("tensor: non-positive dim");
      n *= d;
    }
    return n;
  }

  const std::vector<Index>& shape() const { return shape_; }
  Index dim(std::size_t i) const { return shape_.at(i); }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index numel() const { return values_.size(); }

  Array& arr() { return values_; }
  const Array& arr() const { return values_; }
  Scalar* data() { return values_.data(); }
  const Scalar* data() const { return values_.data(); }

  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  /// Whole buffer viewed as a rows x cols row-major matrix.
  MapRM mat(Index rows, Index cols) {
    check_view(rows * cols);
    return MapRM(values_.data(), rows, cols);
  }
  ConstMapRM mat(Index rows, Index cols) const {
    check_view(rows * cols);
    return ConstMapRM(values_.data(), rows, cols);
  }

  bool has_grad() const { return grad_.size() == values_.size(); }
  void require_grad() {
    if (!has_grad()) grad_ = Array::Zero(values_.size());
  }
  void drop_grad() { grad_.resize(0); }
  void zero_grad() {
    if (has_grad()) grad_.setZero();
  }
  Array& grad() {
    if (!has_grad()) throw std::logic_error("tensor: grad not tracked");
    return grad_;
  }
  const Array& grad() const {
    if (!has_grad()) throw std::logic_error("tensor: grad not tracked");
    return grad_;
  }
  MapRM grad_mat(Index rows, Index cols) {
    check_view(rows * cols);
    return MapRM(grad().data(), rows, cols);
  }

  /// Same data, new shape metadata. Element count must match.
  DenseTensor reshaped(std::vector<Index> shape) const {
    if (count(shape) != numel()) {
      throw std::invalid_argument("tensor: reshape count mismatch");
    }
    return DenseTensor(std::move(shape), values_);
  }

  bool same_shape(const DenseTensor& other) const {
    return shape_ == other.shape_;
  }

 private:
  void check_view(Index n) const {
    if (n != values_.size()) {
      throw std::invalid_argument("tensor: bad matrix view size");
    }
  }

  std::vector<Index> shape_;
  Array values_;
  Array grad_;
};

using Tensor = DenseTensor<float>;

inline std::string shape_string(const std::vector<Index>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace nac
