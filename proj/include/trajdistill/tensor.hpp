#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace trajdistill {

using Index = std::int64_t;
using Shape = std::vector<Index>;

/// Number of elements described by `shape` (1 for a rank-0 shape).
Index shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major double tensor. Storage is a contiguous Eigen array so
/// elementwise work can go through Eigen expressions directly.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, Eigen::ArrayXd values);
  Tensor(Shape shape, std::initializer_list<double> values);

  static Tensor scalar(double v);
  static Tensor filled(Shape shape, double v);
  static Tensor vector(const Eigen::VectorXd& v);

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return static_cast<Index>(data_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }

  const Eigen::ArrayXd& array() const { return data_; }
  Eigen::ArrayXd& array() { return data_; }
  const double* data() const { return data_.data(); }
  double* data() { return data_.data(); }
  std::span<const double> values() const { return {data_.data(), static_cast<std::size_t>(data_.size())}; }

  double operator[](Index i) const { return data_[i]; }
  double& operator[](Index i) { return data_[i]; }

  /// Value of a single-element tensor.
  double item() const;
  bool all_finite() const { return data_.allFinite(); }

  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && (a.data_ == b.data_).all();
  }

 private:
  Shape shape_{};
  Eigen::ArrayXd data_ = Eigen::ArrayXd::Zero(1);
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation meets NaN/Inf that it cannot propagate meaningfully.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace trajdistill
