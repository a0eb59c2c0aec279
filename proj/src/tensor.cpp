#include "trajdistill/tensor.hpp"

#include <sstream>

namespace trajdistill {

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(Eigen::ArrayXd::Zero(shape_size(shape_))) {}

Tensor::Tensor(Shape shape, Eigen::ArrayXd values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_size(shape_) != data_.size()) {
    throw ShapeError("tensor of shape " + shape_str(shape_) + " cannot hold " + std::to_string(data_.size()) +
                     " values");
  }
}

Tensor::Tensor(Shape shape, std::initializer_list<double> values)
    : Tensor(std::move(shape), Eigen::Map<const Eigen::ArrayXd>(values.begin(), static_cast<Index>(values.size()))) {}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, Eigen::ArrayXd::Constant(1, v)); }

Tensor Tensor::filled(Shape shape, double v) {
  const Index n = shape_size(shape);
  return Tensor(std::move(shape), Eigen::ArrayXd::Constant(n, v));
}

Tensor Tensor::vector(const Eigen::VectorXd& v) { return Tensor(Shape{v.size()}, v.array()); }

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

}  // namespace trajdistill
