#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gradprom {

using Shape = std::vector<int>;

// Thrown when an operation produces NaN/Inf; training loops map this to the
// "numerical abort" exit path.
class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major double tensor. Immutable after construction; copies share
// the data buffer. `node()` links the value to the tape that produced it
// (-1 = plain constant, receives no gradient).
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
    for (int d : shape_) {
      if (d <= 0) throw std::invalid_argument("tensor dimension must be positive");
    }
    if (data.size() != shape_numel(shape_)) {
      throw std::invalid_argument("tensor data length does not match shape " + shape_str(shape_));
    }
    data_ = std::make_shared<const std::vector<double>>(std::move(data));
  }

  static Tensor zeros(Shape shape) {
    std::vector<double> d(shape_numel(shape), 0.0);
    return Tensor(std::move(shape), std::move(d));
  }

  static Tensor full(Shape shape, double value) {
    std::vector<double> d(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(d));
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return data_ ? data_->size() : 0; }
  bool empty() const { return !data_; }

  std::span<const double> data() const {
    return data_ ? std::span<const double>(*data_) : std::span<const double>();
  }

  double operator[](std::size_t i) const { return (*data_)[i]; }

  double item() const {
    if (numel() != 1) throw std::invalid_argument("item() requires a scalar tensor");
    return (*data_)[0];
  }

  int node() const { return node_; }
  bool on_tape() const { return node_ >= 0; }
  bool requires_grad() const { return requires_grad_; }

  // Same value, no tape link: downstream ops treat it as a constant.
  Tensor detached() const {
    Tensor t = *this;
    t.node_ = -1;
    t.requires_grad_ = false;
    return t;
  }

  bool all_finite() const {
    for (double v : *data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool bitwise_equal(const Tensor& other) const {
    if (shape_ != other.shape_) return false;
    const auto& a = *data_;
    const auto& b = *other.data_;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i] != b[i] || std::signbit(a[i]) != std::signbit(b[i])) return false;
    }
    return true;
  }

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  int node_ = -1;
  bool requires_grad_ = false;
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

}  // namespace gradprom
