#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mxacl {

using Shape = std::vector<std::size_t>;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A primitive produced NaN/Inf, or was asked to do something numerically undefined.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or argument.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Training loss became non-finite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major 64-bit tensor. Plain value type; gradients live on the Tape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t size() const { return data_.size(); }

  /// Size of the last axis (1 for scalars).
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  /// Product of all axes but the last.
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  /// Value of a single-element tensor.
  double item() const;

  bool all_finite() const;

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// A named trainable tensor owned by a model.
struct Parameter {
  std::string name;
  Tensor value;
  /// Whether decoupled weight decay applies (weight matrices yes, biases and norm gains no).
  bool decay = true;
};

}  // namespace mxacl
