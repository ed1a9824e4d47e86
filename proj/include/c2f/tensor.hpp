#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace c2f {

using Shape = std::vector<std::size_t>;

// Thrown whenever operand extents do not conform to an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << ", ";
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

/// Dense row-major array of doubles with a lazily allocated gradient buffer.
///
/// A rank-0 tensor (empty shape) is a scalar holding one value. Gradients are
/// only materialized once something is accumulated into them, so parameters
/// that never take part in a backward pass carry no extra storage.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;

  Tensor() : values(1, 0.0) {}

  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), values(numel(shape), fill) {
    check_extents();
  }

  Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    check_extents();
    if (values.size() != numel(shape)) {
      throw ShapeError("tensor of shape " + to_string(shape) + " needs " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }

  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }

  double& at(std::size_t r, std::size_t c) { return values[r * shape.back() + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * shape.back() + c]; }

  double item() const {
    if (values.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape));
    return values[0];
  }

  bool has_grad() const { return !grad.empty(); }

  std::span<double> ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
  }

  void zero_grad() { grad.clear(); }

  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    for (double g : grad)
      if (!std::isfinite(g)) return false;
    return true;
  }

 private:
  void check_extents() const {
    for (std::size_t e : shape)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
};

}  // namespace c2f
