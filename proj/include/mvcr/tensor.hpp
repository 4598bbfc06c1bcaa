#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mvcr/rng.hpp"

namespace mvcr {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Raised when operand shapes do not satisfy an op's contraction or
/// broadcasting rule.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

[[noreturn]] inline void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

/// Dense row-major n-dimensional array with an optional gradient buffer.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty when absent, otherwise same size as data
  bool requires_grad = false;

  Tensor() = default;

  explicit Tensor(Shape s, T fill = T{0}, bool trainable = false)
      : shape(std::move(s)), data(numel(shape), fill), requires_grad(trainable) {
    check_extents();
  }

  Tensor(Shape s, std::vector<T> values, bool trainable = false)
      : shape(std::move(s)), data(std::move(values)), requires_grad(trainable) {
    check_extents();
    if (data.size() != numel(shape))
      throw ShapeError("tensor: " + std::to_string(data.size()) + " values for shape " + to_string(shape));
  }

  std::size_t size() const noexcept { return data.size(); }
  bool has_grad() const noexcept { return !grad.empty(); }
  void zero_grad() { grad.assign(data.size(), T{0}); }

  static Tensor uniform(Shape s, double lo, double hi, Stream& rng, bool trainable = true) {
    Tensor t(std::move(s), T{0}, trainable);
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor normal(Shape s, double stddev, Stream& rng, bool trainable = true) {
    Tensor t(std::move(s), T{0}, trainable);
    for (auto& v : t.data) v = static_cast<T>(stddev * rng.normal());
    return t;
  }

  /// Same values in another element type.
  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape, U{0}, requires_grad);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

 private:
  void check_extents() const {
    for (std::size_t e : shape)
      if (e == 0) throw ShapeError("tensor: zero extent in shape " + to_string(shape));
  }
};

}  // namespace mvcr
