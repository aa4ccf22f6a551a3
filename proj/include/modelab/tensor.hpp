#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "modelab/errors.hpp"

namespace modelab {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor of 64-bit reals. Rank 1 ([n]) and rank 2 ([n,m])
// cover everything the layer stack and losses need; scalars are shape [1].
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel(shape) != data.size())
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match data length " +
                       std::to_string(data.size()));
  }

  static Tensor zeros(Shape s) {
    std::vector<double> d(numel(s), 0.0);
    return Tensor(std::move(s), std::move(d));
  }
  static Tensor full(Shape s, double v) {
    std::vector<double> d(numel(s), v);
    return Tensor(std::move(s), std::move(d));
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vec(std::vector<double> d) {
    Shape s{d.size()};
    return Tensor(std::move(s), std::move(d));
  }
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> d) {
    return Tensor({r, c}, std::move(d));
  }

  std::size_t size() const { return data.size(); }
  bool is_scalar() const { return data.size() == 1; }
  bool is_matrix() const { return shape.size() == 2; }

  std::size_t rows() const {
    if (shape.size() != 2) throw ShapeError("tensor: rows() on non-matrix " + shape_str(shape));
    return shape[0];
  }
  std::size_t cols() const {
    if (shape.size() != 2) throw ShapeError("tensor: cols() on non-matrix " + shape_str(shape));
    return shape[1];
  }

  double& at(std::size_t i) { return data[i]; }
  double at(std::size_t i) const { return data[i]; }
  double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

  bool finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool operator==(const Tensor& o) const { return shape == o.shape && data == o.data; }
};

inline void require_finite(const Tensor& t, const char* where) {
  if (!t.finite()) throw NumericError(std::string("non-finite value in ") + where);
}

}  // namespace modelab
