#pragma once

// Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//
// The op set is closed under differentiation: backward() emits adjoints as
// ordinary tape nodes built from the same primitives, so a scalar function of
// gradients (a gradient-norm penalty) is itself differentiable. Non-finite
// values are rejected at every node, never propagated.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "modelab/errors.hpp"
#include "modelab/tensor.hpp"

namespace modelab::ad {

enum class Op : std::uint8_t {
  leaf,
  add,
  sub,
  mul,  // elementwise
  matmul,
  matmul_nt,  // A * B^T
  matmul_tn,  // A^T * B
  relu,
  tanh_fn,
  sigmoid,
  softplus,
  square,
  sqrt_fn,
  recip,
  scale,  // c * x
  shift,  // x + c
  sum_all,
  mean_all,
  sum_rows,  // [n,m] -> [m]
  sum_cols,  // [n,m] -> [n]
  broadcast_rows,    // [m] -> [n,m]
  broadcast_cols,    // [n] -> [n,m]
  broadcast_scalar,  // [1] -> shape
  concat_rows,
  concat_cols,
  slice_rows,
  slice_cols,
  pad_rows,  // zero rows before/after
  pad_cols,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::matmul: return "matmul";
    case Op::matmul_nt: return "matmul_nt";
    case Op::matmul_tn: return "matmul_tn";
    case Op::relu: return "relu";
    case Op::tanh_fn: return "tanh";
    case Op::sigmoid: return "sigmoid";
    case Op::softplus: return "softplus";
    case Op::square: return "square";
    case Op::sqrt_fn: return "sqrt";
    case Op::recip: return "recip";
    case Op::scale: return "scale";
    case Op::shift: return "shift";
    case Op::sum_all: return "sum";
    case Op::mean_all: return "mean";
    case Op::sum_rows: return "sum_rows";
    case Op::sum_cols: return "sum_cols";
    case Op::broadcast_rows: return "broadcast_rows";
    case Op::broadcast_cols: return "broadcast_cols";
    case Op::broadcast_scalar: return "broadcast_scalar";
    case Op::concat_rows: return "concat_rows";
    case Op::concat_cols: return "concat_cols";
    case Op::slice_rows: return "slice_rows";
    case Op::slice_cols: return "slice_cols";
    case Op::pad_rows: return "pad_rows";
    case Op::pad_cols: return "pad_cols";
  }
  return "?";
}

struct Node {
  Op op = Op::leaf;
  Tensor value;
  std::int32_t a = -1;  // parent ids
  std::int32_t b = -1;
  double c = 0.0;         // constant for scale/shift
  std::int64_t i0 = 0;    // aux: slice lo / pad before / broadcast count
  std::int64_t i1 = 0;    // aux: slice hi / pad after
};

// Append-only operation record. Parents of node i always have index < i, so
// a single reverse sweep visits nodes in valid topological order.
class Tape {
 public:
  std::int32_t push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<std::int32_t>(nodes_.size() - 1);
  }
  const Node& node(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }
  std::uint64_t generation() const { return generation_; }

  void clear() {
    nodes_.clear();
    ++generation_;
  }

 private:
  std::vector<Node> nodes_;
  std::uint64_t generation_ = 0;
};

struct Var {
  Tape* tape = nullptr;
  std::int32_t id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const { return tape->node(id).value; }
  const Shape& shape() const { return value().shape; }
};

namespace detail {

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

inline Var finish(Tape& t, Node n) {
  if (!n.value.finite())
    throw NumericError(std::string("non-finite value produced by op '") + op_name(n.op) + "'");
  return Var{&t, t.push(std::move(n))};
}

// C (m x n) += / = A (m x k) * B (k x n); row-major, inner loop contiguous.
inline void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C (m x k) = A (m x n) * B^T, B is (k x n): rows of A dot rows of B.
inline void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                  std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * n;
    for (std::size_t j = 0; j < k; ++j) {
      const double* bj = b + j * n;
      double s = 0.0;
      for (std::size_t p = 0; p < n; ++p) s += ai[p] * bj[p];
      c[i * k + j] = s;
    }
  }
}

// C (k x n) = A^T * B, A is (m x k), B is (m x n).
inline void mm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n) {
  for (std::size_t p = 0; p < m; ++p) {
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < k; ++i) {
      const double api = a[p * k + i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

}  // namespace detail

inline Var leaf(Tape& t, Tensor value) {
  if (!value.finite()) throw NumericError("non-finite value in leaf tensor");
  Node n;
  n.op = Op::leaf;
  n.value = std::move(value);
  return Var{&t, t.push(std::move(n))};
}

inline Var constant(Tape& t, Tensor value) { return leaf(t, std::move(value)); }

namespace detail {

inline Node binary_elemwise(Op op, Var a, Var b) {
  check(a.tape == b.tape, "op on vars from different tapes");
  check(a.shape() == b.shape(), std::string(op_name(op)) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Node n;
  n.op = op;
  n.a = a.id;
  n.b = b.id;
  n.value = Tensor(a.shape(), std::vector<double>(a.value().size()));
  return n;
}

}  // namespace detail

inline Var add(Var a, Var b) {
  Node n = detail::binary_elemwise(Op::add, a, b);
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) n.value.data[i] = x[i] + y[i];
  return detail::finish(*a.tape, std::move(n));
}

inline Var sub(Var a, Var b) {
  Node n = detail::binary_elemwise(Op::sub, a, b);
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) n.value.data[i] = x[i] - y[i];
  return detail::finish(*a.tape, std::move(n));
}

inline Var mul(Var a, Var b) {
  Node n = detail::binary_elemwise(Op::mul, a, b);
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) n.value.data[i] = x[i] * y[i];
  return detail::finish(*a.tape, std::move(n));
}

inline Var matmul(Var a, Var b) {
  detail::check(a.tape == b.tape, "matmul on vars from different tapes");
  detail::check(a.shape().size() == 2 && b.shape().size() == 2, "matmul: operands must be rank 2");
  detail::check(a.shape()[1] == b.shape()[0], "matmul: inner dims " + shape_str(a.shape()) +
                                                  " x " + shape_str(b.shape()));
  Node n;
  n.op = Op::matmul;
  n.a = a.id;
  n.b = b.id;
  n.value = Tensor::zeros({a.shape()[0], b.shape()[1]});
  detail::mm_nn(a.value().data.data(), b.value().data.data(), n.value.data.data(), a.shape()[0],
                a.shape()[1], b.shape()[1]);
  return detail::finish(*a.tape, std::move(n));
}

inline Var matmul_nt(Var a, Var b) {
  detail::check(a.tape == b.tape, "matmul_nt on vars from different tapes");
  detail::check(a.shape().size() == 2 && b.shape().size() == 2,
                "matmul_nt: operands must be rank 2");
  detail::check(a.shape()[1] == b.shape()[1], "matmul_nt: inner dims " + shape_str(a.shape()) +
                                                  " x " + shape_str(b.shape()) + "^T");
  Node n;
  n.op = Op::matmul_nt;
  n.a = a.id;
  n.b = b.id;
  n.value = Tensor::zeros({a.shape()[0], b.shape()[0]});
  detail::mm_nt(a.value().data.data(), b.value().data.data(), n.value.data.data(), a.shape()[0],
                a.shape()[1], b.shape()[0]);
  return detail::finish(*a.tape, std::move(n));
}

inline Var matmul_tn(Var a, Var b) {
  detail::check(a.tape == b.tape, "matmul_tn on vars from different tapes");
  detail::check(a.shape().size() == 2 && b.shape().size() == 2,
                "matmul_tn: operands must be rank 2");
  detail::check(a.shape()[0] == b.shape()[0], "matmul_tn: inner dims " + shape_str(a.shape()) +
                                                  "^T x " + shape_str(b.shape()));
  Node n;
  n.op = Op::matmul_tn;
  n.a = a.id;
  n.b = b.id;
  n.value = Tensor::zeros({a.shape()[1], b.shape()[1]});
  detail::mm_tn(a.value().data.data(), b.value().data.data(), n.value.data.data(), a.shape()[0],
                a.shape()[1], b.shape()[1]);
  return detail::finish(*a.tape, std::move(n));
}

namespace detail {

template <class F>
inline Var unary_elemwise(Op op, Var a, F f) {
  Node n;
  n.op = op;
  n.a = a.id;
  n.value = Tensor(a.shape(), std::vector<double>(a.value().size()));
  const auto& x = a.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) n.value.data[i] = f(x[i]);
  return finish(*a.tape, std::move(n));
}

}  // namespace detail

inline Var relu(Var a) {
  return detail::unary_elemwise(Op::relu, a, [](double v) { return v > 0.0 ? v : 0.0; });
}
inline Var tanh(Var a) {
  return detail::unary_elemwise(Op::tanh_fn, a, [](double v) { return std::tanh(v); });
}
inline Var sigmoid(Var a) {
  return detail::unary_elemwise(Op::sigmoid, a, [](double v) {
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  });
}
// log(1 + e^x), evaluated stably for large |x|.
inline Var softplus(Var a) {
  return detail::unary_elemwise(Op::softplus, a, [](double v) {
    return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  });
}
inline Var square(Var a) {
  return detail::unary_elemwise(Op::square, a, [](double v) { return v * v; });
}
inline Var sqrt(Var a) {
  return detail::unary_elemwise(Op::sqrt_fn, a, [](double v) { return std::sqrt(v); });
}
inline Var recip(Var a) {
  return detail::unary_elemwise(Op::recip, a, [](double v) { return 1.0 / v; });
}

inline Var scale(Var a, double c) {
  Node n;
  n.op = Op::scale;
  n.a = a.id;
  n.c = c;
  n.value = Tensor(a.shape(), std::vector<double>(a.value().size()));
  const auto& x = a.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) n.value.data[i] = c * x[i];
  return detail::finish(*a.tape, std::move(n));
}
inline Var shift(Var a, double c) {
  Node n;
  n.op = Op::shift;
  n.a = a.id;
  n.c = c;
  n.value = Tensor(a.shape(), std::vector<double>(a.value().size()));
  const auto& x = a.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) n.value.data[i] = x[i] + c;
  return detail::finish(*a.tape, std::move(n));
}
inline Var neg(Var a) { return scale(a, -1.0); }

inline Var sum(Var a) {
  Node n;
  n.op = Op::sum_all;
  n.a = a.id;
  double s = 0.0;
  for (double v : a.value().data) s += v;
  n.value = Tensor::scalar(s);
  return detail::finish(*a.tape, std::move(n));
}

inline Var mean(Var a) {
  detail::check(a.value().size() > 0, "mean of empty tensor");
  Node n;
  n.op = Op::mean_all;
  n.a = a.id;
  double s = 0.0;
  for (double v : a.value().data) s += v;
  n.value = Tensor::scalar(s / static_cast<double>(a.value().size()));
  return detail::finish(*a.tape, std::move(n));
}

inline Var sum_rows(Var a) {
  detail::check(a.shape().size() == 2, "sum_rows: operand must be rank 2");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Node n;
  n.op = Op::sum_rows;
  n.a = a.id;
  n.value = Tensor::zeros({c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) n.value.data[j] += a.value().data[i * c + j];
  return detail::finish(*a.tape, std::move(n));
}

inline Var sum_cols(Var a) {
  detail::check(a.shape().size() == 2, "sum_cols: operand must be rank 2");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Node n;
  n.op = Op::sum_cols;
  n.a = a.id;
  n.value = Tensor::zeros({r});
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += a.value().data[i * c + j];
    n.value.data[i] = s;
  }
  return detail::finish(*a.tape, std::move(n));
}

inline Var broadcast_rows(Var a, std::size_t n_rows) {
  detail::check(a.shape().size() == 1, "broadcast_rows: operand must be rank 1");
  const std::size_t c = a.shape()[0];
  Node n;
  n.op = Op::broadcast_rows;
  n.a = a.id;
  n.i0 = static_cast<std::int64_t>(n_rows);
  n.value = Tensor::zeros({n_rows, c});
  for (std::size_t i = 0; i < n_rows; ++i)
    for (std::size_t j = 0; j < c; ++j) n.value.data[i * c + j] = a.value().data[j];
  return detail::finish(*a.tape, std::move(n));
}

inline Var broadcast_cols(Var a, std::size_t n_cols) {
  detail::check(a.shape().size() == 1, "broadcast_cols: operand must be rank 1");
  const std::size_t r = a.shape()[0];
  Node n;
  n.op = Op::broadcast_cols;
  n.a = a.id;
  n.i0 = static_cast<std::int64_t>(n_cols);
  n.value = Tensor::zeros({r, n_cols});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < n_cols; ++j) n.value.data[i * n_cols + j] = a.value().data[i];
  return detail::finish(*a.tape, std::move(n));
}

inline Var broadcast_scalar(Var a, Shape target) {
  detail::check(a.value().is_scalar(), "broadcast_scalar: operand must be scalar");
  Node n;
  n.op = Op::broadcast_scalar;
  n.a = a.id;
  n.value = Tensor::full(std::move(target), a.value().data[0]);
  return detail::finish(*a.tape, std::move(n));
}

inline Var concat_rows(Var a, Var b) {
  detail::check(a.tape == b.tape, "concat_rows on vars from different tapes");
  detail::check(a.shape().size() == 2 && b.shape().size() == 2 && a.shape()[1] == b.shape()[1],
                "concat_rows: column counts differ");
  const std::size_t c = a.shape()[1];
  Node n;
  n.op = Op::concat_rows;
  n.a = a.id;
  n.b = b.id;
  n.i0 = static_cast<std::int64_t>(a.shape()[0]);
  n.value = Tensor::zeros({a.shape()[0] + b.shape()[0], c});
  std::copy(a.value().data.begin(), a.value().data.end(), n.value.data.begin());
  std::copy(b.value().data.begin(), b.value().data.end(),
            n.value.data.begin() + static_cast<std::ptrdiff_t>(a.value().size()));
  return detail::finish(*a.tape, std::move(n));
}

inline Var concat_cols(Var a, Var b) {
  detail::check(a.tape == b.tape, "concat_cols on vars from different tapes");
  detail::check(a.shape().size() == 2 && b.shape().size() == 2 && a.shape()[0] == b.shape()[0],
                "concat_cols: row counts differ");
  const std::size_t r = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
  Node n;
  n.op = Op::concat_cols;
  n.a = a.id;
  n.b = b.id;
  n.i0 = static_cast<std::int64_t>(ca);
  n.value = Tensor::zeros({r, ca + cb});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < ca; ++j) n.value.data[i * (ca + cb) + j] = a.value().at(i, j);
    for (std::size_t j = 0; j < cb; ++j) n.value.data[i * (ca + cb) + ca + j] = b.value().at(i, j);
  }
  return detail::finish(*a.tape, std::move(n));
}

inline Var slice_rows(Var a, std::size_t lo, std::size_t hi) {
  detail::check(a.shape().size() == 2 && lo < hi && hi <= a.shape()[0], "slice_rows: bad range");
  const std::size_t c = a.shape()[1];
  Node n;
  n.op = Op::slice_rows;
  n.a = a.id;
  n.i0 = static_cast<std::int64_t>(lo);
  n.i1 = static_cast<std::int64_t>(hi);
  n.value = Tensor({hi - lo, c}, std::vector<double>(a.value().data.begin() + static_cast<std::ptrdiff_t>(lo * c),
                                                     a.value().data.begin() + static_cast<std::ptrdiff_t>(hi * c)));
  return detail::finish(*a.tape, std::move(n));
}

inline Var slice_cols(Var a, std::size_t lo, std::size_t hi) {
  detail::check(a.shape().size() == 2 && lo < hi && hi <= a.shape()[1], "slice_cols: bad range");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Node n;
  n.op = Op::slice_cols;
  n.a = a.id;
  n.i0 = static_cast<std::int64_t>(lo);
  n.i1 = static_cast<std::int64_t>(hi);
  n.value = Tensor::zeros({r, hi - lo});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = lo; j < hi; ++j) n.value.data[i * (hi - lo) + (j - lo)] = a.value().data[i * c + j];
  return detail::finish(*a.tape, std::move(n));
}

inline Var pad_rows(Var a, std::size_t before, std::size_t after) {
  detail::check(a.shape().size() == 2, "pad_rows: operand must be rank 2");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Node n;
  n.op = Op::pad_rows;
  n.a = a.id;
  n.i0 = static_cast<std::int64_t>(before);
  n.i1 = static_cast<std::int64_t>(after);
  n.value = Tensor::zeros({before + r + after, c});
  std::copy(a.value().data.begin(), a.value().data.end(),
            n.value.data.begin() + static_cast<std::ptrdiff_t>(before * c));
  return detail::finish(*a.tape, std::move(n));
}

inline Var pad_cols(Var a, std::size_t before, std::size_t after) {
  detail::check(a.shape().size() == 2, "pad_cols: operand must be rank 2");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  const std::size_t cc = before + c + after;
  Node n;
  n.op = Op::pad_cols;
  n.a = a.id;
  n.i0 = static_cast<std::int64_t>(before);
  n.i1 = static_cast<std::int64_t>(after);
  n.value = Tensor::zeros({r, cc});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) n.value.data[i * cc + before + j] = a.value().data[i * c + j];
  return detail::finish(*a.tape, std::move(n));
}

// --- hinge building blocks -------------------------------------------------
// max(0, 1 - x) and max(0, 1 + x); the subgradient at the kink is 0 because
// relu's backward mask is strictly (value > 0).
inline Var hinge_one_minus(Var x) { return relu(shift(neg(x), 1.0)); }
inline Var hinge_one_plus(Var x) { return relu(shift(x, 1.0)); }

// --- backward ---------------------------------------------------------------

// Mapping from parameter name to its gradient tensor. Every requested name is
// present; a parameter with no path to the output gets an explicit zero.
using GradientMap = std::map<std::string, Tensor>;

namespace detail {

struct BackwardCtx {
  Tape* tape;
  std::vector<Var> adjoint;  // indexed by node id; invalid Var = no adjoint yet
  std::vector<bool> needed;

  void accumulate(std::int32_t id, Var g) {
    Var& slot = adjoint[static_cast<std::size_t>(id)];
    slot = slot.valid() ? add(slot, g) : g;
  }
};

inline Tensor relu_mask(const Tensor& v) {
  Tensor m(v.shape, std::vector<double>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m.data[i] = v.data[i] > 0.0 ? 1.0 : 0.0;
  return m;
}

}  // namespace detail

// Reverse sweep from scalar `output`. The returned adjoints are tape nodes,
// so callers may keep differentiating through them (create_graph semantics).
// A wrt entry must live on `tape`; one with no path to `output` yields zeros.
inline std::vector<Var> backward_nodes(Tape& tape, Var output, std::span<const Var> wrt) {
  if (output.tape != &tape) throw ShapeError("backward: output not on this tape");
  if (!output.value().is_scalar())
    throw ShapeError("backward: output must be scalar, got " + shape_str(output.shape()));
  for (const Var& w : wrt)
    if (w.tape != &tape || w.id < 0 || static_cast<std::size_t>(w.id) >= tape.size())
      throw ShapeError("backward: parameter not on tape");

  const std::int32_t out_id = output.id;

  // Restrict the sweep to ancestors of the output.
  std::vector<bool> needed(static_cast<std::size_t>(out_id) + 1, false);
  needed[static_cast<std::size_t>(out_id)] = true;
  for (std::int32_t id = out_id; id >= 0; --id) {
    if (!needed[static_cast<std::size_t>(id)]) continue;
    const Node& n = tape.node(id);
    if (n.a >= 0) needed[static_cast<std::size_t>(n.a)] = true;
    if (n.b >= 0) needed[static_cast<std::size_t>(n.b)] = true;
  }

  detail::BackwardCtx ctx{&tape, std::vector<Var>(static_cast<std::size_t>(out_id) + 1),
                          std::move(needed)};
  ctx.accumulate(out_id, constant(tape, Tensor::full(output.shape(), 1.0)));

  for (std::int32_t id = out_id; id >= 0; --id) {
    if (!ctx.needed[static_cast<std::size_t>(id)]) continue;
    Var g = ctx.adjoint[static_cast<std::size_t>(id)];
    if (!g.valid()) continue;  // no path from this node to the output
    const Node n = tape.node(id);  // copy: pushes below may reallocate
    const Var self{&tape, id};
    const Var pa{&tape, n.a};
    const Var pb{&tape, n.b};
    switch (n.op) {
      case Op::leaf:
        break;
      case Op::add:
        ctx.accumulate(n.a, g);
        ctx.accumulate(n.b, g);
        break;
      case Op::sub:
        ctx.accumulate(n.a, g);
        ctx.accumulate(n.b, neg(g));
        break;
      case Op::mul:
        ctx.accumulate(n.a, mul(g, pb));
        ctx.accumulate(n.b, mul(g, pa));
        break;
      case Op::matmul:  // C = A B
        ctx.accumulate(n.a, matmul_nt(g, pb));
        ctx.accumulate(n.b, matmul_tn(pa, g));
        break;
      case Op::matmul_nt:  // C = A B^T
        ctx.accumulate(n.a, matmul(g, pb));
        ctx.accumulate(n.b, matmul_tn(g, pa));
        break;
      case Op::matmul_tn:  // C = A^T B
        ctx.accumulate(n.a, matmul_nt(pb, g));
        ctx.accumulate(n.b, matmul(pa, g));
        break;
      case Op::relu:
        // The mask is a constant: relu'' == 0 away from the kink and the
        // subgradient at 0 is fixed to 0.
        ctx.accumulate(n.a, mul(g, constant(tape, detail::relu_mask(pa.value()))));
        break;
      case Op::tanh_fn:  // 1 - y^2
        ctx.accumulate(n.a, mul(g, shift(neg(square(self)), 1.0)));
        break;
      case Op::sigmoid:  // y (1 - y)
        ctx.accumulate(n.a, mul(g, mul(self, shift(neg(self), 1.0))));
        break;
      case Op::softplus:  // sigma(x)
        ctx.accumulate(n.a, mul(g, sigmoid(pa)));
        break;
      case Op::square:
        ctx.accumulate(n.a, mul(g, scale(pa, 2.0)));
        break;
      case Op::sqrt_fn:  // 1 / (2 sqrt(x))
        ctx.accumulate(n.a, mul(g, scale(recip(self), 0.5)));
        break;
      case Op::recip:  // -y^2
        ctx.accumulate(n.a, neg(mul(g, square(self))));
        break;
      case Op::scale:
        ctx.accumulate(n.a, scale(g, n.c));
        break;
      case Op::shift:
        ctx.accumulate(n.a, g);
        break;
      case Op::sum_all:
        ctx.accumulate(n.a, broadcast_scalar(g, pa.shape()));
        break;
      case Op::mean_all:
        ctx.accumulate(n.a, scale(broadcast_scalar(g, pa.shape()),
                                  1.0 / static_cast<double>(pa.value().size())));
        break;
      case Op::sum_rows:
        ctx.accumulate(n.a, broadcast_rows(g, pa.shape()[0]));
        break;
      case Op::sum_cols:
        ctx.accumulate(n.a, broadcast_cols(g, pa.shape()[1]));
        break;
      case Op::broadcast_rows:
        ctx.accumulate(n.a, sum_rows(g));
        break;
      case Op::broadcast_cols:
        ctx.accumulate(n.a, sum_cols(g));
        break;
      case Op::broadcast_scalar:
        ctx.accumulate(n.a, sum(g));
        break;
      case Op::concat_rows: {
        const std::size_t split = static_cast<std::size_t>(n.i0);
        ctx.accumulate(n.a, slice_rows(g, 0, split));
        ctx.accumulate(n.b, slice_rows(g, split, n.value.shape[0]));
        break;
      }
      case Op::concat_cols: {
        const std::size_t split = static_cast<std::size_t>(n.i0);
        ctx.accumulate(n.a, slice_cols(g, 0, split));
        ctx.accumulate(n.b, slice_cols(g, split, n.value.shape[1]));
        break;
      }
      case Op::slice_rows:
        ctx.accumulate(n.a, pad_rows(g, static_cast<std::size_t>(n.i0),
                                     pa.shape()[0] - static_cast<std::size_t>(n.i1)));
        break;
      case Op::slice_cols:
        ctx.accumulate(n.a, pad_cols(g, static_cast<std::size_t>(n.i0),
                                     pa.shape()[1] - static_cast<std::size_t>(n.i1)));
        break;
      case Op::pad_rows:
        ctx.accumulate(n.a, slice_rows(g, static_cast<std::size_t>(n.i0),
                                       static_cast<std::size_t>(n.i0) + pa.shape()[0]));
        break;
      case Op::pad_cols:
        ctx.accumulate(n.a, slice_cols(g, static_cast<std::size_t>(n.i0),
                                       static_cast<std::size_t>(n.i0) + pa.shape()[1]));
        break;
    }
  }

  std::vector<Var> grads;
  grads.reserve(wrt.size());
  for (const Var& w : wrt) {
    Var g = ctx.adjoint[static_cast<std::size_t>(w.id)];
    grads.push_back(g.valid() ? g : constant(tape, Tensor::zeros(w.shape())));
  }
  return grads;
}

// Value-only backward (create_graph = false): same sweep, gradients returned
// as plain tensors.
inline std::vector<Tensor> backward(Tape& tape, Var output, std::span<const Var> wrt) {
  std::vector<Var> nodes = backward_nodes(tape, output, wrt);
  std::vector<Tensor> out;
  out.reserve(nodes.size());
  for (const Var& v : nodes) out.push_back(v.value());
  return out;
}

// --- finite-difference oracle ------------------------------------------------

// Compares backward() against central differences componentwise and returns
// the largest relative error, scaled by max(1, |g_ad|, |g_fd|). `f` must build
// a scalar graph from leaf vars of the given parameter tensors; it is invoked
// on fresh tapes for each probe, so it must be deterministic.
template <class F>
double grad_check(F&& f, const std::vector<Tensor>& theta, double h) {
  std::vector<Tensor> ad_grads;
  {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(theta.size());
    for (const Tensor& t : theta) vars.push_back(leaf(tape, t));
    Var out = f(tape, vars);
    ad_grads = backward(tape, out, vars);
  }

  auto eval = [&](const std::vector<Tensor>& point) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(point.size());
    for (const Tensor& t : point) vars.push_back(leaf(tape, t));
    Var out = f(tape, vars);
    const double v = out.value().data[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
  };

  double max_rel = 0.0;
  std::vector<Tensor> probe = theta;
  for (std::size_t p = 0; p < theta.size(); ++p) {
    for (std::size_t i = 0; i < theta[p].size(); ++i) {
      const double orig = probe[p].data[i];
      probe[p].data[i] = orig + h;
      const double fp = eval(probe);
      probe[p].data[i] = orig - h;
      const double fm = eval(probe);
      probe[p].data[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double ad = ad_grads[p].data[i];
      const double rel = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
      if (rel > max_rel) max_rel = rel;
    }
  }
  return max_rel;
}

}  // namespace modelab::ad
