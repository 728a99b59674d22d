#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Tape records every operation of one forward pass in execution order.
// Nodes only reference earlier nodes, so a single reverse sweep over the tape
// is a valid topological order for backpropagation. Trainable state lives in
// Parameter objects outside the tape; a tape leaf created with Tape::param
// routes its gradient into Parameter::grad when Tape::backward runs.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sopool/error.hpp"
#include "sopool/matrix.hpp"
#include "sopool/rng.hpp"

namespace sopool::ag {

enum class Op {
  constant,
  parameter,
  matmul,
  matmul_tn,
  matmul_nt,
  transpose,
  add,
  sub,
  mul,
  relu,
  scale,
  scale_by,
  add_row,
  sum,
  softmax_columns,
  batch_norm,
  dropout,
  cross_entropy,
  slice_rows,
  vstack,
  hstack,
  flatten,
  column_sum,
  column_mean,
  column_max,
  center_columns,
  aggregate,
  count_
};

inline constexpr std::string_view op_name(Op op) {
  constexpr std::string_view names[] = {
      "constant", "parameter",       "matmul",     "matmul_tn",   "matmul_nt",
      "transpose", "add",            "sub",        "mul",         "relu",
      "scale",    "scale_by",        "add_row",    "sum",         "softmax_columns",
      "batch_norm", "dropout",       "cross_entropy", "slice_rows", "vstack",
      "hstack",   "flatten",         "column_sum", "column_mean", "column_max",
      "center_columns", "aggregate"};
  static_assert(std::size(names) == static_cast<std::size_t>(Op::count_));
  return names[static_cast<std::size_t>(op)];
}

enum class Mode { train, eval };

namespace testing {
/// Negative-control hook: while set, the backward rule of this op receives a
/// corrupted upstream gradient. Used to prove the gradient checker can fail.
inline std::atomic<int> faulty_op{-1};

class ScopedFault {
 public:
  explicit ScopedFault(Op op) { faulty_op.store(static_cast<int>(op)); }
  ~ScopedFault() { faulty_op.store(-1); }
  ScopedFault(const ScopedFault&) = delete;
  ScopedFault& operator=(const ScopedFault&) = delete;
};
}  // namespace testing

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix adam_m;
  Matrix adam_v;
  std::size_t steps = 0;

  Parameter() = default;
  Parameter(std::string n, Matrix init)
      : name(std::move(n)),
        value(std::move(init)),
        grad(value.rows(), value.cols()),
        adam_m(value.rows(), value.cols()),
        adam_v(value.rows(), value.cols()) {}

  void zero_grad() { grad.fill(0.0); }
};

/// Glorot-uniform initialised matrix.
inline Matrix glorot_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (double& x : m.data()) x = rng.uniform(-a, a);
  return m;
}

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Running statistics of a batch-norm layer (not trainable).
struct RunningStats {
  Matrix mean;
  Matrix var;
  double eps = 1e-5;
  double momentum = 0.1;

  explicit RunningStats(std::size_t cols = 0)
      : mean(1, cols, 0.0), var(1, cols, 1.0) {}
};

/// CSR neighbour lists of an undirected graph (or disjoint union of graphs).
struct Adjacency {
  std::size_t num_nodes = 0;
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> neighbors;

  std::span<const std::size_t> of(std::size_t v) const {
    return {neighbors.data() + offsets[v], offsets[v + 1] - offsets[v]};
  }
  std::size_t degree(std::size_t v) const { return offsets[v + 1] - offsets[v]; }
};

enum class Aggregate { sum, mean, max };

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad_out)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }

  /// Smallest distance of any relu/max input to a point where the op is not
  /// differentiable, over the whole tape.
  double kink_margin() const noexcept { return kink_margin_; }
  void note_kink(double margin) noexcept { kink_margin_ = std::min(kink_margin_, margin); }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Matrix value) {
    return push(Op::constant, std::move(value), false, nullptr);
  }

  Var param(Parameter& p) {
    Var v = push(Op::parameter, p.value, record_, nullptr);
    nodes_[v.id].param = &p;
    return v;
  }

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  Op kind(Var v) const { return nodes_[v.id].kind; }

  /// Gradient accumulated at a node by the last backward() (empty if none).
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }

  /// Appends a node. `backward` is dropped when no input requires a gradient.
  Var push(Op kind, Matrix value, bool requires_grad, Backward backward) {
    Node n;
    n.kind = kind;
    n.value = std::move(value);
    n.requires_grad = record_ && requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  bool any_requires_grad(std::initializer_list<Var> vars) const {
    for (Var v : vars)
      if (nodes_[v.id].requires_grad) return true;
    return false;
  }

  /// Adds `g` into the gradient of `v` (no-op for constants).
  void accumulate(Var v, const Matrix& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.empty() && !n.value.empty()) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Mutable access for in-place scatter into a gradient buffer.
  Matrix* grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
    return &n.grad;
  }

  /// Reverse sweep from a scalar loss; parameter gradients are added into
  /// the bound Parameter objects.
  void backward(Var loss) {
    const Matrix& lv = nodes_[loss.id].value;
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ContractError("backward: loss must be a 1x1 scalar, got " + lv.shape());
    }
    for (Node& n : nodes_) n.grad = Matrix();
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad = Matrix(1, 1, 1.0);
    const int fault = testing::faulty_op.load();
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.param != nullptr) {
        n.param->grad += n.grad;
        continue;
      }
      if (!n.backward) continue;
      if (fault == static_cast<int>(n.kind)) {
        Matrix corrupted = n.grad;
        corrupted *= 1.25;
        n.backward(*this, corrupted);
      } else {
        n.backward(*this, n.grad);
      }
    }
  }

 private:
  struct Node {
    Op kind = Op::constant;
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    Backward backward;
  };

  bool record_;
  double kink_margin_ = std::numeric_limits<double>::infinity();
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(*this); }

namespace detail {
inline Tape& same_tape(Var a, Var b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw ContractError(std::string(op) + ": operands live on different tapes");
  }
  return *a.tape;
}
inline void require_same_shape(Var a, Var b, const char* op) {
  Matrix::require_same_shape(a.value(), b.value(), op);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Products

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "matmul");
  Matrix out = sopool::matmul(a.value(), b.value());
  return t.push(Op::matmul, std::move(out), t.any_requires_grad({a, b}),
                [a, b](Tape& tp, const Matrix& g) {
                  if (tp.requires_grad(a)) tp.accumulate(a, sopool::matmul_nt(g, b.value()));
                  if (tp.requires_grad(b)) tp.accumulate(b, sopool::matmul_tn(a.value(), g));
                });
}

/// aᵀ·b
inline Var matmul_tn(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "matmul_tn");
  Matrix out = sopool::matmul_tn(a.value(), b.value());
  return t.push(Op::matmul_tn, std::move(out), t.any_requires_grad({a, b}),
                [a, b](Tape& tp, const Matrix& g) {
                  if (tp.requires_grad(a)) tp.accumulate(a, sopool::matmul_nt(b.value(), g));
                  if (tp.requires_grad(b)) tp.accumulate(b, sopool::matmul(a.value(), g));
                });
}

/// a·bᵀ
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "matmul_nt");
  Matrix out = sopool::matmul_nt(a.value(), b.value());
  return t.push(Op::matmul_nt, std::move(out), t.any_requires_grad({a, b}),
                [a, b](Tape& tp, const Matrix& g) {
                  if (tp.requires_grad(a)) tp.accumulate(a, sopool::matmul(g, b.value()));
                  if (tp.requires_grad(b)) tp.accumulate(b, sopool::matmul_tn(g, a.value()));
                });
}

inline Var transpose(Var a) {
  Tape& t = *a.tape;
  return t.push(Op::transpose, sopool::transpose(a.value()), t.requires_grad(a),
                [a](Tape& tp, const Matrix& g) { tp.accumulate(a, sopool::transpose(g)); });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "add");
  detail::require_same_shape(a, b, "add");
  Matrix out = a.value();
  out += b.value();
  return t.push(Op::add, std::move(out), t.any_requires_grad({a, b}),
                [a, b](Tape& tp, const Matrix& g) {
                  tp.accumulate(a, g);
                  tp.accumulate(b, g);
                });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "sub");
  detail::require_same_shape(a, b, "sub");
  Matrix out = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return t.push(Op::sub, std::move(out), t.any_requires_grad({a, b}),
                [a, b](Tape& tp, const Matrix& g) {
                  tp.accumulate(a, g);
                  if (tp.requires_grad(b)) {
                    Matrix neg = g;
                    neg *= -1.0;
                    tp.accumulate(b, neg);
                  }
                });
}

/// Hadamard product.
inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "mul");
  detail::require_same_shape(a, b, "mul");
  Matrix out = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.push(Op::mul, std::move(out), t.any_requires_grad({a, b}),
                [a, b](Tape& tp, const Matrix& g) {
                  if (tp.requires_grad(a)) {
                    Matrix ga = g;
                    const Matrix& bv = b.value();
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bv[i];
                    tp.accumulate(a, ga);
                  }
                  if (tp.requires_grad(b)) {
                    Matrix gb = g;
                    const Matrix& av = a.value();
                    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= av[i];
                    tp.accumulate(b, gb);
                  }
                });
}

/// max(x, 0); the subgradient at exactly 0 is 0.
inline Var relu(Var a) {
  Tape& t = *a.tape;
  Matrix out = a.value();
  double margin = std::numeric_limits<double>::infinity();
  for (double& x : out.data()) {
    margin = std::min(margin, std::abs(x));
    x = x > 0.0 ? x : 0.0;
  }
  t.note_kink(margin);
  return t.push(Op::relu, std::move(out), t.requires_grad(a),
                [a](Tape& tp, const Matrix& g) {
                  Matrix ga = g;
                  const Matrix& av = a.value();
                  for (std::size_t i = 0; i < ga.size(); ++i)
                    if (!(av[i] > 0.0)) ga[i] = 0.0;
                  tp.accumulate(a, ga);
                });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  Matrix out = a.value();
  out *= s;
  return t.push(Op::scale, std::move(out), t.requires_grad(a),
                [a, s](Tape& tp, const Matrix& g) {
                  Matrix ga = g;
                  ga *= s;
                  tp.accumulate(a, ga);
                });
}

/// a scaled by the 1×1 variable s.
inline Var scale_by(Var a, Var s) {
  Tape& t = detail::same_tape(a, s, "scale_by");
  if (s.rows() != 1 || s.cols() != 1) {
    throw ShapeError("scale_by: scale must be 1x1, got " + s.value().shape());
  }
  Matrix out = a.value();
  out *= s.value()[0];
  return t.push(Op::scale_by, std::move(out), t.any_requires_grad({a, s}),
                [a, s](Tape& tp, const Matrix& g) {
                  if (tp.requires_grad(a)) {
                    Matrix ga = g;
                    ga *= s.value()[0];
                    tp.accumulate(a, ga);
                  }
                  if (tp.requires_grad(s)) {
                    double acc = 0.0;
                    const Matrix& av = a.value();
                    for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
                    tp.accumulate(s, Matrix(1, 1, acc));
                  }
                });
}

/// x + 1·row, broadcasting a 1×c row over every row of x.
inline Var add_row(Var x, Var row) {
  Tape& t = detail::same_tape(x, row, "add_row");
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw ShapeError("add_row: cannot broadcast " + row.value().shape() + " over " +
                     x.value().shape());
  }
  Matrix out = x.value();
  const Matrix& rv = row.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += rv[j];
  return t.push(Op::add_row, std::move(out), t.any_requires_grad({x, row}),
                [x, row](Tape& tp, const Matrix& g) {
                  tp.accumulate(x, g);
                  if (tp.requires_grad(row)) {
                    Matrix gr(1, g.cols());
                    for (std::size_t i = 0; i < g.rows(); ++i)
                      for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g(i, j);
                    tp.accumulate(row, gr);
                  }
                });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Var sum(Var a) {
  Tape& t = *a.tape;
  double acc = 0.0;
  for (double x : a.value().data()) acc += x;
  return t.push(Op::sum, Matrix(1, 1, acc), t.requires_grad(a),
                [a](Tape& tp, const Matrix& g) {
                  tp.accumulate(a, Matrix(a.rows(), a.cols(), g[0]));
                });
}

inline Var column_sum(Var a) {
  Tape& t = *a.tape;
  const Matrix& av = a.value();
  Matrix out(1, av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) out[j] += av(i, j);
  return t.push(Op::column_sum, std::move(out), t.requires_grad(a),
                [a](Tape& tp, const Matrix& g) {
                  Matrix ga(a.rows(), a.cols());
                  for (std::size_t i = 0; i < ga.rows(); ++i)
                    for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) = g[j];
                  tp.accumulate(a, ga);
                });
}

inline Var column_mean(Var a) {
  Tape& t = *a.tape;
  const Matrix& av = a.value();
  if (av.rows() == 0) throw EmptyInputError("column_mean: no rows");
  const double inv = 1.0 / static_cast<double>(av.rows());
  Matrix out(1, av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) out[j] += av(i, j);
  out *= inv;
  return t.push(Op::column_mean, std::move(out), t.requires_grad(a),
                [a, inv](Tape& tp, const Matrix& g) {
                  Matrix ga(a.rows(), a.cols());
                  for (std::size_t i = 0; i < ga.rows(); ++i)
                    for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) = g[j] * inv;
                  tp.accumulate(a, ga);
                });
}

/// Columnwise max; the gradient goes to the first row attaining the max.
inline Var column_max(Var a) {
  Tape& t = *a.tape;
  const Matrix& av = a.value();
  if (av.rows() == 0) throw EmptyInputError("column_max: no rows");
  Matrix out(1, av.cols());
  std::vector<std::size_t> arg(av.cols(), 0);
  for (std::size_t j = 0; j < av.cols(); ++j) {
    out[j] = av(0, j);
    double second = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < av.rows(); ++i) {
      if (av(i, j) > out[j]) {
        second = out[j];
        out[j] = av(i, j);
        arg[j] = i;
      } else {
        second = std::max(second, av(i, j));
      }
    }
    // exact ties come from identical subcomputations and stay tied
    if (out[j] > second) t.note_kink(out[j] - second);
  }
  return t.push(Op::column_max, std::move(out), t.requires_grad(a),
                [a, arg = std::move(arg)](Tape& tp, const Matrix& g) {
                  Matrix ga(a.rows(), a.cols());
                  for (std::size_t j = 0; j < ga.cols(); ++j) ga(arg[j], j) = g[j];
                  tp.accumulate(a, ga);
                });
}

/// x minus its row mean, i.e. (I − 11ᵀ/n)·x.
inline Var center_columns(Var a) {
  Tape& t = *a.tape;
  const Matrix& av = a.value();
  if (av.rows() == 0) throw EmptyInputError("center_columns: no rows");
  const double inv = 1.0 / static_cast<double>(av.rows());
  Matrix mean(1, av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) mean[j] += av(i, j);
  mean *= inv;
  Matrix out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) -= mean[j];
  return t.push(Op::center_columns, std::move(out), t.requires_grad(a),
                [a, inv](Tape& tp, const Matrix& g) {
                  Matrix gm(1, g.cols());
                  for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j) gm[j] += g(i, j);
                  gm *= inv;
                  Matrix ga = g;
                  for (std::size_t i = 0; i < ga.rows(); ++i)
                    for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) -= gm[j];
                  tp.accumulate(a, ga);
                });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  Tape& t = *a.tape;
  const Matrix& av = a.value();
  if (begin + count > av.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of " + av.shape());
  }
  std::vector<double> buf(av.data().begin() + static_cast<std::ptrdiff_t>(begin * av.cols()),
                          av.data().begin() +
                              static_cast<std::ptrdiff_t>((begin + count) * av.cols()));
  return t.push(Op::slice_rows, Matrix(count, av.cols(), std::move(buf)), t.requires_grad(a),
                [a, begin](Tape& tp, const Matrix& g) {
                  Matrix* ga = tp.grad_buffer(a);
                  if (ga == nullptr) return;
                  auto dst = ga->data().subspan(begin * g.cols(), g.size());
                  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                });
}

inline Var vstack(std::span<const Var> parts) {
  if (parts.empty()) throw EmptyInputError("vstack: no operands");
  Tape& t = *parts[0].tape;
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  bool needs = false;
  for (Var p : parts) {
    detail::same_tape(parts[0], p, "vstack");
    if (p.cols() != cols) {
      throw ShapeError("vstack: column mismatch " + parts[0].value().shape() + " vs " +
                       p.value().shape());
    }
    rows += p.rows();
    needs = needs || t.requires_grad(p);
  }
  std::vector<double> buf;
  buf.reserve(rows * cols);
  for (Var p : parts) buf.insert(buf.end(), p.value().data().begin(), p.value().data().end());
  std::vector<Var> owned(parts.begin(), parts.end());
  return t.push(Op::vstack, Matrix(rows, cols, std::move(buf)), needs,
                [owned = std::move(owned)](Tape& tp, const Matrix& g) {
                  std::size_t off = 0;
                  for (Var p : owned) {
                    const std::size_t n = p.value().size();
                    if (tp.requires_grad(p)) {
                      std::vector<double> part(g.data().begin() + static_cast<std::ptrdiff_t>(off),
                                               g.data().begin() +
                                                   static_cast<std::ptrdiff_t>(off + n));
                      tp.accumulate(p, Matrix(p.rows(), p.cols(), std::move(part)));
                    }
                    off += n;
                  }
                });
}

/// Column concatenation.
inline Var hstack(std::span<const Var> parts) {
  if (parts.empty()) throw EmptyInputError("hstack: no operands");
  Tape& t = *parts[0].tape;
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  bool needs = false;
  for (Var p : parts) {
    detail::same_tape(parts[0], p, "hstack");
    if (p.rows() != rows) {
      throw ShapeError("hstack: row mismatch " + parts[0].value().shape() + " vs " +
                       p.value().shape());
    }
    cols += p.cols();
    needs = needs || t.requires_grad(p);
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  for (Var p : parts) {
    const Matrix& pv = p.value();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < pv.cols(); ++j) out(i, off + j) = pv(i, j);
    off += pv.cols();
  }
  std::vector<Var> owned(parts.begin(), parts.end());
  return t.push(Op::hstack, std::move(out), needs,
                [owned = std::move(owned)](Tape& tp, const Matrix& g) {
                  std::size_t off = 0;
                  for (Var p : owned) {
                    const std::size_t c = p.cols();
                    if (tp.requires_grad(p)) {
                      Matrix gp(g.rows(), c);
                      for (std::size_t i = 0; i < g.rows(); ++i)
                        for (std::size_t j = 0; j < c; ++j) gp(i, j) = g(i, off + j);
                      tp.accumulate(p, gp);
                    }
                    off += c;
                  }
                });
}

/// Row-major flatten into a 1×(rows·cols) row.
inline Var flatten(Var a) {
  Tape& t = *a.tape;
  const Matrix& av = a.value();
  std::vector<double> buf(av.data().begin(), av.data().end());
  return t.push(Op::flatten, Matrix(1, av.size(), std::move(buf)), t.requires_grad(a),
                [a](Tape& tp, const Matrix& g) {
                  std::vector<double> buf(g.data().begin(), g.data().end());
                  tp.accumulate(a, Matrix(a.rows(), a.cols(), std::move(buf)));
                });
}

// ---------------------------------------------------------------------------
// Normalisation and losses

/// Softmax over the entries of an n×1 column, stabilised by subtracting the max.
inline Var softmax_columns(Var v) {
  Tape& t = *v.tape;
  const Matrix& x = v.value();
  if (x.size() == 0) throw EmptyInputError("softmax_columns: empty input");
  if (x.cols() != 1) {
    throw ShapeError("softmax_columns: expected a single column, got " + x.shape());
  }
  const double mx = *std::max_element(x.data().begin(), x.data().end());
  Matrix out(x.rows(), 1);
  double z = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    out[i] = std::exp(x[i] - mx);
    z += out[i];
  }
  out *= 1.0 / z;
  Matrix s = out;
  return t.push(Op::softmax_columns, std::move(out), t.requires_grad(v),
                [v, s = std::move(s)](Tape& tp, const Matrix& g) {
                  double dot = 0.0;
                  for (std::size_t i = 0; i < s.size(); ++i) dot += s[i] * g[i];
                  Matrix gv(s.rows(), 1);
                  for (std::size_t i = 0; i < s.size(); ++i) gv[i] = s[i] * (g[i] - dot);
                  tp.accumulate(v, gv);
                });
}

/// Per-column batch normalisation over the rows of x. In train mode the batch
/// statistics (biased variance) are used and the running statistics are
/// updated with `stats.momentum` (unbiased variance); eval mode uses the
/// running statistics.
inline Var batch_norm(Var x, Var gamma, Var beta, RunningStats& stats, Mode mode) {
  Tape& t = detail::same_tape(x, gamma, "batch_norm");
  detail::same_tape(x, beta, "batch_norm");
  const Matrix& xv = x.value();
  const std::size_t n = xv.rows(), c = xv.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c ||
      stats.mean.cols() != c) {
    throw ShapeError("batch_norm: affine/statistics width does not match input " + xv.shape());
  }
  const Matrix& gv = gamma.value();
  const Matrix& bv = beta.value();
  const double eps = stats.eps;
  Matrix out(n, c);

  if (mode == Mode::eval) {
    Matrix inv_std(1, c);
    for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(stats.var[j] + eps);
    Matrix xhat(n, c);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        xhat(i, j) = (xv(i, j) - stats.mean[j]) * inv_std[j];
        out(i, j) = gv[j] * xhat(i, j) + bv[j];
      }
    return t.push(Op::batch_norm, std::move(out), t.any_requires_grad({x, gamma, beta}),
                  [x, gamma, beta, inv_std, xhat = std::move(xhat)](Tape& tp, const Matrix& g) {
                    const Matrix& gv = gamma.value();
                    const std::size_t n = g.rows(), c = g.cols();
                    if (tp.requires_grad(x)) {
                      Matrix gx(n, c);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < c; ++j) gx(i, j) = g(i, j) * gv[j] * inv_std[j];
                      tp.accumulate(x, gx);
                    }
                    Matrix gg(1, c), gb(1, c);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < c; ++j) {
                        gg[j] += g(i, j) * xhat(i, j);
                        gb[j] += g(i, j);
                      }
                    tp.accumulate(gamma, gg);
                    tp.accumulate(beta, gb);
                  });
  }

  if (n < 2) {
    throw DegenerateBatchError("batch_norm: train mode needs at least 2 rows, got " +
                               std::to_string(n));
  }
  Matrix mean(1, c), var(1, c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) mean[j] += xv(i, j);
  mean *= 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = xv(i, j) - mean[j];
      var[j] += d * d;
    }
  var *= 1.0 / static_cast<double>(n);
  Matrix inv_std(1, c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  Matrix xhat(n, c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      xhat(i, j) = (xv(i, j) - mean[j]) * inv_std[j];
      out(i, j) = gv[j] * xhat(i, j) + bv[j];
    }
  const double m = stats.momentum;
  const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
  for (std::size_t j = 0; j < c; ++j) {
    stats.mean[j] = (1.0 - m) * stats.mean[j] + m * mean[j];
    stats.var[j] = (1.0 - m) * stats.var[j] + m * var[j] * unbias;
  }
  return t.push(
      Op::batch_norm, std::move(out), t.any_requires_grad({x, gamma, beta}),
      [x, gamma, beta, inv_std, xhat = std::move(xhat)](Tape& tp, const Matrix& g) {
        const Matrix& gv = gamma.value();
        const std::size_t n = g.rows(), c = g.cols();
        Matrix gg(1, c), gb(1, c);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            gg[j] += g(i, j) * xhat(i, j);
            gb[j] += g(i, j);
          }
        if (tp.requires_grad(x)) {
          // dx = γ/(nσ) · (n·dy − Σdy − x̂·Σ(dy·x̂))
          Matrix gx(n, c);
          const double nn = static_cast<double>(n);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j)
              gx(i, j) = gv[j] * inv_std[j] / nn *
                         (nn * g(i, j) - gb[j] - xhat(i, j) * gg[j]);
          tp.accumulate(x, gx);
        }
        tp.accumulate(gamma, gg);
        tp.accumulate(beta, gb);
      });
}

/// Inverted dropout: survivors are scaled by 1/(1−rate) in train mode; eval
/// mode and rate 0 are the identity.
inline Var dropout(Var x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0) || rate >= 1.0) {
    throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (mode == Mode::eval || rate == 0.0) return x;
  Tape& t = *x.tape;
  const Matrix& xv = x.value();
  Matrix mask(xv.rows(), xv.cols());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& m : mask.data()) m = rng.uniform() >= rate ? keep_scale : 0.0;
  Matrix out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return t.push(Op::dropout, std::move(out), t.requires_grad(x),
                [x, mask = std::move(mask)](Tape& tp, const Matrix& g) {
                  Matrix gx = g;
                  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= mask[i];
                  tp.accumulate(x, gx);
                });
}

/// Mean negative log-softmax of the true class over the rows of `logits`.
inline Var cross_entropy(Var logits, std::span<const int> labels) {
  Tape& t = *logits.tape;
  const Matrix& z = logits.value();
  const std::size_t b = z.rows(), c = z.cols();
  if (labels.size() != b) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     z.shape() + " logits");
  }
  if (b == 0) throw EmptyInputError("cross_entropy: empty batch");
  Matrix probs(b, c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw LabelError("cross_entropy: label " + std::to_string(labels[i]) +
                       " outside [0, " + std::to_string(c) + ")");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, z(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs(i, j) = std::exp(z(i, j) - mx);
      s += probs(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) probs(i, j) /= s;
    loss += -(z(i, static_cast<std::size_t>(labels[i])) - mx - std::log(s));
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  loss *= inv_b;
  std::vector<int> lab(labels.begin(), labels.end());
  return t.push(Op::cross_entropy, Matrix(1, 1, loss), t.requires_grad(logits),
                [logits, probs = std::move(probs), lab = std::move(lab), inv_b](
                    Tape& tp, const Matrix& g) {
                  Matrix gz = probs;
                  for (std::size_t i = 0; i < gz.rows(); ++i)
                    gz(i, static_cast<std::size_t>(lab[i])) -= 1.0;
                  gz *= g[0] * inv_b;
                  tp.accumulate(logits, gz);
                });
}

// ---------------------------------------------------------------------------
// Message passing

/// Neighbourhood aggregation over a sparse adjacency.
///  sum:  (1+ε)·h_v + Σ_{u∈N(v)} h_u   (ε = 0 when `eps` is null)
///  mean: mean of h over {v} ∪ N(v)
///  max:  columnwise max of h over {v} ∪ N(v); ties resolve to v, then to
///        the earliest neighbour.
inline Var aggregate(Var h, const Adjacency& adj, Aggregate mode, const Var* eps = nullptr) {
  Tape& t = *h.tape;
  const Matrix& hv = h.value();
  if (hv.rows() != adj.num_nodes) {
    throw ShapeError("aggregate: representation rows " + std::to_string(hv.rows()) +
                     " != node count " + std::to_string(adj.num_nodes));
  }
  if (eps != nullptr && mode != Aggregate::sum) {
    throw ContractError("aggregate: epsilon is only defined for sum aggregation");
  }
  const std::size_t n = hv.rows(), f = hv.cols();
  Matrix out(n, f);
  bool needs = t.requires_grad(h);

  if (mode == Aggregate::sum) {
    const double self = 1.0 + (eps != nullptr ? eps->value()[0] : 0.0);
    if (eps != nullptr) needs = needs || t.requires_grad(*eps);
    for (std::size_t v = 0; v < n; ++v) {
      auto o = out.row_span(v);
      auto hs = hv.row_span(v);
      for (std::size_t j = 0; j < f; ++j) o[j] = self * hs[j];
      for (std::size_t u : adj.of(v)) {
        auto hu = hv.row_span(u);
        for (std::size_t j = 0; j < f; ++j) o[j] += hu[j];
      }
    }
    std::optional<Var> e;
    if (eps != nullptr) e = *eps;
    return t.push(Op::aggregate, std::move(out), needs,
                  [h, &adj, e, self](Tape& tp, const Matrix& g) {
                    if (Matrix* gh = tp.grad_buffer(h)) {
                      const std::size_t f = g.cols();
                      for (std::size_t v = 0; v < g.rows(); ++v) {
                        auto gv = g.row_span(v);
                        auto dst = gh->row_span(v);
                        for (std::size_t j = 0; j < f; ++j) dst[j] += self * gv[j];
                        for (std::size_t u : adj.of(v)) {
                          auto du = gh->row_span(u);
                          for (std::size_t j = 0; j < f; ++j) du[j] += gv[j];
                        }
                      }
                    }
                    if (e && tp.requires_grad(*e)) {
                      double acc = 0.0;
                      const Matrix& hv = h.value();
                      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * hv[i];
                      tp.accumulate(*e, Matrix(1, 1, acc));
                    }
                  });
  }

  if (mode == Aggregate::mean) {
    for (std::size_t v = 0; v < n; ++v) {
      auto o = out.row_span(v);
      auto hs = hv.row_span(v);
      for (std::size_t j = 0; j < f; ++j) o[j] = hs[j];
      for (std::size_t u : adj.of(v)) {
        auto hu = hv.row_span(u);
        for (std::size_t j = 0; j < f; ++j) o[j] += hu[j];
      }
      const double inv = 1.0 / static_cast<double>(1 + adj.degree(v));
      for (double& x : o) x *= inv;
    }
    return t.push(Op::aggregate, std::move(out), needs, [h, &adj](Tape& tp, const Matrix& g) {
      Matrix* gh = tp.grad_buffer(h);
      if (gh == nullptr) return;
      const std::size_t f = g.cols();
      for (std::size_t v = 0; v < g.rows(); ++v) {
        const double inv = 1.0 / static_cast<double>(1 + adj.degree(v));
        auto gv = g.row_span(v);
        auto dst = gh->row_span(v);
        for (std::size_t j = 0; j < f; ++j) dst[j] += inv * gv[j];
        for (std::size_t u : adj.of(v)) {
          auto du = gh->row_span(u);
          for (std::size_t j = 0; j < f; ++j) du[j] += inv * gv[j];
        }
      }
    });
  }

  std::vector<std::size_t> arg(n * f);
  for (std::size_t v = 0; v < n; ++v) {
    auto o = out.row_span(v);
    auto hs = hv.row_span(v);
    for (std::size_t j = 0; j < f; ++j) {
      o[j] = hs[j];
      arg[v * f + j] = v;
    }
    std::vector<double> second(f, -std::numeric_limits<double>::infinity());
    for (std::size_t u : adj.of(v)) {
      auto hu = hv.row_span(u);
      for (std::size_t j = 0; j < f; ++j) {
        if (hu[j] > o[j]) {
          second[j] = o[j];
          o[j] = hu[j];
          arg[v * f + j] = u;
        } else {
          second[j] = std::max(second[j], hu[j]);
        }
      }
    }
    for (std::size_t j = 0; j < f; ++j)
      if (o[j] > second[j]) t.note_kink(o[j] - second[j]);
  }
  return t.push(Op::aggregate, std::move(out), needs,
                [h, arg = std::move(arg)](Tape& tp, const Matrix& g) {
                  Matrix* gh = tp.grad_buffer(h);
                  if (gh == nullptr) return;
                  const std::size_t f = g.cols();
                  for (std::size_t v = 0; v < g.rows(); ++v)
                    for (std::size_t j = 0; j < f; ++j) (*gh)(arg[v * f + j], j) += g(v, j);
                });
}

}  // namespace sopool::ag
