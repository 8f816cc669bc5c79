#pragma once

// Dense 64-bit arrays and a tape-based reverse-mode differentiation engine.
//
// A Tape records every operation applied to its Vars in creation order, so
// node ids are already a topological order. backward() walks the tape in
// reverse from a scalar root. The tape is rebuilt for every evaluation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace wiseale {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Caller violated a precondition (bad flag, bad index, bad width...).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Operand shapes are incompatible for an operation.
class ShapeError : public UsageError {
 public:
  ShapeError(std::string op, std::string lhs, std::string rhs)
      : UsageError(op + ": shape mismatch " + lhs + " vs " + rhs),
        op_(std::move(op)),
        lhs_(std::move(lhs)),
        rhs_(std::move(rhs)) {}

  const std::string& op() const { return op_; }
  const std::string& lhs() const { return lhs_; }
  const std::string& rhs() const { return rhs_; }

 private:
  std::string op_;
  std::string lhs_;
  std::string rhs_;
};

/// A computation left the finite reals or a function's domain.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An input file does not follow its declared binary or text layout.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// DenseArray
// ---------------------------------------------------------------------------

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Storage is over-aligned so Eigen's kernels never branch on where the heap put a buffer;
/// otherwise the same inputs could round differently from one allocation to the next.
using AlignedValues = std::vector<double, Eigen::aligned_allocator<double>>;

/// Row-major dense array of doubles. Rank 0 is a scalar holding one value.
class DenseArray {
 public:
  DenseArray() : data_(1, 0.0) {}

  explicit DenseArray(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  DenseArray(Shape shape, const std::vector<double>& data)
      : DenseArray(std::move(shape), AlignedValues(data.begin(), data.end())) {}

  DenseArray(Shape shape, AlignedValues data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("DenseArray", shape_string(shape_),
                       "[" + std::to_string(data_.size()) + " values]");
    }
  }

  static DenseArray scalar(double v) { return DenseArray(Shape{}, std::vector<double>{v}); }

  static DenseArray vector(const std::vector<double>& values) {
    return DenseArray(Shape{values.size()}, values);
  }

  static DenseArray matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return DenseArray(Shape{rows, cols}, fill);
  }

  static DenseArray from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    AlignedValues data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw UsageError("from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return DenseArray(Shape{r, c}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::size_t rows() const {
    require_rank2("rows");
    return shape_[0];
  }
  std::size_t cols() const {
    require_rank2("cols");
    return shape_[1];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  AlignedValues& values() { return data_; }
  const AlignedValues& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<double> row(std::size_t r) {
    require_rank2("row");
    return std::span<double>(data_).subspan(r * shape_[1], shape_[1]);
  }
  std::span<const double> row(std::size_t r) const {
    require_rank2("row");
    return std::span<const double>(data_).subspan(r * shape_[1], shape_[1]);
  }

  /// The single value of a size-1 array.
  double item() const {
    if (data_.size() != 1) {
      throw ShapeError("item", shape_string(shape_), "[]");
    }
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  /// Gathers the given rows of a rank-2 array.
  DenseArray select_rows(std::span<const std::size_t> rows) const {
    require_rank2("select_rows");
    DenseArray out = DenseArray::matrix(rows.size(), shape_[1]);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] >= shape_[0]) throw UsageError("select_rows: row index out of range");
      std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(rows[i] * shape_[1]), shape_[1],
                  out.data_.begin() + static_cast<std::ptrdiff_t>(i * shape_[1]));
    }
    return out;
  }

  friend bool operator==(const DenseArray&, const DenseArray&) = default;

 private:
  void require_rank2(const char* what) const {
    if (shape_.size() != 2) throw ShapeError(what, shape_string(shape_), "[rows x cols]");
  }

  Shape shape_;
  AlignedValues data_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const DenseArray& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Inputs to log() below this are clamped, and the event is counted.
inline constexpr double kLogFloor = 1e-12;

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const DenseArray& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(DenseArray value) { return push("constant", std::move(value), {}, nullptr, false); }

  /// Registers a trainable leaf.
  Var parameter(DenseArray value) {
    Var v = push("parameter", std::move(value), {}, nullptr, true);
    parameters_.push_back(v.id);
    return v;
  }

  /// Appends an operation node. `backward` receives the gradient of the root
  /// with respect to this node's output and must route it to the inputs via
  /// accumulate(). It is skipped when no input requires a gradient.
  Var record(const char* op, DenseArray value, std::vector<std::size_t> inputs,
             BackwardFn backward) {
    bool needs = false;
    for (std::size_t in : inputs) needs = needs || nodes_.at(in).requires_grad;
    return push(op, std::move(value), std::move(inputs), needs ? std::move(backward) : nullptr,
                needs);
  }

  const DenseArray& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::size_t>& parameters() const { return parameters_; }

  /// Adds `g` into the pending gradient of node `id` (no-op for constants).
  void accumulate(std::size_t id, const DenseArray& g) {
    if (!nodes_[id].requires_grad) return;
    DenseArray& slot = grad_slot(id);
    auto dst = slot.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  /// Mutable pending gradient of node `id`, zero-initialized on first use.
  DenseArray& grad_slot(std::size_t id) {
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    if (!grads_[id].has_value) {
      grads_[id].array = DenseArray(nodes_[id].value.shape(), 0.0);
      grads_[id].has_value = true;
    }
    return grads_[id].array;
  }

  /// Reverse sweep from a scalar root. Returns one gradient per registered
  /// parameter, keyed by node id; unreached parameters get zeros.
  std::map<std::size_t, DenseArray> backward(Var root) {
    if (root.tape != this) throw UsageError("backward: root belongs to another tape");
    const DenseArray& rv = nodes_.at(root.id).value;
    if (rv.size() != 1) {
      throw UsageError("backward: root must be scalar, got shape " + shape_string(rv.shape()));
    }
    grads_.assign(nodes_.size(), {});
    grad_slot(root.id)[0] = 1.0;
    for (std::size_t id = root.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || !grads_[id].has_value) continue;
      n.backward(*this, grads_[id].array);
    }
    std::map<std::size_t, DenseArray> out;
    for (std::size_t p : parameters_) {
      out.emplace(p, grads_[p].has_value ? grads_[p].array : DenseArray(nodes_[p].value.shape()));
    }
    return out;
  }

  std::size_t clamp_count() const { return clamp_count_; }
  void note_clamps(std::size_t n) { clamp_count_ += n; }

 private:
  struct Node {
    const char* op;
    DenseArray value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad;
  };
  struct GradSlot {
    DenseArray array;
    bool has_value = false;
  };

  Var push(const char* op, DenseArray value, std::vector<std::size_t> inputs, BackwardFn backward,
           bool requires_grad) {
    nodes_.push_back(Node{op, std::move(value), std::move(inputs), std::move(backward), requires_grad});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<GradSlot> grads_;
  std::vector<std::size_t> parameters_;
  std::size_t clamp_count_ = 0;
};

inline const DenseArray& Var::value() const { return tape->value(id); }

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

inline ConstMap as_matrix(const DenseArray& a) {
  return ConstMap(a.data().data(), static_cast<Eigen::Index>(a.rows()),
                  static_cast<Eigen::Index>(a.cols()));
}
inline MutMap as_matrix(DenseArray& a) {
  return MutMap(a.data().data(), static_cast<Eigen::Index>(a.rows()),
                static_cast<Eigen::Index>(a.cols()));
}

inline void same_tape(const char* op, Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw UsageError(std::string(op) + ": operands live on different tapes");
}

inline void require_rank2(const char* op, const DenseArray& a) {
  if (a.rank() != 2) throw ShapeError(op, shape_string(a.shape()), "[rows x cols]");
}

template <typename F, typename D>
Var unary(const char* op, Var a, F f, D dfdx_given_x_y) {
  const DenseArray& x = a.value();
  DenseArray y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t in = a.id;
  return a.tape->record(op, std::move(y), {in},
                        [in, d = std::move(dfdx_given_x_y)](Tape& t, const DenseArray& g) {
                          const DenseArray& xv = t.value(in);
                          DenseArray& gi = t.grad_slot(in);
                          for (std::size_t i = 0; i < xv.size(); ++i) gi[i] += g[i] * d(xv[i]);
                        });
}

}  // namespace detail

/// Matrix product a·b, or a·bᵀ when `transpose_rhs` is set.
inline Var matmul(Var a, Var b, bool transpose_rhs = false) {
  detail::same_tape("matmul", a, b);
  const DenseArray& av = a.value();
  const DenseArray& bv = b.value();
  detail::require_rank2("matmul", av);
  detail::require_rank2("matmul", bv);
  const std::size_t inner_b = transpose_rhs ? bv.cols() : bv.rows();
  if (av.cols() != inner_b) {
    throw ShapeError(transpose_rhs ? "matmul(a, b^T)" : "matmul", shape_string(av.shape()),
                     shape_string(bv.shape()));
  }
  const std::size_t out_cols = transpose_rhs ? bv.rows() : bv.cols();
  DenseArray out = DenseArray::matrix(av.rows(), out_cols);
  if (transpose_rhs) {
    detail::as_matrix(out).noalias() = detail::as_matrix(av) * detail::as_matrix(bv).transpose();
  } else {
    detail::as_matrix(out).noalias() = detail::as_matrix(av) * detail::as_matrix(bv);
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("matmul", std::move(out), {ia, ib},
                        [ia, ib, transpose_rhs](Tape& t, const DenseArray& g) {
                          const auto gm = detail::as_matrix(g);
                          const auto am = detail::as_matrix(t.value(ia));
                          const auto bm = detail::as_matrix(t.value(ib));
                          if (t.requires_grad(ia)) {
                            auto ga = detail::as_matrix(t.grad_slot(ia));
                            if (transpose_rhs) ga.noalias() += gm * bm;
                            else ga.noalias() += gm * bm.transpose();
                          }
                          if (t.requires_grad(ib)) {
                            auto gb = detail::as_matrix(t.grad_slot(ib));
                            if (transpose_rhs) gb.noalias() += gm.transpose() * am;
                            else gb.noalias() += am.transpose() * gm;
                          }
                        });
}

/// Elementwise a + b. `b` may also match the trailing axes of `a`, in which
/// case it is broadcast over the leading axis.
inline Var add(Var a, Var b) {
  detail::same_tape("add", a, b);
  const DenseArray& av = a.value();
  const DenseArray& bv = b.value();
  const bool same = av.shape() == bv.shape();
  const bool broadcast =
      !same && av.rank() >= 1 && bv.rank() + 1 == av.rank() &&
      std::equal(bv.shape().begin(), bv.shape().end(), av.shape().begin() + 1);
  if (!same && !broadcast) throw ShapeError("add", shape_string(av.shape()), shape_string(bv.shape()));
  DenseArray out = av;
  const std::size_t inner = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % inner];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("add", std::move(out), {ia, ib}, [ia, ib, inner](Tape& t, const DenseArray& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) {
      DenseArray& gb = t.grad_slot(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::same_tape("sub", a, b);
  const DenseArray& av = a.value();
  const DenseArray& bv = b.value();
  if (av.shape() != bv.shape()) throw ShapeError("sub", shape_string(av.shape()), shape_string(bv.shape()));
  DenseArray out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("sub", std::move(out), {ia, ib}, [ia, ib](Tape& t, const DenseArray& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) {
      DenseArray& gb = t.grad_slot(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  detail::same_tape("mul", a, b);
  const DenseArray& av = a.value();
  const DenseArray& bv = b.value();
  if (av.shape() != bv.shape()) throw ShapeError("mul", shape_string(av.shape()), shape_string(bv.shape()));
  DenseArray out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("mul", std::move(out), {ia, ib}, [ia, ib](Tape& t, const DenseArray& g) {
    if (t.requires_grad(ia)) {
      DenseArray& ga = t.grad_slot(ia);
      const DenseArray& bv = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      DenseArray& gb = t.grad_slot(ib);
      const DenseArray& av = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  return detail::unary("scale", a, [s](double x) { return s * x; }, [s](double) { return s; });
}

inline Var negate(Var a) { return scale(a, -1.0); }

inline Var add_scalar(Var a, double c) {
  return detail::unary("add_scalar", a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

inline Var square(Var a) {
  return detail::unary("square", a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

inline Var tanh(Var a) {
  return detail::unary("tanh", a, [](double x) { return std::tanh(x); }, [](double x) {
    const double y = std::tanh(x);
    return 1.0 - y * y;
  });
}

inline double sigmoid_value(double x) {
  // Branches keep exp() from overflowing for large |x|.
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  return detail::unary("sigmoid", a, sigmoid_value, [](double x) {
    const double y = sigmoid_value(x);
    return y * (1.0 - y);
  });
}

inline Var exp(Var a) {
  return detail::unary("exp", a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

/// Natural log with inputs clamped at kLogFloor. Clamped entries have zero
/// derivative and are counted on the tape. Negative inputs (beyond what a
/// saturated probability can produce) are a domain error.
inline Var log(Var a) {
  const DenseArray& x = a.value();
  std::size_t clamped = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::isnan(x[i]) || x[i] < -kLogFloor) {
      throw NumericError("log: non-positive input " + std::to_string(x[i]) + " at flat index " +
                         std::to_string(i));
    }
    if (x[i] < kLogFloor) ++clamped;
  }
  a.tape->note_clamps(clamped);
  return detail::unary(
      "log", a, [](double v) { return std::log(std::max(v, kLogFloor)); },
      [](double v) { return v < kLogFloor ? 0.0 : 1.0 / v; });
}

/// Elementwise clamp to [lo, hi]; clamped entries pass no gradient and are counted.
inline Var clamp(Var a, double lo, double hi) {
  const DenseArray& x = a.value();
  std::size_t clamped = 0;
  for (double v : x.values()) clamped += (v < lo || v > hi) ? 1 : 0;
  a.tape->note_clamps(clamped);
  return detail::unary(
      "clamp", a, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v) { return (v < lo || v > hi) ? 0.0 : 1.0; });
}

/// Sum of all entries (scalar).
inline Var sum(Var a) {
  const DenseArray& x = a.value();
  double s = 0.0;
  for (double v : x.values()) s += v;
  const std::size_t in = a.id;
  return a.tape->record("sum", DenseArray::scalar(s), {in}, [in](Tape& t, const DenseArray& g) {
    DenseArray& gi = t.grad_slot(in);
    const double gv = g[0];
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += gv;
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Reduces a rank-2 array along `axis` (0: over rows -> [cols], 1: over cols -> [rows]).
inline Var sum_axis(Var a, std::size_t axis) {
  const DenseArray& x = a.value();
  detail::require_rank2("sum_axis", x);
  if (axis > 1) throw UsageError("sum_axis: axis must be 0 or 1");
  const std::size_t r = x.rows(), c = x.cols();
  DenseArray out(Shape{axis == 0 ? c : r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += x(i, j);
  }
  const std::size_t in = a.id;
  return a.tape->record("sum_axis", std::move(out), {in}, [in, axis, r, c](Tape& t, const DenseArray& g) {
    DenseArray& gi = t.grad_slot(in);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) gi(i, j) += g[axis == 0 ? j : i];
    }
  });
}

inline Var mean_axis(Var a, std::size_t axis) {
  const double n = static_cast<double>(a.value().extent(axis));
  return scale(sum_axis(a, axis), 1.0 / n);
}

/// Concatenates two rank-2 arrays with equal row counts along the last axis.
inline Var concat_last(Var a, Var b) {
  detail::same_tape("concat_last", a, b);
  const DenseArray& av = a.value();
  const DenseArray& bv = b.value();
  detail::require_rank2("concat_last", av);
  detail::require_rank2("concat_last", bv);
  if (av.rows() != bv.rows()) {
    throw ShapeError("concat_last", shape_string(av.shape()), shape_string(bv.shape()));
  }
  const std::size_t r = av.rows(), ca = av.cols(), cb = bv.cols();
  DenseArray out = DenseArray::matrix(r, ca + cb);
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(av.row(i).begin(), ca, out.row(i).begin());
    std::copy_n(bv.row(i).begin(), cb, out.row(i).begin() + static_cast<std::ptrdiff_t>(ca));
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("concat_last", std::move(out), {ia, ib},
                        [ia, ib, r, ca, cb](Tape& t, const DenseArray& g) {
                          if (t.requires_grad(ia)) {
                            DenseArray& ga = t.grad_slot(ia);
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < ca; ++j) ga(i, j) += g(i, j);
                          }
                          if (t.requires_grad(ib)) {
                            DenseArray& gb = t.grad_slot(ib);
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < cb; ++j) gb(i, j) += g(i, ca + j);
                          }
                        });
}

/// Columns [begin, end) of a rank-2 array.
inline Var slice_last(Var a, std::size_t begin, std::size_t end) {
  const DenseArray& x = a.value();
  detail::require_rank2("slice_last", x);
  if (begin > end || end > x.cols()) {
    throw ShapeError("slice_last", shape_string(x.shape()),
                     "[" + std::to_string(begin) + ":" + std::to_string(end) + "]");
  }
  const std::size_t r = x.rows(), w = end - begin;
  DenseArray out = DenseArray::matrix(r, w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out(i, j) = x(i, begin + j);
  const std::size_t in = a.id;
  return a.tape->record("slice_last", std::move(out), {in}, [in, r, w, begin](Tape& t, const DenseArray& g) {
    DenseArray& gi = t.grad_slot(in);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) gi(i, begin + j) += g(i, j);
  });
}

// ---------------------------------------------------------------------------
// Finite-difference certification
// ---------------------------------------------------------------------------

/// Builds a scalar loss on `tape` from parameter Vars (in the order given).
/// Must be deterministic: any noise is fixed outside the builder.
using LossBuilder = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Every coordinate is checked up to this count; beyond it a seeded subset.
  std::size_t max_coordinates = 500;
  std::uint64_t seed = 0;
  /// Relative error uses max(|analytic|, |numeric|, denominator_floor).
  double denominator_floor = 1e-6;
};

struct CoordinateCheck {
  std::size_t tensor = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct CheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  CoordinateCheck worst;
  std::vector<CoordinateCheck> failures;

  bool passed() const { return failures.empty(); }
};

inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Evaluates the loss only.
inline double evaluate_loss(const LossBuilder& build, const std::vector<DenseArray>& params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.parameter(p));
  return build(tape, vars).value().item();
}

/// Reverse-mode gradient of the loss for each parameter tensor.
inline std::vector<DenseArray> analytic_gradient(const LossBuilder& build,
                                                 const std::vector<DenseArray>& params,
                                                 double* loss_out = nullptr) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.parameter(p));
  Var root = build(tape, vars);
  if (loss_out) *loss_out = root.value().item();
  auto grads = tape.backward(root);
  std::vector<DenseArray> out;
  out.reserve(vars.size());
  for (const Var& v : vars) out.push_back(std::move(grads.at(v.id)));
  return out;
}

/// Compares a supplied gradient against central differences of the loss.
inline CheckReport compare_with_finite_differences(const LossBuilder& build,
                                                   std::vector<DenseArray> params,
                                                   const std::vector<DenseArray>& gradient,
                                                   const GradCheckOptions& opt = {}) {
  if (!(opt.step > 0)) throw UsageError("finite_diff_check: step must be > 0");
  if (gradient.size() != params.size()) throw UsageError("finite_diff_check: gradient/parameter count mismatch");

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (gradient[t].shape() != params[t].shape()) {
      throw ShapeError("finite_diff_check", shape_string(gradient[t].shape()),
                       shape_string(params[t].shape()));
    }
    for (std::size_t i = 0; i < params[t].size(); ++i) coords.emplace_back(t, i);
  }
  if (coords.size() > opt.max_coordinates) {
    std::mt19937_64 rng(opt.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opt.max_coordinates);
    std::sort(coords.begin(), coords.end());
  }

  CheckReport report;
  for (auto [t, i] : coords) {
    const double saved = params[t][i];
    params[t][i] = saved + opt.step;
    const double up = evaluate_loss(build, params);
    params[t][i] = saved - opt.step;
    const double down = evaluate_loss(build, params);
    params[t][i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_check: non-finite loss when perturbing tensor " +
                         std::to_string(t) + " coordinate " + std::to_string(i));
    }
    CoordinateCheck c{t, i, gradient[t][i], (up - down) / (2.0 * opt.step), 0.0};
    c.rel_error = relative_error(c.analytic, c.numeric, opt.denominator_floor);
    ++report.checked;
    if (c.rel_error >= report.max_rel_error) {
      report.max_rel_error = c.rel_error;
      report.worst = c;
    }
    if (c.rel_error > opt.tolerance) report.failures.push_back(c);
  }
  return report;
}

/// Certifies the reverse-mode gradient of `build` at `params`.
inline CheckReport finite_diff_check(const LossBuilder& build, const std::vector<DenseArray>& params,
                                     const GradCheckOptions& opt = {}) {
  return compare_with_finite_differences(build, params, analytic_gradient(build, params), opt);
}

}  // namespace wiseale
