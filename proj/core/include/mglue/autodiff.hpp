#pragma once

// Reverse-mode differentiation over dense rank-<=2 tensors.
//
// A Tape owns every value produced during one forward pass. Var is a cheap
// handle (tape pointer + node index). Nodes are "tracked" when they are
// parameter leaves or depend on one; constants are untracked and never receive
// gradients. Nodes are appended in evaluation order, so the tape is
// topologically sorted by construction.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "mglue/matrix.hpp"

namespace mglue {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  /// True when gradients can flow to this node from a leaf.
  bool tracked() const;
  double item() const { return value().item(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients keyed by node id. Untouched tracked nodes report zeros.
class Gradients {
 public:
  Gradients(const Tape* tape, std::vector<Matrix> grads) : tape_(tape), grads_(std::move(grads)) {}
  Matrix operator[](Var v) const;

 private:
  const Tape* tape_;
  std::vector<Matrix> grads_;
};

class Tape {
 public:
  using Backward = std::function<void(const Matrix& grad_out, std::vector<Matrix>& grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable leaf.
  Var leaf(Matrix value);
  Var constant(Matrix value);
  Var constant_scalar(double v) { return constant(Matrix::scalar(v)); }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool tracked(std::size_t id) const { return nodes_[id].tracked; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Records a node. `backward` is only kept when some input is tracked.
  Var record(Matrix value, std::span<const Var> inputs, Backward backward);

  /// Reverse sweep from a scalar node on this tape.
  Gradients backward(Var loss) const;

  /// Adds `g` into grads[id] if that node is tracked.
  void accumulate(std::vector<Matrix>& grads, std::size_t id, const Matrix& g) const;

 private:
  struct Node {
    Matrix value;
    bool tracked = false;
    Backward backward;
  };
  std::deque<Node> nodes_;  // deque: value references stay valid as the tape grows
};

// ---- primitive operation set ------------------------------------------------
// Elementwise binary ops broadcast a 1×1, 1×n or m×1 operand against the other.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);  // elementwise
Var operator/(Var a, Var b);  // elementwise
Var operator-(Var a);
// scalar broadcast
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var pow(Var a, double p);
Var relu(Var a);
Var sum(Var a);   // 1×1
Var mean(Var a);  // 1×1
Var softmax_rows(Var a);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice(Var a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1);
Var frob_sq(Var a);      // 1×1
Var dot(Var a, Var b);   // 1×1, same shapes

inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator+(Var a, double s) { return add_scalar(a, s); }
inline Var operator-(Var a, double s) { return add_scalar(a, -s); }

// ---- composites (built only from primitives) --------------------------------

/// Row sums as an m×1 column.
Var row_sums(Var a);
/// Column means as a 1×n row.
Var col_means(Var a);
/// Row-wise L2 normalization.
Var normalize_rows(Var a);
/// Trace as 1×1.
Var trace(Var a);
/// Diagonal as an n×1 column.
Var diagonal(Var a);
/// Extracts column c as n×1.
Var column(Var a, std::size_t c);
/// Euclidean/Frobenius norm as 1×1.
Var norm(Var a);
/// Mean cross entropy of row-wise logits against integer targets.
Var cross_entropy(Var logits, std::span<const int> targets);

// ---- gradient checking ------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t leaf = 0;
  std::size_t entry = 0;
  bool finite = true;
};

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Max over leaf entries of |analytic - central difference| / max(1, |central difference|).
GradCheckResult check_gradient(const ScalarFn& f, const std::vector<Matrix>& leaves, double h = 1e-5);

}  // namespace mglue
