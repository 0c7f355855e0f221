#include "mglue/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mglue {

const Matrix& Var::value() const {
  require(tape_ != nullptr, "Var: use of an invalid handle");
  return tape_->value(id_);
}

bool Var::tracked() const { return tape_ != nullptr && tape_->tracked(id_); }

Matrix Gradients::operator[](Var v) const {
  require(v.tape() == tape_, "Gradients: variable from another tape");
  const Matrix& g = grads_[v.id()];
  if (g.empty()) return Matrix(v.rows(), v.cols());
  return g;
}

Var Tape::leaf(Matrix value) {
  nodes_.push_back(Node{std::move(value), true, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::span<const Var> inputs, Backward backward) {
  bool tracked = false;
  for (const Var& in : inputs) {
    require(in.tape() == this, "Tape::record: input belongs to another tape");
    tracked = tracked || nodes_[in.id()].tracked;
  }
  nodes_.push_back(Node{std::move(value), tracked, tracked ? std::move(backward) : Backward{}});
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::vector<Matrix>& grads, std::size_t id, const Matrix& g) const {
  if (!nodes_[id].tracked) return;
  Matrix& dst = grads[id];
  if (dst.empty()) {
    dst = g;
  } else {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }
}

Gradients Tape::backward(Var loss) const {
  require(loss.tape() == this, "backward: loss belongs to another tape");
  const Matrix& lv = nodes_[loss.id()].value;
  require(lv.rows() == 1 && lv.cols() == 1, "backward: loss must be scalar (1x1), got " + shape_str(lv));
  std::vector<Matrix> grads(nodes_.size());
  if (!nodes_[loss.id()].tracked) return Gradients(this, std::move(grads));
  grads[loss.id()] = Matrix::scalar(1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (!n.backward || grads[i].empty()) continue;
    n.backward(grads[i], grads);
  }
  return Gradients(this, std::move(grads));
}

namespace {

Tape& tape_of(Var a) {
  require(a.valid(), "operation on an invalid Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  require(a.valid() && b.valid(), "operation on an invalid Var");
  require(a.tape() == b.tape(), "operands live on different tapes");
  return *a.tape();
}

struct BroadcastShape {
  std::size_t rows, cols;
};

BroadcastShape broadcast_shape(const Matrix& a, const Matrix& b, const char* op) {
  auto dim = [&](std::size_t x, std::size_t y) -> std::size_t {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    throw ContractError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
  };
  return {dim(a.rows(), b.rows()), dim(a.cols(), b.cols())};
}

inline double bget(const Matrix& m, std::size_t i, std::size_t j) {
  return m(m.rows() == 1 ? 0 : i, m.cols() == 1 ? 0 : j);
}

// Sums a broadcast gradient back down to the operand's shape.
Matrix reduce_to(const Matrix& g, std::size_t rows, std::size_t cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j) out(rows == 1 ? 0 : i, cols == 1 ? 0 : j) += g(i, j);
  return out;
}

template <class F>
Matrix elementwise(const Matrix& a, const Matrix& b, BroadcastShape s, F f) {
  Matrix out(s.rows, s.cols);
  for (std::size_t i = 0; i < s.rows; ++i)
    for (std::size_t j = 0; j < s.cols; ++j) out(i, j) = f(bget(a, i, j), bget(b, i, j));
  return out;
}

template <class F>
Matrix map(const Matrix& a, F f) {
  Matrix out = a;
  for (auto& v : out.values()) v = f(v);
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  Matrix v = mglue::matmul(a.value(), b.value());
  const Var in[] = {a, b};
  return t.record(std::move(v), in, [&t, a, b](const Matrix& g, std::vector<Matrix>& grads) {
    if (a.tracked()) t.accumulate(grads, a.id(), mglue::matmul(g, b.value().transposed()));
    if (b.tracked()) t.accumulate(grads, b.id(), mglue::matmul(a.value().transposed(), g));
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  const Var in[] = {a};
  return t.record(a.value().transposed(), in, [&t, a](const Matrix& g, std::vector<Matrix>& grads) {
    t.accumulate(grads, a.id(), g.transposed());
  });
}

Var operator+(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const auto s = broadcast_shape(a.value(), b.value(), "add");
  Matrix v = elementwise(a.value(), b.value(), s, [](double x, double y) { return x + y; });
  const Var in[] = {a, b};
  return t.record(std::move(v), in, [&t, a, b](const Matrix& g, std::vector<Matrix>& grads) {
    if (a.tracked()) t.accumulate(grads, a.id(), reduce_to(g, a.rows(), a.cols()));
    if (b.tracked()) t.accumulate(grads, b.id(), reduce_to(g, b.rows(), b.cols()));
  });
}

Var operator-(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const auto s = broadcast_shape(a.value(), b.value(), "sub");
  Matrix v = elementwise(a.value(), b.value(), s, [](double x, double y) { return x - y; });
  const Var in[] = {a, b};
  return t.record(std::move(v), in, [&t, a, b](const Matrix& g, std::vector<Matrix>& grads) {
    if (a.tracked()) t.accumulate(grads, a.id(), reduce_to(g, a.rows(), a.cols()));
    if (b.tracked()) t.accumulate(grads, b.id(), reduce_to(-1.0 * g, b.rows(), b.cols()));
  });
}

Var operator*(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const auto s = broadcast_shape(a.value(), b.value(), "mul");
  Matrix v = elementwise(a.value(), b.value(), s, [](double x, double y) { return x * y; });
  const Var in[] = {a, b};
  return t.record(std::move(v), in, [&t, a, b, s](const Matrix& g, std::vector<Matrix>& grads) {
    if (a.tracked()) {
      Matrix ga = elementwise(g, b.value(), s, [](double x, double y) { return x * y; });
      t.accumulate(grads, a.id(), reduce_to(ga, a.rows(), a.cols()));
    }
    if (b.tracked()) {
      Matrix gb = elementwise(g, a.value(), s, [](double x, double y) { return x * y; });
      t.accumulate(grads, b.id(), reduce_to(gb, b.rows(), b.cols()));
    }
  });
}

Var operator/(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const auto s = broadcast_shape(a.value(), b.value(), "div");
  Matrix v = elementwise(a.value(), b.value(), s, [](double x, double y) { return x / y; });
  const Var in[] = {a, b};
  return t.record(std::move(v), in, [&t, a, b, s](const Matrix& g, std::vector<Matrix>& grads) {
    if (a.tracked()) {
      Matrix ga = elementwise(g, b.value(), s, [](double x, double y) { return x / y; });
      t.accumulate(grads, a.id(), reduce_to(ga, a.rows(), a.cols()));
    }
    if (b.tracked()) {
      Matrix gb(s.rows, s.cols);
      for (std::size_t i = 0; i < s.rows; ++i)
        for (std::size_t j = 0; j < s.cols; ++j) {
          const double y = bget(b.value(), i, j);
          gb(i, j) = -g(i, j) * bget(a.value(), i, j) / (y * y);
        }
      t.accumulate(grads, b.id(), reduce_to(gb, b.rows(), b.cols()));
    }
  });
}

Var operator-(Var a) { return scale(a, -1.0); }

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  const Var in[] = {a};
  return t.record(s * a.value(), in, [&t, a, s](const Matrix& g, std::vector<Matrix>& grads) {
    t.accumulate(grads, a.id(), s * g);
  });
}

Var add_scalar(Var a, double s) {
  Tape& t = tape_of(a);
  const Var in[] = {a};
  return t.record(map(a.value(), [s](double x) { return x + s; }), in,
                  [&t, a](const Matrix& g, std::vector<Matrix>& grads) { t.accumulate(grads, a.id(), g); });
}

Var exp(Var a) {
  Tape& t = tape_of(a);
  const Var in[] = {a};
  Matrix v = map(a.value(), [](double x) { return std::exp(x); });
  const std::size_t out_id = t.size();
  return t.record(std::move(v), in, [&t, a, out_id](const Matrix& g, std::vector<Matrix>& grads) {
    const Matrix& y = t.value(out_id);
    Matrix ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= y[i];
    t.accumulate(grads, a.id(), ga);
  });
}

Var log(Var a) {
  Tape& t = tape_of(a);
  const auto& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!(x[i] > 0.0)) throw DomainError("log of non-positive value " + std::to_string(x[i]), i);
  const Var in[] = {a};
  return t.record(map(x, [](double v) { return std::log(v); }), in,
                  [&t, a](const Matrix& g, std::vector<Matrix>& grads) {
                    Matrix ga = g;
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] /= a.value()[i];
                    t.accumulate(grads, a.id(), ga);
                  });
}

Var sqrt(Var a) {
  Tape& t = tape_of(a);
  const auto& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!(x[i] > 0.0)) throw DomainError("sqrt of non-positive value " + std::to_string(x[i]), i);
  const Var in[] = {a};
  const std::size_t out_id = t.size();
  return t.record(map(x, [](double v) { return std::sqrt(v); }), in,
                  [&t, a, out_id](const Matrix& g, std::vector<Matrix>& grads) {
                    const Matrix& y = t.value(out_id);
                    Matrix ga = g;
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= 0.5 / y[i];
                    t.accumulate(grads, a.id(), ga);
                  });
}

Var pow(Var a, double p) {
  Tape& t = tape_of(a);
  const auto& x = a.value();
  const bool integral = std::floor(p) == p;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!integral && !(x[i] > 0.0)) throw DomainError("non-integer power of non-positive value", i);
    if (integral && p < 0 && x[i] == 0.0) throw DomainError("negative power of zero", i);
  }
  const Var in[] = {a};
  return t.record(map(x, [p](double v) { return std::pow(v, p); }), in,
                  [&t, a, p](const Matrix& g, std::vector<Matrix>& grads) {
                    Matrix ga = g;
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= p * std::pow(a.value()[i], p - 1.0);
                    t.accumulate(grads, a.id(), ga);
                  });
}

Var relu(Var a) {
  Tape& t = tape_of(a);
  const Var in[] = {a};
  return t.record(map(a.value(), [](double v) { return v > 0.0 ? v : 0.0; }), in,
                  [&t, a](const Matrix& g, std::vector<Matrix>& grads) {
                    Matrix ga = g;
                    for (std::size_t i = 0; i < ga.size(); ++i)
                      if (!(a.value()[i] > 0.0)) ga[i] = 0.0;
                    t.accumulate(grads, a.id(), ga);
                  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const Var in[] = {a};
  return t.record(Matrix::scalar(s), in, [&t, a](const Matrix& g, std::vector<Matrix>& grads) {
    t.accumulate(grads, a.id(), Matrix(a.rows(), a.cols(), g.item()));
  });
}

Var mean(Var a) {
  require(a.value().size() > 0, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var softmax_rows(Var a) {
  Tape& t = tape_of(a);
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < x.cols(); ++j) mx = std::max(mx, x(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) z += (y(i, j) = std::exp(x(i, j) - mx));
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) /= z;
  }
  const Var in[] = {a};
  const std::size_t out_id = t.size();
  return t.record(std::move(y), in, [&t, a, out_id](const Matrix& g, std::vector<Matrix>& grads) {
    const Matrix& y = t.value(out_id);
    Matrix ga(y.rows(), y.cols());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) s += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) ga(i, j) = y(i, j) * (g(i, j) - s);
    }
    t.accumulate(grads, a.id(), ga);
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Tape& t = tape_of(parts[0]);
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    require(p.tape() == &t, "concat_rows: operands on different tapes");
    require(p.cols() == cols, "concat_rows: column count mismatch");
    rows += p.rows();
  }
  Matrix v(rows, cols);
  std::size_t r = 0;
  for (const Var& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), v.values().begin() + r * cols);
    r += p.rows();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(v), parts, [&t, inputs, cols](const Matrix& g, std::vector<Matrix>& grads) {
    std::size_t r0 = 0;
    for (const Var& p : inputs) {
      if (p.tracked()) {
        Matrix gp(p.rows(), cols);
        std::copy(g.values().begin() + r0 * cols, g.values().begin() + (r0 + p.rows()) * cols, gp.values().begin());
        t.accumulate(grads, p.id(), gp);
      }
      r0 += p.rows();
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Tape& t = tape_of(parts[0]);
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    require(p.tape() == &t, "concat_cols: operands on different tapes");
    require(p.rows() == rows, "concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  std::size_t c0 = 0;
  for (const Var& p : parts) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) v(i, c0 + j) = p.value()(i, j);
    c0 += p.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(v), parts, [&t, inputs, rows](const Matrix& g, std::vector<Matrix>& grads) {
    std::size_t c = 0;
    for (const Var& p : inputs) {
      if (p.tracked()) {
        Matrix gp(rows, p.cols());
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < p.cols(); ++j) gp(i, j) = g(i, c + j);
        t.accumulate(grads, p.id(), gp);
      }
      c += p.cols();
    }
  });
}

Var slice(Var a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  Tape& t = tape_of(a);
  require(r0 <= r1 && r1 <= a.rows() && c0 <= c1 && c1 <= a.cols(),
          "slice: range out of bounds for " + shape_str(a.value()));
  Matrix v(r1 - r0, c1 - c0);
  for (std::size_t i = r0; i < r1; ++i)
    for (std::size_t j = c0; j < c1; ++j) v(i - r0, j - c0) = a.value()(i, j);
  const Var in[] = {a};
  return t.record(std::move(v), in, [&t, a, r0, c0](const Matrix& g, std::vector<Matrix>& grads) {
    Matrix ga(a.rows(), a.cols());
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) ga(i + r0, j + c0) = g(i, j);
    t.accumulate(grads, a.id(), ga);
  });
}

Var frob_sq(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().values()) s += v * v;
  const Var in[] = {a};
  return t.record(Matrix::scalar(s), in, [&t, a](const Matrix& g, std::vector<Matrix>& grads) {
    t.accumulate(grads, a.id(), (2.0 * g.item()) * a.value());
  });
}

Var dot(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require(a.value().same_shape(b.value()), "dot: shape mismatch " + shape_str(a.value()) + " vs " + shape_str(b.value()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) s += a.value()[i] * b.value()[i];
  const Var in[] = {a, b};
  return t.record(Matrix::scalar(s), in, [&t, a, b](const Matrix& g, std::vector<Matrix>& grads) {
    if (a.tracked()) t.accumulate(grads, a.id(), g.item() * b.value());
    if (b.tracked()) t.accumulate(grads, b.id(), g.item() * a.value());
  });
}

// ---- composites -------------------------------------------------------------

Var row_sums(Var a) { return matmul(a, a.tape()->constant(Matrix(a.cols(), 1, 1.0))); }

Var col_means(Var a) {
  require(a.rows() > 0, "col_means: no rows");
  return matmul(a.tape()->constant(Matrix(1, a.rows(), 1.0 / static_cast<double>(a.rows()))), a);
}

Var normalize_rows(Var a) { return a / sqrt(row_sums(a * a)); }

Var trace(Var a) {
  require(a.rows() == a.cols(), "trace: matrix not square");
  return sum(a * a.tape()->constant(Matrix::identity(a.rows())));
}

Var diagonal(Var a) {
  require(a.rows() == a.cols(), "diagonal: matrix not square");
  return row_sums(a * a.tape()->constant(Matrix::identity(a.rows())));
}

Var column(Var a, std::size_t c) { return slice(a, 0, a.rows(), c, c + 1); }

Var norm(Var a) { return sqrt(frob_sq(a)); }

Var cross_entropy(Var logits, std::span<const int> targets) {
  require(logits.rows() == targets.size(), "cross_entropy: one target per row required");
  require(logits.rows() > 0, "cross_entropy: empty batch");
  Tape& t = *logits.tape();
  const Matrix& x = logits.value();
  // Shift by the (constant) row max; log-sum-exp is shift invariant.
  Matrix shift(x.rows(), 1);
  Matrix onehot(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mx = x(i, 0);
    for (std::size_t j = 1; j < x.cols(); ++j) mx = std::max(mx, x(i, j));
    shift(i, 0) = mx;
    require(targets[i] >= 0 && static_cast<std::size_t>(targets[i]) < x.cols(), "cross_entropy: target out of range");
    onehot(i, static_cast<std::size_t>(targets[i])) = 1.0;
  }
  Var c = t.constant(std::move(shift));
  Var lse = log(row_sums(exp(logits - c))) + c;
  Var picked = row_sums(logits * t.constant(std::move(onehot)));
  return mean(lse - picked);
}

// ---- gradient check ---------------------------------------------------------

GradCheckResult check_gradient(const ScalarFn& f, const std::vector<Matrix>& leaves, double h) {
  require(h > 0.0, "check_gradient: step must be positive");
  auto evaluate = [&](const std::vector<Matrix>& at) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(at.size());
    for (const auto& m : at) vars.push_back(tape.leaf(m));
    return f(tape, vars).item();
  };

  Tape tape;
  std::vector<Var> vars;
  for (const auto& m : leaves) vars.push_back(tape.leaf(m));
  Var y = f(tape, vars);
  const Gradients grads = tape.backward(y);

  GradCheckResult result;
  std::vector<Matrix> work = leaves;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    const Matrix analytic = grads[vars[l]];
    for (std::size_t e = 0; e < leaves[l].size(); ++e) {
      const double x0 = work[l][e];
      work[l][e] = x0 + h;
      const double fp = evaluate(work);
      work[l][e] = x0 - h;
      const double fm = evaluate(work);
      work[l][e] = x0;
      const double fd = (fp - fm) / (2.0 * h);
      double err = std::abs(analytic[e] - fd) / std::max(1.0, std::abs(fd));
      if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(analytic[e])) {
        err = std::numeric_limits<double>::infinity();
        result.finite = false;
      }
      if (err > result.max_rel_error || (!result.finite && std::isinf(err) && result.max_rel_error != err)) {
        result.max_rel_error = err;
        result.leaf = l;
        result.entry = e;
      }
    }
  }
  return result;
}

}  // namespace mglue
