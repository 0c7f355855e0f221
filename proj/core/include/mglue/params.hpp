#pragma once

// Named parameter tensors, their binding onto a tape, and the Adam optimizer
// with cosine-annealed learning rate.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mglue/autodiff.hpp"

namespace mglue {

/// Ordered name -> tensor map. Iteration order (lexicographic) is the
/// serialization order.
class ParamStore {
 public:
  void set(const std::string& name, Matrix value) { values_[name] = std::move(value); }
  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  const Matrix& get(const std::string& name) const;
  Matrix& get(const std::string& name);
  const std::map<std::string, Matrix>& all() const { return values_; }
  std::map<std::string, Matrix>& all() { return values_; }
  std::size_t scalar_count() const;
  /// FNV-1a over names, shapes and raw value bytes.
  std::uint64_t checksum() const;
  bool operator==(const ParamStore&) const = default;

 private:
  std::map<std::string, Matrix> values_;
};

/// Tape handles for every parameter. Trainable ones are leaves, the rest
/// constants.
class BoundParams {
 public:
  BoundParams(const ParamStore& store, Tape& tape, const std::function<bool(const std::string&)>& trainable);
  Var operator[](const std::string& name) const;
  const std::map<std::string, Var>& all() const { return vars_; }

 private:
  std::map<std::string, Var> vars_;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are keyed by parameter name.
class Adam {
 public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  /// Applies one step to every parameter that appears in `bound` as a tracked
  /// leaf. Returns the number of parameters updated.
  std::size_t step(ParamStore& store, const BoundParams& bound, const Gradients& grads, double lr);

  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  std::map<std::string, Matrix>& first_moments() { return m_; }
  std::map<std::string, Matrix>& second_moments() { return v_; }
  const std::map<std::string, Matrix>& first_moments() const { return m_; }
  const std::map<std::string, Matrix>& second_moments() const { return v_; }

 private:
  AdamOptions opts_;
  std::int64_t t_ = 0;
  std::map<std::string, Matrix> m_, v_;
};

/// lr_min + (lr0 - lr_min)(1 + cos(pi t / T)) / 2.
double cosine_lr(double lr0, double lr_min, std::int64_t t, std::int64_t total);

}  // namespace mglue
