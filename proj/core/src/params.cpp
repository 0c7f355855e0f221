#include "mglue/params.hpp"

#include <cmath>
#include <cstring>
#include <numbers>

namespace mglue {

const Matrix& ParamStore::get(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw ContractError("ParamStore: no parameter named '" + name + "'");
  return it->second;
}

Matrix& ParamStore::get(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) throw ContractError("ParamStore: no parameter named '" + name + "'");
  return it->second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [k, v] : values_) n += v.size();
  return n;
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [k, v] : values_) {
    feed(k.data(), k.size());
    const std::uint64_t shape[2] = {v.rows(), v.cols()};
    feed(shape, sizeof shape);
    feed(v.values().data(), v.size() * sizeof(double));
  }
  return h;
}

BoundParams::BoundParams(const ParamStore& store, Tape& tape,
                         const std::function<bool(const std::string&)>& trainable) {
  for (const auto& [k, v] : store.all()) vars_.emplace(k, trainable(k) ? tape.leaf(v) : tape.constant(v));
}

Var BoundParams::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ContractError("BoundParams: no parameter named '" + name + "'");
  return it->second;
}

std::size_t Adam::step(ParamStore& store, const BoundParams& bound, const Gradients& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  std::size_t updated = 0;
  for (const auto& [name, var] : bound.all()) {
    if (!var.tracked()) continue;
    const Matrix g = grads[var];
    Matrix& p = store.get(name);
    auto [mit, m_new] = m_.try_emplace(name, p.rows(), p.cols(), 0.0);
    auto [vit, v_new] = v_.try_emplace(name, p.rows(), p.cols(), 0.0);
    Matrix& m = mit->second;
    Matrix& v = vit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g[i];
      v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opts_.eps);
    }
    ++updated;
  }
  return updated;
}

double cosine_lr(double lr0, double lr_min, std::int64_t t, std::int64_t total) {
  if (total <= 0) return lr0;
  const double frac = static_cast<double>(t) / static_cast<double>(total);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace mglue
