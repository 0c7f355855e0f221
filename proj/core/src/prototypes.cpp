#include "mglue/prototypes.hpp"

#include <algorithm>
#include <cmath>

namespace mglue {

Prototype ema_update(const Prototype& proto, const Matrix& z_mean, const Matrix& log_g_mean, double beta) {
  require(beta > 0.0 && beta < 1.0, "ema_update: beta must lie in (0, 1)");
  Prototype out = proto;
  if (proto.update_count == 0) {
    out.z = z_mean;
    out.log_g = log_g_mean;
  } else {
    require(z_mean.same_shape(proto.z) && log_g_mean.same_shape(proto.log_g), "ema_update: shape mismatch");
    for (std::size_t i = 0; i < out.z.size(); ++i) out.z[i] = beta * proto.z[i] + (1.0 - beta) * z_mean[i];
    for (std::size_t i = 0; i < out.log_g.size(); ++i)
      out.log_g[i] = beta * proto.log_g[i] + (1.0 - beta) * log_g_mean[i];
  }
  // Symmetrize exactly so rounding never accumulates asymmetry.
  for (std::size_t i = 0; i < out.log_g.rows(); ++i)
    for (std::size_t j = i + 1; j < out.log_g.cols(); ++j) {
      const double s = 0.5 * (out.log_g(i, j) + out.log_g(j, i));
      out.log_g(i, j) = out.log_g(j, i) = s;
    }
  ++out.update_count;
  return out;
}

Var cosine_normalize(Var x, double eps) { return x / sqrt(row_sums(x * x) + eps); }

Var proto_contrastive_loss(Var z, std::span<const std::string> domains, const PrototypeSet& protos,
                           double temperature) {
  require(temperature > 0.0, "proto_contrastive_loss: temperature must be positive");
  require(z.rows() == domains.size(), "proto_contrastive_loss: one domain tag per row required");
  require(!protos.empty(), "proto_contrastive_loss: no prototypes");
  Tape& t = *z.tape();
  const std::size_t d = z.cols();
  Matrix centers(protos.size(), d);
  std::map<std::string, int> index;
  int k = 0;
  for (const auto& [name, p] : protos) {
    require(p.z.cols() == d, "proto_contrastive_loss: prototype dimension differs from z");
    double nrm = 0.0;
    for (std::size_t c = 0; c < d; ++c) nrm += p.z[c] * p.z[c];
    nrm = std::sqrt(nrm + 1e-12);
    for (std::size_t c = 0; c < d; ++c) centers(k, c) = p.z[c] / nrm;
    index[name] = k++;
  }
  std::vector<int> targets;
  for (const auto& dom : domains) {
    auto it = index.find(dom);
    if (it == index.end()) throw ContractError("proto_contrastive_loss: no prototype for domain '" + dom + "'");
    targets.push_back(it->second);
  }
  Var logits = scale(matmul(cosine_normalize(z), t.constant(centers.transposed())), 1.0 / temperature);
  return cross_entropy(logits, targets);
}

std::vector<std::string> nearest_prototypes(const Matrix& z, const PrototypeSet& protos, std::size_t k) {
  require(k <= protos.size(), "nearest_prototypes: k exceeds the number of prototypes");
  std::vector<std::pair<double, std::string>> dist;
  for (const auto& [name, p] : protos) {
    require(p.z.size() == z.size(), "nearest_prototypes: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) s += (z[i] - p.z[i]) * (z[i] - p.z[i]);
    dist.emplace_back(s, name);
  }
  std::sort(dist.begin(), dist.end());
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(dist[i].second);
  return out;
}

}  // namespace mglue
