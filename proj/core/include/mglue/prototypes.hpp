#pragma once

// Per-domain Riemannian prototypes (z, log G) kept by EMA, and the
// sample-prototype contrastive loss.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mglue/autodiff.hpp"

namespace mglue {

struct Prototype {
  std::string domain;
  Matrix z;      // 1 × d
  Matrix log_g;  // M × M symmetric
  std::int64_t update_count = 0;
  bool operator==(const Prototype&) const = default;
};

/// Keyed by domain name; map order is the lexicographic domain order.
using PrototypeSet = std::map<std::string, Prototype>;

/// z <- beta z + (1 - beta) z_mean, log G likewise. The first update
/// (update_count 0) copies the batch means.
Prototype ema_update(const Prototype& proto, const Matrix& z_mean, const Matrix& log_g_mean, double beta);

/// Row-wise cosine normalization x / sqrt(|x|^2 + eps).
Var cosine_normalize(Var x, double eps = 1e-12);

/// Mean over the batch of -log softmax_k(cos(z_b, z^{S_k}) / tau) at the
/// sample's own domain. Prototypes enter as constants.
Var proto_contrastive_loss(Var z, std::span<const std::string> domains, const PrototypeSet& protos,
                           double temperature = 1.0);

/// Domains of the k prototypes nearest to z (Euclidean), ties by name.
std::vector<std::string> nearest_prototypes(const Matrix& z, const PrototypeSet& protos, std::size_t k);

}  // namespace mglue
