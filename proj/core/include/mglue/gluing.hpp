#pragma once

// SPD matrix calculus on the tape, edge transports between local metrics,
// holonomy and curvature losses, and brute-force checks of the gluing
// theorems.

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "mglue/autodiff.hpp"

namespace mglue {

struct SqrtOptions {
  double tol = 1e-12;
  int max_iter = 60;
};

struct SpdSqrt {
  Var sqrt;
  Var inv_sqrt;
  int iterations = 0;
  double residual = 0.0;  // ||S*S - G||_F / ||G||_F
};

/// Coupled inverse-free Denman–Beavers (Newton–Schulz) iteration, unrolled on
/// the tape. Produces G^{1/2} and G^{-1/2} together. Throws NumericalError
/// carrying the final residual if it fails to converge.
SpdSqrt spd_sqrt(Var g, SqrtOptions opts = {});

struct SpdLog {
  Var log;      // symmetric M×M
  Var logdet;   // 1×1, trace(log)
  bool diagonal_fast_path = false;
};

/// Matrix logarithm by inverse scaling and squaring over the sqrt chain,
/// followed by a Mercator series. Certified-diagonal inputs take the
/// elementwise path.
SpdLog spd_log_and_det(Var g, SqrtOptions opts = {});

/// P^{(i,j)} = G_j^{-1/2} (G_j^{1/2} G_i G_j^{1/2})^{1/2} G_j^{-1/2}, mapping
/// the tangent space at i to the one at j with P^T G_j P = G_i.
Var transport(Var g_i, Var g_j, SqrtOptions opts = {});

using Edge = std::pair<std::size_t, std::size_t>;

/// Transport maps keyed by directed edge.
class TransportTable {
 public:
  void set(std::size_t from, std::size_t to, Var p) { maps_[{from, to}] = p; }
  std::optional<Var> get(std::size_t from, std::size_t to) const;

 private:
  std::map<Edge, Var> maps_;
};

/// Ordered product of transports along a closed node sequence (first == last);
/// later edges multiply from the left.
Var holonomy_map(std::span<const std::size_t> cycle, const TransportTable& transports);

/// Node triple (i, j, k): either a true triangle or the adjacent-edge pair
/// ((i,j),(j,k)) whose closing leg (k,i) is transported directly.
struct TrianglePath {
  std::size_t i, j, k;
  bool operator==(const TrianglePath&) const = default;
};

/// Lazily computed, cached per-(from,to) transports over a metric list.
class TransportCache {
 public:
  TransportCache(std::span<const Var> metrics, SqrtOptions opts = {}) : metrics_(metrics), opts_(opts) {}
  Var get(std::size_t from, std::size_t to);

 private:
  std::span<const Var> metrics_;
  SqrtOptions opts_;
  std::map<Edge, Var> cache_;
};

/// Mean over paths of ||P^{(k,i)} P^{(j,k)} P^{(i,j)} - I||_F^2.
Var holonomy_loss(std::span<const TrianglePath> paths, std::span<const Var> metrics, SqrtOptions opts = {});

/// Per-node log-determinants, computed once per distinct node in `paths`.
class LogDetCache {
 public:
  explicit LogDetCache(std::span<const Var> metrics, SqrtOptions opts = {}) : metrics_(metrics), opts_(opts) {}
  Var get(std::size_t node);

 private:
  std::span<const Var> metrics_;
  SqrtOptions opts_;
  std::map<std::size_t, Var> cache_;
};

/// Mean over paths of |log r_ij - log r_jk|^2 with log r = logdet_i - logdet_j.
Var curvature_loss(std::span<const TrianglePath> paths, std::span<const Var> metrics, SqrtOptions opts = {});

struct CurvatureRatio {
  double r = 1.0;
  double log_r = 0.0;
  /// 3(1 - r); positive means positive Ricci curvature along the edge.
  double ricci_estimate = 0.0;
  int ricci_sign = 0;
};

/// Volume ratio det G_i / det G_j evaluated in the log domain.
CurvatureRatio curvature_ratio(const Matrix& g_i, const Matrix& g_j);

/// log det of an SPD matrix (value level, via spd_log_and_det).
double spd_logdet(const Matrix& g);
/// Value-level wrappers for callers that do not need gradients.
Matrix spd_log_value(const Matrix& g);
Matrix transport_value(const Matrix& g_i, const Matrix& g_j);

/// Symmetric normalized Laplacian I - D^{-1/2} A D^{-1/2}; isolated nodes get 0 rows.
Matrix normalized_laplacian(std::size_t n, std::span<const Edge> edges);

/// ||L^k g||^2.
double dirichlet_energy(std::span<const double> g, const Matrix& laplacian, int k);

struct TriangleTrivialityReport {
  bool hypothesis_met = false;            // every edge in a triangle AND every triangle trivial
  std::vector<Edge> edges_not_in_triangle;
  bool all_triangles_trivial = true;
  bool all_basis_cycles_trivial = true;
  bool all_simple_cycles_trivial = true;  // only enumerated for n <= 8
  std::size_t triangles = 0;
  std::size_t basis_cycles = 0;
  std::size_t simple_cycles = 0;
  double max_deviation = 0.0;
  /// hypothesis => conclusion; vacuously true when the hypothesis fails.
  bool implication_holds = true;
};

using TransportFn = std::function<Matrix(std::size_t from, std::size_t to)>;

/// Brute-force check of triangle triviality on a skeleton with <= 10 nodes.
TriangleTrivialityReport triangle_triviality_oracle(std::size_t n, std::span<const Edge> edges,
                                                   const TransportFn& transports, double tol = 1e-8);

}  // namespace mglue
