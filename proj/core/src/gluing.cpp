#include "mglue/gluing.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <queue>
#include <set>
#include <string>

namespace mglue {

namespace {

double inf_norm(const Matrix& a) {
  double best = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += std::abs(a(i, j));
    best = std::max(best, s);
  }
  return best;
}

void require_spd_shape(const Matrix& g, const char* who) {
  require(g.rows() == g.cols() && g.rows() > 0, std::string(who) + ": metric must be square and non-empty");
  require(asymmetry(g) < 1e-10, std::string(who) + ": metric is not symmetric");
}

Var symmetrize(Var a) { return scale(a + transpose(a), 0.5); }

// Diagonal matrix from an n×1 column on the tape.
Var diag_from_column(Var col) {
  Tape& t = *col.tape();
  return t.constant(Matrix::identity(col.rows())) * transpose(col);
}

}  // namespace

SpdSqrt spd_sqrt(Var g, SqrtOptions opts) {
  const Matrix& gv = g.value();
  require_spd_shape(gv, "spd_sqrt");
  for (double d : gv.diag())
    if (!(d > 0.0)) throw NumericalError("spd_sqrt: non-positive diagonal entry, matrix is not SPD", d);
  Tape& t = *g.tape();
  const std::size_t n = gv.rows();

  // Scale by the max row sum (>= largest eigenvalue) so that the spectrum of
  // the iterate lies in (0, 1]. sqrt(c) * sqrt(G / c) == sqrt(G) for any
  // fixed c > 0, so c is held constant on the tape.
  const double c = inf_norm(gv);
  const double sc = std::sqrt(c);
  Var a = scale(g, 1.0 / c);
  const Matrix a_val = (1.0 / c) * gv;
  const double a_norm = frobenius_norm(a_val);

  Var three = t.constant(3.0 * Matrix::identity(n));
  Var y = a;
  Var z = t.constant(Matrix::identity(n));
  double residual = frobenius_norm(matmul(a_val, a_val) - a_val) / a_norm;
  double prev = std::numeric_limits<double>::infinity();
  int it = 0;
  bool converged = false;
  while (it < opts.max_iter) {
    Var tk = scale(three - matmul(z, y), 0.5);
    y = matmul(y, tk);
    z = matmul(tk, z);
    ++it;
    const Matrix& yv = y.value();
    residual = frobenius_norm(matmul(yv, yv) - a_val) / a_norm;
    if (!std::isfinite(residual)) break;
    if (residual < opts.tol) {
      converged = true;
      break;
    }
    // Rounding floor reached: further iterations cannot improve.
    if (residual >= prev && residual < 1e-10) {
      converged = true;
      break;
    }
    prev = residual;
  }
  if (!converged)
    throw NumericalError("spd_sqrt: Newton–Schulz iteration did not converge in " + std::to_string(it) +
                             " iterations (residual " + std::to_string(residual) + ")",
                         residual);
  return SpdSqrt{scale(y, sc), scale(z, 1.0 / sc), it, residual};
}

SpdLog spd_log_and_det(Var g, SqrtOptions opts) {
  const Matrix& gv = g.value();
  require_spd_shape(gv, "spd_log_and_det");
  Tape& t = *g.tape();
  const std::size_t n = gv.rows();

  if (is_certified_diagonal(gv)) {
    Var logd = log(diagonal(g));
    return SpdLog{diag_from_column(logd), sum(logd), true};
  }

  // log G = log(G/c) + log(c) I, then inverse scaling and squaring.
  const double c = trace(gv) / static_cast<double>(n);
  Var a = scale(g, 1.0 / c);
  const Matrix eye = Matrix::identity(n);
  int squarings = 0;
  while (frobenius_norm(a.value() - eye) > 0.25) {
    require(squarings < 64, "spd_log_and_det: square-root chain did not approach identity");
    a = symmetrize(spd_sqrt(a, opts).sqrt);
    ++squarings;
  }
  Var x = a - t.constant(eye);
  const double xn = frobenius_norm(x.value());
  Var series = x;
  Var power = x;
  for (int k = 2; k <= 80; ++k) {
    if (std::pow(xn, k) / k < 1e-18) break;
    power = matmul(power, x);
    series = series + scale(power, (k % 2 == 0 ? -1.0 : 1.0) / k);
  }
  Var logm = scale(series, std::ldexp(1.0, squarings)) + t.constant(std::log(c) * eye);
  logm = symmetrize(logm);
  return SpdLog{logm, trace(logm), false};
}

Var transport(Var g_i, Var g_j, SqrtOptions opts) {
  require(g_i.tape() == g_j.tape(), "transport: metrics on different tapes");
  const Matrix& gi = g_i.value();
  const Matrix& gj = g_j.value();
  require_spd_shape(gi, "transport");
  require_spd_shape(gj, "transport");
  require(gi.rows() == gj.rows(), "transport: metric dimensions differ");

  if (is_certified_diagonal(gi) && is_certified_diagonal(gj)) {
    // Diagonal metrics: P = diag(sqrt(g_i / g_j)).
    return diag_from_column(sqrt(diagonal(g_i) / diagonal(g_j)));
  }
  const SpdSqrt sj = spd_sqrt(g_j, opts);
  Var mid = symmetrize(matmul(matmul(sj.sqrt, g_i), sj.sqrt));
  const SpdSqrt r = spd_sqrt(mid, opts);
  return matmul(matmul(sj.inv_sqrt, r.sqrt), sj.inv_sqrt);
}

std::optional<Var> TransportTable::get(std::size_t from, std::size_t to) const {
  auto it = maps_.find({from, to});
  if (it == maps_.end()) return std::nullopt;
  return it->second;
}

Var holonomy_map(std::span<const std::size_t> cycle, const TransportTable& transports) {
  require(cycle.size() >= 2, "holonomy_map: cycle needs at least one edge");
  require(cycle.front() == cycle.back(), "holonomy_map: cycle is not closed (first != last)");
  std::optional<Var> h;
  for (std::size_t l = 0; l + 1 < cycle.size(); ++l) {
    auto p = transports.get(cycle[l], cycle[l + 1]);
    if (!p)
      throw ContractError("holonomy_map: missing transport for edge (" + std::to_string(cycle[l]) + "," +
                          std::to_string(cycle[l + 1]) + ")");
    h = h ? matmul(*p, *h) : *p;
  }
  return *h;
}

Var TransportCache::get(std::size_t from, std::size_t to) {
  require(from < metrics_.size() && to < metrics_.size(), "TransportCache: node index out of range");
  auto it = cache_.find({from, to});
  if (it != cache_.end()) return it->second;
  Var p = transport(metrics_[from], metrics_[to], opts_);
  cache_.emplace(Edge{from, to}, p);
  return p;
}

Var holonomy_loss(std::span<const TrianglePath> paths, std::span<const Var> metrics, SqrtOptions opts) {
  require(!paths.empty(), "holonomy_loss: empty path set");
  require(!metrics.empty(), "holonomy_loss: no metrics");
  Tape& t = *metrics[0].tape();
  TransportCache cache(metrics, opts);
  Var eye = t.constant(Matrix::identity(metrics[0].rows()));
  std::optional<Var> total;
  for (const auto& p : paths) {
    Var h = matmul(cache.get(p.k, p.i), matmul(cache.get(p.j, p.k), cache.get(p.i, p.j)));
    Var term = frob_sq(h - eye);
    total = total ? *total + term : term;
  }
  return scale(*total, 1.0 / static_cast<double>(paths.size()));
}

Var LogDetCache::get(std::size_t node) {
  require(node < metrics_.size(), "LogDetCache: node index out of range");
  auto it = cache_.find(node);
  if (it != cache_.end()) return it->second;
  Var ld = spd_log_and_det(metrics_[node], opts_).logdet;
  cache_.emplace(node, ld);
  return ld;
}

Var curvature_loss(std::span<const TrianglePath> paths, std::span<const Var> metrics, SqrtOptions opts) {
  require(!paths.empty(), "curvature_loss: empty path set");
  LogDetCache logdet(metrics, opts);
  std::optional<Var> total;
  for (const auto& p : paths) {
    Var log_r_ij = logdet.get(p.i) - logdet.get(p.j);
    Var log_r_jk = logdet.get(p.j) - logdet.get(p.k);
    Var d = log_r_ij - log_r_jk;
    Var term = d * d;
    total = total ? *total + term : term;
  }
  return scale(*total, 1.0 / static_cast<double>(paths.size()));
}

double spd_logdet(const Matrix& g) {
  Tape t;
  return spd_log_and_det(t.constant(g)).logdet.item();
}

Matrix spd_log_value(const Matrix& g) {
  Tape t;
  return spd_log_and_det(t.constant(g)).log.value();
}

Matrix transport_value(const Matrix& g_i, const Matrix& g_j) {
  Tape t;
  return transport(t.constant(g_i), t.constant(g_j)).value();
}

CurvatureRatio curvature_ratio(const Matrix& g_i, const Matrix& g_j) {
  CurvatureRatio out;
  out.log_r = spd_logdet(g_i) - spd_logdet(g_j);
  out.r = std::exp(out.log_r);
  out.ricci_estimate = 3.0 * (1.0 - out.r);
  out.ricci_sign = out.ricci_estimate > 0 ? 1 : (out.ricci_estimate < 0 ? -1 : 0);
  return out;
}

Matrix normalized_laplacian(std::size_t n, std::span<const Edge> edges) {
  Matrix adj(n, n);
  for (const auto& [u, v] : edges) {
    require(u < n && v < n, "normalized_laplacian: edge endpoint out of range");
    if (u == v) continue;
    adj(u, v) = 1.0;
    adj(v, u) = 1.0;
  }
  std::vector<double> deg(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) deg[i] += adj(i, j);
  Matrix lap(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    if (deg[i] > 0) lap(i, i) = 1.0;
    for (std::size_t j = 0; j < n; ++j)
      if (adj(i, j) != 0.0) lap(i, j) -= adj(i, j) / std::sqrt(deg[i] * deg[j]);
  }
  return lap;
}

double dirichlet_energy(std::span<const double> g, const Matrix& laplacian, int k) {
  require(k >= 1, "dirichlet_energy: order must be >= 1");
  require(g.size() == laplacian.rows(), "dirichlet_energy: field length differs from node count");
  Matrix v = Matrix::col_vector(g);
  for (int i = 0; i < k; ++i) v = matmul(laplacian, v);
  double s = 0.0;
  for (double x : v.values()) s += x * x;
  return s;
}

TriangleTrivialityReport triangle_triviality_oracle(std::size_t n, std::span<const Edge> edges,
                                                   const TransportFn& transports, double tol) {
  require(n <= 10, "triangle_triviality_oracle: brute force limited to 10 nodes");
  std::vector<std::vector<bool>> adj(n, std::vector<bool>(n, false));
  std::vector<Edge> uniq;
  for (auto [u, v] : edges) {
    require(u < n && v < n && u != v, "triangle_triviality_oracle: invalid edge");
    if (u > v) std::swap(u, v);
    if (!adj[u][v]) uniq.push_back({u, v});
    adj[u][v] = adj[v][u] = true;
  }
  std::map<Edge, Matrix> cache;
  auto P = [&](std::size_t a, std::size_t b) -> const Matrix& {
    auto it = cache.find({a, b});
    if (it == cache.end()) it = cache.emplace(Edge{a, b}, transports(a, b)).first;
    return it->second;
  };
  TriangleTrivialityReport rep;
  auto deviation = [&](const std::vector<std::size_t>& cyc) {
    Matrix h;
    for (std::size_t l = 0; l + 1 < cyc.size(); ++l) {
      const Matrix& p = P(cyc[l], cyc[l + 1]);
      h = h.empty() ? p : matmul(p, h);
    }
    const double d = frobenius_norm(h - Matrix::identity(h.rows()));
    rep.max_deviation = std::max(rep.max_deviation, d);
    return d;
  };

  // Triangles and edge coverage.
  std::set<Edge> covered;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b)
      for (std::size_t c = b + 1; c < n; ++c)
        if (adj[a][b] && adj[b][c] && adj[a][c]) {
          ++rep.triangles;
          covered.insert({a, b});
          covered.insert({b, c});
          covered.insert({a, c});
          if (deviation({a, b, c, a}) >= tol) rep.all_triangles_trivial = false;
        }
  for (const auto& e : uniq)
    if (!covered.count(e)) rep.edges_not_in_triangle.push_back(e);

  // Fundamental cycles of a BFS spanning forest.
  std::vector<long> parent(n, -1);
  std::vector<bool> seen(n, false);
  std::set<Edge> tree;
  for (std::size_t root = 0; root < n; ++root) {
    if (seen[root]) continue;
    seen[root] = true;
    std::queue<std::size_t> q;
    q.push(root);
    while (!q.empty()) {
      const std::size_t u = q.front();
      q.pop();
      for (std::size_t v = 0; v < n; ++v)
        if (adj[u][v] && !seen[v]) {
          seen[v] = true;
          parent[v] = static_cast<long>(u);
          tree.insert({std::min(u, v), std::max(u, v)});
          q.push(v);
        }
    }
  }
  auto path_to_root = [&](std::size_t v) {
    std::vector<std::size_t> p{v};
    while (parent[v] >= 0) {
      v = static_cast<std::size_t>(parent[v]);
      p.push_back(v);
    }
    return p;
  };
  for (const auto& [u, v] : uniq) {
    if (tree.count({u, v})) continue;
    auto pu = path_to_root(u);
    auto pv = path_to_root(v);
    // Trim the common ancestor tail.
    while (pu.size() >= 2 && pv.size() >= 2 && pu[pu.size() - 2] == pv[pv.size() - 2]) {
      pu.pop_back();
      pv.pop_back();
    }
    // cycle: u -> ... -> lca -> ... -> v -> u
    std::vector<std::size_t> cyc(pu.begin(), pu.end());
    for (std::size_t i = pv.size() - 1; i-- > 0;) cyc.push_back(pv[i]);
    cyc.push_back(u);
    ++rep.basis_cycles;
    if (deviation(cyc) >= tol) rep.all_basis_cycles_trivial = false;
  }

  // Every simple cycle (each counted once per start/direction) on small graphs.
  if (n <= 8) {
    std::vector<std::size_t> stack;
    std::vector<bool> on(n, false);
    std::function<void(std::size_t, std::size_t)> dfs = [&](std::size_t start, std::size_t u) {
      for (std::size_t v = start; v < n; ++v) {
        if (!adj[u][v]) continue;
        if (v == start && stack.size() >= 3) {
          if (stack[1] < stack.back()) {  // one direction only
            auto cyc = stack;
            cyc.push_back(start);
            ++rep.simple_cycles;
            if (deviation(cyc) >= tol) rep.all_simple_cycles_trivial = false;
          }
        } else if (v > start && !on[v]) {
          on[v] = true;
          stack.push_back(v);
          dfs(start, v);
          stack.pop_back();
          on[v] = false;
        }
      }
    };
    for (std::size_t s = 0; s < n; ++s) {
      stack = {s};
      on.assign(n, false);
      on[s] = true;
      dfs(s, s);
    }
  }

  rep.hypothesis_met = rep.edges_not_in_triangle.empty() && rep.all_triangles_trivial && rep.triangles > 0;
  rep.implication_holds =
      !rep.hypothesis_met || (rep.all_basis_cycles_trivial && rep.all_simple_cycles_trivial);
  return rep;
}

}  // namespace mglue
