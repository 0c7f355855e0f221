#include "mglue/frame.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "mglue/random.hpp"

namespace mglue {

void init_bank(ParamStore& store, std::size_t m, std::size_t input_dim, std::uint64_t seed) {
  Rng rng(stream_seed(seed, 0xba4c));
  Matrix p(m, input_dim);
  for (auto& v : p.values()) v = rng.normal();
  store.set("bank", std::move(p));
}

std::size_t PerturbedGraph::perturbation_edges() const {
  std::size_t e = 0;
  for (const auto& a : attached) e += a.size();
  return e;
}

std::vector<PerturbedGraph::WeightedEdge> PerturbedGraph::weighted_edges() const {
  std::vector<WeightedEdge> out;
  const Matrix& a = adjacency.value();
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j)
      if (a(i, j) != 0.0) out.push_back({i, j, a(i, j)});
  return out;
}

PerturbedGraph perturb_graph(const GraphRecord& rec, Var x_proj, Var bank, std::size_t k) {
  const std::size_t n = rec.num_nodes;
  const std::size_t m = bank.rows();
  require(n > 0, "perturb_graph: empty record");
  require(x_proj.rows() == n, "perturb_graph: projected feature rows differ from num_nodes");
  require(x_proj.cols() == bank.cols(), "perturb_graph: bank width differs from projected feature width");
  Tape& t = *x_proj.tape();
  k = std::min(k, n);

  PerturbedGraph pg;
  pg.n_original = n;
  pg.m = m;

  Var scores = scale(matmul(x_proj, transpose(bank)), 1.0 / std::sqrt(static_cast<double>(bank.cols())));
  const Matrix s = scores.value();  // n × M

  Matrix mask(n, m);
  pg.attached.resize(m);
  std::vector<std::size_t> idx(n);
  for (std::size_t c = 0; c < m; ++c) {
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s(a, c) > s(b, c); });
    pg.attached[c].assign(idx.begin(), idx.begin() + static_cast<long>(k));
    for (std::size_t i : pg.attached[c]) mask(i, c) = 1.0;
  }

  // Softmax over each original node's attached perturbation nodes. Rows with
  // none get a unit denominator so their weights are exactly zero.
  Matrix shift(n, 1), empty_row(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < m; ++c)
      if (mask(i, c) != 0.0) {
        best = std::max(best, s(i, c));
        any = true;
      }
    shift(i, 0) = any ? best : 0.0;
    empty_row(i, 0) = any ? 0.0 : 1.0;
  }
  Var e = exp(scores - t.constant(shift)) * t.constant(mask);
  pg.weights = e / (row_sums(e) + t.constant(empty_row));

  Matrix a(n, n);
  std::set<Edge> distinct;
  for (const auto& [i, j] : rec.edges) {
    a(i, j) = 1.0;
    a(j, i) = 1.0;
    distinct.insert({std::min(i, j), std::max(i, j)});
  }
  pg.original_edges = distinct.size();
  Var top[] = {t.constant(std::move(a)), pg.weights};
  Var bottom[] = {transpose(pg.weights), t.constant(Matrix(m, m))};
  Var rows[] = {concat_cols(top), concat_cols(bottom)};
  pg.adjacency = concat_rows(rows);
  pg.a_hat = normalize_adjacency(pg.adjacency);
  Var feats[] = {x_proj, bank};
  pg.x = concat_rows(feats);
  return pg;
}

Var tangent_vectors(Var node_embeddings, std::size_t n_original, std::size_t m) {
  require(node_embeddings.rows() == n_original + m, "tangent_vectors: expected n + M embedding rows");
  const std::size_t d = node_embeddings.cols();
  Var z = mean_pool(node_embeddings, n_original);
  Var f = slice(node_embeddings, n_original, n_original + m, 0, d);
  return transpose(f - z);
}

std::string to_string(LengthMode m) { return m == LengthMode::norm ? "norm" : "r_diag"; }

LengthMode length_mode_from_string(const std::string& s) {
  if (s == "norm") return LengthMode::norm;
  if (s == "r_diag") return LengthMode::r_diag;
  throw ContractError("length_mode must be 'norm' or 'r_diag', got '" + s + "'");
}

namespace {

double value_norm(const Matrix& v) { return frobenius_norm(v); }

// Seeded unit vector orthogonal to the given unit columns (two MGS passes).
Matrix random_orthogonal_direction(std::size_t d, const std::vector<Matrix>& qs, std::uint64_t seed) {
  Rng rng(seed);
  for (int attempt = 0; attempt < 16; ++attempt) {
    Matrix u(d, 1);
    for (auto& x : u.values()) x = rng.normal();
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& q : qs) {
        double c = 0.0;
        for (std::size_t i = 0; i < d; ++i) c += q[i] * u[i];
        for (std::size_t i = 0; i < d; ++i) u[i] -= c * q[i];
      }
    const double nrm = value_norm(u);
    if (nrm > 1e-6) return (1.0 / nrm) * u;
  }
  throw NumericalError("orthogonal_frame: could not draw a direction orthogonal to the frame", 0.0);
}

}  // namespace

FrameResult orthogonal_frame(Var v, LengthMode mode, std::uint64_t seed) {
  const std::size_t d = v.rows();
  const std::size_t m = v.cols();
  require(m >= 1, "orthogonal_frame: no columns");
  require(m <= d, "orthogonal_frame: M = " + std::to_string(m) + " exceeds embedding dimension " + std::to_string(d));
  Tape& t = *v.tape();
  FrameResult out;
  std::vector<Var> qs, ws;
  std::vector<Matrix> q_values;
  for (std::size_t c = 0; c < m; ++c) {
    Var vc = column(v, c);
    const double vnorm = value_norm(vc.value());
    Var u = vc;
    for (const Var& q : qs) u = u - q * dot(q, u);
    const double r = value_norm(u.value());
    Var q;
    Var len;
    if (vnorm == 0.0 || r < 1e-8 * vnorm) {
      ++out.degenerate_columns;
      q = t.constant(random_orthogonal_direction(d, q_values, stream_seed(seed, c)));
      if (mode == LengthMode::norm)
        len = vnorm > 0.0 ? norm(vc) + 1e-8 : t.constant_scalar(1e-8);
      else
        len = r > 0.0 ? norm(u) + 1e-8 : t.constant_scalar(1e-8);
    } else {
      Var rn = norm(u);
      q = u / rn;
      len = mode == LengthMode::norm ? norm(vc) : rn;
    }
    q_values.push_back(q.value());
    qs.push_back(q);
    ws.push_back(q * len);
  }
  out.w = concat_cols(ws);
  return out;
}

Var local_metric(Var w, double jitter) {
  Tape& t = *w.tape();
  return matmul(transpose(w), w) + t.constant(jitter * Matrix::identity(w.cols()));
}

namespace {

struct Encoded {
  PerturbedGraph pg;
  Var h;
};

Encoded encode_perturbed(const EncoderVars& enc, Var bank, const ParamStore& store, const GraphRecord& rec,
                         std::size_t k, double dropout, Rng* dropout_rng) {
  Tape& t = *bank.tape();
  Var x = t.constant(project_features(store, rec.features));
  PerturbedGraph pg = perturb_graph(rec, x, bank, k);
  Var h = gcn_forward(enc, pg.a_hat, pg.x, dropout, dropout_rng);
  return {std::move(pg), h};
}

}  // namespace

FramedEmbedding frame_record(const EncoderVars& enc, Var bank, const ParamStore& store, const GraphRecord& rec,
                             const FrameOptions& opts, Rng* dropout_rng) {
  auto [pg, h] = encode_perturbed(enc, bank, store, rec, opts.k, opts.dropout, dropout_rng);
  FramedEmbedding fe;
  fe.z = mean_pool(h, pg.n_original);
  Var v = tangent_vectors(h, pg.n_original, pg.m);
  FrameResult fr = orthogonal_frame(v, opts.length_mode, opts.frame_seed);
  fe.w = fr.w;
  fe.g = local_metric(fr.w);
  fe.degenerate_columns = fr.degenerate_columns;
  return fe;
}

Var embed_record(const EncoderVars& enc, Var bank, const ParamStore& store, const GraphRecord& rec, std::size_t k,
                 double dropout, Rng* dropout_rng) {
  auto [pg, h] = encode_perturbed(enc, bank, store, rec, k, dropout, dropout_rng);
  return mean_pool(h, pg.n_original);
}

FramedValues frame_values(const ParamStore& store, const GraphRecord& rec, const FrameOptions& opts) {
  Tape t;
  BoundParams p(store, t, [](const std::string&) { return false; });
  FramedEmbedding fe = frame_record(EncoderVars::from(p), p["bank"], store, rec, opts, nullptr);
  return {fe.z.value(), fe.w.value(), fe.g.value()};
}

}  // namespace mglue
