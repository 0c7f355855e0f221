#include "mglue/encoder.hpp"

#include <cmath>

#include "mglue/random.hpp"

namespace mglue {

void init_encoder(ParamStore& store, const EncoderDims& dims, std::uint64_t seed) {
  Rng rng(stream_seed(seed, 0xe1c0));
  auto glorot = [&](std::size_t in, std::size_t out) {
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    Matrix w(in, out);
    for (auto& v : w.values()) v = rng.uniform(-a, a);
    return w;
  };
  store.set("enc.w1", glorot(dims.input, dims.hidden));
  store.set("enc.b1", Matrix(1, dims.hidden));
  store.set("enc.w2", glorot(dims.hidden, dims.output));
  store.set("enc.b2", Matrix(1, dims.output));
}

EncoderVars EncoderVars::from(const BoundParams& p) {
  return {p["enc.w1"], p["enc.b1"], p["enc.w2"], p["enc.b2"]};
}

Matrix normalized_adjacency(const GraphRecord& g) {
  const std::size_t n = g.num_nodes;
  Matrix a = Matrix::identity(n);
  for (const auto& [i, j] : g.edges) {
    a(i, j) = 1.0;
    a(j, i) = 1.0;
  }
  std::vector<double> dinv(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a(i, j);
    dinv[i] = 1.0 / std::sqrt(s);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) *= dinv[i] * dinv[j];
  return a;
}

Var normalize_adjacency(Var a) {
  require(a.rows() == a.cols(), "normalize_adjacency: adjacency must be square");
  Tape& t = *a.tape();
  Var with_loops = a + t.constant(Matrix::identity(a.rows()));
  Var dinv = pow(row_sums(with_loops), -0.5);  // n×1
  return with_loops * dinv * transpose(dinv);
}

Var gcn_forward(const EncoderVars& p, Var a_hat, Var x, double dropout, Rng* dropout_rng) {
  require(x.cols() == p.w1.rows(), "gcn_forward: feature dimension " + std::to_string(x.cols()) +
                                       " does not match encoder input " + std::to_string(p.w1.rows()));
  require(a_hat.rows() == x.rows() && a_hat.cols() == x.rows(), "gcn_forward: adjacency/feature size mismatch");
  Tape& t = *x.tape();
  Var h = relu(matmul(matmul(a_hat, x), p.w1) + p.b1);
  if (dropout_rng && dropout > 0.0) {
    Matrix mask(h.rows(), h.cols());
    const double keep = 1.0 - dropout;
    for (auto& v : mask.values()) v = dropout_rng->bernoulli(keep) ? 1.0 / keep : 0.0;
    h = h * t.constant(std::move(mask));
  }
  return matmul(matmul(a_hat, h), p.w2) + p.b2;
}

std::vector<Var> gcn_forward(const EncoderVars& p, const ParamStore& store, const GraphBatch& batch, Tape& tape,
                             bool train_mode, double dropout, std::uint64_t seed) {
  std::vector<Var> out;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const GraphRecord& rec = *batch.records[b];
    Rng rng(stream_seed(seed, b));
    Var a = tape.constant(normalized_adjacency(rec));
    Var x = tape.constant(project_features(store, rec.features));
    out.push_back(gcn_forward(p, a, x, dropout, train_mode ? &rng : nullptr));
  }
  return out;
}

Var mean_pool(Var node_embeddings, std::size_t n_original) {
  require(n_original > 0, "mean_pool: empty record");
  require(n_original <= node_embeddings.rows(), "mean_pool: more original nodes than embedding rows");
  return col_means(slice(node_embeddings, 0, n_original, 0, node_embeddings.cols()));
}

std::string projection_name(std::size_t raw_dim) { return "projection." + std::to_string(raw_dim); }

Matrix make_projection(std::size_t raw_dim, std::size_t out_dim, std::uint64_t seed) {
  Rng rng(stream_seed(seed, 0x9e01, raw_dim));
  const double sd = 1.0 / std::sqrt(static_cast<double>(out_dim));
  Matrix r(raw_dim, out_dim);
  for (auto& v : r.values()) v = sd * rng.normal();
  return r;
}

void ensure_projection(ParamStore& store, std::size_t raw_dim, std::size_t out_dim, std::uint64_t seed) {
  const std::string name = projection_name(raw_dim);
  if (!store.contains(name)) store.set(name, make_projection(raw_dim, out_dim, seed));
}

Matrix project_features(const ParamStore& store, const Matrix& features) {
  const std::string name = projection_name(features.cols());
  if (!store.contains(name))
    throw ContractError("no input projection for feature dimension " + std::to_string(features.cols()));
  return matmul(features, store.get(name));
}

}  // namespace mglue
