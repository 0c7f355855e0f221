#pragma once

// Local geometry of one graph: sparse perturbation nodes, tangent vectors,
// the orthogonal frame with length recovery, and the local metric.

#include <cstdint>
#include <string>
#include <vector>

#include "mglue/autodiff.hpp"
#include "mglue/encoder.hpp"
#include "mglue/graph_data.hpp"

namespace mglue {

/// Perturbation bank P (M × F') is stored as "bank".
void init_bank(ParamStore& store, std::size_t m, std::size_t input_dim, std::uint64_t seed);

struct PerturbedGraph {
  std::size_t n_original = 0;
  std::size_t m = 0;
  std::size_t original_edges = 0;  // distinct undirected edges of the record
  /// Original node indices attached to each perturbation node, best score first.
  std::vector<std::vector<std::size_t>> attached;
  Var weights;    // n × M attention weights; each row sums to 1 over its attached perturbation nodes
  Var adjacency;  // (n+M) × (n+M) weighted, zero diagonal
  Var a_hat;      // normalized with self-loops
  Var x;          // (n+M) × F': projected features stacked over the bank rows

  std::size_t perturbation_edges() const;
  /// Weighted undirected edge list (original edges weight 1).
  struct WeightedEdge {
    std::size_t a, b;
    double w;
  };
  std::vector<WeightedEdge> weighted_edges() const;
};

/// Scores s(i,m) = <x'_i, p_m>/sqrt(F'); perturbation node m attaches to its
/// top-k original nodes (ties to the lower index); k is clamped to n.
PerturbedGraph perturb_graph(const GraphRecord& rec, Var x_proj, Var bank, std::size_t k);

/// Column m = embedding of perturbation node m minus the mean embedding of the
/// original nodes. Returns d × M.
Var tangent_vectors(Var node_embeddings, std::size_t n_original, std::size_t m);

enum class LengthMode { norm, r_diag };
std::string to_string(LengthMode m);
LengthMode length_mode_from_string(const std::string& s);

struct FrameResult {
  Var w;                               // d × M
  std::size_t degenerate_columns = 0;  // replaced by seeded random directions
};

/// Modified Gram–Schmidt on the columns of V; each orthonormal direction is
/// rescaled to ||v_m|| (LengthMode::norm) or to the residual norm |R_mm|
/// (LengthMode::r_diag).
FrameResult orthogonal_frame(Var v, LengthMode mode = LengthMode::norm, std::uint64_t seed = 0);

constexpr double kMetricJitter = 1e-8;

/// G = W^T W + jitter I.
Var local_metric(Var w, double jitter = kMetricJitter);

struct FramedEmbedding {
  Var z;  // 1 × d
  Var w;  // d × M
  Var g;  // M × M
  std::size_t degenerate_columns = 0;
};

struct FrameOptions {
  std::size_t k = 15;
  LengthMode length_mode = LengthMode::norm;
  double dropout = 0.1;
  std::uint64_t frame_seed = 0;
};

/// Full pipeline for one record: project, perturb, encode, pool, frame, metric.
/// Dropout applies when `dropout_rng` is non-null.
FramedEmbedding frame_record(const EncoderVars& enc, Var bank, const ParamStore& store, const GraphRecord& rec,
                             const FrameOptions& opts, Rng* dropout_rng);

/// Only z (skips frame construction).
Var embed_record(const EncoderVars& enc, Var bank, const ParamStore& store, const GraphRecord& rec, std::size_t k,
                 double dropout, Rng* dropout_rng);

struct FramedValues {
  Matrix z, w, g;
};
/// Inference-mode values for every record (no dropout).
FramedValues frame_values(const ParamStore& store, const GraphRecord& rec, const FrameOptions& opts);

}  // namespace mglue
