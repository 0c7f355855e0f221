#pragma once

// Two-layer GCN with symmetric normalization, mean pooling, and the fixed
// random input projection that unifies feature dimensions across domains.

#include <cstdint>
#include <string>
#include <vector>

#include "mglue/autodiff.hpp"
#include "mglue/graph_data.hpp"
#include "mglue/params.hpp"

namespace mglue {

class Rng;

struct EncoderDims {
  std::size_t input = 128;   // F', after projection
  std::size_t hidden = 512;
  std::size_t output = 512;  // d
};

/// Glorot-uniform weights and zero biases under enc.w1, enc.b1, enc.w2, enc.b2.
void init_encoder(ParamStore& store, const EncoderDims& dims, std::uint64_t seed);

struct EncoderVars {
  Var w1, b1, w2, b2;
  static EncoderVars from(const BoundParams& p);
};

/// D^{-1/2}(A + I)D^{-1/2} for an unweighted record.
Matrix normalized_adjacency(const GraphRecord& g);

/// Adds self-loops to an on-tape weighted adjacency (zero diagonal) and
/// normalizes it symmetrically.
Var normalize_adjacency(Var a);

/// H1 = ReLU(A X W1 + b1), dropout on H1 when `dropout_rng` is set,
/// H2 = A H1 W2 + b2. Returns H2 (n × d).
Var gcn_forward(const EncoderVars& p, Var a_hat, Var x, double dropout, Rng* dropout_rng);

/// Batch form over unperturbed records: one node-embedding block per record, in
/// batch order. Dropout masks come from a stream seeded by (seed, position).
std::vector<Var> gcn_forward(const EncoderVars& p, const ParamStore& store, const GraphBatch& batch, Tape& tape,
                             bool train_mode, double dropout, std::uint64_t seed);

/// Mean of the first `n_original` rows (1 × d).
Var mean_pool(Var node_embeddings, std::size_t n_original);

// Fixed seeded Gaussian projections R (F × F'), entries N(0, 1/F'), one per raw
// feature dimension F. Not trained; stored as projection.<F>.
std::string projection_name(std::size_t raw_dim);
Matrix make_projection(std::size_t raw_dim, std::size_t out_dim, std::uint64_t seed);
void ensure_projection(ParamStore& store, std::size_t raw_dim, std::size_t out_dim, std::uint64_t seed);
/// x R using the stored projection for the record's feature dimension.
Matrix project_features(const ParamStore& store, const Matrix& features);

}  // namespace mglue
