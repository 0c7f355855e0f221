#pragma once

// Few-shot adaptation on a target domain: prompt matrix Q over a frozen
// encoder, the transfer graph to the nearest prototypes, Riemannian MoE
// alignment, task head, and the geometric transfer metric (GTM).

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mglue/frame.hpp"
#include "mglue/gluing.hpp"
#include "mglue/graph_data.hpp"
#include "mglue/params.hpp"
#include "mglue/prototypes.hpp"

namespace mglue {

struct AdaptConfig {
  int epochs = 50;
  double learning_rate = 1e-3;
  double lambda = 1.0;
  std::size_t knn_k = 3;  // prototypes joined to each target sample
  std::size_t shots = 5;
  std::size_t gate_hidden = 32;
  bool use_adapted_z = false;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AdaptedFrame {
  Var z;  // 1 × d, z Q^T
  Var w;  // d × M, re-orthogonalized Q W
  Var g;  // M × M
};

/// z -> Qz; columns of W mapped by Q and passed through the orthogonal frame
/// again; G = W'^T W' + jitter I.
AdaptedFrame prompt_adapt(Var z, Var w, Var q, LengthMode mode = LengthMode::norm, std::uint64_t frame_seed = 0);

/// Node 0 is the target; nodes 1..k its nearest prototypes by z distance.
struct TransferGraph {
  std::vector<std::string> prototypes;  // nearest first
  std::vector<Var> metrics;             // target G, then exp(log G) per prototype
  std::vector<Edge> edges;              // star edges, then consecutive prototype pairs
  std::vector<TrianglePath> paths;      // (a, 0, b) and (0, a, b) per consecutive pair
};

/// k is clamped to the number of prototypes.
TransferGraph build_transfer_graph(const Matrix& z_adapt, Var g_adapt, const PrototypeSet& protos, std::size_t k);

struct GlueLosses {
  Var holo;
  Var curv;
};

/// Holonomy and curvature losses over the adjacent-edge pairs; with a single
/// prototype, ||P - I||_F^2 and |log r|^2 on the one edge.
GlueLosses transfer_glue_losses(const TransferGraph& g);

struct GtmReport {
  double delta_h = 0.0;
  double delta_c = 0.0;
  double gtm = 0.0;
};

/// Measurement only; reads values, builds no gradients.
GtmReport gtm(const TransferGraph& g);

/// GTM of an unadapted record (Q = I).
GtmReport raw_gtm(const ParamStore& pretrained, const PrototypeSet& protos, const FrameOptions& fopts,
                  const GraphRecord& rec, std::size_t k);

// ---- gate, alignment, task head ---------------------------------------------------

/// Two-layer gate over [z_adapt, diag(log G_adapt)]: gate.w1 Glorot, gate.w2
/// and biases zero (uniform weights at initialization).
void init_gate(ParamStore& store, std::size_t input_dim, std::size_t hidden, std::size_t experts, std::uint64_t seed);

struct GateVars {
  Var w1, b1, w2, b2;
  static GateVars from(const BoundParams& p);
};

/// Softmax gate weights (1 × K), prototypes in map order.
Var gate_weights(Var z_adapt, Var log_g_adapt, const GateVars& gate);

/// sum_k beta_k log G^{S_k}.
Var moe_align(Var z_adapt, Var log_g_adapt, const GateVars& gate, const PrototypeSet& protos);

/// [z, diag(log G_adapt), diag(log G_align)] as a 1 × (d + 2M) row.
Var task_representation(Var z, Var log_g_adapt, Var log_g_align);

/// Linear head (node, graph) or bilinear head (link) under head.*.
void init_head(ParamStore& store, TaskType task, std::size_t input_dim, int num_classes, std::uint64_t seed);
Var head_logits(const BoundParams& p, TaskType task, Var rep);

// ---- adaptation loop ------------------------------------------------------------

/// Frozen per-record values from the pre-trained model.
struct FrozenSample {
  Matrix z;  // 1 × d
  Matrix w;  // d × M
  int label = 0;
};
std::vector<FrozenSample> precompute_frames(const ParamStore& pretrained, const DomainDataset& ds,
                                            const FrameOptions& fopts);

struct FewShotSplit {
  std::vector<std::size_t> train, val, test;
};
/// `shots` records per class for training; the rest shuffled and split into
/// validation (val_fraction) and test.
FewShotSplit few_shot_split(const DomainDataset& ds, std::size_t shots, double val_fraction, std::uint64_t seed);

struct AdaptEpoch {
  int epoch = 0;
  double loss_task = 0.0;
  double loss_holo = 0.0;
  double loss_curv = 0.0;
  // GTM of the few-shot samples' transfer graphs after this epoch's step.
  double gtm = 0.0;
  double delta_h = 0.0;
  double delta_c = 0.0;
  // Same measurement on the held-out test records.
  double test_delta_h = 0.0;
  double test_delta_c = 0.0;
  double val_acc = 0.0;
  double test_acc = 0.0;
  double test_loss = 0.0;
};

std::string adapt_metrics_header();
std::string format_adapt_row(const AdaptEpoch& e);

struct AdaptResult {
  std::vector<AdaptEpoch> epochs;
  GtmReport initial_gtm;  // raw geometry (Q = I), mean over all target records
  GtmReport final_gtm;    // few-shot samples, last epoch
  double test_acc = 0.0;  // at the epoch with the best validation accuracy (earliest on ties)
  int best_epoch = -1;
  double final_test_acc = 0.0;
  ParamStore prompt;  // Q, gate, head
  FewShotSplit split;
};

using AdaptCallback = std::function<void(const AdaptEpoch&)>;

/// Trains Q, gate and head with L_task + lambda (L_holo + L_curv). The
/// pre-trained parameters are only read; a checksum guards that.
AdaptResult run_adapt(const ParamStore& pretrained, const PrototypeSet& protos, const FrameOptions& fopts,
                      const DomainDataset& target, const AdaptConfig& cfg, const AdaptCallback& on_epoch = {});

}  // namespace mglue
