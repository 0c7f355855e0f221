#pragma once

// Three-stage pre-training: local construction with contrastive and prototype
// losses, gluing over a cross-dataset KNN skeleton, and per-dataset refinement.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mglue/frame.hpp"
#include "mglue/gluing.hpp"
#include "mglue/graph_data.hpp"
#include "mglue/params.hpp"
#include "mglue/prototypes.hpp"
#include "mglue/random.hpp"

namespace mglue {

struct PretrainConfig {
  int epochs = 10;
  int warmup_epochs = 5;
  std::size_t batch_size = 32;
  double learning_rate = 1e-4;
  double lr_min_ratio = 0.01;
  double dropout = 0.1;
  std::size_t m = 32;
  std::size_t k_perturb = 15;
  std::size_t knn_k = 15;
  std::size_t n_triangle_samples = 64;
  double temperature = 1.0;
  double beta_ema = 0.99;
  std::uint64_t seed = 0;
  double w_local = 1.0;
  double w_proto = 1.0;
  double w_holo = 1.0;
  double w_curv = 1.0;
  EncoderDims dims{128, 512, 512};
  LengthMode length_mode = LengthMode::norm;
  double edge_drop = 0.2;
  double feature_mask = 0.2;
  bool record_wall_time = false;

  void validate() const;
  FrameOptions frame_options() const;
};

/// A pre-training dataset. `skeleton` holds record-level edges when the
/// records are ego-graphs cut from one large graph (stage 3 then glues along
/// those edges); empty for graph collections (stage 3 uses intra-dataset KNN).
struct TrainingDomain {
  DomainDataset data;
  std::vector<Edge> skeleton;
};

/// Ego-graphs around every node of a labelled large graph, with the graph's
/// own edges as the stage-3 skeleton.
TrainingDomain single_graph_domain(const GraphRecord& graph, int hops, std::size_t fanout, std::uint64_t seed);

struct TrainState {
  ParamStore params;
  Adam adam;
  PrototypeSet protos;
  int epoch = 0;  // next epoch to run
  Rng rng;
};

/// Fresh encoder, bank and projections for every feature dimension present.
TrainState init_train_state(const std::vector<TrainingDomain>& domains, const PretrainConfig& cfg);

/// Parameters updated by the optimizer.
bool is_trainable(const std::string& name);

// ---- losses and skeletons ---------------------------------------------------------

/// Symmetric InfoNCE over 2B views: the positive of a view is the other view of
/// the same record; all remaining 2B - 2 views are negatives.
Var local_contrastive_loss(Var z1, Var z2, double temperature = 1.0);

/// Seeded edge dropping and feature-column masking.
GraphRecord augment(const GraphRecord& rec, double edge_drop, double feature_mask, Rng& rng);

struct SkeletonGraph {
  std::size_t n = 0;
  std::vector<Edge> edges;  // i < j, sorted, unique
};

/// Euclidean KNN over the rows of z (ties to the lower index), mutualized
/// (kept if either endpoint selects the other).
SkeletonGraph cross_dataset_knn(const Matrix& z, std::size_t knn_k);

/// Adjacent-edge pairs (i, j, k) with i < k: center j drawn with weight
/// deg(j)(deg(j)-1)/2, then a uniform unordered pair of its neighbours.
std::vector<TrianglePath> sample_triangle_paths(const SkeletonGraph& g, std::size_t n_samples, std::uint64_t seed);

// ---- training loop ----------------------------------------------------------------

struct MetricsRow {
  int epoch = 0;
  int stage = 0;
  std::size_t batch = 0;
  double loss_local = 0.0;
  double loss_proto = 0.0;
  double loss_holo = 0.0;
  double loss_curv = 0.0;
  double loss_total = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

std::string metrics_header();
std::string format_metrics_row(const MetricsRow& r);

/// A loss went non-finite; training stops without applying the step.
class NonFiniteLoss : public NumericalError {
 public:
  NonFiniteLoss(const std::string& loss, int epoch, int stage, std::size_t batch, double value);
  const std::string& loss() const { return loss_; }
  int stage() const { return stage_; }
  std::size_t batch() const { return batch_; }

 private:
  std::string loss_;
  int stage_;
  std::size_t batch_;
};

/// One epoch of stages 1-3 on `state` (advances state.epoch).
std::vector<MetricsRow> run_pretrain_epoch(TrainState& state, const std::vector<TrainingDomain>& domains,
                                           const PretrainConfig& cfg);

using EpochCallback = std::function<void(const TrainState&, const std::vector<MetricsRow>&)>;

/// Runs epochs state.epoch .. cfg.epochs-1, calling `on_epoch` after each.
void run_pretrain(TrainState& state, const std::vector<TrainingDomain>& domains, const PretrainConfig& cfg,
                  const EpochCallback& on_epoch);

}  // namespace mglue
