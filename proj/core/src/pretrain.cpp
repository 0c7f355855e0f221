#include "mglue/pretrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>

namespace mglue {

void PretrainConfig::validate() const {
  require(epochs >= 0, "pretrain: epochs must be >= 0");
  require(warmup_epochs >= 0, "pretrain: warmup_epochs must be >= 0");
  require(batch_size >= 1, "pretrain: batch_size must be >= 1");
  require(learning_rate > 0.0, "pretrain: learning_rate must be positive");
  require(lr_min_ratio >= 0.0 && lr_min_ratio <= 1.0, "pretrain: lr_min_ratio must lie in [0, 1]");
  require(dropout >= 0.0 && dropout < 1.0, "pretrain: dropout must lie in [0, 1)");
  require(m >= 1, "pretrain: m must be >= 1");
  require(m <= dims.output, "pretrain: m must not exceed the embedding dimension");
  require(k_perturb >= 1, "pretrain: k_perturb must be >= 1");
  require(knn_k >= 1, "pretrain: knn_k must be >= 1");
  require(temperature > 0.0, "pretrain: temperature must be positive");
  require(beta_ema > 0.0 && beta_ema < 1.0, "pretrain: beta_ema must lie in (0, 1)");
  require(w_local >= 0 && w_proto >= 0 && w_holo >= 0 && w_curv >= 0, "pretrain: loss weights must be >= 0");
  require(dims.input >= 1 && dims.hidden >= 1 && dims.output >= 1, "pretrain: dimensions must be >= 1");
  require(edge_drop >= 0.0 && edge_drop < 1.0, "pretrain: edge_drop must lie in [0, 1)");
  require(feature_mask >= 0.0 && feature_mask < 1.0, "pretrain: feature_mask must lie in [0, 1)");
}

FrameOptions PretrainConfig::frame_options() const {
  FrameOptions o;
  o.k = k_perturb;
  o.length_mode = length_mode;
  o.dropout = dropout;
  o.frame_seed = stream_seed(seed, 0xf4a3);
  return o;
}

TrainingDomain single_graph_domain(const GraphRecord& graph, int hops, std::size_t fanout, std::uint64_t seed) {
  TrainingDomain td;
  td.data = ego_sample(graph, hops, fanout, seed);
  std::set<Edge> uniq;
  for (auto [a, b] : graph.edges)
    if (a != b) uniq.insert({std::min(a, b), std::max(a, b)});
  td.skeleton.assign(uniq.begin(), uniq.end());
  return td;
}

bool is_trainable(const std::string& name) { return name == "bank" || name.rfind("enc.", 0) == 0; }

TrainState init_train_state(const std::vector<TrainingDomain>& domains, const PretrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  init_encoder(s.params, cfg.dims, stream_seed(cfg.seed, 0xe1));
  init_bank(s.params, cfg.m, cfg.dims.input, stream_seed(cfg.seed, 0xb4));
  for (const auto& d : domains) {
    require(!d.data.records.empty(), "pretrain: dataset '" + d.data.name + "' has no records");
    for (const auto& r : d.data.records) ensure_projection(s.params, r.feature_dim(), cfg.dims.input, cfg.seed);
  }
  s.rng = Rng(stream_seed(cfg.seed, 0x7a));
  return s;
}

// ---- losses and skeletons ---------------------------------------------------------

Var local_contrastive_loss(Var z1, Var z2, double temperature) {
  require(temperature > 0.0, "local_contrastive_loss: temperature must be positive");
  require(z1.rows() == z2.rows() && z1.cols() == z2.cols(), "local_contrastive_loss: view shapes differ");
  const std::size_t b = z1.rows();
  require(b >= 2, "local_contrastive_loss: needs at least two records per batch");
  Tape& t = *z1.tape();
  const Var parts[] = {z1, z2};
  Var z = cosine_normalize(concat_rows(parts));
  Var s = scale(matmul(z, transpose(z)), 1.0 / temperature);
  Matrix mask(2 * b, 2 * b);
  for (std::size_t i = 0; i < 2 * b; ++i) mask(i, i) = -1e9;
  std::vector<int> targets(2 * b);
  for (std::size_t i = 0; i < b; ++i) {
    targets[i] = static_cast<int>(i + b);
    targets[i + b] = static_cast<int>(i);
  }
  return cross_entropy(s + t.constant(mask), targets);
}

GraphRecord augment(const GraphRecord& rec, double edge_drop, double feature_mask, Rng& rng) {
  GraphRecord out = rec;
  out.edges.clear();
  for (const auto& e : rec.edges)
    if (!rng.bernoulli(edge_drop)) out.edges.push_back(e);
  for (std::size_t c = 0; c < out.features.cols(); ++c)
    if (rng.bernoulli(feature_mask))
      for (std::size_t r = 0; r < out.features.rows(); ++r) out.features(r, c) = 0.0;
  return out;
}

SkeletonGraph cross_dataset_knn(const Matrix& z, std::size_t knn_k) {
  require(knn_k >= 1, "cross_dataset_knn: knn_k must be >= 1");
  SkeletonGraph g;
  g.n = z.rows();
  std::set<Edge> uniq;
  for (std::size_t i = 0; i < g.n; ++i) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t j = 0; j < g.n; ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < z.cols(); ++c) s += (z(i, c) - z(j, c)) * (z(i, c) - z(j, c));
      d.emplace_back(s, j);
    }
    std::sort(d.begin(), d.end());
    for (std::size_t r = 0; r < std::min(knn_k, d.size()); ++r)
      uniq.insert({std::min(i, d[r].second), std::max(i, d[r].second)});
  }
  g.edges.assign(uniq.begin(), uniq.end());
  return g;
}

std::vector<TrianglePath> sample_triangle_paths(const SkeletonGraph& g, std::size_t n_samples, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> adj(g.n);
  for (auto [a, b] : g.edges) {
    require(a < g.n && b < g.n && a != b, "sample_triangle_paths: bad skeleton edge");
    adj[a].push_back(b);
    adj[b].push_back(a);
  }
  std::vector<std::uint64_t> cum;
  std::uint64_t total = 0;
  for (auto& nb : adj) {
    std::sort(nb.begin(), nb.end());
    const std::uint64_t deg = nb.size();
    total += deg * (deg - (deg > 0 ? 1 : 0)) / 2;
    cum.push_back(total);
  }
  std::vector<TrianglePath> out;
  if (total == 0) return out;
  Rng rng(seed);
  out.reserve(n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const std::uint64_t x = rng.below(total);
    const std::size_t j = static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), x) - cum.begin());
    const auto& nb = adj[j];
    std::size_t a = rng.below(nb.size());
    std::size_t b = rng.below(nb.size() - 1);
    if (b >= a) ++b;
    out.push_back({std::min(nb[a], nb[b]), j, std::max(nb[a], nb[b])});
  }
  return out;
}

// ---- training loop ----------------------------------------------------------------

std::string metrics_header() {
  return "epoch,stage,batch,loss_local,loss_proto,loss_holo,loss_curv,loss_total,lr,wall_ms";
}

std::string format_metrics_row(const MetricsRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%d,%d,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.epoch, r.stage, r.batch,
                r.loss_local, r.loss_proto, r.loss_holo, r.loss_curv, r.loss_total, r.lr, r.wall_ms);
  return buf;
}

NonFiniteLoss::NonFiniteLoss(const std::string& loss, int epoch, int stage, std::size_t batch, double value)
    : NumericalError("non-finite " + loss + " (" + std::to_string(value) + ") at epoch " + std::to_string(epoch) +
                         ", stage " + std::to_string(stage) + ", batch " + std::to_string(batch),
                     value),
      loss_(loss),
      stage_(stage),
      batch_(batch) {}

namespace {

using Clock = std::chrono::steady_clock;

struct StepContext {
  TrainState& state;
  const PretrainConfig& cfg;
  int epoch;
  double lr;
};

struct Term {
  const char* name;
  double weight;
  std::optional<Var> value;
  double* sink;
};

// Checks every term, then (if anything is differentiable) steps the optimizer.
void finish_step(StepContext& ctx, Tape& tape, const BoundParams& bound, std::span<Term> terms, MetricsRow& row) {
  std::optional<Var> total;
  for (auto& t : terms) {
    if (!t.value) continue;
    const double v = t.value->item();
    if (!std::isfinite(v)) throw NonFiniteLoss(t.name, ctx.epoch, row.stage, row.batch, v);
    *t.sink = v;
    if (t.weight == 0.0) continue;
    Var w = scale(*t.value, t.weight);
    total = total ? *total + w : w;
  }
  row.loss_total = total ? total->item() : 0.0;
  if (!std::isfinite(row.loss_total)) throw NonFiniteLoss("loss_total", ctx.epoch, row.stage, row.batch, row.loss_total);
  if (total && total->tracked()) {
    Gradients g = tape.backward(*total);
    ctx.state.adam.step(ctx.state.params, bound, g, ctx.lr);
  }
}

double elapsed_ms(const PretrainConfig& cfg, Clock::time_point t0) {
  if (!cfg.record_wall_time) return 0.0;
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::vector<DomainDataset> datasets_of(const std::vector<TrainingDomain>& domains) {
  std::vector<DomainDataset> out;
  for (const auto& d : domains) out.push_back(d.data);
  return out;
}

MetricsRow stage1_step(StepContext& ctx, const std::vector<TrainingDomain>& domains, const GraphBatch& batch,
                       std::size_t index, std::uint64_t epoch_seed) {
  const auto& cfg = ctx.cfg;
  MetricsRow row{ctx.epoch, 1, index};
  row.lr = ctx.lr;
  const auto t0 = Clock::now();
  Tape tape;
  BoundParams bound(ctx.state.params, tape, is_trainable);
  const EncoderVars enc = EncoderVars::from(bound);
  const Var bank = bound["bank"];
  const FrameOptions fopts = cfg.frame_options();

  std::vector<Var> z1, z2, zc;
  std::vector<Matrix> log_g;
  std::vector<std::string> doms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const GraphRecord& rec = *batch.records[i];
    Rng aug(stream_seed(epoch_seed, 1, index, i, 0));
    Rng d1(stream_seed(epoch_seed, 1, index, i, 1));
    Rng d2(stream_seed(epoch_seed, 1, index, i, 2));
    Rng d0(stream_seed(epoch_seed, 1, index, i, 3));
    const GraphRecord v1 = augment(rec, cfg.edge_drop, cfg.feature_mask, aug);
    const GraphRecord v2 = augment(rec, cfg.edge_drop, cfg.feature_mask, aug);
    z1.push_back(embed_record(enc, bank, ctx.state.params, v1, cfg.k_perturb, cfg.dropout, &d1));
    z2.push_back(embed_record(enc, bank, ctx.state.params, v2, cfg.k_perturb, cfg.dropout, &d2));
    FramedEmbedding fe = frame_record(enc, bank, ctx.state.params, rec, fopts, &d0);
    zc.push_back(fe.z);
    log_g.push_back(spd_log_value(fe.g.value()));
    doms.push_back(domains[batch.refs[i].dataset].data.name);
  }

  std::optional<Var> local, proto;
  if (batch.size() >= 2) local = local_contrastive_loss(concat_rows(z1), concat_rows(z2), cfg.temperature);
  const bool protos_ready = std::all_of(doms.begin(), doms.end(), [&](const std::string& d) {
    return ctx.state.protos.count(d) != 0;
  });
  if (ctx.epoch >= cfg.warmup_epochs && protos_ready && ctx.state.protos.size() >= 2)
    proto = proto_contrastive_loss(concat_rows(zc), doms, ctx.state.protos, cfg.temperature);

  Term terms[] = {{"loss_local", cfg.w_local, local, &row.loss_local},
                  {"loss_proto", cfg.w_proto, proto, &row.loss_proto}};
  finish_step(ctx, tape, bound, terms, row);

  // Prototype EMA on the pre-step embeddings, domains in name order.
  std::map<std::string, std::vector<std::size_t>> by_domain;
  for (std::size_t i = 0; i < doms.size(); ++i) by_domain[doms[i]].push_back(i);
  for (const auto& [dom, idx] : by_domain) {
    Matrix zm(1, zc[idx[0]].cols());
    Matrix lm(log_g[idx[0]].rows(), log_g[idx[0]].cols());
    for (std::size_t i : idx) {
      zm = zm + zc[i].value();
      lm = lm + log_g[i];
    }
    const double inv = 1.0 / static_cast<double>(idx.size());
    auto it = ctx.state.protos.find(dom);
    Prototype p = it != ctx.state.protos.end() ? it->second : Prototype{dom, Matrix(1, zm.cols()), lm, 0};
    ctx.state.protos[dom] = ema_update(p, inv * zm, inv * lm, cfg.beta_ema);
  }
  row.wall_ms = elapsed_ms(cfg, t0);
  return row;
}

// Frames the records, builds the skeleton (given edges or KNN) and applies the
// gluing losses.
MetricsRow gluing_step(StepContext& ctx, int stage, const std::vector<const GraphRecord*>& records,
                       const std::vector<Edge>* given_edges, std::size_t index, std::uint64_t seed) {
  const auto& cfg = ctx.cfg;
  MetricsRow row{ctx.epoch, stage, index};
  row.lr = ctx.lr;
  const auto t0 = Clock::now();
  Tape tape;
  BoundParams bound(ctx.state.params, tape, is_trainable);
  const EncoderVars enc = EncoderVars::from(bound);
  const Var bank = bound["bank"];
  const FrameOptions fopts = cfg.frame_options();

  std::vector<Var> metrics;
  Matrix z(records.size(), cfg.dims.output);
  for (std::size_t i = 0; i < records.size(); ++i) {
    Rng drop(stream_seed(seed, i, 3));
    FramedEmbedding fe = frame_record(enc, bank, ctx.state.params, *records[i], fopts, &drop);
    metrics.push_back(fe.g);
    for (std::size_t c = 0; c < z.cols(); ++c) z(i, c) = fe.z.value()(0, c);
  }
  SkeletonGraph skel;
  if (given_edges) {
    skel.n = records.size();
    skel.edges = *given_edges;
  } else {
    skel = cross_dataset_knn(z, cfg.knn_k);
  }
  const auto paths = sample_triangle_paths(skel, cfg.n_triangle_samples, stream_seed(seed, 0x9a));
  std::optional<Var> holo, curv;
  if (!paths.empty()) {
    holo = holonomy_loss(paths, metrics);
    curv = curvature_loss(paths, metrics);
  }
  Term terms[] = {{"loss_holo", cfg.w_holo, holo, &row.loss_holo}, {"loss_curv", cfg.w_curv, curv, &row.loss_curv}};
  finish_step(ctx, tape, bound, terms, row);
  row.wall_ms = elapsed_ms(cfg, t0);
  return row;
}

}  // namespace

std::vector<MetricsRow> run_pretrain_epoch(TrainState& state, const std::vector<TrainingDomain>& domains,
                                           const PretrainConfig& cfg) {
  cfg.validate();
  require(!domains.empty(), "pretrain: no datasets");
  const std::uint64_t epoch_seed = state.rng.next_u64();
  const double lr = cosine_lr(cfg.learning_rate, cfg.learning_rate * cfg.lr_min_ratio, state.epoch,
                              std::max(cfg.epochs, 1));
  StepContext ctx{state, cfg, state.epoch, lr};
  std::vector<MetricsRow> rows;

  const auto datasets = datasets_of(domains);
  const auto batches = make_batches(datasets, cfg.batch_size, stream_seed(epoch_seed, 0));

  for (std::size_t b = 0; b < batches.size(); ++b) rows.push_back(stage1_step(ctx, domains, batches[b], b, epoch_seed));

  for (std::size_t b = 0; b < batches.size(); ++b)
    rows.push_back(gluing_step(ctx, 2, batches[b].records, nullptr, b, stream_seed(epoch_seed, 2, b)));

  std::size_t b3 = 0;
  for (std::size_t d = 0; d < domains.size(); ++d) {
    const std::vector<DomainDataset> one{domains[d].data};
    for (const auto& batch : make_batches(one, cfg.batch_size, stream_seed(epoch_seed, 3, d))) {
      const std::uint64_t seed = stream_seed(epoch_seed, 3, d, b3);
      if (domains[d].skeleton.empty()) {
        rows.push_back(gluing_step(ctx, 3, batch.records, nullptr, b3, seed));
      } else {
        // Skeleton edges among the batch's records, re-indexed to batch positions.
        std::map<std::size_t, std::size_t> pos;
        for (std::size_t i = 0; i < batch.size(); ++i) pos[batch.refs[i].record] = i;
        std::vector<Edge> edges;
        for (auto [a, c] : domains[d].skeleton) {
          auto ia = pos.find(a), ic = pos.find(c);
          if (ia != pos.end() && ic != pos.end())
            edges.push_back({std::min(ia->second, ic->second), std::max(ia->second, ic->second)});
        }
        std::sort(edges.begin(), edges.end());
        rows.push_back(gluing_step(ctx, 3, batch.records, &edges, b3, seed));
      }
      ++b3;
    }
  }
  ++state.epoch;
  return rows;
}

void run_pretrain(TrainState& state, const std::vector<TrainingDomain>& domains, const PretrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  while (state.epoch < cfg.epochs) {
    auto rows = run_pretrain_epoch(state, domains, cfg);
    if (on_epoch) on_epoch(state, rows);
  }
}

}  // namespace mglue
