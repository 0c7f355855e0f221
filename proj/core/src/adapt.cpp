#include "mglue/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>

#include "mglue/parallel.hpp"
#include "mglue/pretrain.hpp"
#include "mglue/random.hpp"

namespace mglue {

void AdaptConfig::validate() const {
  require(epochs >= 0, "adapt: epochs must be >= 0");
  require(learning_rate > 0.0, "adapt: learning_rate must be positive");
  require(lambda >= 0.0, "adapt: lambda must be >= 0");
  require(knn_k >= 1, "adapt: knn_k must be >= 1");
  require(shots >= 1, "adapt: shots must be >= 1");
  require(gate_hidden >= 1, "adapt: gate_hidden must be >= 1");
  require(val_fraction >= 0.0 && val_fraction < 1.0, "adapt: val_fraction must lie in [0, 1)");
}

AdaptedFrame prompt_adapt(Var z, Var w, Var q, LengthMode mode, std::uint64_t frame_seed) {
  require(q.rows() == q.cols(), "prompt_adapt: Q must be square");
  require(q.cols() == z.cols() && q.cols() == w.rows(), "prompt_adapt: Q does not match the embedding dimension");
  AdaptedFrame a;
  a.z = matmul(z, transpose(q));
  a.w = orthogonal_frame(matmul(q, w), mode, frame_seed).w;
  a.g = local_metric(a.w);
  return a;
}

TransferGraph build_transfer_graph(const Matrix& z_adapt, Var g_adapt, const PrototypeSet& protos, std::size_t k) {
  require(!protos.empty(), "build_transfer_graph: no prototypes (uninitialized checkpoint?)");
  require(k >= 1, "build_transfer_graph: k must be >= 1");
  Tape& t = *g_adapt.tape();
  TransferGraph g;
  g.prototypes = nearest_prototypes(z_adapt, protos, std::min(k, protos.size()));
  g.metrics.push_back(g_adapt);
  for (const auto& name : g.prototypes) g.metrics.push_back(t.constant(symmetric_exp(protos.at(name).log_g)));
  const std::size_t n = g.prototypes.size();
  for (std::size_t a = 1; a <= n; ++a) g.edges.push_back({0, a});
  for (std::size_t a = 1; a < n; ++a) {
    g.edges.push_back({a, a + 1});
    g.paths.push_back({a, 0, a + 1});
    g.paths.push_back({0, a, a + 1});
  }
  return g;
}

GlueLosses transfer_glue_losses(const TransferGraph& g) {
  require(g.metrics.size() >= 2, "transfer_glue_losses: transfer graph has no prototype");
  if (!g.paths.empty()) return {holonomy_loss(g.paths, g.metrics), curvature_loss(g.paths, g.metrics)};
  Tape& t = *g.metrics[0].tape();
  const std::size_t m = g.metrics[0].rows();
  Var p = transport(g.metrics[0], g.metrics[1]);
  Var holo = frob_sq(p - t.constant(Matrix::identity(m)));
  Var diff = spd_log_and_det(g.metrics[0]).logdet - spd_log_and_det(g.metrics[1]).logdet;
  return {holo, diff * diff};
}

GtmReport gtm(const TransferGraph& g) {
  // Re-evaluate on constants so no gradient bookkeeping is built.
  Tape t;
  TransferGraph c = g;
  for (auto& v : c.metrics) v = t.constant(v.value());
  GlueLosses l = transfer_glue_losses(c);
  GtmReport r;
  r.delta_h = l.holo.item();
  r.delta_c = l.curv.item();
  r.gtm = r.delta_h + r.delta_c;
  return r;
}

GtmReport raw_gtm(const ParamStore& pretrained, const PrototypeSet& protos, const FrameOptions& fopts,
                  const GraphRecord& rec, std::size_t k) {
  FramedValues fv = frame_values(pretrained, rec, fopts);
  Tape t;
  return gtm(build_transfer_graph(fv.z, t.constant(fv.g), protos, k));
}

// ---- gate, alignment, task head ---------------------------------------------------

namespace {

Matrix glorot(std::size_t in, std::size_t out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  Matrix w(in, out);
  for (auto& v : w.values()) v = rng.uniform(-a, a);
  return w;
}

}  // namespace

void init_gate(ParamStore& store, std::size_t input_dim, std::size_t hidden, std::size_t experts, std::uint64_t seed) {
  require(experts >= 1, "init_gate: needs at least one expert");
  Rng rng(stream_seed(seed, 0x6a7e));
  store.set("gate.w1", glorot(input_dim, hidden, rng));
  store.set("gate.b1", Matrix(1, hidden));
  store.set("gate.w2", Matrix(hidden, experts));
  store.set("gate.b2", Matrix(1, experts));
}

GateVars GateVars::from(const BoundParams& p) { return {p["gate.w1"], p["gate.b1"], p["gate.w2"], p["gate.b2"]}; }

Var gate_weights(Var z_adapt, Var log_g_adapt, const GateVars& gate) {
  const Var parts[] = {z_adapt, transpose(diagonal(log_g_adapt))};
  Var h = relu(matmul(concat_cols(parts), gate.w1) + gate.b1);
  return softmax_rows(matmul(h, gate.w2) + gate.b2);
}

Var moe_align(Var z_adapt, Var log_g_adapt, const GateVars& gate, const PrototypeSet& protos) {
  require(!protos.empty(), "moe_align: no prototypes");
  Var beta = gate_weights(z_adapt, log_g_adapt, gate);
  require(beta.cols() == protos.size(), "moe_align: gate width differs from the number of prototypes");
  Tape& t = *z_adapt.tape();
  std::optional<Var> out;
  std::size_t k = 0;
  for (const auto& [name, p] : protos) {
    Var term = slice(beta, 0, 1, k, k + 1) * t.constant(p.log_g);
    out = out ? *out + term : term;
    ++k;
  }
  return *out;
}

Var task_representation(Var z, Var log_g_adapt, Var log_g_align) {
  require(z.rows() == 1, "task_representation: z must be a row");
  require(log_g_adapt.rows() == log_g_align.rows(), "task_representation: metric sizes differ");
  const Var parts[] = {z, transpose(diagonal(log_g_adapt)), transpose(diagonal(log_g_align))};
  return concat_cols(parts);
}

void init_head(ParamStore& store, TaskType task, std::size_t input_dim, int num_classes, std::uint64_t seed) {
  require(num_classes >= 2, "init_head: needs at least two classes");
  Rng rng(stream_seed(seed, 0x4ead));
  if (task == TaskType::link) {
    require(num_classes == 2, "init_head: link tasks are binary");
    store.set("head.a", glorot(input_dim, input_dim, rng));
    store.set("head.b", Matrix(1, 1));
  } else {
    store.set("head.w", glorot(input_dim, static_cast<std::size_t>(num_classes), rng));
    store.set("head.b", Matrix(1, static_cast<std::size_t>(num_classes)));
  }
}

Var head_logits(const BoundParams& p, TaskType task, Var rep) {
  if (task != TaskType::link) return matmul(rep, p["head.w"]) + p["head.b"];
  // Bilinear score rep A rep^T for the positive class; the negative class is the 0 reference.
  Tape& t = *rep.tape();
  Var score = matmul(matmul(rep, p["head.a"]), transpose(rep)) + p["head.b"];
  const Var parts[] = {t.constant_scalar(0.0), score};
  return concat_cols(parts);
}

// ---- adaptation loop ------------------------------------------------------------

namespace {

int label_of(const GraphRecord& r, std::size_t index) {
  if (!r.label) throw ContractError("adapt: record " + std::to_string(index) + " has no label");
  return *r.label;
}

int class_count(const DomainDataset& ds) {
  int c = ds.num_classes;
  for (std::size_t i = 0; i < ds.records.size(); ++i) c = std::max(c, label_of(ds.records[i], i) + 1);
  return c;
}

struct RecordForward {
  Var logits;
  GlueLosses glue;
  TransferGraph graph;
};

struct Model {
  const PrototypeSet& protos;
  const FrameOptions& fopts;
  const AdaptConfig& cfg;
  TaskType task;
};

RecordForward forward_record(const Model& m, const BoundParams& p, const FrozenSample& s, Tape& t) {
  Var z = t.constant(s.z);
  AdaptedFrame a = prompt_adapt(z, t.constant(s.w), p["prompt.q"], m.fopts.length_mode, m.fopts.frame_seed);
  SpdLog la = spd_log_and_det(a.g);
  RecordForward f;
  f.graph = build_transfer_graph(a.z.value(), a.g, m.protos, m.cfg.knn_k);
  f.glue = transfer_glue_losses(f.graph);
  Var align = moe_align(a.z, la.log, GateVars::from(p), m.protos);
  Var rep = task_representation(m.cfg.use_adapted_z ? a.z : z, la.log, align);
  f.logits = head_logits(p, m.task, rep);
  return f;
}

struct Evaluation {
  double acc = 0.0;
  double loss = 0.0;
  GtmReport gtm;
};

std::size_t argmax(const Matrix& row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.cols(); ++c)
    if (row(0, c) > row(0, best)) best = c;
  return best;
}

Evaluation evaluate(const Model& m, const ParamStore& prompt, const std::vector<FrozenSample>& samples,
                    const std::vector<std::size_t>& idx) {
  Evaluation e;
  if (idx.empty()) return e;
  struct PerRecord {
    double loss, hit, holo, curv;
  };
  std::vector<PerRecord> per(idx.size());
  parallel_for(idx.size(), [&](std::size_t r) {
    const std::size_t i = idx[r];
    Tape t;
    BoundParams p(prompt, t, [](const std::string&) { return false; });
    RecordForward f = forward_record(m, p, samples[i], t);
    const int target[] = {samples[i].label};
    per[r] = {cross_entropy(f.logits, target).item(),
              static_cast<int>(argmax(f.logits.value())) == samples[i].label ? 1.0 : 0.0, f.glue.holo.item(),
              f.glue.curv.item()};
  });
  for (const PerRecord& r : per) {
    e.loss += r.loss;
    e.acc += r.hit;
    e.gtm.delta_h += r.holo;
    e.gtm.delta_c += r.curv;
  }
  const double n = static_cast<double>(idx.size());
  e.acc /= n;
  e.loss /= n;
  e.gtm.delta_h /= n;
  e.gtm.delta_c /= n;
  e.gtm.gtm = e.gtm.delta_h + e.gtm.delta_c;
  return e;
}

}  // namespace

std::vector<FrozenSample> precompute_frames(const ParamStore& pretrained, const DomainDataset& ds,
                                            const FrameOptions& fopts) {
  std::vector<FrozenSample> out(ds.records.size());
  parallel_for(ds.records.size(), [&](std::size_t i) {
    FramedValues fv = frame_values(pretrained, ds.records[i], fopts);
    out[i] = {fv.z, fv.w, label_of(ds.records[i], i)};
  });
  return out;
}

FewShotSplit few_shot_split(const DomainDataset& ds, std::size_t shots, double val_fraction, std::uint64_t seed) {
  require(shots >= 1, "few_shot_split: shots must be >= 1");
  const int classes = class_count(ds);
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const int y = label_of(ds.records[i], i);
    require(y >= 0, "few_shot_split: negative label at record " + std::to_string(i));
    by_class[static_cast<std::size_t>(y)].push_back(i);
  }
  Rng rng(stream_seed(seed, 0x5b17));
  FewShotSplit s;
  std::vector<std::size_t> rest;
  for (int c = 0; c < classes; ++c) {
    auto& members = by_class[static_cast<std::size_t>(c)];
    if (members.empty()) throw ContractError("few_shot_split: class " + std::to_string(c) + " has zero shots");
    rng.shuffle(members);
    const std::size_t take = std::min(shots, members.size());
    s.train.insert(s.train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take));
    rest.insert(rest.end(), members.begin() + static_cast<std::ptrdiff_t>(take), members.end());
  }
  std::sort(rest.begin(), rest.end());
  rng.shuffle(rest);
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(rest.size())));
  s.val.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.test.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_val), rest.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

std::string adapt_metrics_header() { return "epoch,loss_task,loss_holo,loss_curv,gtm,val_acc,test_acc"; }

std::string format_adapt_row(const AdaptEpoch& e) {
  char buf[384];
  std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", e.epoch, e.loss_task, e.loss_holo,
                e.loss_curv, e.gtm, e.val_acc, e.test_acc);
  return buf;
}

AdaptResult run_adapt(const ParamStore& pretrained, const PrototypeSet& protos, const FrameOptions& fopts,
                      const DomainDataset& target, const AdaptConfig& cfg, const AdaptCallback& on_epoch) {
  cfg.validate();
  require(!protos.empty(), "adapt: checkpoint has no prototypes");
  require(!target.records.empty(), "adapt: target dataset is empty");
  const std::uint64_t frozen_before = pretrained.checksum();

  const Model model{protos, fopts, cfg, target.task};
  const std::vector<FrozenSample> samples = precompute_frames(pretrained, target, fopts);
  const std::size_t d = samples[0].z.cols();
  const std::size_t m = samples[0].w.cols();
  const int classes = class_count(target);

  AdaptResult res;
  res.split = few_shot_split(target, cfg.shots, cfg.val_fraction, cfg.seed);
  res.prompt.set("prompt.q", Matrix::identity(d));
  init_gate(res.prompt, d + m, cfg.gate_hidden, protos.size(), stream_seed(cfg.seed, 1));
  init_head(res.prompt, target.task, d + 2 * m, classes, stream_seed(cfg.seed, 2));
  for (const auto& s : samples) {
    Tape t;
    const GtmReport r = gtm(build_transfer_graph(s.z, local_metric(t.constant(s.w)), protos, cfg.knn_k));
    res.initial_gtm.delta_h += r.delta_h / static_cast<double>(samples.size());
    res.initial_gtm.delta_c += r.delta_c / static_cast<double>(samples.size());
  }
  res.initial_gtm.gtm = res.initial_gtm.delta_h + res.initial_gtm.delta_c;
  res.final_gtm = evaluate(model, res.prompt, samples, res.split.train).gtm;
  double best_val = -1.0;

  Adam adam;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Tape t;
    BoundParams p(res.prompt, t, [](const std::string&) { return true; });
    std::vector<Var> logits;
    std::vector<int> labels;
    std::optional<Var> holo, curv;
    for (std::size_t i : res.split.train) {
      RecordForward f = forward_record(model, p, samples[i], t);
      logits.push_back(f.logits);
      labels.push_back(samples[i].label);
      holo = holo ? *holo + f.glue.holo : f.glue.holo;
      curv = curv ? *curv + f.glue.curv : f.glue.curv;
    }
    const double inv = 1.0 / static_cast<double>(res.split.train.size());
    Var l_task = cross_entropy(concat_rows(logits), labels);
    Var l_holo = scale(*holo, inv);
    Var l_curv = scale(*curv, inv);
    Var total = cfg.lambda > 0.0 ? l_task + scale(l_holo + l_curv, cfg.lambda) : l_task;

    AdaptEpoch row;
    row.epoch = epoch;
    row.loss_task = l_task.item();
    row.loss_holo = l_holo.item();
    row.loss_curv = l_curv.item();
    for (auto [name, v] : {std::pair{"loss_task", row.loss_task}, {"loss_holo", row.loss_holo},
                           {"loss_curv", row.loss_curv}, {"loss_total", total.item()}})
      if (!std::isfinite(v)) throw NonFiniteLoss(name, epoch, 0, 0, v);
    adam.step(res.prompt, p, t.backward(total), cfg.learning_rate);

    const Evaluation train = evaluate(model, res.prompt, samples, res.split.train);
    const Evaluation val = evaluate(model, res.prompt, samples, res.split.val);
    const Evaluation test = evaluate(model, res.prompt, samples, res.split.test);
    row.val_acc = val.acc;
    row.test_acc = test.acc;
    row.test_loss = test.loss;
    row.delta_h = train.gtm.delta_h;
    row.delta_c = train.gtm.delta_c;
    row.gtm = train.gtm.gtm;
    row.test_delta_h = test.gtm.delta_h;
    row.test_delta_c = test.gtm.delta_c;
    res.final_gtm = train.gtm;
    res.final_test_acc = test.acc;
    if (val.acc > best_val) {
      best_val = val.acc;
      res.best_epoch = epoch;
      res.test_acc = test.acc;
    }
    res.epochs.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  if (cfg.epochs == 0) res.test_acc = res.final_test_acc = evaluate(model, res.prompt, samples, res.split.test).acc;
  if (pretrained.checksum() != frozen_before) throw ContractError("adapt: pre-trained parameters changed");
  return res;
}

}  // namespace mglue
