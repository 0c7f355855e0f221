#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "mglue/adapt.hpp"
#include "mglue/encoder.hpp"
#include "mglue/pretrain.hpp"
#include "oracles.hpp"

using namespace mglue;

namespace {

Matrix diag_of(std::vector<double> v) { return Matrix::diagonal(v); }

// Orthogonal columns with distinct lengths, as produced by the frame.
Matrix frame_like(std::size_t d, std::size_t m, std::mt19937_64& rng) {
  Eigen::MatrixXd q = oracle::random_orthogonal(d, rng).leftCols(m);
  for (std::size_t c = 0; c < m; ++c) q.col(c) *= 0.5 + c;
  return oracle::from_eigen(q);
}

Prototype proto(const std::string& name, Matrix z, Matrix log_g) { return Prototype{name, std::move(z), std::move(log_g), 1}; }

PrototypeSet three_protos(std::size_t d, std::size_t m, std::mt19937_64& rng) {
  PrototypeSet ps;
  for (const char* n : {"a", "b", "c"}) {
    Matrix lg = oracle::random_matrix(m, m, rng, 0.3);
    ps[n] = proto(n, oracle::random_matrix(1, d, rng), 0.5 * (lg + lg.transposed()));
  }
  return ps;
}

double det(const Matrix& g) { return oracle::to_eigen(g).determinant(); }

}  // namespace

TEST(PromptAdapt, IdentityPromptReturnsInput) {
  std::mt19937_64 rng(1);
  Tape t;
  const Matrix z = oracle::random_matrix(1, 6, rng), w = frame_like(6, 3, rng);
  auto a = prompt_adapt(t.constant(z), t.constant(w), t.constant(Matrix::identity(6)));
  EXPECT_EQ(a.z.value(), z);
  EXPECT_LT(frobenius_norm(a.w.value() - w), 1e-12);
  EXPECT_LT(frobenius_norm(a.g.value() - local_metric(t.constant(w)).value()), 1e-12);
}

TEST(PromptAdapt, ScaledPromptScalesMetricByFour) {
  std::mt19937_64 rng(2);
  Tape t;
  const Matrix z = oracle::random_matrix(1, 6, rng), w = frame_like(6, 3, rng);
  auto a = prompt_adapt(t.constant(z), t.constant(w), t.constant(2.0 * Matrix::identity(6)));
  EXPECT_EQ(a.z.value(), 2.0 * z);
  const Matrix g = matmul(w.transposed(), w);
  EXPECT_LT(frobenius_norm(a.g.value() - 4.0 * g), 1e-7);
}

TEST(PromptAdapt, OrthogonalPromptPreservesNormAndDeterminant) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tape t;
    const Matrix z = oracle::random_matrix(1, 8, rng);
    const Matrix w = oracle::random_matrix(8, 4, rng);  // arbitrary, not yet orthogonal
    const Matrix q = oracle::from_eigen(oracle::random_orthogonal(8, rng));
    auto base = prompt_adapt(t.constant(z), t.constant(w), t.constant(Matrix::identity(8)));
    auto rot = prompt_adapt(t.constant(z), t.constant(w), t.constant(q));
    EXPECT_NEAR(frobenius_norm(rot.z.value()), frobenius_norm(z), 1e-12);
    EXPECT_NEAR(det(rot.g.value()), det(base.g.value()), 1e-8 * std::abs(det(base.g.value())));
  }
}

TEST(TransferGraph, CountsAndFallback) {
  std::mt19937_64 rng(4);
  const PrototypeSet ps = three_protos(5, 2, rng);
  Tape t;
  Var g = t.constant(Matrix::identity(2));
  auto g1 = build_transfer_graph(Matrix(1, 5), g, ps, 1);
  EXPECT_EQ(g1.edges.size(), 1u);
  EXPECT_TRUE(g1.paths.empty());
  auto g3 = build_transfer_graph(Matrix(1, 5), g, ps, 3);
  std::size_t star = 0;
  for (auto [a, b] : g3.edges) star += a == 0;
  EXPECT_EQ(star, 3u);
  EXPECT_GE(g3.paths.size(), 3u);
  // k beyond the prototype count is clamped
  EXPECT_EQ(build_transfer_graph(Matrix(1, 5), g, ps, 9).prototypes.size(), 3u);
  EXPECT_THROW(build_transfer_graph(Matrix(1, 5), g, PrototypeSet{}, 1), ContractError);
}

TEST(TransferGraph, SingleEdgeFallbackValues) {
  PrototypeSet ps{{"a", proto("a", Matrix(1, 2), diag_of({std::log(4.0), 0.0}))}};
  Tape t;
  auto g = build_transfer_graph(Matrix(1, 2), t.constant(Matrix::identity(2)), ps, 1);
  auto l = transfer_glue_losses(g);
  // P = diag(sqrt(1/4), 1): ||P - I||^2 = 0.25; log r = 0 - log 4.
  EXPECT_NEAR(l.holo.item(), 0.25, 1e-12);
  EXPECT_NEAR(l.curv.item(), std::log(4.0) * std::log(4.0), 1e-12);
}

TEST(Gtm, ZeroAtCoincidentPrototypeAndIdentity) {
  const Matrix lg = Matrix::from_rows({{0.3, 0.1}, {0.1, -0.2}});
  PrototypeSet ps{{"a", proto("a", Matrix::from_rows({{1, 2, 3}}), lg)}};
  Tape t;
  auto g = build_transfer_graph(Matrix::from_rows({{1, 2, 3}}), t.constant(symmetric_exp(lg)), ps, 1);
  const GtmReport r = gtm(g);
  EXPECT_NEAR(r.gtm, 0.0, 1e-10);
  EXPECT_EQ(r.gtm, r.delta_h + r.delta_c);
  // every transport on the pair is the identity
  EXPECT_LT(frobenius_norm(transport_value(g.metrics[0].value(), g.metrics[1].value()) - Matrix::identity(2)), 1e-10);
}

TEST(Gtm, CurvatureIncreasesWithTargetScale) {
  std::mt19937_64 rng(5);
  const PrototypeSet ps = three_protos(4, 3, rng);
  Matrix g0 = oracle::random_spd(3, rng, 5.0);
  // place the target metric at the mean prototype volume so scaling moves it away
  double mean_logdet = 0;
  for (const auto& [n, p] : ps) mean_logdet += spd_logdet(symmetric_exp(p.log_g)) / 3.0;
  g0 = std::exp((mean_logdet - spd_logdet(g0)) / 3.0) * g0;
  double prev = -1.0;
  for (double c : {1.0, 2.0, 4.0}) {
    Tape t;
    const GtmReport r = gtm(build_transfer_graph(Matrix(1, 4), t.constant(c * g0), ps, 1));
    EXPECT_GT(r.delta_c, prev);
    EXPECT_GE(r.delta_h, 0.0);
    prev = r.delta_c;
  }
}

TEST(MoeAlign, SingleExpertAndUniformGate) {
  std::mt19937_64 rng(6);
  Tape t;
  ParamStore store;
  PrototypeSet one{{"a", proto("a", Matrix(1, 4), Matrix::from_rows({{0.2, 0.1}, {0.1, 0.4}}))}};
  init_gate(store, 6, 5, 1, 1);
  store.set("gate.w2", oracle::random_matrix(5, 1, rng));
  BoundParams p(store, t, [](const std::string&) { return true; });
  Var z = t.constant(oracle::random_matrix(1, 4, rng));
  Var lg = t.constant(diag_of({0.3, -0.1}));
  EXPECT_LT(frobenius_norm(moe_align(z, lg, GateVars::from(p), one).value() - one["a"].log_g), 1e-15);

  const PrototypeSet three = three_protos(4, 2, rng);
  ParamStore s3;
  init_gate(s3, 6, 5, 3, 2);
  BoundParams p3(s3, t, [](const std::string&) { return true; });
  const Matrix got = moe_align(z, lg, GateVars::from(p3), three).value();
  Matrix mean(2, 2);
  for (const auto& [n, pr] : three) mean = mean + (1.0 / 3.0) * pr.log_g;
  EXPECT_LT(frobenius_norm(got - mean), 1e-14);
  EXPECT_LT(asymmetry(got), 1e-15);
}

TEST(MoeAlign, GateIsConvexCombination) {
  std::mt19937_64 rng(7);
  const PrototypeSet ps = three_protos(4, 2, rng);
  ParamStore s;
  init_gate(s, 6, 5, 3, 3);
  s.set("gate.w2", oracle::random_matrix(5, 3, rng, 3.0));
  Tape t;
  BoundParams p(s, t, [](const std::string&) { return false; });
  const Matrix beta =
      gate_weights(t.constant(oracle::random_matrix(1, 4, rng)), t.constant(Matrix::identity(2)), GateVars::from(p))
          .value();
  double total = 0;
  for (double b : beta.values()) {
    EXPECT_GE(b, 0.0);
    total += b;
  }
  EXPECT_NEAR(total, 1.0, 1e-15);
}

TEST(TaskRepresentation, LayoutAndLength) {
  Tape t;
  const Matrix z = Matrix::from_rows({{1, 2, 3, 4}});
  Var rep = task_representation(t.constant(z), t.constant(diag_of({5, 6})), t.constant(diag_of({7, 8})));
  EXPECT_EQ(rep.value(), Matrix::from_rows({{1, 2, 3, 4, 5, 6, 7, 8}}));
  Var zero = task_representation(t.constant(z), t.constant(Matrix(2, 2)), t.constant(Matrix(2, 2)));
  for (std::size_t c = 4; c < 8; ++c) EXPECT_EQ(zero.value()(0, c), 0.0);
}

TEST(TaskRepresentation, LengthIsDPlusTwoMAcrossConfigs) {
  for (std::size_t d : {4, 8, 16}) {
    for (std::size_t m : {1, 2, 4}) {
      if (m > d) continue;
      Tape t;
      Var rep = task_representation(t.constant(Matrix(1, d)), t.constant(Matrix(m, m)), t.constant(Matrix(m, m)));
      EXPECT_EQ(rep.cols(), d + 2 * m);
    }
  }
}

TEST(FewShotSplit, ShotsPerClassAndDisjoint) {
  DomainDataset ds;
  ds.num_classes = 3;
  for (int i = 0; i < 60; ++i) {
    GraphRecord r;
    r.num_nodes = 1;
    r.features = Matrix(1, 1);
    r.label = i % 3;
    ds.records.push_back(r);
  }
  auto s = few_shot_split(ds, 5, 0.1, 1);
  EXPECT_EQ(s.train.size(), 15u);
  EXPECT_EQ(s.val.size(), 5u);
  EXPECT_EQ(s.test.size(), 40u);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  EXPECT_EQ(all.size(), 60u);
  std::vector<int> per(3);
  for (auto i : s.train) ++per[*ds.records[i].label];
  EXPECT_EQ(per, (std::vector<int>{5, 5, 5}));
  ds.num_classes = 4;
  EXPECT_THROW(few_shot_split(ds, 1, 0.1, 1), ContractError);
}

TEST(AdaptLoss, CompositeGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  const std::size_t d = 4, m = 2;
  PrototypeSet ps;
  for (const char* n : {"a", "b"}) {
    Matrix lg = oracle::random_matrix(m, m, rng, 0.3);
    ps[n] = proto(n, oracle::random_matrix(1, d, rng), diag_of({lg(0, 0), lg(1, 1)}));
  }
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix z = oracle::random_matrix(1, d, rng);
    const Matrix w = oracle::random_matrix(d, m, rng);
    const Matrix q0 = Matrix::identity(d) + oracle::random_matrix(d, d, rng, 0.1);
    const std::vector<Matrix> leaves = {q0, oracle::random_matrix(d + m, 3, rng), Matrix(1, 3),
                                        oracle::random_matrix(3, 2, rng), Matrix(1, 2),
                                        oracle::random_matrix(d + 2 * m, 2, rng)};
    auto f = [&](Tape& t, std::span<const Var> v) {
      AdaptedFrame a = prompt_adapt(t.constant(z), t.constant(w), v[0]);
      SpdLog la = spd_log_and_det(a.g);
      auto g = build_transfer_graph(a.z.value(), a.g, ps, 2);
      auto glue = transfer_glue_losses(g);
      Var align = moe_align(a.z, la.log, GateVars{v[1], v[2], v[3], v[4]}, ps);
      Var logits = matmul(task_representation(t.constant(z), la.log, align), v[5]);
      const int y[] = {1};
      return cross_entropy(logits, y) + scale(glue.holo + glue.curv, 0.7);
    };
    const auto r = check_gradient(f, leaves);
    EXPECT_LT(r.max_rel_error, 1e-4) << "trial " << trial << " leaf " << r.leaf;
  }
}

namespace {

struct Fixture {
  std::vector<TrainingDomain> sources;
  DomainDataset target;
  PretrainConfig pcfg;
  TrainState state;
};

Fixture make_fixture() {
  Fixture f;
  SyntheticSpec spec;
  for (auto [name, fam] : {std::pair{"s1", Family::sbm_community}, {"s2", Family::random_tree},
                           {"t", Family::dense_clique_clusters}}) {
    DomainSpec d;
    d.name = name;
    d.family = fam;
    d.num_records = 24;
    d.nodes_min = 5;
    d.nodes_max = 8;
    d.feature_dim = 6;
    spec.domains.push_back(d);
  }
  auto sets = gen_synthetic(spec, 4);
  f.sources = {{sets[0], {}}, {sets[1], {}}};
  f.target = sets[2];
  f.pcfg.epochs = 1;
  f.pcfg.warmup_epochs = 0;
  f.pcfg.batch_size = 8;
  f.pcfg.m = 2;
  f.pcfg.k_perturb = 2;
  f.pcfg.knn_k = 2;
  f.pcfg.n_triangle_samples = 4;
  f.pcfg.dims = {6, 8, 4};
  f.state = init_train_state(f.sources, f.pcfg);
  run_pretrain(f.state, f.sources, f.pcfg, nullptr);
  return f;
}

}  // namespace

TEST(RunAdapt, FrozenCoreDeterministicAndIdentityStart) {
  Fixture f = make_fixture();
  AdaptConfig cfg;
  cfg.epochs = 4;
  cfg.shots = 2;
  cfg.gate_hidden = 4;
  cfg.learning_rate = 1e-2;
  const auto before = f.state.params.checksum();
  auto a = run_adapt(f.state.params, f.state.protos, f.pcfg.frame_options(), f.target, cfg);
  auto b = run_adapt(f.state.params, f.state.protos, f.pcfg.frame_options(), f.target, cfg);
  EXPECT_EQ(f.state.params.checksum(), before);
  ASSERT_EQ(a.epochs.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(format_adapt_row(a.epochs[i]), format_adapt_row(b.epochs[i]));
  EXPECT_NE(a.prompt.get("prompt.q"), Matrix::identity(4));

  // step-0 GTM equals the raw-target GTM
  double raw = 0;
  for (const auto& rec : f.target.records)
    raw += raw_gtm(f.state.params, f.state.protos, f.pcfg.frame_options(), rec, cfg.knn_k).gtm;
  EXPECT_NEAR(a.initial_gtm.gtm, raw / f.target.records.size(), 1e-12);
  for (const auto& e : a.epochs) {
    EXPECT_GE(e.delta_h, 0.0);
    EXPECT_GE(e.delta_c, 0.0);
    EXPECT_EQ(e.gtm, e.delta_h + e.delta_c);
  }
}

TEST(RunAdapt, LambdaZeroReportsGlueWithoutUsingIt) {
  Fixture f = make_fixture();
  AdaptConfig cfg;
  cfg.epochs = 2;
  cfg.shots = 1;
  cfg.gate_hidden = 4;
  cfg.lambda = 0.0;
  auto r = run_adapt(f.state.params, f.state.protos, f.pcfg.frame_options(), f.target, cfg);
  EXPECT_GT(r.epochs[0].loss_curv, 0.0);
  EXPECT_EQ(adapt_metrics_header(), "epoch,loss_task,loss_holo,loss_curv,gtm,val_acc,test_acc");
}

TEST(Gtm, SeenDomainsScoreBelowAnAlienDomain) {
  // Paired measurement on the reference suite: pre-train on two domains, then
  // compare aggregate raw GTM of each pre-training domain with the held-out one.
  int folds = 0, below = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SyntheticSpec spec;
    for (auto [name, fam, fd] : {std::tuple{"sbm", Family::sbm_community, 8ul}, {"tree", Family::random_tree, 12ul},
                                 {"clique", Family::dense_clique_clusters, 10ul}}) {
      DomainSpec d;
      d.name = name;
      d.family = fam;
      d.num_records = 60;
      d.nodes_min = 8;
      d.nodes_max = 16;
      d.feature_dim = fd;
      d.mean_offset = 0.5;
      spec.domains.push_back(d);
    }
    const auto sets = gen_synthetic(spec, 100 + seed);
    for (std::size_t held = 0; held < 3; ++held) {
      std::vector<TrainingDomain> src;
      for (std::size_t i = 0; i < 3; ++i)
        if (i != held) src.push_back({sets[i], {}});
      PretrainConfig pc;
      pc.epochs = 3;
      pc.warmup_epochs = 1;
      pc.batch_size = 16;
      pc.learning_rate = 1e-3;
      pc.m = 4;
      pc.k_perturb = 3;
      pc.knn_k = 5;
      pc.n_triangle_samples = 16;
      pc.dims = {16, 32, 16};
      pc.seed = seed;
      TrainState st = init_train_state(src, pc);
      run_pretrain(st, src, pc, nullptr);
      ensure_projection(st.params, sets[held].feature_dim, pc.dims.input, pc.seed);
      double agg[3];
      for (std::size_t i = 0; i < 3; ++i) {
        agg[i] = 0.0;
        for (const auto& r : sets[i].records) agg[i] += raw_gtm(st.params, st.protos, pc.frame_options(), r, 3).gtm;
        agg[i] /= static_cast<double>(sets[i].records.size());
      }
      bool ok = true;
      for (std::size_t i = 0; i < 3; ++i)
        if (i != held) ok &= agg[i] < agg[held];
      ++folds;
      below += ok;
    }
  }
  EXPECT_GE(below, 10) << below << " of " << folds << " folds";
}
