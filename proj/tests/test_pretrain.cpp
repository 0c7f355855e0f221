#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "mglue/pretrain.hpp"
#include "oracles.hpp"

using namespace mglue;

namespace {

PretrainConfig tiny_config() {
  PretrainConfig c;
  c.epochs = 2;
  c.warmup_epochs = 1;
  c.batch_size = 6;
  c.learning_rate = 1e-2;
  c.m = 3;
  c.k_perturb = 2;
  c.knn_k = 2;
  c.n_triangle_samples = 8;
  c.dims = {8, 12, 6};
  c.seed = 11;
  return c;
}

std::vector<TrainingDomain> tiny_domains() {
  SyntheticSpec spec;
  for (auto [name, fam, fd] : {std::tuple{"alpha", Family::sbm_community, 5ul}, {"beta", Family::random_tree, 7ul}}) {
    DomainSpec d;
    d.name = name;
    d.family = fam;
    d.num_records = 9;
    d.nodes_min = 5;
    d.nodes_max = 8;
    d.feature_dim = fd;
    spec.domains.push_back(d);
  }
  std::vector<TrainingDomain> out;
  for (auto& ds : gen_synthetic(spec, 3)) out.push_back({ds, {}});
  return out;
}

double loss_of(const Matrix& a, const Matrix& b, double tau = 1.0) {
  Tape t;
  return local_contrastive_loss(t.constant(a), t.constant(b), tau).item();
}

}  // namespace

TEST(LocalContrastive, OrthogonalRecordsHandValue) {
  const Matrix z = Matrix::from_rows({{1, 0, 0}, {0, 1, 0}});
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
  EXPECT_NEAR(loss_of(z, z), expected, 1e-12);
  EXPECT_NEAR(loss_of(z, z), 0.5514, 1e-4);
}

TEST(LocalContrastive, IdenticalEmbeddingsGiveLogOfCandidates) {
  for (std::size_t n : {2, 3, 5}) {
    const Matrix z(n, 4, 0.7);
    EXPECT_NEAR(loss_of(z, z), std::log(2.0 * n - 1.0), 1e-12) << n;
  }
}

TEST(LocalContrastive, InvariantUnderRotation) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix a = oracle::random_matrix(4, 5, rng), b = oracle::random_matrix(4, 5, rng);
    const Matrix q = oracle::from_eigen(oracle::random_orthogonal(5, rng));
    EXPECT_NEAR(loss_of(a, b, 0.5), loss_of(matmul(a, q), matmul(b, q), 0.5), 1e-12);
  }
}

TEST(LocalContrastive, MatchesDirectSoftmaxOracle) {
  std::mt19937_64 rng(2);
  const std::size_t b = 3;
  const Matrix z1 = oracle::random_matrix(b, 4, rng), z2 = oracle::random_matrix(b, 4, rng);
  Eigen::MatrixXd z(2 * b, 4);
  z << oracle::to_eigen(z1), oracle::to_eigen(z2);
  z.rowwise().normalize();
  const double tau = 0.3;
  double total = 0.0;
  for (std::size_t i = 0; i < 2 * b; ++i) {
    const std::size_t pos = i < b ? i + b : i - b;
    double denom = 0.0;
    for (std::size_t j = 0; j < 2 * b; ++j)
      if (j != i) denom += std::exp(z.row(i).dot(z.row(j)) / tau);
    total += -(z.row(i).dot(z.row(pos)) / tau - std::log(denom));
  }
  EXPECT_NEAR(loss_of(z1, z2, tau), total / (2 * b), 1e-10);
}

TEST(LocalContrastive, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  auto f = [](Tape&, std::span<const Var> v) { return local_contrastive_loss(v[0], v[1], 0.8); };
  EXPECT_LT(check_gradient(f, {oracle::random_matrix(3, 4, rng), oracle::random_matrix(3, 4, rng)}).max_rel_error,
            1e-6);
}

TEST(LocalContrastive, SingleRecordRejected) {
  Tape t;
  EXPECT_THROW(local_contrastive_loss(t.constant(Matrix(1, 3, 1.0)), t.constant(Matrix(1, 3, 1.0))), ContractError);
}

TEST(Augment, DeterministicAndRatesNearNominal) {
  GraphRecord g;
  g.num_nodes = 50;
  for (std::size_t i = 0; i + 1 < 50; ++i) g.edges.push_back({i, i + 1});
  g.features = Matrix(50, 40, 1.0);
  Rng a(5), b(5);
  EXPECT_EQ(augment(g, 0.2, 0.2, a), augment(g, 0.2, 0.2, b));
  Rng r(6);
  double kept = 0, masked = 0;
  const int reps = 400;
  for (int i = 0; i < reps; ++i) {
    auto out = augment(g, 0.2, 0.2, r);
    kept += out.edges.size();
    for (std::size_t c = 0; c < 40; ++c) masked += out.features(0, c) == 0.0;
  }
  EXPECT_NEAR(kept / (reps * 49.0), 0.8, 0.01);
  EXPECT_NEAR(masked / (reps * 40.0), 0.2, 0.01);
}

TEST(CrossDatasetKnn, MatchesBruteForceOracle) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix z = oracle::random_matrix(12, 3, rng);
    const std::size_t k = 1 + trial % 4;
    std::set<Edge> ref;
    for (std::size_t i = 0; i < 12; ++i) {
      std::vector<std::pair<double, std::size_t>> d;
      for (std::size_t j = 0; j < 12; ++j)
        if (j != i) d.push_back({(oracle::to_eigen(z).row(i) - oracle::to_eigen(z).row(j)).squaredNorm(), j});
      std::sort(d.begin(), d.end());
      for (std::size_t r = 0; r < k; ++r) ref.insert({std::min(i, d[r].second), std::max(i, d[r].second)});
    }
    auto g = cross_dataset_knn(z, k);
    EXPECT_EQ(g.n, 12u);
    EXPECT_EQ(std::vector<Edge>(ref.begin(), ref.end()), g.edges);
    // every node has degree >= k after mutualization
    std::vector<std::size_t> deg(12);
    for (auto [a, b] : g.edges) ++deg[a], ++deg[b];
    for (auto v : deg) EXPECT_GE(v, k);
  }
}

TEST(CrossDatasetKnn, TiesGoToLowerIndexAndLargeKIsComplete) {
  const Matrix z = Matrix::from_rows({{0, 0}, {1, 0}, {-1, 0}, {0, 5}});
  auto g = cross_dataset_knn(z, 1);
  EXPECT_EQ(g.edges, (std::vector<Edge>{{0, 1}, {0, 2}, {0, 3}}));
  EXPECT_EQ(cross_dataset_knn(z, 10).edges.size(), 6u);
}

TEST(TrianglePaths, StarFrequenciesUniformOverPairs) {
  SkeletonGraph star{4, {{0, 1}, {0, 2}, {0, 3}}};
  auto paths = sample_triangle_paths(star, 30000, 9);
  std::map<std::pair<std::size_t, std::size_t>, int> count;
  for (const auto& p : paths) {
    EXPECT_EQ(p.j, 0u);
    EXPECT_LT(p.i, p.k);
    ++count[{p.i, p.k}];
  }
  EXPECT_EQ(count.size(), 3u);
  for (auto [pair, c] : count) EXPECT_NEAR(c / 30000.0, 1.0 / 3.0, 0.015);
}

TEST(TrianglePaths, CenterWeightedByPairCount) {
  // Node 0 has degree 3 (3 pairs); node 4 has degree 2 (1 pair).
  SkeletonGraph g{7, {{0, 1}, {0, 2}, {0, 3}, {4, 5}, {4, 6}}};
  auto paths = sample_triangle_paths(g, 40000, 10);
  double at0 = 0;
  for (const auto& p : paths) at0 += p.j == 0;
  EXPECT_NEAR(at0 / 40000.0, 0.75, 0.01);
}

TEST(TrianglePaths, EmptyWithoutDegreeTwo) {
  EXPECT_TRUE(sample_triangle_paths(SkeletonGraph{4, {{0, 1}, {2, 3}}}, 10, 1).empty());
  EXPECT_TRUE(sample_triangle_paths(SkeletonGraph{3, {}}, 10, 1).empty());
  EXPECT_EQ(sample_triangle_paths(SkeletonGraph{3, {{0, 1}, {1, 2}}}, 5, 1),
            std::vector<TrianglePath>(5, TrianglePath{0, 1, 2}));
}

TEST(Metrics, HeaderAndRoundTripFormatting) {
  EXPECT_EQ(metrics_header(), "epoch,stage,batch,loss_local,loss_proto,loss_holo,loss_curv,loss_total,lr,wall_ms");
  MetricsRow r{3, 2, 7, 0.1, 0.2, 1.0 / 3.0, 0.0, 0.6333333333333333, 1e-4, 0};
  const std::string s = format_metrics_row(r);
  EXPECT_EQ(s.substr(0, 6), "3,2,7,");
  EXPECT_NE(s.find("0.33333333333333331"), std::string::npos);
}

TEST(Pretrain, RunsAllStagesAndBuildsPrototypes) {
  auto domains = tiny_domains();
  auto cfg = tiny_config();
  TrainState st = init_train_state(domains, cfg);
  const auto before = st.params.checksum();
  std::vector<MetricsRow> all;
  run_pretrain(st, domains, cfg, [&](const TrainState&, const std::vector<MetricsRow>& rows) {
    all.insert(all.end(), rows.begin(), rows.end());
  });
  EXPECT_EQ(st.epoch, 2);
  EXPECT_NE(st.params.checksum(), before);
  std::set<int> stages;
  for (const auto& r : all) {
    stages.insert(r.stage);
    EXPECT_TRUE(std::isfinite(r.loss_total));
    EXPECT_EQ(r.wall_ms, 0.0);
  }
  EXPECT_EQ(stages, (std::set<int>{1, 2, 3}));
  ASSERT_EQ(st.protos.size(), 2u);
  EXPECT_TRUE(st.protos.count("alpha") && st.protos.count("beta"));
  // proto loss only after warmup
  for (const auto& r : all)
    if (r.stage == 1 && r.epoch == 0) EXPECT_EQ(r.loss_proto, 0.0);
  bool proto_seen = false;
  for (const auto& r : all) proto_seen |= r.stage == 1 && r.epoch == 1 && r.loss_proto > 0.0;
  EXPECT_TRUE(proto_seen);
  EXPECT_GT(st.adam.steps(), 0);
}

TEST(Pretrain, DeterministicForSeedAndResumeMatchesUninterrupted) {
  auto domains = tiny_domains();
  auto cfg = tiny_config();
  TrainState a = init_train_state(domains, cfg);
  run_pretrain(a, domains, cfg, nullptr);
  TrainState b = init_train_state(domains, cfg);
  run_pretrain_epoch(b, domains, cfg);
  TrainState c = b;  // snapshot mid-run
  run_pretrain(c, domains, cfg, nullptr);
  EXPECT_EQ(a.params, c.params);
  EXPECT_EQ(a.protos, c.protos);
  cfg.seed = 12;
  TrainState d = init_train_state(domains, cfg);
  run_pretrain(d, domains, cfg, nullptr);
  EXPECT_NE(a.params.checksum(), d.params.checksum());
}

TEST(Pretrain, SingleGraphDomainUsesGraphEdges) {
  DomainSpec spec;
  spec.name = "big";
  spec.task = TaskType::node;
  spec.graph_nodes = 30;
  spec.feature_dim = 4;
  const GraphRecord g = gen_large_graph(spec, 5);
  auto td = single_graph_domain(g, 1, 3, 6);
  EXPECT_EQ(td.data.records.size(), 30u);
  for (auto [a, b] : td.skeleton) EXPECT_LT(a, b);
  auto cfg = tiny_config();
  cfg.epochs = 1;
  cfg.batch_size = 30;
  std::vector<TrainingDomain> domains{td};
  TrainState st = init_train_state(domains, cfg);
  auto rows = run_pretrain_epoch(st, domains, cfg);
  bool stage3 = false;
  for (const auto& r : rows) stage3 |= r.stage == 3;
  EXPECT_TRUE(stage3);
}

TEST(Pretrain, NonFiniteLossAbortsWithDiagnostics) {
  auto domains = tiny_domains();
  auto cfg = tiny_config();
  cfg.w_holo = 1e308;
  cfg.w_curv = 1e308;
  cfg.w_local = 1e308;
  TrainState st = init_train_state(domains, cfg);
  const auto before = st.params;
  try {
    run_pretrain_epoch(st, domains, cfg);
    FAIL();
  } catch (const NonFiniteLoss& e) {
    EXPECT_EQ(e.loss(), "loss_total");
    EXPECT_EQ(e.stage(), 1);
    EXPECT_EQ(e.batch(), 0u);
  }
  EXPECT_EQ(st.params, before);
}

TEST(Pretrain, ConfigValidation) {
  auto cfg = tiny_config();
  cfg.m = 100;
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg = tiny_config();
  cfg.beta_ema = 1.0;
  EXPECT_THROW(cfg.validate(), ContractError);
}
