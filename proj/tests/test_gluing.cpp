#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mglue/gluing.hpp"
#include "oracles.hpp"

using mglue::Matrix;
using mglue::Tape;
using mglue::TrianglePath;
using mglue::Var;

namespace {

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

// ---- spd_sqrt ---------------------------------------------------------------

TEST(SpdSqrt, DiagonalCase) {
  Tape t;
  auto s = mglue::spd_sqrt(t.constant(Matrix::diagonal(std::vector<double>{4, 9})));
  EXPECT_LT(max_abs_diff(s.sqrt.value(), Matrix::diagonal(std::vector<double>{2, 3})), 1e-12);
  EXPECT_LT(max_abs_diff(s.inv_sqrt.value(), Matrix::diagonal(std::vector<double>{0.5, 1.0 / 3})), 1e-12);
}

TEST(SpdSqrt, IdentityConvergesInOneIteration) {
  Tape t;
  auto s = mglue::spd_sqrt(t.constant(Matrix::identity(5)));
  EXPECT_EQ(s.iterations, 1);
  EXPECT_EQ(s.sqrt.value(), Matrix::identity(5));
}

TEST(SpdSqrt, ResidualOnRandomSpd) {
  std::mt19937_64 rng(5);
  for (double cond : {10.0, 1e3, 1e6}) {
    for (int trial = 0; trial < 20; ++trial) {
      const Matrix g = oracle::random_spd(6, rng, cond, 0.01 + trial);
      Tape t;
      auto s = mglue::spd_sqrt(t.constant(g));
      const Matrix sq = mglue::matmul(s.sqrt.value(), s.sqrt.value());
      EXPECT_LT(mglue::frobenius_norm(sq - g) / mglue::frobenius_norm(g), 1e-10) << "cond " << cond;
      const Matrix id = mglue::matmul(s.sqrt.value(), s.inv_sqrt.value());
      EXPECT_LT(mglue::frobenius_norm(id - Matrix::identity(6)), 1e-6) << "cond " << cond;
    }
  }
}

TEST(SpdSqrt, NonConvergenceReportsResidual) {
  std::mt19937_64 rng(6);
  const Matrix g = oracle::random_spd(4, rng, 1e8);
  Tape t;
  try {
    mglue::spd_sqrt(t.constant(g), {1e-12, 3});
    FAIL() << "expected NumericalError";
  } catch (const mglue::NumericalError& e) {
    EXPECT_GT(e.residual(), 1e-12);
  }
}

TEST(SpdSqrt, RejectsNonSymmetricInput) {
  Tape t;
  EXPECT_THROW(mglue::spd_sqrt(t.constant(Matrix::from_rows({{1, 0.5}, {0, 1}}))), mglue::ContractError);
}

// ---- spd_log_and_det --------------------------------------------------------

TEST(SpdLog, DiagonalCase) {
  Tape t;
  auto l = mglue::spd_log_and_det(t.constant(Matrix::diagonal(std::vector<double>{std::exp(1.0), std::exp(2.0)})));
  EXPECT_TRUE(l.diagonal_fast_path);
  EXPECT_NEAR(l.log.value()(0, 0), 1.0, 1e-14);
  EXPECT_NEAR(l.log.value()(1, 1), 2.0, 1e-14);
  EXPECT_EQ(l.log.value()(0, 1), 0.0);
  EXPECT_NEAR(l.logdet.item(), 3.0, 1e-14);
}

TEST(SpdLog, IdentityIsZero) {
  Tape t;
  auto l = mglue::spd_log_and_det(t.constant(Matrix::identity(3)));
  EXPECT_EQ(l.log.value(), Matrix(3, 3, 0.0));
  EXPECT_EQ(l.logdet.item(), 0.0);
}

TEST(SpdLog, ExpOfLogRoundTrip) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix g = oracle::random_spd(4, rng, 50.0, 0.1 + trial * 0.2);
    Tape t;
    auto l = mglue::spd_log_and_det(t.constant(g));
    ASSERT_FALSE(l.diagonal_fast_path);
    const Eigen::MatrixXd back = oracle::expm_taylor(oracle::to_eigen(l.log.value()));
    EXPECT_LT(oracle::rel_fro(back, oracle::to_eigen(g)), 1e-8);
    EXPECT_NEAR(l.logdet.item(), std::log(oracle::to_eigen(g).determinant()), 1e-8);
  }
}

TEST(SpdLog, LogdetGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix g = oracle::random_spd(4, rng, 20.0);
    auto f = [](Tape&, std::span<const Var> x) {
      Var sym = mglue::scale(x[0] + mglue::transpose(x[0]), 0.5);
      return mglue::spd_log_and_det(sym).logdet;
    };
    auto r = mglue::check_gradient(f, {g});
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
}

// ---- transport --------------------------------------------------------------

TEST(Transport, DiagonalClosedForm) {
  Tape t;
  Var gi = t.constant(Matrix::diagonal(std::vector<double>{4, 1}));
  Var gj = t.constant(Matrix::identity(2));
  const Matrix p = mglue::transport(gi, gj).value();
  EXPECT_LT(max_abs_diff(p, Matrix::diagonal(std::vector<double>{2, 1})), 1e-14);
  const Matrix iso = mglue::matmul(mglue::matmul(p.transposed(), gj.value()), p);
  EXPECT_LT(max_abs_diff(iso, gi.value()), 1e-14);
}

TEST(Transport, EqualMetricsGiveIdentity) {
  std::mt19937_64 rng(9);
  const Matrix g = oracle::random_spd(4, rng, 30.0);
  Tape t;
  const Matrix p = mglue::transport(t.constant(g), t.constant(g)).value();
  EXPECT_LT(max_abs_diff(p, Matrix::identity(4)), 1e-9);
}

TEST(Transport, IsometryOnRandomPairs) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix gi = oracle::random_spd(5, rng, 1e4, 0.5);
    const Matrix gj = oracle::random_spd(5, rng, 1e4, 0.5);
    const Matrix p = mglue::transport_value(gi, gj);
    const Matrix iso = mglue::matmul(mglue::matmul(p.transposed(), gj), p);
    EXPECT_LT(mglue::frobenius_norm(iso - gi) / mglue::frobenius_norm(gi), 1e-6);
    EXPECT_LT(mglue::asymmetry(p), 1e-8);
  }
}

TEST(Transport, MatchesEigendecompositionOracle) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix gi = oracle::random_spd(4, rng, 100.0);
    const Matrix gj = oracle::random_spd(4, rng, 100.0);
    const auto expect = oracle::transport(oracle::to_eigen(gi), oracle::to_eigen(gj));
    EXPECT_LT(oracle::rel_fro(oracle::to_eigen(mglue::transport_value(gi, gj)), expect), 1e-9);
  }
}

// ---- holonomy ---------------------------------------------------------------

TEST(HolonomyMap, IdentityTransportsCompose) {
  Tape t;
  mglue::TransportTable tbl;
  Var id = t.constant(Matrix::identity(3));
  tbl.set(0, 1, id);
  tbl.set(1, 2, id);
  tbl.set(2, 0, id);
  const std::size_t cyc[] = {0, 1, 2, 0};
  EXPECT_EQ(mglue::holonomy_map(cyc, tbl).value(), Matrix::identity(3));
}

TEST(HolonomyMap, MissingEdgeIsNamed) {
  Tape t;
  mglue::TransportTable tbl;
  tbl.set(0, 1, t.constant(Matrix::identity(2)));
  const std::size_t cyc[] = {0, 1, 2, 0};
  try {
    mglue::holonomy_map(cyc, tbl);
    FAIL();
  } catch (const mglue::ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("(1,2)"), std::string::npos);
  }
}

TEST(HolonomyMap, DiagonalTriangleIsTrivial) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    Tape t;
    std::vector<Var> g;
    for (int i = 0; i < 3; ++i) g.push_back(t.constant(oracle::random_diagonal_spd(4, rng)));
    mglue::TransportTable tbl;
    tbl.set(0, 1, mglue::transport(g[0], g[1]));
    tbl.set(1, 2, mglue::transport(g[1], g[2]));
    tbl.set(2, 0, mglue::transport(g[2], g[0]));
    const std::size_t cyc[] = {0, 1, 2, 0};
    const Matrix h = mglue::holonomy_map(cyc, tbl).value();
    EXPECT_LT(mglue::frobenius_norm(h - Matrix::identity(4)), 1e-10);
  }
}

TEST(HolonomyMap, NonCommutingTriangleMatchesDirectProduct) {
  const Matrix g1 = Matrix::from_rows({{2, 1}, {1, 2}});
  const Matrix g2 = Matrix::identity(2);
  const Matrix g3 = Matrix::diagonal(std::vector<double>{4, 1});
  Tape t;
  Var v1 = t.constant(g1), v2 = t.constant(g2), v3 = t.constant(g3);
  mglue::TransportTable tbl;
  tbl.set(0, 1, mglue::transport(v1, v2));
  tbl.set(1, 2, mglue::transport(v2, v3));
  tbl.set(2, 0, mglue::transport(v3, v1));
  const std::size_t cyc[] = {0, 1, 2, 0};
  const Matrix h = mglue::holonomy_map(cyc, tbl).value();

  const auto e1 = oracle::to_eigen(g1), e2 = oracle::to_eigen(g2), e3 = oracle::to_eigen(g3);
  const Eigen::MatrixXd direct = oracle::transport(e3, e1) * oracle::transport(e2, e3) * oracle::transport(e1, e2);
  EXPECT_LT((oracle::to_eigen(h) - direct).norm(), 1e-10);
  EXPECT_GT((direct - Eigen::MatrixXd::Identity(2, 2)).norm(), 1e-3);

  const TrianglePath path[] = {{0, 1, 2}};
  const Var metrics[] = {v1, v2, v3};
  const double loss = mglue::holonomy_loss(path, metrics).item();
  EXPECT_NEAR(loss, (direct - Eigen::MatrixXd::Identity(2, 2)).squaredNorm(), 1e-10);
}

TEST(HolonomyLoss, VanishesOnIdenticalAndDiagonalMetrics) {
  std::mt19937_64 rng(14);
  Tape t;
  const Matrix g = oracle::random_spd(3, rng, 10.0);
  std::vector<Var> same(4, t.constant(g));
  const TrianglePath paths[] = {{0, 1, 2}, {1, 2, 3}, {3, 0, 1}};
  EXPECT_LT(mglue::holonomy_loss(paths, same).item(), 1e-16);
  std::vector<Var> diag;
  for (int i = 0; i < 4; ++i) diag.push_back(t.constant(oracle::random_diagonal_spd(3, rng)));
  EXPECT_LT(mglue::holonomy_loss(paths, diag).item(), 1e-12);
}

TEST(HolonomyLoss, EmptyPathSetRejected) {
  Tape t;
  std::vector<Var> m{t.constant(Matrix::identity(2))};
  EXPECT_THROW(mglue::holonomy_loss({}, m), mglue::ContractError);
  EXPECT_THROW(mglue::curvature_loss({}, m), mglue::ContractError);
}

TEST(HolonomyLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Matrix> leaves;
    for (int i = 0; i < 3; ++i) leaves.push_back(oracle::random_spd(3, rng, 10.0));
    auto f = [](Tape&, std::span<const Var> x) {
      std::vector<Var> sym;
      for (Var v : x) sym.push_back(mglue::scale(v + mglue::transpose(v), 0.5));
      const TrianglePath p[] = {{0, 1, 2}};
      return mglue::holonomy_loss(p, sym);
    };
    auto r = mglue::check_gradient(f, leaves, 1e-5);
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
}

TEST(HolonomyMap, ConjugationIdentityOnFourCycles) {
  std::mt19937_64 rng(16);
  for (int trial = 0; trial < 50; ++trial) {
    Tape t;
    std::vector<Var> g;
    for (int i = 0; i < 4; ++i) g.push_back(t.constant(oracle::random_spd(4, rng, 100.0)));
    mglue::TransportTable tbl;
    for (std::size_t i = 0; i < 4; ++i) tbl.set(i, (i + 1) % 4, mglue::transport(g[i], g[(i + 1) % 4]));
    const std::size_t cyc[] = {0, 1, 2, 3, 0};
    const Matrix h = mglue::holonomy_map(cyc, tbl).value();
    const Matrix conj = mglue::matmul(mglue::matmul(h.transposed(), g[0].value()), h);
    EXPECT_LT(mglue::frobenius_norm(conj - g[0].value()) / mglue::frobenius_norm(g[0].value()), 1e-6);
  }
}

// ---- curvature --------------------------------------------------------------

TEST(CurvatureRatio, FlatCase) {
  const Matrix a = Matrix::diagonal(std::vector<double>{2, 0.5});
  const Matrix b = Matrix::identity(2);
  auto c = mglue::curvature_ratio(a, b);
  EXPECT_NEAR(c.r, 1.0, 1e-14);
  EXPECT_NEAR(c.ricci_estimate, 0.0, 1e-13);
}

TEST(CurvatureRatio, VolumeExpansionMeansNegativeCurvature) {
  auto c = mglue::curvature_ratio(Matrix::identity(2), Matrix::diagonal(std::vector<double>{0.9, 1}));
  EXPECT_NEAR(c.r, 1.0 / 0.9, 1e-12);
  EXPECT_NEAR(c.ricci_estimate, 3.0 * (1.0 - 1.0 / 0.9), 1e-12);
  EXPECT_NEAR(c.ricci_estimate, -0.3333, 1e-4);
  EXPECT_EQ(c.ricci_sign, -1);
}

TEST(CurvatureRatio, NormalCoordinateExpansionRecoversPositiveSign) {
  // g(t) = 1 - (Ric/3) t^2 with Ric = 0.3 at t = 1, along one axis.
  const double ric = 0.3;
  const Matrix gi = Matrix::identity(3);
  const Matrix gj = Matrix::diagonal(std::vector<double>{1.0 - ric / 3.0, 1.0, 1.0});
  auto c = mglue::curvature_ratio(gj, gi);  // det(G at the far end) / det(G at origin) < 1
  EXPECT_LT(c.r, 1.0);
  auto c2 = mglue::curvature_ratio(gi, gj);
  EXPECT_GT(c2.r, 1.0);
}

TEST(CurvatureLoss, EqualAndGeometricProgressionsVanish) {
  Tape t;
  const TrianglePath p[] = {{0, 1, 2}};
  std::vector<Var> eq(3, t.constant(Matrix::identity(2)));
  EXPECT_EQ(mglue::curvature_loss(p, eq).item(), 0.0);
  const double c = 1.7;
  std::vector<Var> geo{t.constant(Matrix::diagonal(std::vector<double>{1, 1})),
                       t.constant(Matrix::diagonal(std::vector<double>{c, 1})),
                       t.constant(Matrix::diagonal(std::vector<double>{c, c}))};
  EXPECT_NEAR(mglue::curvature_loss(p, geo).item(), 0.0, 1e-28);
}

TEST(CurvatureLoss, HandArithmetic) {
  Tape t;
  const TrianglePath p[] = {{0, 1, 2}};
  std::vector<Var> m{t.constant(Matrix::identity(2)), t.constant(Matrix::diagonal(std::vector<double>{2, 1})),
                     t.constant(Matrix::identity(2))};
  const double expect = std::pow(2.0 * std::log(2.0), 2);
  EXPECT_NEAR(mglue::curvature_loss(p, m).item(), expect, 1e-14);
  EXPECT_NEAR(expect, 1.9218, 1e-4);
}

TEST(CurvatureLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Matrix> leaves;
    for (int i = 0; i < 3; ++i) leaves.push_back(oracle::random_spd(3, rng, 10.0));
    auto f = [](Tape&, std::span<const Var> x) {
      std::vector<Var> sym;
      for (Var v : x) sym.push_back(mglue::scale(v + mglue::transpose(v), 0.5));
      const TrianglePath p[] = {{0, 1, 2}};
      return mglue::curvature_loss(p, sym);
    };
    EXPECT_LT(mglue::check_gradient(f, leaves).max_rel_error, 1e-4);
  }
}

// ---- Dirichlet energy -------------------------------------------------------

TEST(DirichletEnergy, ConstantFieldOnConnectedGraph) {
  // Regular graph (cycle) so the normalized Laplacian kernel is the constant vector.
  const mglue::Edge e[] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}};
  const Matrix lap = mglue::normalized_laplacian(4, e);
  const double g[] = {2.5, 2.5, 2.5, 2.5};
  EXPECT_NEAR(mglue::dirichlet_energy(g, lap, 1), 0.0, 1e-28);
  EXPECT_NEAR(mglue::dirichlet_energy(g, lap, 3), 0.0, 1e-28);
}

TEST(DirichletEnergy, MatchesDenseMatrixPower) {
  const mglue::Edge pair[] = {{0, 1}, {1, 2}};
  const Matrix lap = mglue::normalized_laplacian(3, pair);
  Eigen::MatrixXd l(3, 3);
  const double s = 1.0 / std::sqrt(2.0);
  l << 1, -s, 0, -s, 1, -s, 0, -s, 1;
  EXPECT_LT((oracle::to_eigen(lap) - l).norm(), 1e-15);
  const double ind[] = {1, 0, 0};
  EXPECT_NEAR(mglue::dirichlet_energy(ind, lap, 1), (l * Eigen::Vector3d(1, 0, 0)).squaredNorm(), 1e-14);
  const double mid[] = {0, 1, 0};
  EXPECT_NEAR(mglue::dirichlet_energy(mid, lap, 2), (l * l * Eigen::Vector3d(0, 1, 0)).squaredNorm(), 1e-14);
}

// ---- triangle triviality ----------------------------------------------------

namespace {

std::vector<mglue::Edge> complete_graph(std::size_t n) {
  std::vector<mglue::Edge> e;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) e.push_back({i, j});
  return e;
}

mglue::TransportFn transports_for(const std::vector<Matrix>& g) {
  return [g](std::size_t a, std::size_t b) { return mglue::transport_value(g[a], g[b]); };
}

}  // namespace

TEST(TriangleTriviality, K4WithDiagonalMetrics) {
  std::mt19937_64 rng(18);
  std::vector<Matrix> g;
  for (int i = 0; i < 4; ++i) g.push_back(oracle::random_diagonal_spd(3, rng));
  const auto edges = complete_graph(4);
  auto rep = mglue::triangle_triviality_oracle(4, edges, transports_for(g));
  EXPECT_TRUE(rep.hypothesis_met);
  EXPECT_TRUE(rep.all_basis_cycles_trivial);
  EXPECT_TRUE(rep.all_simple_cycles_trivial);
  EXPECT_TRUE(rep.implication_holds);
  EXPECT_EQ(rep.triangles, 4u);
  EXPECT_EQ(rep.basis_cycles, 3u);
  EXPECT_EQ(rep.simple_cycles, 7u);  // 4 triangles + 3 Hamiltonian 4-cycles
}

TEST(TriangleTriviality, K4WithNonCommutingMetric) {
  std::mt19937_64 rng(19);
  std::vector<Matrix> g;
  for (int i = 0; i < 3; ++i) g.push_back(oracle::random_diagonal_spd(2, rng));
  g.push_back(Matrix::from_rows({{2, 1}, {1, 2}}));
  const auto edges = complete_graph(4);
  auto rep = mglue::triangle_triviality_oracle(4, edges, transports_for(g));
  EXPECT_FALSE(rep.all_triangles_trivial);
  EXPECT_FALSE(rep.hypothesis_met);
  EXPECT_TRUE(rep.implication_holds);
}

TEST(TriangleTriviality, ChordlessFourCycleReportsUncoveredEdges) {
  std::vector<Matrix> g(4, Matrix::identity(2));
  const mglue::Edge edges[] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}};
  auto rep = mglue::triangle_triviality_oracle(4, edges, transports_for(g));
  EXPECT_EQ(rep.edges_not_in_triangle.size(), 4u);
  EXPECT_FALSE(rep.hypothesis_met);
  EXPECT_TRUE(rep.implication_holds);
}
