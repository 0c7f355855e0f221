#include <benchmark/benchmark.h>

#include <random>

#include "mglue/adapt.hpp"
#include "mglue/encoder.hpp"
#include "mglue/frame.hpp"
#include "mglue/gluing.hpp"

using namespace mglue;

namespace {

Matrix random_spd(std::size_t m, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Matrix a(m, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) a(i, j) = nd(rng);
  return matmul(a.transposed(), a) + static_cast<double>(m) * Matrix::identity(m);
}

GraphRecord random_record(std::size_t n, std::size_t f, std::mt19937_64& rng) {
  GraphRecord g;
  g.num_nodes = n;
  for (std::size_t i = 1; i < n; ++i) g.edges.push_back({std::uniform_int_distribution<std::size_t>(0, i - 1)(rng), i});
  std::normal_distribution<double> nd;
  g.features = Matrix(n, f);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) g.features(i, j) = nd(rng);
  return g;
}

void BM_SpdSqrt(benchmark::State& state) {
  std::mt19937_64 rng(1);
  const Matrix g = random_spd(state.range(0), rng);
  for (auto _ : state) {
    Tape t;
    benchmark::DoNotOptimize(spd_sqrt(t.constant(g)).sqrt.value());
  }
}
BENCHMARK(BM_SpdSqrt)->Arg(4)->Arg(16)->Arg(32);

void BM_Transport(benchmark::State& state) {
  std::mt19937_64 rng(2);
  const Matrix gi = random_spd(state.range(0), rng), gj = random_spd(state.range(0), rng);
  for (auto _ : state) benchmark::DoNotOptimize(transport_value(gi, gj));
}
BENCHMARK(BM_Transport)->Arg(4)->Arg(16)->Arg(32);

void BM_HolonomyLossBackward(benchmark::State& state) {
  std::mt19937_64 rng(3);
  const std::size_t m = state.range(0);
  std::vector<Matrix> g;
  for (int i = 0; i < 8; ++i) g.push_back(random_spd(m, rng));
  std::vector<TrianglePath> paths;
  for (std::size_t i = 0; i < 8; ++i) paths.push_back({i, (i + 1) % 8, (i + 2) % 8});
  for (auto _ : state) {
    Tape t;
    std::vector<Var> v;
    for (const auto& x : g) v.push_back(t.leaf(x));
    Var loss = holonomy_loss(paths, v);
    benchmark::DoNotOptimize(t.backward(loss)[v[0]]);
  }
}
BENCHMARK(BM_HolonomyLossBackward)->Arg(4)->Arg(8);

void BM_FrameRecord(benchmark::State& state) {
  std::mt19937_64 rng(4);
  ParamStore store;
  init_encoder(store, {32, 64, 64}, 1);
  init_bank(store, 8, 32, 2);
  ensure_projection(store, 16, 32, 3);
  const GraphRecord rec = random_record(state.range(0), 16, rng);
  FrameOptions fo;
  fo.k = 5;
  for (auto _ : state) benchmark::DoNotOptimize(frame_values(store, rec, fo).g);
}
BENCHMARK(BM_FrameRecord)->Arg(16)->Arg(64);

}  // namespace
BENCHMARK_MAIN();
