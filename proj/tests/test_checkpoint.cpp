#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "mglue/checkpoint.hpp"
#include "mglue/config.hpp"

using namespace mglue;
using json = nlohmann::json;

namespace {

PretrainConfig tiny_config() {
  PretrainConfig c;
  c.epochs = 3;
  c.warmup_epochs = 1;
  c.batch_size = 6;
  c.learning_rate = 1e-2;
  c.m = 3;
  c.k_perturb = 2;
  c.knn_k = 2;
  c.n_triangle_samples = 8;
  c.dims = {8, 12, 6};
  c.seed = 5;
  return c;
}

std::vector<TrainingDomain> tiny_domains() {
  SyntheticSpec spec;
  for (auto [name, fam, fd] : {std::tuple{"alpha", Family::sbm_community, 5ul}, {"beta", Family::dense_clique_clusters, 7ul}}) {
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
  for (auto& ds : gen_synthetic(spec, 4)) out.push_back({ds, {}});
  return out;
}

TrainState trained_state(int epochs) {
  auto domains = tiny_domains();
  auto cfg = tiny_config();
  TrainState s = init_train_state(domains, cfg);
  for (int e = 0; e < epochs; ++e) run_pretrain_epoch(s, domains, cfg);
  return s;
}

const json kConfig = {{"seed", 5}, {"note", "test"}};

std::size_t manifest_length(const std::string& bytes) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + b])) << (8 * b);
  return v;
}

void expect_same_state(const TrainState& a, const TrainState& b) {
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.protos, b.protos);
  EXPECT_EQ(a.epoch, b.epoch);
  EXPECT_EQ(a.adam.steps(), b.adam.steps());
  EXPECT_EQ(a.adam.first_moments(), b.adam.first_moments());
  EXPECT_EQ(a.adam.second_moments(), b.adam.second_moments());
  EXPECT_EQ(a.rng.state(), b.rng.state());
}

}  // namespace

TEST(Checkpoint, RoundTripRestoresEveryPiece) {
  TrainState s = trained_state(2);
  s.rng.normal();  // leave a Box-Muller spare pending
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(s, kConfig));
  expect_same_state(s, ck.state);
  EXPECT_EQ(ck.config(), kConfig);
  EXPECT_EQ(ck.manifest.at("format_version"), kCheckpointFormatVersion);
  EXPECT_EQ(ck.manifest.at("config_hash"), config_hash(kConfig));
}

TEST(Checkpoint, ManifestOffsetsTileTheBlob) {
  const std::string bytes = encode_checkpoint(trained_state(1), kConfig);
  const json m = json::parse(bytes.substr(16, manifest_length(bytes)));
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::set<std::string> kinds;
  for (const auto& [name, t] : m.at("tensors").items()) {
    spans.push_back({t.at("offset"), t.at("length")});
    EXPECT_EQ(t.at("length").get<std::size_t>(), 8 * t.at("shape")[0].get<std::size_t>() * t.at("shape")[1].get<std::size_t>());
    kinds.insert(name.substr(0, name.find('/')));
  }
  std::sort(spans.begin(), spans.end());
  std::size_t cursor = 0;
  for (auto [off, len] : spans) {
    EXPECT_EQ(off, cursor);
    cursor += len;
  }
  EXPECT_EQ(cursor, bytes.size() - 16 - manifest_length(bytes));
  EXPECT_EQ(cursor, m.at("blob_bytes").get<std::size_t>());
  EXPECT_EQ(kinds, (std::set<std::string>{"adam.m", "adam.v", "param", "proto.log_g", "proto.z"}));
}

TEST(Checkpoint, BlobIsLittleEndianFloat64) {
  TrainState s;
  s.params.set("x", Matrix(1, 2, std::vector<double>{1.0, -2.5}));
  const std::string bytes = encode_checkpoint(s, kConfig);
  const std::size_t start = 16 + manifest_length(bytes);
  ASSERT_EQ(bytes.size() - start, 16u);
  // 1.0 = 0x3ff0000000000000, -2.5 = 0xc004000000000000
  const unsigned char expected[16] = {0, 0, 0, 0, 0, 0, 0xf0, 0x3f, 0, 0, 0, 0, 0, 0, 0x04, 0xc0};
  EXPECT_EQ(std::memcmp(bytes.data() + start, expected, 16), 0);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRunBitForBit) {
  auto domains = tiny_domains();
  auto cfg = tiny_config();
  TrainState full = init_train_state(domains, cfg);
  std::vector<std::string> full_rows, resumed_rows;
  for (int e = 0; e < cfg.epochs; ++e)
    for (const auto& r : run_pretrain_epoch(full, domains, cfg)) full_rows.push_back(format_metrics_row(r));

  TrainState part = init_train_state(domains, cfg);
  for (const auto& r : run_pretrain_epoch(part, domains, cfg)) resumed_rows.push_back(format_metrics_row(r));
  TrainState resumed = decode_checkpoint(encode_checkpoint(part, kConfig)).state;
  while (resumed.epoch < cfg.epochs)
    for (const auto& r : run_pretrain_epoch(resumed, domains, cfg)) resumed_rows.push_back(format_metrics_row(r));

  EXPECT_EQ(full_rows, resumed_rows);
  expect_same_state(full, resumed);
}

TEST(Checkpoint, TruncationAtAnyPointIsRejected) {
  const std::string bytes = encode_checkpoint(trained_state(1), kConfig);
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{15}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
    try {
      decode_checkpoint(std::string_view(bytes).substr(0, cut));
      ADD_FAILURE() << "accepted a checkpoint cut at " << cut;
    } catch (const CheckpointError& e) {
      EXPECT_LE(e.position(), cut);
      EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos);
    }
  }
}

TEST(Checkpoint, CorruptionReportsBytePosition) {
  const std::string good = encode_checkpoint(trained_state(1), kConfig);
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  try {
    decode_checkpoint(bad_magic);
    ADD_FAILURE();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.position(), 0u);
  }
  std::string bad_json = good;
  bad_json[16 + 30] = '\x01';
  try {
    decode_checkpoint(bad_json);
    ADD_FAILURE();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.position(), 16u + 30u);
  }
  std::string extra = good + "12345678";
  EXPECT_THROW(decode_checkpoint(extra), CheckpointError);
}

TEST(Checkpoint, AtomicSaveAndLoad) {
  const auto dir = std::filesystem::temp_directory_path() / "mglue_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "state.mgck";
  TrainState s = trained_state(1);
  save_checkpoint(path, s, kConfig);
  EXPECT_FALSE(std::filesystem::exists(dir / "state.mgck.tmp"));
  expect_same_state(s, load_checkpoint(path).state);
  EXPECT_THROW(load_checkpoint(dir / "missing.mgck"), DataError);
  std::filesystem::remove_all(dir);
}
