#pragma once

// Run configuration: dataset sources, output directory and the pre-training
// and adaptation settings, read from one JSON document. Unknown keys are
// rejected.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mglue/adapt.hpp"
#include "mglue/pretrain.hpp"

namespace mglue {

struct DatasetSource {
  std::string path;  // as written; relative paths resolve against RunConfig::base_dir
  TaskType task = TaskType::graph;
  std::optional<int> num_classes;
  // Only used when the file holds one large graph with per-node labels.
  int ego_hops = 2;
  std::size_t ego_fanout = 10;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "run";
  std::vector<DatasetSource> datasets;
  std::optional<DatasetSource> target;
  std::string checkpoint;  // empty: <out>/checkpoint.mgck
  PretrainConfig pretrain;
  AdaptConfig adapt;
  std::filesystem::path base_dir;  // directory of the config file; not echoed

  std::filesystem::path resolve(const std::string& p) const;
  std::filesystem::path out_dir() const { return resolve(out); }
  std::filesystem::path checkpoint_path() const;
  /// Copies `seed` into the pretrain and adapt sections and validates them.
  void finalize();
};

/// Throws DataError naming the offending key path (e.g. "pretrain.lr").
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
/// Every setting, defaults included.
nlohmann::json to_json(const RunConfig& c);

/// Compact dump with sorted keys and shortest round-trip doubles.
std::string canonical_json(const nlohmann::json& j);
/// FNV-1a 64 of the canonical dump, 16 lowercase hex digits.
std::string config_hash(const nlohmann::json& j);

/// Loads a dataset file. A file holding a single graph with per-node labels
/// becomes ego-graphs around its nodes with the graph's edges as skeleton.
TrainingDomain load_training_domain(const DatasetSource& src, const RunConfig& cfg, std::uint64_t seed);

}  // namespace mglue
