#pragma once

// Graph records, JSONL datasets, synthetic domains, ego-graph sampling and the
// mixed-domain batch loader.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mglue/matrix.hpp"

namespace mglue {

using Edge = std::pair<std::size_t, std::size_t>;

/// Malformed or invalid input data. `line` is 1-based, 0 when not applicable;
/// `field` names the offending key when known.
class DataError : public std::runtime_error {
 public:
  DataError(const std::string& what, std::size_t line = 0, std::string field = {})
      : std::runtime_error(what), line_(line), field_(std::move(field)) {}
  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

enum class TaskType { node, link, graph };
std::string to_string(TaskType t);
TaskType task_from_string(const std::string& s);

struct GraphRecord {
  std::size_t num_nodes = 0;
  std::vector<Edge> edges;  // undirected, no self-loops
  Matrix features;          // num_nodes × F
  std::optional<int> label;
  // Per-node labels; only for a single large graph feeding ego_sample. In
  // JSONL this is written as an array under "label".
  std::vector<int> node_labels;
  std::string domain;

  std::size_t feature_dim() const { return features.cols(); }
  /// Throws DataError naming the field that breaks an invariant.
  void validate() const;
  bool operator==(const GraphRecord&) const = default;
};

struct DomainDataset {
  std::string name;
  std::vector<GraphRecord> records;
  TaskType task = TaskType::graph;
  int num_classes = 0;
  std::size_t feature_dim = 0;

  void validate() const;
  bool operator==(const DomainDataset&) const = default;
};

nlohmann::json record_to_json(const GraphRecord& r);
GraphRecord record_from_json(const nlohmann::json& j);

/// One record per line. The dataset name is the records' domain tag;
/// num_classes is 1 + the largest label seen unless given.
DomainDataset load_jsonl(const std::filesystem::path& path, TaskType task = TaskType::graph,
                         std::optional<int> num_classes = std::nullopt);
void save_jsonl(const DomainDataset& ds, const std::filesystem::path& path);
std::string to_jsonl(const DomainDataset& ds);

// ---- synthetic domains ------------------------------------------------------

enum class Family { sbm_community, random_tree, dense_clique_clusters };
std::string to_string(Family f);
Family family_from_string(const std::string& s);

struct DomainSpec {
  std::string name;
  Family family = Family::sbm_community;
  TaskType task = TaskType::graph;
  int num_classes = 3;
  std::size_t num_records = 100;
  std::size_t nodes_min = 10;
  std::size_t nodes_max = 20;
  std::size_t feature_dim = 16;
  double mean_offset = 1.0;
  double feature_std = 1.0;
  double p_in = 0.5;
  double p_out = 0.05;
  // node/link tasks: the large graph the samples are cut from
  std::size_t graph_nodes = 300;
  int ego_hops = 2;
  std::size_t ego_fanout = 10;
};

struct SyntheticSpec {
  std::vector<DomainSpec> domains;
};

/// Parses the synthetic spec document; unknown keys raise DataError naming them.
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);
nlohmann::json synthetic_spec_to_json(const SyntheticSpec& s);

/// Pure function of (spec, seed).
std::vector<DomainDataset> gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

/// One large labelled graph of the given family (node_labels filled).
GraphRecord gen_large_graph(const DomainSpec& d, std::uint64_t seed);

// ---- ego-graphs ---------------------------------------------------------------

class Rng;

/// Induced subgraph on the sampled h-hop neighbourhood of `center`. The center
/// is node 0; the rest follow in BFS discovery order. At each hop every
/// frontier node adds at most `fanout` not-yet-included neighbours, drawn
/// without replacement.
GraphRecord ego_graph(const GraphRecord& g, std::size_t center, int hops, std::size_t fanout, Rng& rng);

/// Ego-graph union around a node pair; the pair becomes nodes 0 and 1 and the
/// edge between them, if any, is removed.
GraphRecord ego_union(const GraphRecord& g, std::size_t a, std::size_t b, int hops, std::size_t fanout,
                      Rng& rng);

/// One ego-graph per center (all nodes when `centers` is empty), labelled by
/// the center's node label.
DomainDataset ego_sample(const GraphRecord& g, int hops, std::size_t fanout, std::uint64_t seed,
                         std::vector<std::size_t> centers = {});

// ---- batching -----------------------------------------------------------------

struct RecordRef {
  std::size_t dataset = 0;
  std::size_t record = 0;
  bool operator==(const RecordRef&) const = default;
};

struct GraphBatch {
  std::vector<RecordRef> refs;
  std::vector<const GraphRecord*> records;
  /// offsets[b] is the first node of record b in the block-diagonal layout;
  /// offsets.back() is the total node count.
  std::vector<std::size_t> offsets;

  std::size_t size() const { return records.size(); }
};

/// One epoch of batches. Each domain's records are shuffled, then the stream is
/// formed by repeatedly drawing a domain uniformly among those with records
/// left, so batches mix domains evenly.
std::vector<GraphBatch> make_batches(const std::vector<DomainDataset>& datasets, std::size_t batch_size,
                                     std::uint64_t seed);

}  // namespace mglue
