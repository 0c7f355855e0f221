#include "mglue/graph_data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mglue/random.hpp"

namespace mglue {

using nlohmann::json;

std::string to_string(TaskType t) {
  switch (t) {
    case TaskType::node: return "node";
    case TaskType::link: return "link";
    case TaskType::graph: return "graph";
  }
  return "graph";
}

TaskType task_from_string(const std::string& s) {
  if (s == "node") return TaskType::node;
  if (s == "link") return TaskType::link;
  if (s == "graph") return TaskType::graph;
  throw DataError("unknown task type '" + s + "' (expected node, link or graph)", 0, "task");
}

std::string to_string(Family f) {
  switch (f) {
    case Family::sbm_community: return "sbm-community";
    case Family::random_tree: return "random-tree";
    case Family::dense_clique_clusters: return "dense-clique-clusters";
  }
  return "sbm-community";
}

Family family_from_string(const std::string& s) {
  if (s == "sbm-community") return Family::sbm_community;
  if (s == "random-tree") return Family::random_tree;
  if (s == "dense-clique-clusters") return Family::dense_clique_clusters;
  throw DataError("unknown structural family '" + s + "'", 0, "family");
}

void GraphRecord::validate() const {
  if (features.rows() != num_nodes)
    throw DataError("features has " + std::to_string(features.rows()) + " rows but num_nodes is " +
                        std::to_string(num_nodes),
                    0, "features");
  for (const auto& [a, b] : edges) {
    if (a >= num_nodes || b >= num_nodes)
      throw DataError("edges: endpoint of (" + std::to_string(a) + "," + std::to_string(b) + ") is >= num_nodes " +
                          std::to_string(num_nodes),
                      0, "edges");
    if (a == b) throw DataError("edges: self-loop on node " + std::to_string(a), 0, "edges");
  }
  if (!node_labels.empty() && node_labels.size() != num_nodes)
    throw DataError("label: node label array length differs from num_nodes", 0, "label");
}

void DomainDataset::validate() const {
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& rec = records[r];
    rec.validate();
    if (rec.domain != name)
      throw DataError("record " + std::to_string(r) + ": domain '" + rec.domain + "' differs from dataset '" + name +
                          "'",
                      0, "domain");
    if (rec.num_nodes > 0 && rec.feature_dim() != feature_dim)
      throw DataError("record " + std::to_string(r) + ": feature dimension " + std::to_string(rec.feature_dim()) +
                          " differs from " + std::to_string(feature_dim),
                      0, "features");
    auto check = [&](int l) {
      if (l < 0 || l >= num_classes)
        throw DataError("record " + std::to_string(r) + ": label " + std::to_string(l) + " outside [0," +
                            std::to_string(num_classes) + ")",
                        0, "label");
    };
    if (rec.label) check(*rec.label);
    for (int l : rec.node_labels) check(l);
  }
}

json record_to_json(const GraphRecord& r) {
  json j;
  j["num_nodes"] = r.num_nodes;
  json edges = json::array();
  for (const auto& [a, b] : r.edges) edges.push_back({a, b});
  j["edges"] = std::move(edges);
  json feats = json::array();
  for (std::size_t i = 0; i < r.features.rows(); ++i) {
    json row = json::array();
    for (std::size_t c = 0; c < r.features.cols(); ++c) row.push_back(r.features(i, c));
    feats.push_back(std::move(row));
  }
  j["features"] = std::move(feats);
  if (!r.node_labels.empty())
    j["label"] = r.node_labels;
  else if (r.label)
    j["label"] = *r.label;
  else
    j["label"] = nullptr;
  j["domain"] = r.domain;
  return j;
}

namespace {

const json& field(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw DataError(std::string("missing key '") + key + "'", 0, key);
  return *it;
}

}  // namespace

GraphRecord record_from_json(const json& j) {
  if (!j.is_object()) throw DataError("record is not a JSON object");
  static const std::set<std::string> keys = {"num_nodes", "edges", "features", "label", "domain"};
  for (const auto& [k, v] : j.items())
    if (!keys.count(k)) throw DataError("unknown key '" + k + "'", 0, k);

  GraphRecord r;
  const json& n = field(j, "num_nodes");
  if (!n.is_number_unsigned() && !(n.is_number_integer() && n.get<long long>() >= 0))
    throw DataError("num_nodes must be a non-negative integer", 0, "num_nodes");
  r.num_nodes = n.get<std::size_t>();

  const json& e = field(j, "edges");
  if (!e.is_array()) throw DataError("edges must be an array of pairs", 0, "edges");
  for (const auto& p : e) {
    if (!p.is_array() || p.size() != 2 || !p[0].is_number_integer() || !p[1].is_number_integer() ||
        p[0].get<long long>() < 0 || p[1].get<long long>() < 0)
      throw DataError("edges must contain pairs of non-negative integers", 0, "edges");
    r.edges.emplace_back(p[0].get<std::size_t>(), p[1].get<std::size_t>());
  }

  const json& f = field(j, "features");
  if (!f.is_array()) throw DataError("features must be an array of rows", 0, "features");
  const std::size_t cols = f.empty() ? 0 : (f[0].is_array() ? f[0].size() : 0);
  r.features = Matrix(f.size(), cols);
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!f[i].is_array() || f[i].size() != cols)
      throw DataError("features row " + std::to_string(i) + " is not an array of length " + std::to_string(cols), 0,
                      "features");
    for (std::size_t c = 0; c < cols; ++c) {
      if (!f[i][c].is_number()) throw DataError("features must be numeric", 0, "features");
      r.features(i, c) = f[i][c].get<double>();
    }
  }

  const json& l = field(j, "label");
  if (l.is_number_integer()) {
    r.label = l.get<int>();
  } else if (l.is_array()) {
    for (const auto& v : l) {
      if (!v.is_number_integer()) throw DataError("label array must hold integers", 0, "label");
      r.node_labels.push_back(v.get<int>());
    }
  } else if (!l.is_null()) {
    throw DataError("label must be an integer, an array of integers, or null", 0, "label");
  }

  const json& d = field(j, "domain");
  if (!d.is_string()) throw DataError("domain must be a string", 0, "domain");
  r.domain = d.get<std::string>();
  r.validate();
  return r;
}

DomainDataset load_jsonl(const std::filesystem::path& path, TaskType task, std::optional<int> num_classes) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file " + path.string());
  DomainDataset ds;
  ds.task = task;
  std::string line;
  std::size_t lineno = 0;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    GraphRecord rec;
    try {
      rec = record_from_json(json::parse(line));
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed JSON: " + e.what(), lineno);
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what(), lineno, e.field());
    }
    if (ds.records.empty()) {
      ds.name = rec.domain;
      ds.feature_dim = rec.feature_dim();
    }
    if (rec.label) max_label = std::max(max_label, *rec.label);
    for (int v : rec.node_labels) max_label = std::max(max_label, v);
    ds.records.push_back(std::move(rec));
  }
  if (ds.records.empty()) ds.name = path.stem().string();
  ds.num_classes = num_classes.value_or(max_label + 1);
  try {
    ds.validate();
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what(), 0, e.field());
  }
  return ds;
}

std::string to_jsonl(const DomainDataset& ds) {
  std::string out;
  for (const auto& r : ds.records) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

void save_jsonl(const DomainDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dataset file " + path.string());
  out << to_jsonl(ds);
  if (!out) throw DataError("write failed for " + path.string());
}

// ---- synthetic spec -------------------------------------------------------------

SyntheticSpec synthetic_spec_from_json(const json& j) {
  if (!j.is_object()) throw DataError("synthetic spec must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (k != "domains") throw DataError("synthetic spec: unknown key '" + k + "'", 0, k);
  const json& ds = field(j, "domains");
  if (!ds.is_array()) throw DataError("synthetic spec: domains must be an array", 0, "domains");

  SyntheticSpec spec;
  std::set<std::string> names;
  for (const auto& dj : ds) {
    if (!dj.is_object()) throw DataError("synthetic spec: each domain must be an object", 0, "domains");
    DomainSpec d;
    for (const auto& [k, v] : dj.items()) {
      try {
        if (k == "name") d.name = v.get<std::string>();
        else if (k == "family") d.family = family_from_string(v.get<std::string>());
        else if (k == "task") d.task = task_from_string(v.get<std::string>());
        else if (k == "num_classes") d.num_classes = v.get<int>();
        else if (k == "num_records") d.num_records = v.get<std::size_t>();
        else if (k == "nodes_min") d.nodes_min = v.get<std::size_t>();
        else if (k == "nodes_max") d.nodes_max = v.get<std::size_t>();
        else if (k == "feature_dim") d.feature_dim = v.get<std::size_t>();
        else if (k == "mean_offset") d.mean_offset = v.get<double>();
        else if (k == "feature_std") d.feature_std = v.get<double>();
        else if (k == "p_in") d.p_in = v.get<double>();
        else if (k == "p_out") d.p_out = v.get<double>();
        else if (k == "graph_nodes") d.graph_nodes = v.get<std::size_t>();
        else if (k == "ego_hops") d.ego_hops = v.get<int>();
        else if (k == "ego_fanout") d.ego_fanout = v.get<std::size_t>();
        else throw DataError("synthetic spec: unknown key '" + k + "'", 0, k);
      } catch (const json::exception& e) {
        throw DataError("synthetic spec: bad value for '" + k + "': " + e.what(), 0, k);
      }
    }
    if (d.name.empty()) throw DataError("synthetic spec: domain without a name", 0, "name");
    if (!names.insert(d.name).second) throw DataError("synthetic spec: duplicate domain '" + d.name + "'", 0, "name");
    if (d.num_classes < 1) throw DataError("synthetic spec: num_classes must be >= 1", 0, "num_classes");
    if (d.nodes_min < 1 || d.nodes_max < d.nodes_min)
      throw DataError("synthetic spec: need 1 <= nodes_min <= nodes_max", 0, "nodes_min");
    if (d.feature_dim < 1) throw DataError("synthetic spec: feature_dim must be >= 1", 0, "feature_dim");
    if (d.p_in < 0 || d.p_in > 1) throw DataError("synthetic spec: p_in outside [0,1]", 0, "p_in");
    if (d.p_out < 0 || d.p_out > 1) throw DataError("synthetic spec: p_out outside [0,1]", 0, "p_out");
    if (d.feature_std < 0) throw DataError("synthetic spec: feature_std must be >= 0", 0, "feature_std");
    if (d.task != TaskType::graph && d.graph_nodes < 2)
      throw DataError("synthetic spec: graph_nodes must be >= 2", 0, "graph_nodes");
    if (d.task == TaskType::link) d.num_classes = 2;
    spec.domains.push_back(d);
  }
  return spec;
}

json synthetic_spec_to_json(const SyntheticSpec& s) {
  json ds = json::array();
  for (const auto& d : s.domains) {
    ds.push_back({{"name", d.name},
                  {"family", to_string(d.family)},
                  {"task", to_string(d.task)},
                  {"num_classes", d.num_classes},
                  {"num_records", d.num_records},
                  {"nodes_min", d.nodes_min},
                  {"nodes_max", d.nodes_max},
                  {"feature_dim", d.feature_dim},
                  {"mean_offset", d.mean_offset},
                  {"feature_std", d.feature_std},
                  {"p_in", d.p_in},
                  {"p_out", d.p_out},
                  {"graph_nodes", d.graph_nodes},
                  {"ego_hops", d.ego_hops},
                  {"ego_fanout", d.ego_fanout}});
  }
  return {{"domains", ds}};
}

// ---- generators -----------------------------------------------------------------

namespace {

struct EdgeSet {
  std::set<Edge> seen;
  std::vector<Edge> list;
  void add(std::size_t a, std::size_t b) {
    if (a == b) return;
    Edge e{std::min(a, b), std::max(a, b)};
    if (seen.insert(e).second) list.push_back(e);
  }
};

std::vector<Matrix> class_means(const DomainSpec& d, Rng& rng) {
  std::vector<Matrix> mu;
  for (int c = 0; c < d.num_classes; ++c) {
    Matrix m(1, d.feature_dim);
    for (auto& v : m.values()) v = d.mean_offset * rng.normal();
    mu.push_back(std::move(m));
  }
  return mu;
}

Matrix node_features(const std::vector<int>& node_class, const std::vector<Matrix>& mu, double sd, Rng& rng) {
  const std::size_t f = mu.front().cols();
  Matrix x(node_class.size(), f);
  for (std::size_t i = 0; i < node_class.size(); ++i)
    for (std::size_t c = 0; c < f; ++c) x(i, c) = mu[node_class[i]][c] + sd * rng.normal();
  return x;
}

// Small graph whose structure depends on class c.
std::vector<Edge> class_structure(const DomainSpec& d, int c, std::size_t n, Rng& rng) {
  EdgeSet es;
  switch (d.family) {
    case Family::sbm_community: {
      const std::size_t blocks = static_cast<std::size_t>(c) + 2;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
          if (rng.bernoulli(i % blocks == j % blocks ? d.p_in : d.p_out)) es.add(i, j);
      break;
    }
    case Family::random_tree: {
      // Parent drawn from the last w nodes: w = 1 is a path, larger w bushier.
      const std::size_t w = 1 + 2 * static_cast<std::size_t>(c);
      for (std::size_t t = 1; t < n; ++t) {
        const std::size_t lo = t > w ? t - w : 0;
        es.add(t, lo + rng.below(t - lo));
      }
      break;
    }
    case Family::dense_clique_clusters: {
      const std::size_t size = 3 + static_cast<std::size_t>(c);
      std::vector<std::size_t> start;
      for (std::size_t s = 0; s < n; s += size) start.push_back(s);
      for (std::size_t q = 0; q < start.size(); ++q) {
        const std::size_t end = std::min(n, start[q] + size);
        for (std::size_t i = start[q]; i < end; ++i)
          for (std::size_t j = i + 1; j < end; ++j)
            if (rng.bernoulli(0.9)) es.add(i, j);
        if (q > 0) es.add(start[q - 1] + rng.below(size), start[q] + rng.below(end - start[q]));
        for (std::size_t p = 0; p + 1 < q; ++p)
          if (rng.bernoulli(d.p_out)) es.add(start[p] + rng.below(size), start[q] + rng.below(end - start[q]));
      }
      break;
    }
  }
  return es.list;
}

DomainDataset gen_graph_task(const DomainSpec& d, Rng& rng) {
  DomainDataset ds{d.name, {}, TaskType::graph, d.num_classes, d.feature_dim};
  const auto mu = class_means(d, rng);
  std::vector<int> classes(d.num_records);
  for (std::size_t r = 0; r < d.num_records; ++r) classes[r] = static_cast<int>(r % d.num_classes);
  rng.shuffle(classes);
  for (std::size_t r = 0; r < d.num_records; ++r) {
    const int c = classes[r];
    GraphRecord rec;
    rec.num_nodes = d.nodes_min + rng.below(d.nodes_max - d.nodes_min + 1);
    rec.edges = class_structure(d, c, rec.num_nodes, rng);
    rec.features = node_features(std::vector<int>(rec.num_nodes, c), mu, d.feature_std, rng);
    rec.label = c;
    rec.domain = d.name;
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace

GraphRecord gen_large_graph(const DomainSpec& d, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = d.graph_nodes;
  const std::size_t k = static_cast<std::size_t>(d.num_classes);
  std::vector<int> cls(n);
  EdgeSet es;
  switch (d.family) {
    case Family::sbm_community: {
      for (std::size_t i = 0; i < n; ++i) cls[i] = static_cast<int>(i % k);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
          if (rng.bernoulli(cls[i] == cls[j] ? d.p_in : d.p_out)) es.add(i, j);
      break;
    }
    case Family::random_tree: {
      // Random recursive tree; a child keeps its parent's class with prob. 0.8.
      cls[0] = static_cast<int>(rng.below(k));
      for (std::size_t t = 1; t < n; ++t) {
        const std::size_t parent = rng.below(t);
        es.add(t, parent);
        cls[t] = rng.bernoulli(0.8) ? cls[parent] : static_cast<int>(rng.below(k));
      }
      break;
    }
    case Family::dense_clique_clusters: {
      std::vector<std::size_t> start;
      std::vector<int> clique_class;
      for (std::size_t s = 0; s < n;) {
        const std::size_t size = 4 + rng.below(5);
        start.push_back(s);
        clique_class.push_back(static_cast<int>(rng.below(k)));
        s += size;
      }
      start.push_back(n);
      const std::size_t q = clique_class.size();
      for (std::size_t a = 0; a < q; ++a) {
        for (std::size_t i = start[a]; i < start[a + 1]; ++i) {
          cls[i] = clique_class[a];
          for (std::size_t j = i + 1; j < start[a + 1]; ++j)
            if (rng.bernoulli(0.9)) es.add(i, j);
        }
      }
      for (std::size_t a = 0; a < q; ++a)
        for (std::size_t b = a + 1; b < q; ++b) {
          const double p = clique_class[a] == clique_class[b] ? d.p_out : d.p_out / 4.0;
          if (rng.bernoulli(p)) {
            const std::size_t i = start[a] + rng.below(start[a + 1] - start[a]);
            const std::size_t j = start[b] + rng.below(start[b + 1] - start[b]);
            es.add(i, j);
          }
        }
      break;
    }
  }
  const auto mu = class_means(d, rng);
  GraphRecord g;
  g.num_nodes = n;
  g.edges = es.list;
  g.features = node_features(cls, mu, d.feature_std, rng);
  g.node_labels = cls;
  g.domain = d.name;
  return g;
}

std::vector<DomainDataset> gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  require(!spec.domains.empty(), "gen_synthetic: empty domain list");
  std::vector<DomainDataset> out;
  for (std::size_t i = 0; i < spec.domains.size(); ++i) {
    const DomainSpec& d = spec.domains[i];
    Rng rng(stream_seed(seed, i, 1));
    switch (d.task) {
      case TaskType::graph:
        out.push_back(gen_graph_task(d, rng));
        break;
      case TaskType::node: {
        const GraphRecord g = gen_large_graph(d, stream_seed(seed, i, 2));
        auto centers = rng.sample_without_replacement(g.num_nodes, d.num_records);
        DomainDataset ds = ego_sample(g, d.ego_hops, d.ego_fanout, stream_seed(seed, i, 3), centers);
        ds.num_classes = d.num_classes;
        out.push_back(std::move(ds));
        break;
      }
      case TaskType::link: {
        const GraphRecord g = gen_large_graph(d, stream_seed(seed, i, 2));
        std::set<Edge> present(g.edges.begin(), g.edges.end());
        DomainDataset ds{d.name, {}, TaskType::link, 2, d.feature_dim};
        Rng ego_rng(stream_seed(seed, i, 3));
        for (std::size_t r = 0; r < d.num_records; ++r) {
          std::size_t a, b;
          int label;
          if (r % 2 == 0 && !g.edges.empty()) {
            std::tie(a, b) = g.edges[rng.below(g.edges.size())];
            label = 1;
          } else {
            do {
              a = rng.below(g.num_nodes);
              b = rng.below(g.num_nodes);
            } while (a == b || present.count({std::min(a, b), std::max(a, b)}));
            label = 0;
          }
          GraphRecord rec = ego_union(g, a, b, d.ego_hops, d.ego_fanout, ego_rng);
          rec.label = label;
          ds.records.push_back(std::move(rec));
        }
        out.push_back(std::move(ds));
        break;
      }
    }
  }
  return out;
}

// ---- ego-graphs -------------------------------------------------------------------

namespace {

std::vector<std::vector<std::size_t>> adjacency_lists(const GraphRecord& g) {
  std::vector<std::vector<std::size_t>> adj(g.num_nodes);
  for (const auto& [a, b] : g.edges) {
    adj[a].push_back(b);
    adj[b].push_back(a);
  }
  for (auto& l : adj) {
    std::sort(l.begin(), l.end());
    l.erase(std::unique(l.begin(), l.end()), l.end());
  }
  return adj;
}

GraphRecord ego_from_seeds(const GraphRecord& g, const std::vector<std::vector<std::size_t>>& adj,
                           std::vector<std::size_t> seeds, int hops, std::size_t fanout, Rng& rng) {
  std::vector<long> index(g.num_nodes, -1);
  std::vector<std::size_t> order;
  for (std::size_t s : seeds) {
    require(s < g.num_nodes, "ego_graph: center out of range");
    if (index[s] < 0) {
      index[s] = static_cast<long>(order.size());
      order.push_back(s);
    }
  }
  std::vector<std::size_t> frontier = order;
  for (int h = 0; h < hops; ++h) {
    std::vector<std::size_t> next;
    for (std::size_t u : frontier) {
      std::vector<std::size_t> cand;
      for (std::size_t v : adj[u])
        if (index[v] < 0) cand.push_back(v);
      for (std::size_t pick : rng.sample_without_replacement(cand.size(), fanout)) {
        const std::size_t v = cand[pick];
        index[v] = static_cast<long>(order.size());
        order.push_back(v);
        next.push_back(v);
      }
    }
    frontier = std::move(next);
  }
  GraphRecord out;
  out.num_nodes = order.size();
  out.domain = g.domain;
  out.features = Matrix(order.size(), g.features.cols());
  for (std::size_t i = 0; i < order.size(); ++i)
    for (std::size_t c = 0; c < g.features.cols(); ++c) out.features(i, c) = g.features(order[i], c);
  for (const auto& [a, b] : g.edges)
    if (index[a] >= 0 && index[b] >= 0)
      out.edges.emplace_back(static_cast<std::size_t>(index[a]), static_cast<std::size_t>(index[b]));
  return out;
}

}  // namespace

GraphRecord ego_graph(const GraphRecord& g, std::size_t center, int hops, std::size_t fanout, Rng& rng) {
  GraphRecord out = ego_from_seeds(g, adjacency_lists(g), {center}, hops, fanout, rng);
  if (!g.node_labels.empty()) out.label = g.node_labels[center];
  return out;
}

GraphRecord ego_union(const GraphRecord& g, std::size_t a, std::size_t b, int hops, std::size_t fanout, Rng& rng) {
  require(a != b, "ego_union: endpoints must differ");
  GraphRecord out = ego_from_seeds(g, adjacency_lists(g), {a, b}, hops, fanout, rng);
  std::erase_if(out.edges, [](const Edge& e) { return (e.first == 0 && e.second == 1) || (e.first == 1 && e.second == 0); });
  return out;
}

DomainDataset ego_sample(const GraphRecord& g, int hops, std::size_t fanout, std::uint64_t seed,
                         std::vector<std::size_t> centers) {
  require(!g.node_labels.empty(), "ego_sample: graph has no node labels");
  require(hops >= 0, "ego_sample: hops must be >= 0");
  if (centers.empty())
    for (std::size_t i = 0; i < g.num_nodes; ++i) centers.push_back(i);
  const auto adj = adjacency_lists(g);
  Rng rng(seed);
  DomainDataset ds;
  ds.name = g.domain;
  ds.task = TaskType::node;
  ds.feature_dim = g.features.cols();
  int max_label = -1;
  for (std::size_t c : centers) {
    GraphRecord rec = ego_from_seeds(g, adj, {c}, hops, fanout, rng);
    rec.label = g.node_labels[c];
    max_label = std::max(max_label, *rec.label);
    ds.records.push_back(std::move(rec));
  }
  ds.num_classes = max_label + 1;
  return ds;
}

// ---- batching ------------------------------------------------------------------------

std::vector<GraphBatch> make_batches(const std::vector<DomainDataset>& datasets, std::size_t batch_size,
                                     std::uint64_t seed) {
  require(batch_size >= 1, "make_batches: batch_size must be >= 1");
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> order(datasets.size());
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    for (std::size_t r = 0; r < datasets[d].records.size(); ++r) order[d].push_back(r);
    rng.shuffle(order[d]);
  }
  std::vector<std::size_t> pos(datasets.size(), 0);
  std::vector<RecordRef> stream;
  for (;;) {
    std::vector<std::size_t> live;
    for (std::size_t d = 0; d < datasets.size(); ++d)
      if (pos[d] < order[d].size()) live.push_back(d);
    if (live.empty()) break;
    const std::size_t d = live[rng.below(live.size())];
    stream.push_back({d, order[d][pos[d]++]});
  }
  std::vector<GraphBatch> batches;
  for (std::size_t s = 0; s < stream.size(); s += batch_size) {
    GraphBatch b;
    b.offsets.push_back(0);
    for (std::size_t i = s; i < std::min(stream.size(), s + batch_size); ++i) {
      const GraphRecord& rec = datasets[stream[i].dataset].records[stream[i].record];
      b.refs.push_back(stream[i]);
      b.records.push_back(&rec);
      b.offsets.push_back(b.offsets.back() + rec.num_nodes);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace mglue
