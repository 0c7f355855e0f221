#include "mglue/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace mglue {

using json = nlohmann::json;

namespace {

// Reads typed fields from one JSON object and remembers which keys were
// consumed, so leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw DataError("config: '" + label() + "' must be an object", 0, label());
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    out = convert<T>(*it, child(key));
  }

  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw DataError("config: unknown key '" + child(it.key()) + "'", 0, child(it.key()));
  }

 private:
  std::string label() const { return path_.empty() ? "<root>" : path_; }

  template <class T>
  static T convert(const json& v, const std::string& where) {
    auto bad = [&](const char* want) {
      return DataError("config: '" + where + "' must be " + want + ", got " + v.dump(), 0, where);
    };
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw bad("a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw bad("a string");
      return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw bad("a number");
      return v.get<double>();
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw bad("a non-negative integer");
      return static_cast<T>(v.get<std::uint64_t>());
    } else {
      if (!v.is_number_integer()) throw bad("an integer");
      const auto x = v.get<std::int64_t>();
      if (x < std::numeric_limits<T>::min() || x > std::numeric_limits<T>::max()) throw bad("an integer in range");
      return static_cast<T>(x);
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

DatasetSource dataset_from_json(const json& j, const std::string& where) {
  Section s(j, where);
  DatasetSource d;
  s.get("path", d.path);
  if (d.path.empty()) throw DataError("config: '" + s.child("path") + "' is required", 0, s.child("path"));
  std::string task = to_string(d.task);
  s.get("task", task);
  try {
    d.task = task_from_string(task);
  } catch (const std::exception& e) {
    throw DataError("config: '" + s.child("task") + "': " + e.what(), 0, s.child("task"));
  }
  if (const json* nc = s.find("num_classes"); nc && !nc->is_null()) {
    if (!nc->is_number_integer() || nc->get<std::int64_t>() < 1)
      throw DataError("config: '" + s.child("num_classes") + "' must be a positive integer", 0,
                      s.child("num_classes"));
    d.num_classes = nc->get<int>();
  }
  s.get("ego_hops", d.ego_hops);
  s.get("ego_fanout", d.ego_fanout);
  s.finish();
  return d;
}

json dataset_to_json(const DatasetSource& d) {
  return {{"path", d.path},
          {"task", to_string(d.task)},
          {"num_classes", d.num_classes ? json(*d.num_classes) : json(nullptr)},
          {"ego_hops", d.ego_hops},
          {"ego_fanout", d.ego_fanout}};
}

void read_pretrain(const json& j, PretrainConfig& p) {
  Section s(j, "pretrain");
  s.get("epochs", p.epochs);
  s.get("warmup_epochs", p.warmup_epochs);
  s.get("batch_size", p.batch_size);
  s.get("learning_rate", p.learning_rate);
  s.get("lr_min_ratio", p.lr_min_ratio);
  s.get("dropout", p.dropout);
  s.get("m", p.m);
  s.get("k_perturb", p.k_perturb);
  s.get("knn_k", p.knn_k);
  s.get("n_triangle_samples", p.n_triangle_samples);
  s.get("temperature", p.temperature);
  s.get("beta_ema", p.beta_ema);
  s.get("w_local", p.w_local);
  s.get("w_proto", p.w_proto);
  s.get("w_holo", p.w_holo);
  s.get("w_curv", p.w_curv);
  if (const json* dims = s.find("dims")) {
    Section d(*dims, "pretrain.dims");
    d.get("input", p.dims.input);
    d.get("hidden", p.dims.hidden);
    d.get("output", p.dims.output);
    d.finish();
  }
  std::string mode = to_string(p.length_mode);
  s.get("length_mode", mode);
  try {
    p.length_mode = length_mode_from_string(mode);
  } catch (const std::exception& e) {
    throw DataError(std::string("config: 'pretrain.length_mode': ") + e.what(), 0, "pretrain.length_mode");
  }
  s.get("edge_drop", p.edge_drop);
  s.get("feature_mask", p.feature_mask);
  s.get("record_wall_time", p.record_wall_time);
  s.finish();
}

void read_adapt(const json& j, AdaptConfig& a) {
  Section s(j, "adapt");
  s.get("epochs", a.epochs);
  s.get("learning_rate", a.learning_rate);
  s.get("lambda", a.lambda);
  s.get("knn_k", a.knn_k);
  s.get("shots", a.shots);
  s.get("gate_hidden", a.gate_hidden);
  s.get("use_adapted_z", a.use_adapted_z);
  s.get("val_fraction", a.val_fraction);
  s.finish();
}

}  // namespace

std::filesystem::path RunConfig::resolve(const std::string& p) const {
  std::filesystem::path path(p);
  return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
}

std::filesystem::path RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? out_dir() / "checkpoint.mgck" : resolve(checkpoint);
}

void RunConfig::finalize() {
  pretrain.seed = seed;
  adapt.seed = seed;
  try {
    pretrain.validate();
    adapt.validate();
  } catch (const ContractError& e) {
    throw DataError(std::string("config: ") + e.what());
  }
}

RunConfig run_config_from_json(const json& j, const std::filesystem::path& base_dir) {
  RunConfig c;
  c.base_dir = base_dir;
  Section s(j, "");
  s.get("seed", c.seed);
  s.get("out", c.out);
  s.get("checkpoint", c.checkpoint);
  if (const json* ds = s.find("datasets")) {
    if (!ds->is_array()) throw DataError("config: 'datasets' must be an array", 0, "datasets");
    for (std::size_t i = 0; i < ds->size(); ++i)
      c.datasets.push_back(dataset_from_json((*ds)[i], "datasets[" + std::to_string(i) + "]"));
  }
  if (const json* t = s.find("target"); t && !t->is_null()) c.target = dataset_from_json(*t, "target");
  if (const json* p = s.find("pretrain")) read_pretrain(*p, c.pretrain);
  if (const json* a = s.find("adapt")) read_adapt(*a, c.adapt);
  s.finish();
  c.finalize();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": malformed JSON at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  return run_config_from_json(j, path.parent_path());
}

json to_json(const RunConfig& c) {
  const PretrainConfig& p = c.pretrain;
  const AdaptConfig& a = c.adapt;
  json datasets = json::array();
  for (const auto& d : c.datasets) datasets.push_back(dataset_to_json(d));
  return {{"seed", c.seed},
          {"out", c.out},
          {"checkpoint", c.checkpoint},
          {"datasets", datasets},
          {"target", c.target ? dataset_to_json(*c.target) : json(nullptr)},
          {"pretrain",
           {{"epochs", p.epochs},
            {"warmup_epochs", p.warmup_epochs},
            {"batch_size", p.batch_size},
            {"learning_rate", p.learning_rate},
            {"lr_min_ratio", p.lr_min_ratio},
            {"dropout", p.dropout},
            {"m", p.m},
            {"k_perturb", p.k_perturb},
            {"knn_k", p.knn_k},
            {"n_triangle_samples", p.n_triangle_samples},
            {"temperature", p.temperature},
            {"beta_ema", p.beta_ema},
            {"w_local", p.w_local},
            {"w_proto", p.w_proto},
            {"w_holo", p.w_holo},
            {"w_curv", p.w_curv},
            {"dims", {{"input", p.dims.input}, {"hidden", p.dims.hidden}, {"output", p.dims.output}}},
            {"length_mode", to_string(p.length_mode)},
            {"edge_drop", p.edge_drop},
            {"feature_mask", p.feature_mask},
            {"record_wall_time", p.record_wall_time}}},
          {"adapt",
           {{"epochs", a.epochs},
            {"learning_rate", a.learning_rate},
            {"lambda", a.lambda},
            {"knn_k", a.knn_k},
            {"shots", a.shots},
            {"gate_hidden", a.gate_hidden},
            {"use_adapted_z", a.use_adapted_z},
            {"val_fraction", a.val_fraction}}}};
}

std::string canonical_json(const json& j) { return j.dump(); }

std::string config_hash(const json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical_json(j)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

TrainingDomain load_training_domain(const DatasetSource& src, const RunConfig& cfg, std::uint64_t seed) {
  DomainDataset ds = load_jsonl(cfg.resolve(src.path), src.task, src.num_classes);
  if (ds.records.size() == 1 && !ds.records[0].node_labels.empty()) {
    GraphRecord g = std::move(ds.records[0]);
    TrainingDomain td = single_graph_domain(g, src.ego_hops, src.ego_fanout, seed);
    if (src.num_classes) td.data.num_classes = *src.num_classes;
    return td;
  }
  return {std::move(ds), {}};
}

}  // namespace mglue
