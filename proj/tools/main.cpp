// mglue command-line tool.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mglue/adapt.hpp"
#include "mglue/checkpoint.hpp"
#include "mglue/config.hpp"
#include "mglue/encoder.hpp"
#include "mglue/parallel.hpp"
#include "mglue/pretrain.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mglue;

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> shots;
  std::optional<double> lambda;
  std::optional<std::size_t> knn_k;
};

RunConfig read_config(const std::string& path, const Overrides& o) {
  RunConfig cfg = load_run_config(path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) {
    // Command-line paths are relative to the working directory.
    cfg.out = fs::absolute(*o.out).string();
  }
  if (o.shots) cfg.adapt.shots = *o.shots;
  if (o.lambda) cfg.adapt.lambda = *o.lambda;
  if (o.knn_k) cfg.adapt.knn_k = *o.knn_k;
  cfg.finalize();
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out.flush()) throw DataError("failed writing " + path.string());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create directory " + dir.string() + ": " + ec.message());
}

// The parts of a run configuration that determine pre-training.
std::string pretrain_identity(const json& echo) {
  return config_hash({{"seed", echo.at("seed")}, {"datasets", echo.at("datasets")}, {"pretrain", echo.at("pretrain")}});
}

std::vector<TrainingDomain> load_domains(const RunConfig& cfg) {
  if (cfg.datasets.empty()) throw DataError("config: 'datasets' is empty", 0, "datasets");
  std::vector<TrainingDomain> out;
  for (std::size_t i = 0; i < cfg.datasets.size(); ++i)
    out.push_back(load_training_domain(cfg.datasets[i], cfg, stream_seed(cfg.seed, 0xd5, i)));
  return out;
}

DomainDataset load_target(const DatasetSource& src, const RunConfig& cfg) {
  return load_training_domain(src, cfg, stream_seed(cfg.seed, 0xd5, 0x7a67)).data;
}

// Frozen model pieces shared by adapt, gtm and export-embeddings.
struct LoadedModel {
  Checkpoint ck;
  PretrainConfig pretrain;
};

LoadedModel load_model(const fs::path& path) {
  LoadedModel m{load_checkpoint(path), {}};
  m.pretrain = run_config_from_json(m.ck.config()).pretrain;
  return m;
}

void add_projection(LoadedModel& m, const DomainDataset& ds) {
  if (ds.records.empty()) return;
  ensure_projection(m.ck.state.params, ds.records.front().feature_dim(), m.pretrain.dims.input, m.pretrain.seed);
}

// ---- commands ---------------------------------------------------------------------

int cmd_gen_synthetic(const std::string& spec_path, const std::string& out, std::uint64_t seed) {
  std::ifstream in(spec_path);
  if (!in) throw DataError("cannot open synthetic spec " + spec_path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(spec_path + ": malformed JSON at byte " + std::to_string(e.byte));
  }
  const SyntheticSpec spec = synthetic_spec_from_json(j);
  const auto domains = gen_synthetic(spec, seed);
  const fs::path dir(out);
  make_dir(dir);
  json suite = {{"seed", seed}, {"spec", synthetic_spec_to_json(spec)}, {"domains", json::array()}};
  for (const auto& ds : domains) {
    const std::string file = ds.name + ".jsonl";
    write_file(dir / file, to_jsonl(ds));
    suite["domains"].push_back({{"name", ds.name},
                                {"file", file},
                                {"task", to_string(ds.task)},
                                {"num_classes", ds.num_classes},
                                {"feature_dim", ds.feature_dim},
                                {"records", ds.records.size()}});
  }
  write_file(dir / "suite.json", suite.dump(2) + "\n");
  std::cout << "wrote " << domains.size() << " domains to " << dir.string() << "\n";
  return 0;
}

int cmd_pretrain(const RunConfig& cfg, const std::optional<std::string>& resume, int stop_after) {
  const auto domains = load_domains(cfg);
  const json echo = to_json(cfg);
  const fs::path out = cfg.out_dir();
  make_dir(out);
  const fs::path metrics = out / "metrics.csv";
  const fs::path ckpt = cfg.checkpoint_path();

  TrainState state;
  std::string csv = metrics_header() + "\n";
  if (resume) {
    const fs::path from = resume->empty() ? ckpt : fs::path(*resume);
    Checkpoint ck = load_checkpoint(from);
    if (pretrain_identity(ck.config()) != pretrain_identity(echo))
      throw DataError("checkpoint " + from.string() + " was written with a different seed, dataset list or pretrain section");
    state = std::move(ck.state);
    // Keep the rows of the epochs the checkpoint already covers.
    std::ifstream in(metrics);
    if (!in) throw DataError("cannot resume: missing " + metrics.string());
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoi(line.substr(0, line.find(','))) < state.epoch) csv += line + "\n";
    }
  } else {
    state = init_train_state(domains, cfg.pretrain);
  }
  write_file(metrics, csv);

  std::ofstream log(metrics, std::ios::app);
  const int last = stop_after >= 0 ? std::min(stop_after, cfg.pretrain.epochs) : cfg.pretrain.epochs;
  while (state.epoch < last) {
    const auto rows = run_pretrain_epoch(state, domains, cfg.pretrain);
    for (const auto& r : rows) log << format_metrics_row(r) << "\n";
    log.flush();
    save_checkpoint(ckpt, state, echo);
    double total = 0.0;
    for (const auto& r : rows) total += r.loss_total;
    std::fprintf(stderr, "epoch %d: mean loss_total %.6g over %zu steps\n", state.epoch - 1,
                 rows.empty() ? 0.0 : total / static_cast<double>(rows.size()), rows.size());
  }
  if (state.epoch == 0) save_checkpoint(ckpt, state, echo);
  return 0;
}

int cmd_adapt(RunConfig cfg, const std::optional<std::string>& checkpoint, const std::optional<std::string>& target) {
  DatasetSource src = cfg.target.value_or(DatasetSource{});
  if (target) src.path = fs::absolute(*target).string();
  if (src.path.empty()) throw DataError("no target dataset: set 'target' in the config or pass --target", 0, "target");
  cfg.target = src;

  LoadedModel model = load_model(checkpoint.value_or(cfg.checkpoint_path().string()));
  const DomainDataset ds = load_target(src, cfg);
  add_projection(model, ds);

  const fs::path out = cfg.out_dir();
  make_dir(out);
  std::ofstream log(out / "adapt_metrics.csv", std::ios::trunc);
  if (!log) throw DataError("cannot write " + (out / "adapt_metrics.csv").string());
  log << adapt_metrics_header() << "\n";
  const AdaptResult res = run_adapt(model.ck.state.params, model.ck.state.protos, model.pretrain.frame_options(), ds,
                                    cfg.adapt, [&](const AdaptEpoch& e) { log << format_adapt_row(e) << "\n"; });
  log.flush();

  const json summary = {{"test_acc", res.test_acc},
                        {"gtm", res.final_gtm.gtm},
                        {"delta_h", res.final_gtm.delta_h},
                        {"delta_c", res.final_gtm.delta_c}};
  json full = summary;
  full["initial_gtm"] = {{"gtm", res.initial_gtm.gtm},
                         {"delta_h", res.initial_gtm.delta_h},
                         {"delta_c", res.initial_gtm.delta_c}};
  full["best_epoch"] = res.best_epoch;
  full["final_test_acc"] = res.final_test_acc;
  full["split"] = {{"train", res.split.train.size()}, {"val", res.split.val.size()}, {"test", res.split.test.size()}};
  full["checkpoint_config_hash"] = model.ck.manifest.at("config_hash");
  full["config"] = to_json(cfg);
  write_file(out / "adapt_result.json", full.dump(2) + "\n");
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_gtm(const std::string& checkpoint, const DatasetSource& src, const RunConfig& cfg, std::size_t k,
            const std::optional<std::string>& out) {
  LoadedModel model = load_model(checkpoint);
  const DomainDataset ds = load_target(src, cfg);
  add_projection(model, ds);
  const FrameOptions fopts = model.pretrain.frame_options();
  std::vector<GtmReport> reports(ds.records.size());
  parallel_for(ds.records.size(), [&](std::size_t i) {
    reports[i] = raw_gtm(model.ck.state.params, model.ck.state.protos, fopts, ds.records[i], k);
  });
  json records = json::array();
  GtmReport mean;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const GtmReport& r = reports[i];
    records.push_back({{"index", i}, {"delta_h", r.delta_h}, {"delta_c", r.delta_c}, {"gtm", r.gtm}});
    mean.delta_h += r.delta_h;
    mean.delta_c += r.delta_c;
  }
  json aggregate = nullptr;
  if (!reports.empty()) {
    const double n = static_cast<double>(reports.size());
    aggregate = {{"delta_h", mean.delta_h / n}, {"delta_c", mean.delta_c / n},
                 {"gtm", mean.delta_h / n + mean.delta_c / n}};
  }
  const std::string text = json{{"knn_k", k}, {"records", records}, {"aggregate", aggregate}}.dump(2) + "\n";
  if (out)
    write_file(*out, text);
  else
    std::cout << text;
  return 0;
}

int cmd_export(const std::string& checkpoint, const DatasetSource& src, const RunConfig& cfg,
               const std::optional<std::string>& out) {
  LoadedModel model = load_model(checkpoint);
  const DomainDataset ds = load_target(src, cfg);
  add_projection(model, ds);
  const FrameOptions fopts = model.pretrain.frame_options();
  std::vector<FramedValues> frames(ds.records.size());
  parallel_for(ds.records.size(),
               [&](std::size_t i) { frames[i] = frame_values(model.ck.state.params, ds.records[i], fopts); });

  const std::size_t d = model.pretrain.dims.output, m = model.pretrain.m;
  std::ostringstream os;
  os << "index,domain,label";
  for (std::size_t c = 0; c < d; ++c) os << ",z_" << c;
  for (std::size_t c = 0; c < m; ++c) os << ",g_" << c;
  os << "\n";
  char buf[32];
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const GraphRecord& r = ds.records[i];
    os << i << "," << r.domain << ",";
    if (r.label) os << *r.label;
    for (double v : frames[i].z.values()) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      os << buf;
    }
    for (double v : frames[i].g.diag()) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      os << buf;
    }
    os << "\n";
  }
  if (out)
    write_file(*out, os.str());
  else
    std::cout << os.str();
  return 0;
}

int cmd_inspect(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  const json& m = ck.manifest;
  std::cout << "checkpoint      " << path << "\n"
            << "format_version  " << m.at("format_version").get<int>() << "\n"
            << "epoch           " << ck.state.epoch << "\n"
            << "adam_steps      " << ck.state.adam.steps() << "\n"
            << "config_hash     " << m.at("config_hash").get<std::string>() << "\n"
            << "blob_bytes      " << m.at("blob_bytes").get<std::size_t>() << "\n"
            << "prototypes      " << ck.state.protos.size() << "\n";
  for (const auto& [domain, p] : ck.state.protos)
    std::cout << "  " << domain << "  updates " << p.update_count << "\n";
  std::cout << "tensors         " << m.at("tensors").size() << "\n";
  for (const auto& [name, t] : m.at("tensors").items()) {
    const auto shape = t.at("shape");
    std::cout << "  " << name << "  " << shape[0].get<std::size_t>() << "x" << shape[1].get<std::size_t>()
              << "  offset " << t.at("offset").get<std::size_t>() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Manifold gluing: pre-training, few-shot adaptation and geometric transfer metrics"};
  app.require_subcommand(1);

  Overrides ov;
  std::string config_path, checkpoint_path, spec_path, data_path, gen_out;
  std::optional<std::string> resume, checkpoint_opt, target_opt, out_file;
  std::string task = "graph";
  std::uint64_t seed = 0;
  int stop_after = -1;
  std::size_t gtm_k = AdaptConfig{}.knn_k;

  auto add_seed = [&](CLI::App* c) {
    c->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { ov.seed = s; }, "Override the seed");
  };
  auto add_out = [&](CLI::App* c) {
    c->add_option_function<std::string>("--out", [&](const std::string& s) { ov.out = s; }, "Output directory");
  };

  auto* gen = app.add_subcommand("gen-synthetic", "Write synthetic domains as JSONL plus suite.json");
  gen->add_option("spec", spec_path, "Synthetic spec JSON")->required();
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", seed, "Generator seed");

  auto* pre = app.add_subcommand("pretrain", "Pre-train on the configured datasets");
  pre->add_option("--config", config_path, "Run config JSON")->required();
  add_seed(pre);
  add_out(pre);
  pre->add_option("--resume", resume, "Continue from a checkpoint (default: the run's own)")->expected(0, 1);
  pre->add_option("--stop-after", stop_after)->group("");

  auto* ad = app.add_subcommand("adapt", "Few-shot adaptation on the target dataset");
  ad->add_option("--config", config_path, "Run config JSON")->required();
  ad->add_option("--checkpoint", checkpoint_opt, "Pre-trained checkpoint (default: the configured run's)");
  ad->add_option("--target", target_opt, "Target dataset JSONL (overrides the config)");
  add_seed(ad);
  add_out(ad);
  ad->add_option_function<std::size_t>("--shots", [&](const std::size_t& v) { ov.shots = v; }, "Labelled samples per class");
  ad->add_option_function<double>("--lambda", [&](const double& v) { ov.lambda = v; }, "Weight of the gluing losses");
  ad->add_option_function<std::size_t>("--knn-k", [&](const std::size_t& v) { ov.knn_k = v; }, "Prototypes per transfer graph");

  auto* gt = app.add_subcommand("gtm", "Geometric transfer metric of a dataset against the prototypes");
  gt->add_option("checkpoint", checkpoint_path, "Checkpoint")->required();
  gt->add_option("data", data_path, "Dataset JSONL")->required();
  gt->add_option("--task", task, "Task type of the dataset")->check(CLI::IsMember({"node", "link", "graph"}));
  gt->add_option("--knn-k", gtm_k, "Prototypes per transfer graph")->check(CLI::PositiveNumber);
  gt->add_option("--out", out_file, "Write JSON here instead of standard output");

  auto* ex = app.add_subcommand("export-embeddings", "CSV of z and diag(G) per record");
  ex->add_option("checkpoint", checkpoint_path, "Checkpoint")->required();
  ex->add_option("data", data_path, "Dataset JSONL")->required();
  ex->add_option("--task", task, "Task type of the dataset")->check(CLI::IsMember({"node", "link", "graph"}));
  ex->add_option("--out", out_file, "Write CSV here instead of standard output");

  auto* in = app.add_subcommand("inspect", "Summarize a checkpoint manifest");
  in->add_option("checkpoint", checkpoint_path, "Checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    configured_threads();  // reject a malformed MANIFOLD_GLUE_THREADS up front
    if (*gen) return cmd_gen_synthetic(spec_path, gen_out, seed);
    if (*pre) return cmd_pretrain(read_config(config_path, ov), resume, stop_after);
    if (*ad) {
      // --out redirects adapt outputs, not the pre-trained run it reads from.
      if (!checkpoint_opt) checkpoint_opt = load_run_config(config_path).checkpoint_path().string();
      return cmd_adapt(read_config(config_path, ov), checkpoint_opt, target_opt);
    }
    RunConfig plain;
    DatasetSource src;
    src.path = data_path;
    src.task = task_from_string(task);
    if (*gt) return cmd_gtm(checkpoint_path, src, plain, gtm_k, out_file);
    if (*ex) return cmd_export(checkpoint_path, src, plain, out_file);
    if (*in) return cmd_inspect(checkpoint_path);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 2;
  } catch (const std::domain_error& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
