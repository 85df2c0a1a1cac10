#include "defloc/run.hpp"

#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "defloc/errors.hpp"

namespace defloc {

namespace fs = std::filesystem;

void to_json(nlohmann::json& j, const ExtractorSpec& e) {
  j = {{"name", e.name}, {"params", e.params}};
}

void from_json(const nlohmann::json& j, ExtractorSpec& e) {
  const ExtractorSpec d;
  e.name = j.value("name", d.name);
  e.params = j.contains("params") ? j.at("params") : d.params;
}

nlohmann::json run_config_to_json(const RunConfig& c) {
  return {{"schema_version", c.schema_version},
          {"train_manifest", c.train_manifest.string()},
          {"extractor", c.extractor},
          {"train", c.train},
          {"max_detections", c.max_detections}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    c.schema_version = j.value("schema_version", kRunSchemaVersion);
    if (c.schema_version != kRunSchemaVersion) {
      throw FormatError("run config schema version " + std::to_string(c.schema_version) +
                        " is not supported (expected " + std::to_string(kRunSchemaVersion) + ")");
    }
    c.train_manifest = j.value("train_manifest", std::string());
    if (j.contains("extractor")) c.extractor = j.at("extractor").get<ExtractorSpec>();
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    c.max_detections = j.value("max_detections", c.max_detections);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed run config: ") + e.what());
  }
  return c;
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f << text;
    if (!f) throw IoError("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

RunConfig load_run_config(const fs::path& path) { return run_config_from_json(read_json_file(path)); }

std::vector<std::string> json_diff(const nlohmann::json& a, const nlohmann::json& b,
                                   const std::string& prefix) {
  std::vector<std::string> out;
  if (a.is_object() && b.is_object()) {
    std::set<std::string> keys;
    for (auto it = a.begin(); it != a.end(); ++it) keys.insert(it.key());
    for (auto it = b.begin(); it != b.end(); ++it) keys.insert(it.key());
    for (const auto& k : keys) {
      const std::string p = prefix.empty() ? k : prefix + "." + k;
      const auto na = a.contains(k) ? a.at(k) : nlohmann::json();
      const auto nb = b.contains(k) ? b.at(k) : nlohmann::json();
      auto sub = json_diff(na, nb, p);
      out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
  }
  if (a != b) out.push_back((prefix.empty() ? "<root>" : prefix) + ": " + a.dump() + " -> " + b.dump());
  return out;
}

GenOutcome run_gen(const GenerateConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  GenOutcome g;
  const fs::path train_path = out_dir / "manifest_train.json";
  if (fs::exists(train_path)) {
    DatasetManifest existing = load_manifest(train_path);
    const nlohmann::json old_cfg = existing.config;
    const nlohmann::json new_cfg = cfg;
    if (old_cfg != new_cfg) {
      throw ConfigConflictError("dataset at " + out_dir.string() + " was generated with a different config",
                                json_diff(old_cfg, new_cfg));
    }
    g.train = std::move(existing);
    g.test = load_manifest(out_dir / "manifest_test.json");
    return g;
  }
  auto [train, test] = generate_dataset(out_dir, cfg);
  g.created = true;
  g.train = std::move(train);
  g.test = std::move(test);
  return g;
}

std::string dataset_summary(const DatasetManifest& train, const DatasetManifest& test) {
  std::array<std::size_t, kNumClasses> tr{}, te{};
  for (const auto& r : train.records) {
    for (const auto& a : r.annotations) ++tr[static_cast<std::size_t>(a.cls)];
  }
  for (const auto& r : test.records) {
    for (const auto& a : r.annotations) ++te[static_cast<std::size_t>(a.cls)];
  }
  std::ostringstream os;
  os << "| Class | Train | Test | Total |\n|---|---:|---:|---:|\n";
  for (DefectClass c : kAllClasses) {
    const auto i = static_cast<std::size_t>(c);
    os << "| " << class_code(c) << " | " << tr[i] << " | " << te[i] << " | " << tr[i] + te[i] << " |\n";
  }
  os << "| Total images | " << train.records.size() << " | " << test.records.size() << " | "
     << train.records.size() + test.records.size() << " |\n";
  return os.str();
}

namespace {

nlohmann::json config_file_json(const RunConfig& cfg, const FeatureExtractor& extractor) {
  nlohmann::json j = run_config_to_json(cfg);
  j["tool_version"] = kToolVersion;
  j["extractor_metadata"] = extractor.metadata();
  j["observation_dim"] = extractor.dim() + cfg.train.env.history_dim();
  return j;
}

nlohmann::json comparable(nlohmann::json j) {
  j.erase("tool_version");
  j.erase("extractor_metadata");
  j.erase("observation_dim");
  return j;
}

std::string trace_file_name(const std::string& image_file) {
  return fs::path(image_file).stem().string() + ".json";
}

}  // namespace

TrainResult run_train(const RunConfig& cfg_in, const fs::path& run_dir, bool resume,
                      const std::function<void(const EpochStats&)>& on_epoch) {
  RunConfig cfg = cfg_in;
  if (cfg.train_manifest.empty()) throw ContractError("train: no training manifest given");
  cfg.train_manifest = fs::absolute(cfg.train_manifest).lexically_normal();
  cfg.train.validate();
  const DatasetManifest data = load_manifest(cfg.train_manifest);
  const auto extractor = cfg.extractor.build();
  const nlohmann::json cfg_json = config_file_json(cfg, *extractor);

  const fs::path cfg_path = run_dir / "config.json";
  if (fs::exists(cfg_path)) {
    const auto old = comparable(read_json_file(cfg_path));
    const auto now = comparable(cfg_json);
    if (old != now) {
      throw ConfigConflictError("run directory " + run_dir.string() + " holds a different config",
                                json_diff(old, now));
    }
  } else if (resume) {
    throw ContractError("--resume: no config.json in " + run_dir.string());
  }
  write_text_file(cfg_path, cfg_json.dump(2) + "\n");

  TrainOptions opts;
  opts.checkpoint_dir = run_dir / "checkpoints";
  opts.log_path = run_dir / "train_log.jsonl";
  opts.resume = resume;
  opts.on_epoch = on_epoch;
  if (resume && !latest_checkpoint(opts.checkpoint_dir)) {
    throw ContractError("--resume: no checkpoint under " + opts.checkpoint_dir.string());
  }
  return train(data, *extractor, cfg.train, opts);
}

EvalOutcome run_eval(const fs::path& run_dir, const fs::path& test_manifest, const EvalOptions& opts) {
  if (opts.max_detections < 1) throw ContractError("eval: max_detections must be >= 1");
  const fs::path cfg_path = run_dir / "config.json";
  RunConfig cfg;
  if (fs::exists(cfg_path)) {
    cfg = load_run_config(cfg_path);
  } else if (opts.oracle) {
    // The oracle ignores observations; the cheapest extractor suffices.
    cfg.extractor = ExtractorSpec{"raw28", nlohmann::json::object()};
  } else {
    throw ContractError("eval: no config.json in " + run_dir.string());
  }
  const DatasetManifest test = load_manifest(test_manifest);
  const auto extractor = cfg.extractor.build();

  EvalOutcome out;
  std::string label;
  if (opts.oracle) {
    OracleIouPolicy policy;
    out.predictions = predict(test, policy, *extractor, cfg.train.env, opts.max_detections);
    label = "oracle (greedy IoU)";
  } else {
    fs::path ckpt;
    if (opts.checkpoint) {
      ckpt = *opts.checkpoint;
    } else {
      const auto latest = latest_checkpoint(run_dir / "checkpoints");
      if (!latest) throw ContractError("eval: no checkpoint in " + (run_dir / "checkpoints").string());
      ckpt = *latest;
    }
    const Checkpoint ck = load_checkpoint(ckpt);
    if (ck.net.input_dim() != extractor->dim() + cfg.train.env.history_dim()) {
      throw ContractError("eval: checkpoint input dim does not match the run's extractor");
    }
    out.predictions = predict(test, ck.net, *extractor, cfg.train.env, opts.max_detections);
    label = cfg.extractor.name;
  }
  out.report = evaluate(out.predictions, test);

  const fs::path eval_dir = run_dir / (opts.oracle ? "eval_oracle" : "eval");
  write_text_file(eval_dir / "predictions.json", predictions_to_json(out.predictions).dump(1) + "\n");
  nlohmann::json rj = report_to_json(out.report);
  rj["test_manifest"] = fs::absolute(test_manifest).lexically_normal().string();
  rj["max_detections"] = opts.max_detections;
  rj["policy"] = opts.oracle ? "oracle" : "greedy-q";
  write_text_file(eval_dir / "report.json", rj.dump(2) + "\n");
  write_text_file(eval_dir / "report.md", report_markdown(label, out.report));

  if (opts.write_traces) {
    const fs::path trace_dir = run_dir / (opts.oracle ? "traces_oracle" : "traces");
    for (const auto& im : out.predictions.images) {
      nlohmann::json eps = nlohmann::json::array();
      for (const auto& t : im.traces) eps.push_back(trace_to_json(t));
      const nlohmann::json tj = {{"image", im.file},
                                 {"width", test.config.pattern.width},
                                 {"height", test.config.pattern.height},
                                 {"manifest", fs::absolute(test_manifest).lexically_normal().string()},
                                 {"bar_fraction", cfg.train.env.bar_fraction},
                                 {"episodes", eps}};
      write_text_file(trace_dir / trace_file_name(im.file), tj.dump(1) + "\n");
    }
  }
  return out;
}

}  // namespace defloc
