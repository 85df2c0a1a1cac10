#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "defloc/agent.hpp"
#include "defloc/eval.hpp"
#include "defloc/features.hpp"
#include "defloc/synthgen.hpp"

namespace defloc {

inline constexpr const char* kToolVersion = "defloc 0.1.0";
inline constexpr int kRunSchemaVersion = 1;

struct ExtractorSpec {
  std::string name = "hog";
  nlohmann::json params = nlohmann::json::object();

  std::unique_ptr<FeatureExtractor> build() const { return make_extractor(name, params); }
  friend bool operator==(const ExtractorSpec&, const ExtractorSpec&) = default;
};

void to_json(nlohmann::json& j, const ExtractorSpec& e);
void from_json(const nlohmann::json& j, ExtractorSpec& e);

// Everything a training run needs; persisted verbatim as <run>/config.json.
struct RunConfig {
  int schema_version = kRunSchemaVersion;
  std::filesystem::path train_manifest;
  ExtractorSpec extractor;
  TrainConfig train;
  int max_detections = 3;
};

nlohmann::json run_config_to_json(const RunConfig& c);
// Missing keys take their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Key paths whose values differ, as "path: old -> new" lines.
std::vector<std::string> json_diff(const nlohmann::json& a, const nlohmann::json& b,
                                   const std::string& prefix = "");

// Raised when an existing directory holds a different configuration.
class ConfigConflictError : public std::runtime_error {
 public:
  ConfigConflictError(const std::string& what, std::vector<std::string> diff)
      : std::runtime_error(what), diff_(std::move(diff)) {}
  const std::vector<std::string>& diff() const { return diff_; }

 private:
  std::vector<std::string> diff_;
};

struct GenOutcome {
  bool created = false;  // false: an identical dataset was already there
  DatasetManifest train;
  DatasetManifest test;
};

GenOutcome run_gen(const GenerateConfig& cfg, const std::filesystem::path& out_dir);

// Per-split class and image counts in the dataset summary layout.
std::string dataset_summary(const DatasetManifest& train, const DatasetManifest& test);

// Writes config.json, checkpoints/, train_log.jsonl under run_dir.
TrainResult run_train(const RunConfig& cfg, const std::filesystem::path& run_dir, bool resume,
                      const std::function<void(const EpochStats&)>& on_epoch = {});

struct EvalOptions {
  int max_detections = 3;
  bool oracle = false;
  std::optional<std::filesystem::path> checkpoint;  // default: latest
  bool write_traces = true;
};

struct EvalOutcome {
  EvalReport report;
  PredictionSet predictions;
};

// Writes eval/report.{json,md}, eval/predictions.json and traces/ under run_dir.
EvalOutcome run_eval(const std::filesystem::path& run_dir,
                     const std::filesystem::path& test_manifest, const EvalOptions& opts);

void write_text_file(const std::filesystem::path& path, const std::string& text);
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace defloc
