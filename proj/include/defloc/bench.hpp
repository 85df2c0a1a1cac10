#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "defloc/run.hpp"

namespace defloc {

inline constexpr double kReferenceRho = -0.50;

struct BenchEntry {
  std::string label;  // unique within a matrix; defaults to the extractor name
  ExtractorSpec extractor;
};

struct BenchMatrix {
  std::vector<BenchEntry> entries;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::filesystem::path train_manifest;
  std::filesystem::path test_manifest;
  TrainConfig train;
  int max_detections = 3;
  int workers = 1;

  void validate() const;
};

nlohmann::json bench_matrix_to_json(const BenchMatrix& m);
// Relative manifest paths resolve against base_dir.
BenchMatrix bench_matrix_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

struct BenchCell {
  std::string label;
  std::uint64_t seed = 0;
  std::filesystem::path run_dir;
  bool ok = false;
  bool reused = false;
  std::string error;
  std::optional<double> map;
  double avg_steps = 0.0;
};

struct BenchRow {
  std::string label;
  int successful = 0;
  std::optional<double> mean_map;
  std::optional<double> mean_steps;
};

struct BenchResult {
  std::vector<BenchCell> cells;
  std::vector<BenchRow> rows;
  std::optional<double> rho;  // spearman(mean mAP, mean steps) over rows with results
};

// Trains and evaluates every (entry, seed) cell under out_dir/cells/. A cell
// whose run directory already holds the same config and an eval report is
// reused. Failed cells are recorded and left out of the aggregates.
BenchResult run_bench(const BenchMatrix& m, const std::filesystem::path& out_dir);

std::string bench_markdown(const BenchResult& r);
nlohmann::json bench_result_json(const BenchResult& r);

}  // namespace defloc
