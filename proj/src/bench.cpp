#include "defloc/bench.hpp"

#include <atomic>
#include <cstdio>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "defloc/errors.hpp"

namespace defloc {

namespace fs = std::filesystem;

void BenchMatrix::validate() const {
  if (entries.empty()) throw ContractError("bench: matrix has no extractors");
  if (seeds.empty()) throw ContractError("bench: matrix has no seeds");
  std::set<std::string> labels;
  for (const auto& e : entries) {
    if (e.label.empty()) throw ContractError("bench: empty extractor label");
    if (!labels.insert(e.label).second) {
      throw ContractError("bench: duplicate extractor label '" + e.label + "'");
    }
  }
  if (train_manifest.empty() || test_manifest.empty()) {
    throw ContractError("bench: train_manifest and test_manifest are required");
  }
  if (max_detections < 1) throw ContractError("bench: max_detections must be >= 1");
  if (workers < 1) throw ContractError("bench: workers must be >= 1");
  train.validate();
}

nlohmann::json bench_matrix_to_json(const BenchMatrix& m) {
  nlohmann::json ex = nlohmann::json::array();
  for (const auto& e : m.entries) {
    ex.push_back({{"label", e.label}, {"name", e.extractor.name}, {"params", e.extractor.params}});
  }
  return {{"extractors", ex},
          {"seeds", m.seeds},
          {"train_manifest", m.train_manifest.string()},
          {"test_manifest", m.test_manifest.string()},
          {"train", m.train},
          {"max_detections", m.max_detections},
          {"workers", m.workers}};
}

BenchMatrix bench_matrix_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  BenchMatrix m;
  try {
    for (const auto& e : j.at("extractors")) {
      BenchEntry be;
      be.extractor = e.get<ExtractorSpec>();
      be.label = e.value("label", be.extractor.name);
      m.entries.push_back(std::move(be));
    }
    m.seeds = j.value("seeds", m.seeds);
    auto resolve = [&](const std::string& p) {
      fs::path path(p);
      return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
    };
    m.train_manifest = resolve(j.at("train_manifest").get<std::string>());
    m.test_manifest = resolve(j.at("test_manifest").get<std::string>());
    if (j.contains("train")) m.train = j.at("train").get<TrainConfig>();
    m.max_detections = j.value("max_detections", m.max_detections);
    m.workers = j.value("workers", m.workers);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed bench matrix: ") + e.what());
  }
  m.validate();
  return m;
}

namespace {

void run_cell(const BenchMatrix& m, BenchCell& cell, const BenchEntry& entry) {
  RunConfig rc;
  rc.train_manifest = m.train_manifest;
  rc.extractor = entry.extractor;
  rc.train = m.train;
  rc.train.seed = cell.seed;
  rc.max_detections = m.max_detections;
  try {
    const fs::path report = cell.run_dir / "eval" / "report.json";
    const fs::path cfg_path = cell.run_dir / "config.json";
    auto reusable = [&] {
      if (!fs::exists(report) || !fs::exists(cfg_path)) return false;
      const nlohmann::json old = read_json_file(cfg_path);
      RunConfig abs = rc;
      abs.train_manifest = fs::absolute(abs.train_manifest).lexically_normal();
      const nlohmann::json now = run_config_to_json(abs);
      for (auto it = now.begin(); it != now.end(); ++it) {
        if (!old.contains(it.key()) || old.at(it.key()) != it.value()) return false;
      }
      const nlohmann::json rj = read_json_file(report);
      return rj.value("max_detections", -1) == m.max_detections &&
             rj.value("test_manifest", std::string()) ==
                 fs::absolute(m.test_manifest).lexically_normal().string();
    };
    const bool reuse = reusable();
    if (reuse) {
      const EvalReport r = report_from_json(read_json_file(report));
      cell.map = r.map;
      cell.avg_steps = r.avg_steps;
      cell.reused = true;
    } else {
      run_train(rc, cell.run_dir, false);
      EvalOptions eo;
      eo.max_detections = m.max_detections;
      const auto out = run_eval(cell.run_dir, m.test_manifest, eo);
      cell.map = out.report.map;
      cell.avg_steps = out.report.avg_steps;
    }
    cell.ok = true;
  } catch (const std::exception& e) {
    cell.ok = false;
    cell.error = e.what();
  }
}

std::string fmt(double v, const char* f = "%.3f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

}  // namespace

BenchResult run_bench(const BenchMatrix& m, const fs::path& out_dir) {
  m.validate();
  BenchResult res;
  std::vector<const BenchEntry*> owners;
  for (const auto& e : m.entries) {
    for (auto s : m.seeds) {
      BenchCell c;
      c.label = e.label;
      c.seed = s;
      c.run_dir = out_dir / "cells" / (e.label + "_seed" + std::to_string(s));
      res.cells.push_back(std::move(c));
      owners.push_back(&e);
    }
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < res.cells.size(); i = next++) run_cell(m, res.cells[i], *owners[i]);
  };
  const int nthreads = std::min<int>(m.workers, static_cast<int>(res.cells.size()));
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<double> maps, steps;
  for (const auto& e : m.entries) {
    BenchRow row;
    row.label = e.label;
    double msum = 0.0, ssum = 0.0;
    int mcount = 0;
    for (const auto& c : res.cells) {
      if (c.label != e.label || !c.ok) continue;
      ++row.successful;
      ssum += c.avg_steps;
      if (c.map) {
        msum += *c.map;
        ++mcount;
      }
    }
    if (row.successful > 0) row.mean_steps = ssum / row.successful;
    if (mcount > 0) row.mean_map = msum / mcount;
    if (row.mean_map && row.mean_steps) {
      maps.push_back(*row.mean_map);
      steps.push_back(*row.mean_steps);
    }
    res.rows.push_back(std::move(row));
  }
  if (maps.size() >= 2) res.rho = spearman(maps, steps);

  fs::create_directories(out_dir);
  write_text_file(out_dir / "summary.json", bench_result_json(res).dump(2) + "\n");
  write_text_file(out_dir / "summary.md", bench_markdown(res));
  return res;
}

nlohmann::json bench_result_json(const BenchResult& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) {
    nlohmann::json j = {{"label", c.label},
                        {"seed", c.seed},
                        {"run_dir", c.run_dir.string()},
                        {"ok", c.ok},
                        {"map", c.map ? nlohmann::json(*c.map) : nlohmann::json(nullptr)},
                        {"avg_steps", c.avg_steps}};
    if (!c.ok) j["error"] = c.error;
    cells.push_back(std::move(j));
  }
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"label", row.label},
                    {"successful_seeds", row.successful},
                    {"mean_map", row.mean_map ? nlohmann::json(*row.mean_map) : nlohmann::json(nullptr)},
                    {"mean_avg_steps",
                     row.mean_steps ? nlohmann::json(*row.mean_steps) : nlohmann::json(nullptr)}});
  }
  return {{"cells", cells},
          {"rows", rows},
          {"spearman_map_vs_steps", r.rho ? nlohmann::json(*r.rho) : nlohmann::json(nullptr)},
          {"reference_rho", kReferenceRho}};
}

std::string bench_markdown(const BenchResult& r) {
  std::ostringstream os;
  os << "| Extractor | Seeds OK | mAP (mean) | Avg no. steps (mean) |\n|---|---:|---:|---:|\n";
  for (const auto& row : r.rows) {
    os << "| " << row.label << " | " << row.successful << " | "
       << (row.mean_map ? fmt(100.0 * *row.mean_map, "%.1f") : "-") << " | "
       << (row.mean_steps ? fmt(*row.mean_steps, "%.1f") : "-") << " |\n";
  }
  os << "\nSpearman rho (mAP vs steps/image): "
     << (r.rho ? fmt(*r.rho) : std::string("undefined (fewer than 2 rows with results)"))
     << "; reference value on the original fab data: " << fmt(kReferenceRho, "%.2f") << "\n";
  bool failures = false;
  for (const auto& c : r.cells) {
    if (c.ok) continue;
    if (!failures) os << "\nFailed cells:\n";
    failures = true;
    os << "- " << c.label << " seed " << c.seed << ": " << c.error << "\n";
  }
  return os.str();
}

}  // namespace defloc
