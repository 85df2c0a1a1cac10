#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "defloc/bench.hpp"
#include "defloc/errors.hpp"
#include "defloc/run.hpp"

using namespace defloc;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / "defloc_test_run" / name;
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), {});
}

GenerateConfig small_gen() {
  GenerateConfig cfg = profile_config("easy");
  cfg.n_images = 10;
  cfg.pattern.width = 128;
  cfg.border_margin = 16;
  cfg.pattern.height = 128;
  cfg.pattern.line_pitch = 16;
  cfg.pattern.line_width = 8;
  return cfg;
}

RunConfig small_run(const fs::path& data) {
  RunConfig rc;
  rc.train_manifest = data / "manifest_train.json";
  rc.extractor = {"raw28", nlohmann::json::object()};
  rc.train.epochs = 1;
  rc.train.hidden = {8};
  rc.train.batch_size = 8;
  rc.train.replay_capacity = 100;
  rc.train.env.max_steps = 10;
  return rc;
}

}  // namespace

TEST_CASE("run config json") {
  RunConfig c;
  c.train_manifest = "/data/manifest_train.json";
  c.extractor = {"randconv", {{"seed", 4}}};
  c.train.hidden = {64, 64};
  c.max_detections = 2;
  const RunConfig d = run_config_from_json(run_config_to_json(c));
  CHECK(run_config_to_json(d) == run_config_to_json(c));
  // Every field has a default.
  const RunConfig e = run_config_from_json(nlohmann::json::object());
  CHECK(e.train.epochs == 25);
  CHECK(e.train.hidden == std::vector<int>{512, 512});
  CHECK(e.extractor.name == "hog");
  CHECK(e.max_detections == 3);
  CHECK(e.train.env.max_steps == 40);
  CHECK_THROWS_AS(run_config_from_json({{"schema_version", 99}}), FormatError);
}

TEST_CASE("json_diff") {
  const nlohmann::json a = {{"x", 1}, {"y", {{"z", 2}, {"w", 3}}}};
  const nlohmann::json b = {{"x", 1}, {"y", {{"z", 5}}}, {"v", true}};
  const auto d = json_diff(a, b);
  REQUIRE(d.size() == 3);
  CHECK(d[0] == "v: null -> true");
  CHECK(d[1] == "y.w: 3 -> null");
  CHECK(d[2] == "y.z: 2 -> 5");
  CHECK(json_diff(a, a).empty());
}

TEST_CASE("gen outcomes") {
  const auto dir = fresh_dir("gen");
  const auto cfg = small_gen();
  const GenOutcome first = run_gen(cfg, dir);
  CHECK(first.created);
  const std::string before = slurp(dir / "manifest_train.json");
  const GenOutcome again = run_gen(cfg, dir);
  CHECK_FALSE(again.created);
  CHECK(again.train.records.size() == first.train.records.size());
  CHECK(slurp(dir / "manifest_train.json") == before);
  GenerateConfig other = cfg;
  other.seed = 9;
  try {
    run_gen(other, dir);
    FAIL("expected a conflict");
  } catch (const ConfigConflictError& e) {
    REQUIRE(e.diff().size() == 1);
    CHECK(e.diff()[0] == "seed: 0 -> 9");
  }
  const std::string table = dataset_summary(first.train, first.test);
  CHECK(table.find("| Total images | 8 | 2 | 10 |") != std::string::npos);
}

TEST_CASE("train and eval runs") {
  const auto data = fresh_dir("data");
  run_gen(small_gen(), data);
  const auto run = fresh_dir("run");
  const RunConfig rc = small_run(data);
  run_train(rc, run, false);
  CHECK(fs::exists(run / "config.json"));
  CHECK(fs::exists(run / "train_log.jsonl"));
  CHECK(fs::exists(run / "checkpoints" / "latest"));
  const nlohmann::json cfg = read_json_file(run / "config.json");
  CHECK(cfg.at("tool_version") == kToolVersion);
  CHECK(cfg.at("extractor_metadata").at("name") == "raw28");
  CHECK(load_run_config(run / "config.json").train.hidden == std::vector<int>{8});

  SUBCASE("conflicting config is refused") {
    RunConfig other = rc;
    other.train.learning_rate = 1e-3;
    CHECK_THROWS_AS(run_train(other, run, false), ConfigConflictError);
  }

  SUBCASE("resume without a run") {
    RunConfig more = rc;
    CHECK_THROWS_AS(run_train(more, fresh_dir("noresume"), true), ContractError);
  }

  SUBCASE("eval writes reports and traces") {
    EvalOptions eo;
    eo.max_detections = 1;
    const auto out = run_eval(run, data / "manifest_test.json", eo);
    CHECK(fs::exists(run / "eval" / "report.json"));
    CHECK(fs::exists(run / "eval" / "report.md"));
    CHECK(fs::exists(run / "eval" / "predictions.json"));
    for (const auto& im : out.predictions.images) CHECK(im.detections.size() <= 1u);
    CHECK(fs::exists(run / "traces" / (fs::path(out.predictions.images[0].file).stem().string() + ".json")));
    const std::string first = slurp(run / "eval" / "report.json");
    run_eval(run, data / "manifest_test.json", eo);
    CHECK(slurp(run / "eval" / "report.json") == first);
    if (out.report.map) {
      CHECK(*out.report.map >= 0.0);
      CHECK(*out.report.map <= 1.0);
    }
  }

  SUBCASE("oracle eval without a trained run") {
    EvalOptions eo;
    eo.oracle = true;
    const auto dir = fresh_dir("oracle");
    const auto out = run_eval(dir, data / "manifest_test.json", eo);
    CHECK(fs::exists(dir / "eval_oracle" / "report.json"));
    REQUIRE(out.report.map.has_value());
    CHECK(*out.report.map >= 0.95);
  }
}

TEST_CASE("bench matrix") {
  const auto data = fresh_dir("bench_data");
  run_gen(small_gen(), data);
  const nlohmann::json mj = {
      {"extractors", {{{"name", "raw28"}}, {{"name", "raw28"}, {"label", "raw14"}, {"params", {{"side", 14}}}},
                      {{"name", "nope"}}}},
      {"seeds", {0, 1}},
      {"train_manifest", "manifest_train.json"},
      {"test_manifest", "manifest_test.json"},
      {"train", run_config_to_json(small_run(data)).at("train")}};
  const BenchMatrix m = bench_matrix_from_json(mj, data);
  CHECK(m.entries.size() == 3);
  CHECK(m.train_manifest == data / "manifest_train.json");
  const auto out = fresh_dir("bench_out");
  const BenchResult r = run_bench(m, out);
  CHECK(r.cells.size() == 6);
  CHECK(r.rows.size() == 3);
  int failed = 0;
  for (const auto& c : r.cells) failed += !c.ok;
  CHECK(failed == 2);
  CHECK(r.rows[2].successful == 0);
  CHECK_FALSE(r.rows[2].mean_map.has_value());
  CHECK(fs::exists(out / "summary.md"));
  const std::string md = slurp(out / "summary.md");
  CHECK(md.find("-0.50") != std::string::npos);
  CHECK(md.find("Failed cells") != std::string::npos);

  // A second run reuses finished cells.
  const BenchResult again = run_bench(m, out);
  for (const auto& c : again.cells) {
    if (c.ok) CHECK(c.reused);
  }
  CHECK(bench_result_json(again).at("rows") == bench_result_json(r).at("rows"));

  nlohmann::json dup = mj;
  dup["extractors"] = {{{"name", "raw28"}}, {{"name", "raw28"}}};
  CHECK_THROWS_AS(bench_matrix_from_json(dup, data), ContractError);
}
