#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "defloc/run.hpp"
#include "defloc/synthgen.hpp"

using namespace defloc;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "defloc_test_cli";

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), {});
}

Result cli(const std::string& args) {
  const fs::path out = kRoot / "stdout.txt";
  const fs::path err = kRoot / "stderr.txt";
  const std::string cmd = std::string("\"") + DEFLOC_CLI_PATH + "\" " + args + " >\"" + out.string() +
                          "\" 2>\"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

bool contains(const std::string& s, const std::string& needle) { return s.find(needle) != std::string::npos; }

// A small dataset config so every command finishes quickly.
fs::path write_gen_config() {
  GenerateConfig cfg = profile_config("easy");
  cfg.n_images = 6;
  cfg.train_fraction = 0.5;
  cfg.pattern.width = 128;
  cfg.border_margin = 16;
  cfg.pattern.height = 128;
  cfg.pattern.line_pitch = 16;
  cfg.pattern.line_width = 8;
  const fs::path p = kRoot / "gen.json";
  write_text_file(p, nlohmann::json(cfg).dump(2));
  return p;
}

const std::string kTrainFlags = "--extractor raw28 --hidden 8 --epochs 1 --batch-size 4 --max-steps 6";

}  // namespace

TEST_CASE("command line workflow") {
  fs::remove_all(kRoot);
  fs::create_directories(kRoot);
  const fs::path gen_cfg = write_gen_config();
  const fs::path data = kRoot / "data";
  const fs::path run = kRoot / "run";

  SUBCASE("usage errors exit 1") {
    CHECK(cli("").code == 1);
    CHECK(cli("frobnicate").code == 1);
    CHECK(cli("gen").code == 1);
    CHECK(cli("train --run " + run.string()).code == 1);
    CHECK(cli("--help").code == 0);
    CHECK(contains(cli("--version").out, kToolVersion));
  }

  SUBCASE("gen, train, eval, render") {
    Result r = cli("gen --out " + data.string() + " --config " + gen_cfg.string());
    REQUIRE(r.code == 0);
    CHECK(contains(r.out, "train/test split: 3/3"));
    CHECK(contains(r.out, "| Class | Train | Test | Total |"));

    r = cli("gen --out " + data.string() + " --config " + gen_cfg.string());
    CHECK(r.code == 0);
    CHECK(contains(r.out, "dataset exists, identical config"));

    r = cli("gen --out " + data.string() + " --config " + gen_cfg.string() + " --seed 5");
    CHECK(r.code == 2);
    CHECK(contains(r.err, "seed: 0 -> 5"));

    r = cli("train --run " + run.string() + " --data " + data.string() + " " + kTrainFlags);
    REQUIRE(r.code == 0);
    CHECK(fs::exists(run / "config.json"));
    CHECK(fs::exists(run / "checkpoints" / "epoch_001.ckpt"));

    r = cli("train --run " + run.string() + " --data " + data.string() + " " + kTrainFlags + " --lr 0.5");
    CHECK(r.code == 2);
    CHECK(contains(r.err, "learning_rate"));

    r = cli("train --run " + run.string() + " --data " + data.string() + " --extractor nope");
    CHECK(r.code != 0);

    r = cli("eval --run " + run.string() + " --data " + data.string() + " --max-detections 1");
    REQUIRE(r.code == 0);
    CHECK(contains(r.out, "| Model | SB | TB | LC | LB | MBH | MBNH | All (mAP) | Avg no. steps |"));
    const nlohmann::json preds = read_json_file(run / "eval" / "predictions.json");
    for (const auto& im : preds.at("images")) CHECK(im.at("detections").size() <= 1u);

    r = cli("eval --run " + run.string() + " --data " + data.string() + " --oracle");
    CHECK(r.code == 0);
    CHECK(fs::exists(run / "eval_oracle" / "report.json"));

    fs::path trace;
    for (const auto& e : fs::directory_iterator(run / "traces")) trace = e.path();
    REQUIRE(!trace.empty());
    r = cli("render --trace " + trace.string());
    REQUIRE(r.code == 0);
    const fs::path renders = run / "renders" / trace.stem();
    CHECK(fs::exists(renders / "ep1_step000.svg"));
    CHECK(fs::exists(renders / "panels.json"));
    r = cli("render --trace " + trace.string() + " --format gif");
    CHECK(r.code == 1);
  }

  SUBCASE("missing inputs") {
    Result r = cli("eval --run " + (kRoot / "nothing").string() + " --manifest " +
                   (kRoot / "missing.json").string());
    CHECK(r.code == 1);
    CHECK_FALSE(r.err.empty());
    r = cli("train --run " + run.string() + " --resume --manifest " + (kRoot / "missing.json").string());
    CHECK(r.code == 2);
  }
}
