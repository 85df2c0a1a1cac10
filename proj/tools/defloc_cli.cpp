#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "defloc/bench.hpp"
#include "defloc/errors.hpp"
#include "defloc/render.hpp"
#include "defloc/run.hpp"

namespace fs = std::filesystem;
using namespace defloc;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    const int v = std::stoi(item, &used);
    if (used != item.size()) throw ContractError("not an integer list: '" + s + "'");
    out.push_back(v);
  }
  return out;
}

fs::path manifest_for(const std::string& data_dir, const std::string& manifest, const char* split) {
  if (!manifest.empty()) return manifest;
  if (data_dir.empty()) throw ContractError(std::string("give --data or --manifest for the ") + split + " split");
  return fs::path(data_dir) / (std::string("manifest_") + split + ".json");
}

struct GenArgs {
  std::string out, profile = "easy", config;
  std::optional<int> n;
  std::optional<std::uint64_t> seed;
  std::optional<double> train_fraction, double_fraction, noise;
};

int cmd_gen(const GenArgs& a) {
  GenerateConfig cfg = a.config.empty() ? profile_config(a.profile)
                                        : read_json_file(a.config).get<GenerateConfig>();
  if (a.n) cfg.n_images = *a.n;
  if (a.seed) cfg.seed = *a.seed;
  if (a.train_fraction) cfg.train_fraction = *a.train_fraction;
  if (a.double_fraction) cfg.double_defect_fraction = *a.double_fraction;
  if (a.noise) cfg.pattern.noise_sigma = *a.noise;
  const GenOutcome g = run_gen(cfg, a.out);
  if (!g.created) std::cout << "dataset exists, identical config: " << a.out << " (nothing to do)\n";
  else std::cout << "generated " << a.out << "\n";
  std::cout << "train/test split: " << g.train.records.size() << "/" << g.test.records.size() << "\n\n"
            << dataset_summary(g.train, g.test);
  return kExitOk;
}

struct TrainArgs {
  std::string run, data, manifest, config, extractor, extractor_params, hidden;
  std::optional<int> epochs, batch_size, update_every, max_steps;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  bool no_guided = false, resume = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg;
  const fs::path existing = fs::path(a.run) / "config.json";
  if (!a.config.empty()) cfg = load_run_config(a.config);
  else if (a.resume && fs::exists(existing)) cfg = load_run_config(existing);
  if (!a.data.empty() || !a.manifest.empty()) cfg.train_manifest = manifest_for(a.data, a.manifest, "train");
  if (!a.extractor.empty()) {
    cfg.extractor.name = a.extractor;
    cfg.extractor.params = nlohmann::json::object();
  }
  if (!a.extractor_params.empty()) cfg.extractor.params = nlohmann::json::parse(a.extractor_params);
  if (!a.hidden.empty()) cfg.train.hidden = parse_int_list(a.hidden);
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.batch_size) cfg.train.batch_size = *a.batch_size;
  if (a.update_every) cfg.train.update_every = *a.update_every;
  if (a.max_steps) cfg.train.env.max_steps = *a.max_steps;
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.lr) cfg.train.learning_rate = *a.lr;
  if (a.no_guided) cfg.train.guided_exploration = false;

  const auto result = run_train(cfg, a.run, a.resume, [](const EpochStats& s) {
    std::printf("epoch %3d  reward %7.3f  trigger %.3f  iou@trigger %s  loss %.4f  eps %.3f  %.1fs\n",
                s.epoch, s.mean_return, s.trigger_rate,
                s.mean_iou_at_trigger ? std::to_string(*s.mean_iou_at_trigger).substr(0, 5).c_str() : "  -  ",
                s.mean_loss, s.epsilon, s.wall_seconds);
    std::fflush(stdout);
  });
  std::cout << "trained " << result.log.size() << " epoch(s); run directory " << a.run << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string run, data, manifest, checkpoint;
  std::optional<int> max_detections;
  bool oracle = false, no_traces = false;
};

int cmd_eval(const EvalArgs& a) {
  EvalOptions opts;
  opts.oracle = a.oracle;
  opts.write_traces = !a.no_traces;
  if (!a.checkpoint.empty()) opts.checkpoint = fs::path(a.checkpoint);
  const fs::path cfg_path = fs::path(a.run) / "config.json";
  opts.max_detections = a.max_detections ? *a.max_detections
                        : fs::exists(cfg_path) ? load_run_config(cfg_path).max_detections
                                               : 3;
  const auto out = run_eval(a.run, manifest_for(a.data, a.manifest, "test"), opts);
  std::cout << report_markdown(a.oracle ? "oracle" : "agent", out.report);
  return kExitOk;
}

int cmd_bench(const std::string& matrix_path, const std::string& out, std::optional<int> workers) {
  BenchMatrix m = bench_matrix_from_json(read_json_file(matrix_path), fs::path(matrix_path).parent_path());
  if (workers) m.workers = *workers;
  const BenchResult r = run_bench(m, out);
  std::cout << bench_markdown(r);
  for (const auto& c : r.cells) {
    if (!c.ok) return kExitRuntime;
  }
  return kExitOk;
}

struct RenderArgs {
  std::string trace, image, manifest, out, format = "svg";
};

int cmd_render(const RenderArgs& a) {
  const TraceFile t = load_trace_file(a.trace);
  const fs::path manifest_path = a.manifest.empty() ? t.manifest : fs::path(a.manifest);
  std::vector<Box> gts;
  fs::path image_path = a.image;
  if (!manifest_path.empty()) {
    const DatasetManifest m = load_manifest(manifest_path);
    bool found = false;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
      if (m.records[i].file != t.image) continue;
      for (const auto& ann : m.records[i].annotations) gts.push_back(ann.box);
      if (image_path.empty()) image_path = m.image_path(i);
      found = true;
    }
    if (!found) throw ContractError("render: " + t.image + " is not in " + manifest_path.string());
  }
  if (image_path.empty()) throw ContractError("render: give --image or a trace with a manifest");
  const fs::path out = a.out.empty()
                           ? fs::path(a.trace).parent_path().parent_path() / "renders" /
                                 fs::path(a.trace).stem()
                           : fs::path(a.out);
  PanelFormat fmt;
  if (a.format == "svg") fmt = PanelFormat::kSvg;
  else if (a.format == "png") fmt = PanelFormat::kPng;
  else throw ContractError("render: --format must be svg or png");
  const auto files = render_trace(t, read_png(image_path), gts, out, fmt);
  std::cout << "wrote " << files.size() << " panel(s) to " << out << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Defect localization with a Q-learning agent on synthetic line-space images"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  GenArgs ga;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  gen->add_option("--out", ga.out, "Dataset directory")->required();
  gen->add_option("--profile", ga.profile, "easy or hard")->capture_default_str();
  gen->add_option("--config", ga.config, "GenerateConfig JSON (replaces the profile)");
  gen->add_option("--n", ga.n, "Number of images");
  gen->add_option("--seed", ga.seed, "Master seed");
  gen->add_option("--train-fraction", ga.train_fraction, "Share of images in the train split");
  gen->add_option("--double-fraction", ga.double_fraction, "Share of double-defect images");
  gen->add_option("--noise", ga.noise, "Gaussian noise sigma");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train an agent");
  tr->add_option("--run", ta.run, "Run directory")->required();
  tr->add_option("--data", ta.data, "Dataset directory (uses manifest_train.json)");
  tr->add_option("--manifest", ta.manifest, "Training manifest");
  tr->add_option("--config", ta.config, "RunConfig JSON; flags override it");
  tr->add_option("--extractor", ta.extractor, "raw28, hog, randconv or external");
  tr->add_option("--extractor-params", ta.extractor_params, "Extractor params as JSON");
  tr->add_option("--hidden", ta.hidden, "Hidden layer sizes, e.g. 512,512");
  tr->add_option("--epochs", ta.epochs);
  tr->add_option("--batch-size", ta.batch_size);
  tr->add_option("--update-every", ta.update_every, "Environment steps per gradient update");
  tr->add_option("--max-steps", ta.max_steps, "Step cap per episode");
  tr->add_option("--seed", ta.seed);
  tr->add_option("--lr", ta.lr, "Adam learning rate");
  tr->add_flag("--no-guided", ta.no_guided, "Unguided epsilon-greedy exploration");
  tr->add_flag("--resume", ta.resume, "Continue from the latest checkpoint");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate a run on a test manifest");
  ev->add_option("--run", ea.run, "Run directory")->required();
  ev->add_option("--data", ea.data, "Dataset directory (uses manifest_test.json)");
  ev->add_option("--manifest", ea.manifest, "Test manifest");
  ev->add_option("--max-detections", ea.max_detections);
  ev->add_option("--checkpoint", ea.checkpoint, "Checkpoint file (default: latest)");
  ev->add_flag("--oracle", ea.oracle, "Use the ground-truth greedy-IoU policy");
  ev->add_flag("--no-traces", ea.no_traces, "Skip writing episode traces");

  std::string matrix, bench_out;
  std::optional<int> workers;
  auto* be = app.add_subcommand("bench", "Train and evaluate an extractor x seed matrix");
  be->add_option("--matrix", matrix, "Matrix JSON")->required();
  be->add_option("--out", bench_out, "Output directory")->required();
  be->add_option("--workers", workers, "Cells run concurrently");

  RenderArgs ra;
  auto* re = app.add_subcommand("render", "Render an episode trace as panels");
  re->add_option("--trace", ra.trace, "Trace JSON from eval")->required();
  re->add_option("--image", ra.image, "Image (default: from the trace's manifest)");
  re->add_option("--manifest", ra.manifest, "Manifest holding the annotations");
  re->add_option("--out", ra.out, "Output directory (default: <run>/renders/<trace>)");
  re->add_option("--format", ra.format, "svg or png")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(ga);
    if (*tr) return cmd_train(ta);
    if (*ev) return cmd_eval(ea);
    if (*be) return cmd_bench(matrix, bench_out, workers);
    if (*re) return cmd_render(ra);
  } catch (const ConfigConflictError& e) {
    std::cerr << "error: " << e.what() << "\n";
    for (const auto& d : e.diff()) std::cerr << "  " << d << "\n";
    return kExitRuntime;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: bad JSON argument: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NonFiniteLossError& e) {
    std::cerr << "error: training diverged: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
