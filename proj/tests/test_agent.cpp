#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "defloc/agent.hpp"
#include "defloc/errors.hpp"

using namespace defloc;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / "defloc_test_agent" / name;
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), {});
}

Transition tagged(int tag) {
  return {std::make_shared<const ObsVector>(ObsVector{static_cast<float>(tag)}), tag % 9, 0.0, nullptr, true};
}

// Small dataset shared by the tests below; generated once.
const std::pair<DatasetManifest, DatasetManifest>& tiny_dataset() {
  static const auto data = [] {
    GenerateConfig cfg = profile_config("easy");
    cfg.n_images = 10;
    cfg.pattern.width = 128;
    cfg.border_margin = 16;
    cfg.pattern.height = 128;
    cfg.pattern.line_pitch = 16;
    cfg.pattern.line_width = 8;
    return generate_dataset(fresh_dir("data"), cfg);
  }();
  return data;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.epochs = 2;
  c.hidden = {16};
  c.batch_size = 8;
  c.replay_capacity = 200;
  c.target_sync_every = 20;
  c.env.max_steps = 12;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("replay buffer") {
  ReplayBuffer rb(5);
  for (int i = 0; i < 5; ++i) rb.push(tagged(i));
  CHECK(rb.size() == 5);
  for (int i = 5; i < 8; ++i) rb.push(tagged(i));
  CHECK(rb.size() == 5);
  CHECK(rb.at(0).state->at(0) == 3.0f);  // 0, 1, 2 evicted
  CHECK(rb.at(4).state->at(0) == 7.0f);

  std::mt19937_64 rng(1);
  for (int k = 0; k < 100; ++k) {
    const auto b = rb.sample(5, rng);
    std::set<float> seen;
    for (const auto& t : b) seen.insert(t.state->at(0));
    CHECK(seen.size() == 5);
  }
  CHECK_THROWS_AS(rb.sample(6, rng), ContractError);
  CHECK_THROWS_AS(ReplayBuffer(0), ContractError);

  // Every entry is equally likely to be drawn.
  ReplayBuffer big(20);
  for (int i = 0; i < 20; ++i) big.push(tagged(i));
  std::array<int, 20> hits{};
  for (int k = 0; k < 20000; ++k)
    for (const auto& t : big.sample(4, rng)) ++hits[static_cast<std::size_t>(t.state->at(0))];
  for (int h : hits) CHECK(std::abs(h - 4000) < 400);
}

TEST_CASE("epsilon schedule") {
  const TrainConfig c;
  CHECK(c.epsilon_at(0.0) == 1.0);
  CHECK(c.epsilon_at(5.0) == 0.1);
  CHECK(c.epsilon_at(12.3) == 0.1);
  CHECK(c.epsilon_at(2.5) == doctest::Approx(0.55));
  double prev = 2.0;
  for (double t = 0.0; t <= 25.0; t += 0.01) {
    const double e = c.epsilon_at(t);
    CHECK(e <= prev);
    CHECK(e >= 0.0);
    CHECK(e <= 1.0);
    prev = e;
  }
}

TEST_CASE("select_action") {
  std::mt19937_64 rng(7);
  const std::vector<double> q = {0.1, 0.5, -2, 0.5, 3.0, 0, 0, 0, 1};
  for (int i = 0; i < 100; ++i) CHECK(select_action(q, 0.0, rng) == Action::kBigger);
  const std::vector<double> zeros(9, 0.0);
  CHECK(select_action(zeros, 0.0, rng) == Action::kUp);
  const std::vector<double> tie = {0, 2, 0, 2, 0, 0, 0, 0, 0};
  CHECK(select_action(tie, 0.0, rng) == Action::kDown);

  SUBCASE("epsilon 1 without guidance is uniform") {
    std::array<double, 9> counts{};
    const int n = 100000;
    for (int i = 0; i < n; ++i) counts[static_cast<std::size_t>(action_index(select_action(q, 1.0, rng)))] += 1;
    double chi2 = 0.0;
    for (double c : counts) chi2 += (c - n / 9.0) * (c - n / 9.0) / (n / 9.0);
    CHECK(chi2 < 26.124);  // chi-square, 8 dof, p = 0.001
  }

  SUBCASE("guidance biases exploration") {
    const std::vector<Action> guide = {Action::kLeft, Action::kSmaller};
    int in_guide = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
      const Action a = select_action(q, 1.0, rng, guide, 0.5);
      in_guide += a == Action::kLeft || a == Action::kSmaller;
    }
    // 0.5 + 0.5 * 2/9
    CHECK(static_cast<double>(in_guide) / n == doctest::Approx(0.5 + 1.0 / 9.0).epsilon(0.03));
  }

  CHECK_THROWS_AS(select_action(std::vector<double>(3, 0.0), 0.0, rng), ContractError);
}

TEST_CASE("train config json and validation") {
  TrainConfig c;
  c.hidden = {32, 8};
  c.update_every = 4;
  c.env.max_steps = 20;
  const TrainConfig d = nlohmann::json(c).get<TrainConfig>();
  CHECK(d.hidden == c.hidden);
  CHECK(d.update_every == 4);
  CHECK(d.env.max_steps == 20);
  CHECK(nlohmann::json(d) == nlohmann::json(c));
  TrainConfig bad;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  TrainConfig bad2;
  bad2.epsilon_end = 1.5;
  CHECK_THROWS_AS(bad2.validate(), ContractError);
}

TEST_CASE("training loop") {
  const auto& [train_set, test_set] = tiny_dataset();
  RawDownsampleExtractor ex;
  const TrainConfig cfg = tiny_config();

  SUBCASE("logs, checkpoints and determinism") {
    const auto a = fresh_dir("run_a"), b = fresh_dir("run_b");
    TrainOptions oa{a / "ckpt", a / "log.jsonl", false, {}};
    TrainOptions ob{b / "ckpt", b / "log.jsonl", false, {}};
    const TrainResult ra = train(train_set, ex, cfg, oa);
    const TrainResult rb = train(train_set, ex, cfg, ob);
    REQUIRE(ra.log.size() == 2);
    CHECK(ra.log[0].episodes == 8);
    CHECK(ra.log[1].epoch == 2);
    CHECK(ra.net == rb.net);
    CHECK(ra.net.has_normalizer());
    for (int e = 1; e <= 2; ++e) {
      CHECK(slurp(checkpoint_path(a / "ckpt", e)) == slurp(checkpoint_path(b / "ckpt", e)));
    }
    CHECK(latest_checkpoint(a / "ckpt") == checkpoint_path(a / "ckpt", 2));
    std::ifstream log(a / "log.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
      const auto j = nlohmann::json::parse(line);
      CHECK(j.contains("mean_reward"));
      CHECK(j.contains("trigger_rate"));
      CHECK(j.contains("mean_iou_at_trigger"));
      CHECK(j.contains("epsilon"));
      CHECK(j.contains("wall_time_s"));
      ++lines;
    }
    CHECK(lines == 2);
    for (const auto& s : ra.log) {
      CHECK(s.steps <= static_cast<long long>(s.episodes) * cfg.env.max_steps);
      CHECK(s.trigger_rate >= 0.0);
      CHECK(s.trigger_rate <= 1.0);
    }
  }

  SUBCASE("resume continues from the latest epoch") {
    const auto d = fresh_dir("resume");
    TrainConfig one = cfg;
    one.epochs = 1;
    train(train_set, ex, one, {d / "ckpt", d / "log.jsonl", false, {}});
    const TrainResult rest = train(train_set, ex, cfg, {d / "ckpt", d / "log.jsonl", true, {}});
    REQUIRE(rest.log.size() == 1);
    CHECK(rest.log[0].epoch == 2);
    CHECK(rest.log[0].epsilon == doctest::Approx(cfg.epsilon_at(2.0)));
    CHECK(fs::exists(checkpoint_path(d / "ckpt", 2)));
    const Checkpoint ck = load_checkpoint(checkpoint_path(d / "ckpt", 2));
    CHECK(ck.progress.at("epoch") == 2);
    std::ifstream log(d / "log.jsonl");
    int lines = 0;
    for (std::string l; std::getline(log, l);) ++lines;
    CHECK(lines == 2);
  }

  SUBCASE("divergence is reported with its position") {
    TrainConfig hot = cfg;
    hot.learning_rate = 1e300;
    try {
      train(train_set, ex, hot);
      FAIL("expected divergence");
    } catch (const NonFiniteLossError& e) {
      CHECK(e.epoch() == 1);
      CHECK(e.step() >= hot.batch_size);
    }
  }

  SUBCASE("empty manifest") {
    DatasetManifest empty = train_set;
    empty.records.clear();
    CHECK_THROWS_AS(train(empty, ex, cfg), ContractError);
  }
}

TEST_CASE("predict") {
  const auto& [train_set, test_set] = tiny_dataset();
  RawDownsampleExtractor ex;
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  const TrainResult r = train(train_set, ex, cfg);
  const PredictionSet a = predict(test_set, r.net, ex, cfg.env, 3);
  const PredictionSet b = predict(test_set, r.net, ex, cfg.env, 3);
  CHECK(predictions_to_json(a) == predictions_to_json(b));
  REQUIRE(a.images.size() == test_set.records.size());
  for (const auto& im : a.images) {
    int sum = 0;
    for (const auto& t : im.traces) sum += static_cast<int>(t.steps.size());
    CHECK(im.total_steps == sum);
    CHECK(im.detections.size() <= 3u);
    for (const auto& d : im.detections) CHECK(d.box.within(128, 128));
  }
  const PredictionSet back = predictions_from_json(predictions_to_json(a));
  CHECK(predictions_to_json(back) == predictions_to_json(a));
}

TEST_CASE("guided exploration biases toward the target") {
  const auto& [train_set, test_set] = tiny_dataset();
  RawDownsampleExtractor ex;
  EnvConfig env_cfg;
  auto mean_iou_after_10 = [&](bool guided) {
    std::mt19937_64 rng(99);
    LocalizationEnv env(ex, env_cfg);
    const std::vector<double> q(9, 0.0);
    double total = 0.0;
    int n = 0;
    for (int rep = 0; rep < 5; ++rep) {
      for (std::size_t i = 0; i < train_set.records.size(); ++i) {
        std::vector<Box> gts;
        for (const auto& a : train_set.records[i].annotations) gts.push_back(a.box);
        env.reset(train_set.load_image(i), gts);
        for (int s = 0; s < 10; ++s) {
          std::vector<Action> guide;
          if (guided) guide = env.guidance_set();
          std::vector<Action> moves;
          for (Action a : guide)
            if (a != Action::kTrigger) moves.push_back(a);
          Action a = select_action(q, 1.0, rng, moves, 0.5);
          if (a == Action::kTrigger) a = Action::kSmaller;
          env.step(a);
        }
        total += env.current_iou();
        ++n;
      }
    }
    return total / n;
  };
  CHECK(mean_iou_after_10(true) > mean_iou_after_10(false));
}
