#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <json.hpp>

#include "defloc/env.hpp"
#include "defloc/features.hpp"
#include "defloc/qnet.hpp"
#include "defloc/synthgen.hpp"

namespace defloc {

// Fixed-capacity FIFO of transitions.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 10000);

  void push(Transition t);
  // batch_size distinct entries, uniformly; requires size() >= batch_size.
  std::vector<Transition> sample(std::size_t batch_size, std::mt19937_64& rng) const;

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Transition& at(std::size_t i) const { return items_[i]; }  // 0 = oldest
  void clear() { items_.clear(); }

 private:
  std::size_t capacity_;
  std::deque<Transition> items_;
};

struct TrainConfig {
  int epochs = 25;
  double epsilon_start = 1.0;
  double epsilon_end = 0.1;
  double epsilon_decay_epochs = 5.0;
  int batch_size = 64;
  double gamma = 0.9;
  double huber_delta = 1.0;
  double learning_rate = 1e-4;
  std::vector<int> hidden = {512, 512};
  int target_sync_every = 500;  // updates
  int replay_capacity = 10000;
  int update_every = 1;  // environment steps per gradient update
  bool guided_exploration = true;
  double guided_probability = 0.5;
  std::uint64_t seed = 0;
  EnvConfig env;

  void validate() const;
  // Epsilon at fractional epoch position t (epoch + episode / episodes).
  double epsilon_at(double t) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Epsilon-greedy with ties to the lowest action index. When guidance is
// non-empty, an exploratory draw picks from it with probability
// guided_probability instead of from all actions.
Action select_action(std::span<const double> q, double epsilon, std::mt19937_64& rng,
                     std::span<const Action> guidance = {}, double guided_probability = 0.5);

struct EpochStats {
  int epoch = 0;  // 1-based
  int episodes = 0;
  long long steps = 0;
  long long updates = 0;
  double mean_return = 0.0;
  double trigger_rate = 0.0;
  std::optional<double> mean_iou_at_trigger;
  double mean_loss = 0.0;
  double epsilon = 0.0;  // at the end of the epoch
  double wall_seconds = 0.0;
};

nlohmann::json epoch_stats_json(const EpochStats& s);

struct TrainOptions {
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::filesystem::path log_path;        // empty: no JSONL log
  bool resume = false;
  std::function<void(const EpochStats&)> on_epoch;
};

struct TrainResult {
  Mlp net;
  std::vector<EpochStats> log;
};

// Full-image feature statistics of the training set, frozen into net.
void fit_normalizer(Mlp& net, const DatasetManifest& data, const FeatureExtractor& extractor,
                    const EnvConfig& env);

TrainResult train(const DatasetManifest& data, const FeatureExtractor& extractor,
                  const TrainConfig& cfg, const TrainOptions& opts = {});

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int epoch);
// Resolves the `latest` pointer file; nullopt if absent.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir);

struct ImagePrediction {
  std::string file;
  std::vector<Detection> detections;
  int total_steps = 0;
  std::vector<EpisodeTrace> traces;
};

struct PredictionSet {
  std::vector<ImagePrediction> images;
};

nlohmann::json predictions_to_json(const PredictionSet& p);
PredictionSet predictions_from_json(const nlohmann::json& j);

// Greedy detect_sequence on every image, in manifest order.
PredictionSet predict(const DatasetManifest& data, Policy& policy, const FeatureExtractor& extractor,
                      const EnvConfig& env, int max_detections);
PredictionSet predict(const DatasetManifest& data, const Mlp& net, const FeatureExtractor& extractor,
                      const EnvConfig& env, int max_detections);

}  // namespace defloc
