#pragma once

#include <deque>
#include <optional>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "defloc/features.hpp"
#include "defloc/geometry.hpp"
#include "defloc/imaging.hpp"

namespace defloc {

class Mlp;

enum class StepRewardMode { kSignDeltaIou, kZero };

std::string_view step_reward_mode_name(StepRewardMode m);
StepRewardMode step_reward_mode_from_name(std::string_view name);

struct RewardConfig {
  double trigger_eta = 3.0;
  double iou_threshold = 0.5;
  StepRewardMode step_mode = StepRewardMode::kSignDeltaIou;

  void validate() const;
};

struct EnvConfig {
  int max_steps = 40;
  int history_len = 10;
  double bar_fraction = kDefaultBarFraction;
  RewardConfig reward;
  TransformConfig transform;

  void validate() const;
  int history_dim() const { return history_len * kNumActions; }
};

struct Observation {
  std::vector<double> features;
  std::vector<double> history_onehot;  // history_len x 9, oldest slot first

  std::vector<double> concat() const;
};

// One localization episode over one image: box actions on crops of the
// image, rewarded by the best IoU against the ground-truth boxes.
class LocalizationEnv {
 public:
  struct StepResult {
    Observation obs;
    double reward = 0.0;
    bool done = false;
    bool triggered = false;
  };

  LocalizationEnv(const FeatureExtractor& extractor, EnvConfig cfg);

  // gt_boxes may be empty for pure inference; rewards are then 0.
  Observation reset(GrayImage image, std::vector<Box> gt_boxes);
  StepResult step(Action action);

  // Actions whose resulting box does not lower the best IoU, plus TRIGGER
  // when the current IoU already clears the threshold.
  std::vector<Action> guidance_set() const;

  const EnvConfig& config() const { return cfg_; }
  const FeatureExtractor& extractor() const { return extractor_; }
  const GrayImage& image() const { return image_; }
  const std::vector<Box>& gt_boxes() const { return gts_; }
  const Box& box() const { return box_; }
  const std::deque<Action>& history() const { return history_; }
  int steps() const { return steps_; }
  bool done() const { return done_; }
  double current_iou() const;
  int observation_dim() const { return extractor_.dim() + cfg_.history_dim(); }

 private:
  double iou_of(const Box& b) const;
  std::vector<double> history_encoding() const;

  const FeatureExtractor& extractor_;
  EnvConfig cfg_;
  GrayImage image_;
  std::vector<Box> gts_;
  Box box_;
  std::deque<Action> history_;
  std::vector<double> features_;
  int steps_ = 0;
  bool done_ = true;
};

// Chooses actions during detect_sequence.
class Policy {
 public:
  struct Decision {
    Action action = Action::kUp;
    double q_chosen = 0.0;
    double trigger_score = 0.0;  // confidence attached if this ends in TRIGGER
  };

  virtual ~Policy() = default;
  // std::nullopt ends the whole detection sequence for the image.
  virtual std::optional<Decision> decide(const LocalizationEnv& env, const Observation& obs) = 0;
  virtual void on_image_start() {}
  virtual void on_episode_start(const LocalizationEnv&) {}
  virtual void on_detection(const Box&) {}
};

// Argmax of the Q-network (ties to the lowest action index). The detection
// score is the TRIGGER Q-value at the final state.
class GreedyQPolicy final : public Policy {
 public:
  explicit GreedyQPolicy(const Mlp& net) : net_(net) {}
  std::optional<Decision> decide(const LocalizationEnv& env, const Observation& obs) override;

 private:
  const Mlp& net_;
};

// Ground-truth oracle: commits each episode to the best-overlapping ground
// truth not yet detected, follows greedy_action and triggers once IoU
// exceeds the reward threshold. Score is the IoU at trigger.
class OracleIouPolicy final : public Policy {
 public:
  std::optional<Decision> decide(const LocalizationEnv& env, const Observation& obs) override;
  void on_image_start() override { claimed_.clear(); }
  void on_episode_start(const LocalizationEnv& env) override;
  void on_detection(const Box& box) override;

 private:
  std::vector<bool> claimed_;
  std::optional<std::size_t> target_;
};

struct TraceStep {
  Action action = Action::kUp;
  Box box;  // after the action
  double reward = 0.0;
  double q = 0.0;
};

struct EpisodeTrace {
  std::vector<Box> masks;  // cross-masked boxes applied before this episode
  Box initial_box;
  std::vector<TraceStep> steps;
  bool triggered = false;
};

struct Detection {
  Box box;
  double score = 0.0;
  int steps = 0;
};

struct ImageDetections {
  std::vector<Detection> detections;
  int total_steps = 0;  // every episode, triggered or capped
  std::vector<EpisodeTrace> traces;
};

// Greedy episodes with cross masking between detections. Stops after
// max_detections triggers, a capped episode, or when the policy declines.
ImageDetections detect_sequence(const GrayImage& image, const std::vector<Box>& gt_boxes,
                                Policy& policy, const FeatureExtractor& extractor,
                                const EnvConfig& cfg, int max_detections);

nlohmann::json trace_to_json(const EpisodeTrace& trace);
EpisodeTrace trace_from_json(const nlohmann::json& j);

void to_json(nlohmann::json& j, const EnvConfig& c);
void from_json(const nlohmann::json& j, EnvConfig& c);

}  // namespace defloc
