#include "defloc/env.hpp"

#include <algorithm>
#include <cmath>

#include "defloc/errors.hpp"
#include "defloc/qnet.hpp"

namespace defloc {

std::string_view step_reward_mode_name(StepRewardMode m) {
  return m == StepRewardMode::kSignDeltaIou ? "sign_delta_iou" : "zero";
}

StepRewardMode step_reward_mode_from_name(std::string_view name) {
  if (name == "sign_delta_iou") return StepRewardMode::kSignDeltaIou;
  if (name == "zero") return StepRewardMode::kZero;
  throw ContractError("unknown step reward mode '" + std::string(name) +
                      "' (expected sign_delta_iou or zero)");
}

void RewardConfig::validate() const {
  if (!(trigger_eta > 0.0)) throw ContractError("reward: trigger_eta must be > 0");
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) {
    throw ContractError("reward: iou_threshold must lie in (0, 1)");
  }
}

void EnvConfig::validate() const {
  if (max_steps < 1) throw ContractError("env: max_steps must be >= 1");
  if (history_len < 0) throw ContractError("env: history_len must be >= 0");
  if (!(bar_fraction > 0.0 && bar_fraction <= 1.0)) {
    throw ContractError("env: bar_fraction must lie in (0, 1]");
  }
  reward.validate();
  transform.validate();
}

std::vector<double> Observation::concat() const {
  std::vector<double> v;
  v.reserve(features.size() + history_onehot.size());
  v.insert(v.end(), features.begin(), features.end());
  v.insert(v.end(), history_onehot.begin(), history_onehot.end());
  return v;
}

LocalizationEnv::LocalizationEnv(const FeatureExtractor& extractor, EnvConfig cfg)
    : extractor_(extractor), cfg_(std::move(cfg)) {
  cfg_.validate();
}

double LocalizationEnv::iou_of(const Box& b) const {
  return gts_.empty() ? 0.0 : best_match(b, gts_).iou;
}

double LocalizationEnv::current_iou() const { return iou_of(box_); }

std::vector<double> LocalizationEnv::history_encoding() const {
  std::vector<double> h(static_cast<std::size_t>(cfg_.history_dim()), 0.0);
  for (std::size_t i = 0; i < history_.size(); ++i) {
    h[i * kNumActions + static_cast<std::size_t>(action_index(history_[i]))] = 1.0;
  }
  return h;
}

Observation LocalizationEnv::reset(GrayImage image, std::vector<Box> gt_boxes) {
  if (image.empty()) throw ContractError("env.reset: empty image");
  image_ = std::move(image);
  gts_ = std::move(gt_boxes);
  box_ = full_box(image_.width(), image_.height());
  history_.clear();
  steps_ = 0;
  done_ = false;
  features_ = extractor_.extract(state_raster(image_, box_));
  return {features_, history_encoding()};
}

LocalizationEnv::StepResult LocalizationEnv::step(Action action) {
  if (done_) throw ContractError("env.step: episode already finished; call reset()");
  StepResult r;
  ++steps_;
  if (action == Action::kTrigger) {
    done_ = true;
    r.done = true;
    r.triggered = true;
    if (!gts_.empty()) {
      r.reward = current_iou() > cfg_.reward.iou_threshold ? cfg_.reward.trigger_eta
                                                           : -cfg_.reward.trigger_eta;
    }
    r.obs = {features_, history_encoding()};
    return r;
  }
  const double before = current_iou();
  box_ = apply_action(box_, action, cfg_.transform, image_.width(), image_.height());
  if (cfg_.history_len > 0) {
    history_.push_back(action);
    if (static_cast<int>(history_.size()) > cfg_.history_len) history_.pop_front();
  }
  if (!gts_.empty() && cfg_.reward.step_mode == StepRewardMode::kSignDeltaIou) {
    const double after = current_iou();
    r.reward = after > before ? 1.0 : (after < before ? -1.0 : 0.0);
  }
  features_ = extractor_.extract(state_raster(image_, box_));
  r.obs = {features_, history_encoding()};
  if (steps_ >= cfg_.max_steps) {
    done_ = true;
    r.done = true;
  }
  return r;
}

std::vector<Action> LocalizationEnv::guidance_set() const {
  std::vector<Action> out;
  if (gts_.empty() || done_) return out;
  const double now = current_iou();
  for (int i = 0; i < kNumActions - 1; ++i) {
    const Action a = static_cast<Action>(i);
    const Box next = apply_action(box_, a, cfg_.transform, image_.width(), image_.height());
    if (iou_of(next) >= now) out.push_back(a);
  }
  if (now > cfg_.reward.iou_threshold) out.push_back(Action::kTrigger);
  return out;
}

// --- policies ----------------------------------------------------------------

std::optional<Policy::Decision> GreedyQPolicy::decide(const LocalizationEnv&,
                                                      const Observation& obs) {
  const std::vector<double> x = obs.concat();
  const Eigen::VectorXd q = net_.forward(x);
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < q.size(); ++i) {
    if (q(i) > q(best)) best = i;
  }
  return Decision{action_from_index(static_cast<int>(best)), q(best),
                  q(action_index(Action::kTrigger))};
}

void OracleIouPolicy::on_episode_start(const LocalizationEnv& env) {
  const auto& gts = env.gt_boxes();
  if (claimed_.size() != gts.size()) claimed_.assign(gts.size(), false);
  target_.reset();
  double best = -1.0;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (claimed_[i]) continue;
    const double v = iou(env.box(), gts[i]);
    if (v > best) {
      best = v;
      target_ = i;
    }
  }
}

void OracleIouPolicy::on_detection(const Box&) {
  if (target_) claimed_[*target_] = true;
}

std::optional<Policy::Decision> OracleIouPolicy::decide(const LocalizationEnv& env,
                                                        const Observation&) {
  if (!target_) return std::nullopt;
  const Box& target = env.gt_boxes()[*target_];
  const double now = iou(env.box(), target);
  if (now > env.config().reward.iou_threshold) {
    return Decision{Action::kTrigger, now, now};
  }
  const Action a = greedy_action(env.box(), target, env.config().transform,
                                 env.image().width(), env.image().height());
  return Decision{a, now, now};
}

// --- detection sequence ----------------------------------------------------

ImageDetections detect_sequence(const GrayImage& image, const std::vector<Box>& gt_boxes,
                                Policy& policy, const FeatureExtractor& extractor,
                                const EnvConfig& cfg, int max_detections) {
  if (max_detections < 1) throw ContractError("detect_sequence: max_detections must be >= 1");
  ImageDetections out;
  LocalizationEnv env(extractor, cfg);
  GrayImage current = image;
  std::vector<Box> masks;
  policy.on_image_start();
  for (int d = 0; d < max_detections; ++d) {
    Observation obs = env.reset(current, gt_boxes);
    policy.on_episode_start(env);
    EpisodeTrace trace;
    trace.masks = masks;
    trace.initial_box = env.box();
    bool stop = false;
    double trigger_score = 0.0;
    while (!env.done()) {
      const auto decision = policy.decide(env, obs);
      if (!decision) {
        stop = true;
        break;
      }
      auto r = env.step(decision->action);
      trace.steps.push_back({decision->action, env.box(), r.reward, decision->q_chosen});
      trigger_score = decision->trigger_score;
      trace.triggered = r.triggered;
      obs = std::move(r.obs);
    }
    out.total_steps += env.steps();
    if (!trace.steps.empty()) out.traces.push_back(std::move(trace));
    if (stop || !out.traces.back().triggered) break;
    out.detections.push_back({env.box(), trigger_score, env.steps()});
    policy.on_detection(env.box());
    masks.push_back(env.box());
    current = mask_cross(current, env.box(), cfg.bar_fraction);
  }
  return out;
}

// --- JSON --------------------------------------------------------------------

namespace {

nlohmann::json fbox(const Box& b) { return nlohmann::json::array({b.x_min, b.y_min, b.x_max, b.y_max}); }

Box fbox_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw FormatError("trace box must have 4 coordinates");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

}  // namespace

nlohmann::json trace_to_json(const EpisodeTrace& trace) {
  nlohmann::json masks = nlohmann::json::array();
  for (const Box& b : trace.masks) masks.push_back(fbox(b));
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : trace.steps) {
    steps.push_back({{"action", std::string(action_name(s.action))},
                     {"box", fbox(s.box)},
                     {"reward", s.reward},
                     {"q", s.q}});
  }
  return {{"masks", masks},
          {"initial_box", fbox(trace.initial_box)},
          {"steps", steps},
          {"triggered", trace.triggered}};
}

EpisodeTrace trace_from_json(const nlohmann::json& j) {
  EpisodeTrace t;
  try {
    for (const auto& m : j.at("masks")) t.masks.push_back(fbox_from(m));
    t.initial_box = fbox_from(j.at("initial_box"));
    for (const auto& s : j.at("steps")) {
      t.steps.push_back({action_from_name(s.at("action").get<std::string>()),
                         fbox_from(s.at("box")), s.at("reward").get<double>(),
                         s.at("q").get<double>()});
    }
    t.triggered = j.at("triggered").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed episode trace: ") + e.what());
  }
  return t;
}

void to_json(nlohmann::json& j, const EnvConfig& c) {
  j = {{"max_steps", c.max_steps},
       {"history_len", c.history_len},
       {"bar_fraction", c.bar_fraction},
       {"trigger_eta", c.reward.trigger_eta},
       {"iou_threshold", c.reward.iou_threshold},
       {"step_reward_mode", std::string(step_reward_mode_name(c.reward.step_mode))},
       {"alpha", c.transform.alpha},
       {"min_side", c.transform.min_side}};
}

void from_json(const nlohmann::json& j, EnvConfig& c) {
  EnvConfig d;
  c.max_steps = j.value("max_steps", d.max_steps);
  c.history_len = j.value("history_len", d.history_len);
  c.bar_fraction = j.value("bar_fraction", d.bar_fraction);
  c.reward.trigger_eta = j.value("trigger_eta", d.reward.trigger_eta);
  c.reward.iou_threshold = j.value("iou_threshold", d.reward.iou_threshold);
  c.reward.step_mode = step_reward_mode_from_name(
      j.value("step_reward_mode", std::string(step_reward_mode_name(d.reward.step_mode))));
  c.transform.alpha = j.value("alpha", d.transform.alpha);
  c.transform.min_side = j.value("min_side", d.transform.min_side);
}

}  // namespace defloc
