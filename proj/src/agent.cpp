#include "defloc/agent.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "defloc/errors.hpp"

namespace defloc {

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ContractError("ReplayBuffer: capacity must be >= 1");
}

void ReplayBuffer::push(Transition t) {
  if (items_.size() == capacity_) items_.pop_front();
  items_.push_back(std::move(t));
}

std::vector<Transition> ReplayBuffer::sample(std::size_t batch_size, std::mt19937_64& rng) const {
  if (batch_size == 0 || batch_size > items_.size()) {
    throw ContractError("ReplayBuffer: cannot sample " + std::to_string(batch_size) +
                        " from " + std::to_string(items_.size()));
  }
  // Partial Fisher-Yates over an index table.
  std::vector<std::size_t> idx(items_.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<Transition> out;
  out.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
    out.push_back(items_[idx[i]]);
  }
  return out;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ContractError("train: epochs must be >= 1");
  if (!(epsilon_start >= 0.0 && epsilon_start <= 1.0 && epsilon_end >= 0.0 && epsilon_end <= 1.0)) {
    throw ContractError("train: epsilon bounds must lie in [0, 1]");
  }
  if (epsilon_end > epsilon_start) throw ContractError("train: epsilon_end exceeds epsilon_start");
  if (epsilon_decay_epochs < 0.0) throw ContractError("train: epsilon_decay_epochs must be >= 0");
  if (batch_size < 1) throw ContractError("train: batch_size must be >= 1");
  if (!(gamma >= 0.0 && gamma < 1.0)) throw ContractError("train: gamma must lie in [0, 1)");
  if (!(learning_rate > 0.0)) throw ContractError("train: learning_rate must be > 0");
  if (!(huber_delta > 0.0)) throw ContractError("train: huber_delta must be > 0");
  for (int h : hidden) {
    if (h < 1) throw ContractError("train: hidden layer sizes must be >= 1");
  }
  if (target_sync_every < 1) throw ContractError("train: target_sync_every must be >= 1");
  if (replay_capacity < batch_size) throw ContractError("train: replay_capacity below batch_size");
  if (update_every < 1) throw ContractError("train: update_every must be >= 1");
  if (!(guided_probability >= 0.0 && guided_probability <= 1.0)) {
    throw ContractError("train: guided_probability must lie in [0, 1]");
  }
  env.validate();
}

double TrainConfig::epsilon_at(double t) const {
  if (epsilon_decay_epochs <= 0.0) return epsilon_end;
  return std::lerp(epsilon_start, epsilon_end, std::clamp(t / epsilon_decay_epochs, 0.0, 1.0));
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"epsilon_start", c.epsilon_start},
       {"epsilon_end", c.epsilon_end},
       {"epsilon_decay_epochs", c.epsilon_decay_epochs},
       {"batch_size", c.batch_size},
       {"gamma", c.gamma},
       {"huber_delta", c.huber_delta},
       {"learning_rate", c.learning_rate},
       {"hidden", c.hidden},
       {"target_sync_every", c.target_sync_every},
       {"replay_capacity", c.replay_capacity},
       {"update_every", c.update_every},
       {"guided_exploration", c.guided_exploration},
       {"guided_probability", c.guided_probability},
       {"seed", c.seed},
       {"env", c.env}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.epsilon_start = j.value("epsilon_start", d.epsilon_start);
  c.epsilon_end = j.value("epsilon_end", d.epsilon_end);
  c.epsilon_decay_epochs = j.value("epsilon_decay_epochs", d.epsilon_decay_epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.gamma = j.value("gamma", d.gamma);
  c.huber_delta = j.value("huber_delta", d.huber_delta);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.hidden = j.value("hidden", d.hidden);
  c.target_sync_every = j.value("target_sync_every", d.target_sync_every);
  c.replay_capacity = j.value("replay_capacity", d.replay_capacity);
  c.update_every = j.value("update_every", d.update_every);
  c.guided_exploration = j.value("guided_exploration", d.guided_exploration);
  c.guided_probability = j.value("guided_probability", d.guided_probability);
  c.seed = j.value("seed", d.seed);
  c.env = j.contains("env") ? j.at("env").get<EnvConfig>() : d.env;
}

Action select_action(std::span<const double> q, double epsilon, std::mt19937_64& rng,
                     std::span<const Action> guidance, double guided_probability) {
  if (q.size() != static_cast<std::size_t>(kNumActions)) {
    throw ContractError("select_action: expected 9 Q-values");
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (epsilon > 0.0 && u(rng) < epsilon) {
    if (!guidance.empty() && u(rng) < guided_probability) {
      std::uniform_int_distribution<std::size_t> pick(0, guidance.size() - 1);
      return guidance[pick(rng)];
    }
    std::uniform_int_distribution<int> pick(0, kNumActions - 1);
    return action_from_index(pick(rng));
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < q.size(); ++i) {
    if (q[i] > q[best]) best = i;
  }
  return action_from_index(static_cast<int>(best));
}

nlohmann::json epoch_stats_json(const EpochStats& s) {
  nlohmann::json j = {{"epoch", s.epoch},
                      {"episodes", s.episodes},
                      {"steps", s.steps},
                      {"updates", s.updates},
                      {"mean_reward", s.mean_return},
                      {"trigger_rate", s.trigger_rate},
                      {"mean_iou_at_trigger", nullptr},
                      {"mean_loss", s.mean_loss},
                      {"epsilon", s.epsilon},
                      {"wall_time_s", s.wall_seconds}};
  if (s.mean_iou_at_trigger) j["mean_iou_at_trigger"] = *s.mean_iou_at_trigger;
  return j;
}

namespace {

std::vector<Box> boxes_of(const ManifestRecord& rec) {
  std::vector<Box> out;
  out.reserve(rec.annotations.size());
  for (const auto& a : rec.annotations) out.push_back(a.box);
  return out;
}

ObsPtr to_obs_ptr(const std::vector<double>& x) {
  return std::make_shared<const ObsVector>(x.begin(), x.end());
}

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void rng_from_string(std::mt19937_64& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  if (!is) throw FormatError("checkpoint: unreadable rng state");
}

void write_latest(const std::filesystem::path& dir, const std::filesystem::path& ckpt) {
  const auto tmp = dir / "latest.tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    f << ckpt.filename().string() << '\n';
    if (!f) throw IoError("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, dir / "latest");
}

}  // namespace

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int epoch) {
  char name[32];
  std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", epoch);
  return dir / name;
}

std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir) {
  std::ifstream f(dir / "latest");
  if (!f) return std::nullopt;
  std::string name;
  std::getline(f, name);
  if (name.empty()) return std::nullopt;
  return dir / name;
}

void fit_normalizer(Mlp& net, const DatasetManifest& data, const FeatureExtractor& extractor,
                    const EnvConfig& env) {
  const int fdim = extractor.dim();
  const int dim = fdim + env.history_dim();
  if (net.input_dim() != dim) throw ContractError("fit_normalizer: net input dim mismatch");
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(dim);
  // Welford over the initial (full-image) state of every training image.
  long n = 0;
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    const GrayImage img = data.load_image(i);
    const auto f = extractor.extract(state_raster(img, full_box(img.width(), img.height())));
    ++n;
    for (int k = 0; k < fdim; ++k) {
      const double d = f[static_cast<std::size_t>(k)] - mean(k);
      mean(k) += d / static_cast<double>(n);
      m2(k) += d * (f[static_cast<std::size_t>(k)] - mean(k));
    }
  }
  Eigen::VectorXd var = n > 1 ? Eigen::VectorXd(m2 / static_cast<double>(n - 1))
                              : Eigen::VectorXd::Zero(dim);
  // Full images look alike, so some components barely vary over them; a
  // floor tied to the typical component scale keeps crops from exploding.
  const double typical = fdim > 0 ? (var.head(fdim).array() + mean.head(fdim).array().square())
                                        .mean()
                                  : 1.0;
  const double floor = std::max(1e-8, 1e-2 * typical);
  Eigen::VectorXd scale(dim);
  for (int k = 0; k < dim; ++k) {
    scale(k) = k < fdim ? 1.0 / std::sqrt(var(k) + floor) : 1.0;
    if (k >= fdim) mean(k) = 0.0;
  }
  net.set_normalizer(std::move(mean), std::move(scale));
}

TrainResult train(const DatasetManifest& data, const FeatureExtractor& extractor,
                  const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  if (data.records.empty()) throw ContractError("train: empty training manifest");

  std::vector<int> sizes;
  sizes.push_back(extractor.dim() + cfg.env.history_dim());
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(kNumActions);

  TrainResult result;
  Mlp& net = result.net;
  AdamState adam;
  std::mt19937_64 rng(derive_seed(cfg.seed, 1));
  int start_epoch = 0;
  long long updates = 0;
  long long env_steps = 0;

  std::optional<std::filesystem::path> resume_from;
  if (opts.resume && !opts.checkpoint_dir.empty()) {
    resume_from = latest_checkpoint(opts.checkpoint_dir);
  }
  if (resume_from) {
    Checkpoint ck = load_checkpoint(*resume_from);
    if (ck.net.layer_sizes() != sizes) {
      throw ContractError("train: checkpoint architecture does not match the config");
    }
    net = std::move(ck.net);
    adam = std::move(ck.adam);
    const auto& p = ck.progress;
    start_epoch = p.at("epoch").get<int>();
    updates = p.at("updates").get<long long>();
    env_steps = p.at("env_steps").get<long long>();
    rng_from_string(rng, p.at("rng").get<std::string>());
  } else {
    net = Mlp::he_init(sizes, derive_seed(cfg.seed, 0));
    fit_normalizer(net, data, extractor, cfg.env);
    adam = AdamState::for_net(net, cfg.learning_rate);
  }
  Mlp target = net;

  if (!opts.checkpoint_dir.empty()) std::filesystem::create_directories(opts.checkpoint_dir);
  std::ofstream log;
  if (!opts.log_path.empty()) {
    if (opts.log_path.has_parent_path()) {
      std::filesystem::create_directories(opts.log_path.parent_path());
    }
    log.open(opts.log_path, resume_from ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot open training log " + opts.log_path.string());
  }

  ReplayBuffer replay(static_cast<std::size_t>(cfg.replay_capacity));
  LocalizationEnv env(extractor, cfg.env);
  const TdConfig td{cfg.gamma, cfg.huber_delta};
  const std::size_t n = data.records.size();
  std::vector<std::size_t> order(n);

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    EpochStats st;
    st.epoch = epoch + 1;
    double return_sum = 0.0, iou_sum = 0.0, loss_sum = 0.0;
    int triggers = 0;
    long long epoch_updates = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const double eps = cfg.epsilon_at(epoch + static_cast<double>(k) / static_cast<double>(n));
      const std::size_t idx = order[k];
      Observation obs = env.reset(data.load_image(idx), boxes_of(data.records[idx]));
      std::vector<double> x = obs.concat();
      ObsPtr state = to_obs_ptr(x);
      double ret = 0.0;
      while (!env.done()) {
        const Eigen::VectorXd q = net.forward(x);
        std::vector<Action> guide;
        if (cfg.guided_exploration) guide = env.guidance_set();
        const Action a = select_action(std::span<const double>(q.data(), q.size()), eps, rng,
                                       guide, cfg.guided_probability);
        auto r = env.step(a);
        ret += r.reward;
        x = r.obs.concat();
        ObsPtr next = r.triggered ? nullptr : to_obs_ptr(x);
        replay.push({state, action_index(a), r.reward, next, r.triggered});
        state = std::move(next);
        ++env_steps;
        ++st.steps;
        if (r.triggered) {
          ++triggers;
          iou_sum += env.current_iou();
        }
        if (replay.size() >= static_cast<std::size_t>(cfg.batch_size) &&
            env_steps % cfg.update_every == 0) {
          const auto batch = replay.sample(static_cast<std::size_t>(cfg.batch_size), rng);
          try {
            loss_sum += td_batch_update(net, adam, batch, target, td);
          } catch (const NonFiniteLossError& e) {
            throw NonFiniteLossError(std::string(e.what()) + " at epoch " +
                                         std::to_string(epoch + 1) + ", step " +
                                         std::to_string(env_steps),
                                     epoch + 1, static_cast<long>(env_steps));
          }
          ++updates;
          ++epoch_updates;
          if (updates % cfg.target_sync_every == 0) sync_target(net, target);
        }
      }
      return_sum += ret;
      ++st.episodes;
    }
    st.updates = epoch_updates;
    st.mean_return = return_sum / static_cast<double>(n);
    st.trigger_rate = static_cast<double>(triggers) / static_cast<double>(n);
    if (triggers > 0) st.mean_iou_at_trigger = iou_sum / triggers;
    st.mean_loss = epoch_updates > 0 ? loss_sum / static_cast<double>(epoch_updates) : 0.0;
    st.epsilon = cfg.epsilon_at(epoch + 1.0);
    st.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!opts.checkpoint_dir.empty()) {
      const nlohmann::json progress = {{"epoch", epoch + 1},
                                       {"updates", updates},
                                       {"env_steps", env_steps},
                                       {"rng", rng_to_string(rng)},
                                       {"train_config", cfg}};
      const auto path = checkpoint_path(opts.checkpoint_dir, epoch + 1);
      save_checkpoint(path, net, adam, progress);
      write_latest(opts.checkpoint_dir, path);
    }
    if (log.is_open()) {
      log << epoch_stats_json(st).dump() << '\n';
      log.flush();
    }
    if (opts.on_epoch) opts.on_epoch(st);
    result.log.push_back(st);
  }
  return result;
}

nlohmann::json predictions_to_json(const PredictionSet& p) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& im : p.images) {
    nlohmann::json dets = nlohmann::json::array();
    for (const auto& d : im.detections) {
      dets.push_back({{"box", {d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max}},
                      {"score", d.score},
                      {"steps", d.steps}});
    }
    images.push_back({{"file", im.file}, {"steps", im.total_steps}, {"detections", dets}});
  }
  return {{"format", "defloc-predictions"}, {"version", 1}, {"images", images}};
}

PredictionSet predictions_from_json(const nlohmann::json& j) {
  PredictionSet p;
  try {
    if (j.at("format").get<std::string>() != "defloc-predictions") {
      throw FormatError("not a prediction file");
    }
    for (const auto& im : j.at("images")) {
      ImagePrediction ip;
      ip.file = im.at("file").get<std::string>();
      ip.total_steps = im.at("steps").get<int>();
      for (const auto& d : im.at("detections")) {
        const auto& b = d.at("box");
        ip.detections.push_back({Box{b.at(0).get<double>(), b.at(1).get<double>(),
                                     b.at(2).get<double>(), b.at(3).get<double>()},
                                 d.at("score").get<double>(), d.at("steps").get<int>()});
      }
      p.images.push_back(std::move(ip));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed prediction file: ") + e.what());
  }
  return p;
}

PredictionSet predict(const DatasetManifest& data, Policy& policy, const FeatureExtractor& extractor,
                      const EnvConfig& env, int max_detections) {
  PredictionSet out;
  out.images.reserve(data.records.size());
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    auto res = detect_sequence(data.load_image(i), boxes_of(data.records[i]), policy, extractor,
                               env, max_detections);
    out.images.push_back({data.records[i].file, std::move(res.detections), res.total_steps,
                          std::move(res.traces)});
  }
  return out;
}

PredictionSet predict(const DatasetManifest& data, const Mlp& net, const FeatureExtractor& extractor,
                      const EnvConfig& env, int max_detections) {
  GreedyQPolicy policy(net);
  return predict(data, policy, extractor, env, max_detections);
}

}  // namespace defloc
