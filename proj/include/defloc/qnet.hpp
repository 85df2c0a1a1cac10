#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace defloc {

// Observations are stored once and shared between consecutive transitions.
using ObsVector = std::vector<float>;
using ObsPtr = std::shared_ptr<const ObsVector>;

struct Transition {
  ObsPtr state;
  int action = 0;
  double reward = 0.0;
  ObsPtr next_state;  // may be null when terminal
  bool terminal = false;
};

// Fully connected network: rectifier on hidden layers, identity on the
// output. An optional frozen affine normalizer is applied to the input
// before the first layer.
class Mlp {
 public:
  struct Layer {
    Eigen::MatrixXd weight;  // fan_in x fan_out
    Eigen::VectorXd bias;    // fan_out
  };

  Mlp() = default;
  // Zero-initialized parameters.
  explicit Mlp(std::vector<int> layer_sizes);
  // Gaussian weights with std sqrt(2 / fan_in), zero biases.
  static Mlp he_init(std::vector<int> layer_sizes, std::uint64_t seed);

  const std::vector<int>& layer_sizes() const { return sizes_; }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

  void set_normalizer(Eigen::VectorXd mean, Eigen::VectorXd scale);
  bool has_normalizer() const { return norm_mean_.size() > 0; }
  const Eigen::VectorXd& normalizer_mean() const { return norm_mean_; }
  const Eigen::VectorXd& normalizer_scale() const { return norm_scale_; }

  Eigen::VectorXd forward(std::span<const double> x) const;
  // Rows of inputs are samples; returns batch x output_dim.
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& inputs) const;

  std::size_t num_params() const;
  // Flat view in layer order, weights (row-major fan_in x fan_out) then bias.
  double& param(std::size_t i);
  double param(std::size_t i) const;
  bool all_finite() const;

  friend bool operator==(const Mlp& a, const Mlp& b);

 private:
  Eigen::MatrixXd normalize(const Eigen::MatrixXd& inputs) const;

  std::vector<int> sizes_;
  std::vector<Layer> layers_;
  Eigen::VectorXd norm_mean_;
  Eigen::VectorXd norm_scale_;
};

// Per-parameter-shaped gradients or moments.
using ParamTensors = std::vector<Mlp::Layer>;

ParamTensors zeros_like(const Mlp& net);

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  ParamTensors m;
  ParamTensors v;

  static AdamState for_net(const Mlp& net, double lr = 1e-4);
  void apply(Mlp& net, const ParamTensors& grads);
};

double huber(double x, double delta = 1.0);

struct TdConfig {
  double gamma = 0.9;
  double huber_delta = 1.0;
};

// Mean Huber TD error over the batch. Targets come from target_net.
double td_loss(const Mlp& net, std::span<const Transition> batch,
               const Mlp& target_net, const TdConfig& cfg);

// Loss and its gradient with respect to every parameter of net.
double td_gradients(const Mlp& net, std::span<const Transition> batch,
                    const Mlp& target_net, const TdConfig& cfg,
                    ParamTensors& grads);

// One Adam step on the TD loss; returns the loss before the step. Throws
// NonFiniteLossError (epoch/step -1) if the loss or parameters blow up.
double td_batch_update(Mlp& net, AdamState& adam, std::span<const Transition> batch,
                       const Mlp& target_net, const TdConfig& cfg);

void sync_target(const Mlp& net, Mlp& target_net);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Mlp net;
  AdamState adam;
  nlohmann::json progress = nlohmann::json::object();  // training position, rng state, ...
};

void save_checkpoint(const std::filesystem::path& path, const Mlp& net,
                     const AdamState& adam,
                     const nlohmann::json& progress = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace defloc
