#include "defloc/qnet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>

#include "defloc/errors.hpp"

namespace defloc {

// --- Mlp ---------------------------------------------------------------------

Mlp::Mlp(std::vector<int> layer_sizes) : sizes_(std::move(layer_sizes)) {
  if (sizes_.size() < 2) throw ContractError("Mlp: need at least input and output sizes");
  for (int s : sizes_) {
    if (s <= 0) throw ContractError("Mlp: layer sizes must be positive");
  }
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    layers_.push_back({Eigen::MatrixXd::Zero(sizes_[l], sizes_[l + 1]),
                       Eigen::VectorXd::Zero(sizes_[l + 1])});
  }
}

Mlp Mlp::he_init(std::vector<int> layer_sizes, std::uint64_t seed) {
  Mlp net(std::move(layer_sizes));
  std::mt19937_64 rng(seed);
  for (auto& layer : net.layers_) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / layer.weight.rows()));
    for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) {
      for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) layer.weight(i, j) = dist(rng);
    }
  }
  return net;
}

void Mlp::set_normalizer(Eigen::VectorXd mean, Eigen::VectorXd scale) {
  if (mean.size() != input_dim() || scale.size() != input_dim()) {
    throw ContractError("Mlp: normalizer size does not match input dim");
  }
  norm_mean_ = std::move(mean);
  norm_scale_ = std::move(scale);
}

Eigen::MatrixXd Mlp::normalize(const Eigen::MatrixXd& inputs) const {
  if (!has_normalizer()) return inputs;
  return (inputs.rowwise() - norm_mean_.transpose()).array().rowwise() *
         norm_scale_.transpose().array();
}

Eigen::MatrixXd Mlp::forward_batch(const Eigen::MatrixXd& inputs) const {
  if (inputs.cols() != input_dim()) {
    throw ContractError("Mlp: input has " + std::to_string(inputs.cols()) +
                        " columns, expected " + std::to_string(input_dim()));
  }
  Eigen::MatrixXd a = normalize(inputs);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Eigen::MatrixXd z = a * layers_[l].weight;
    z.rowwise() += layers_[l].bias.transpose();
    if (l + 1 < layers_.size()) z = z.cwiseMax(0.0);
    a = std::move(z);
  }
  return a;
}

Eigen::VectorXd Mlp::forward(std::span<const double> x) const {
  if (static_cast<int>(x.size()) != input_dim()) {
    throw ContractError("Mlp: input length " + std::to_string(x.size()) +
                        " does not match input dim " + std::to_string(input_dim()));
  }
  const Eigen::Map<const Eigen::RowVectorXd> row(x.data(), static_cast<Eigen::Index>(x.size()));
  return forward_batch(row).row(0).transpose();
}

std::size_t Mlp::num_params() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

double& Mlp::param(std::size_t i) {
  for (auto& l : layers_) {
    const auto nw = static_cast<std::size_t>(l.weight.size());
    if (i < nw) {
      const auto cols = static_cast<std::size_t>(l.weight.cols());
      return l.weight(static_cast<Eigen::Index>(i / cols), static_cast<Eigen::Index>(i % cols));
    }
    i -= nw;
    if (i < static_cast<std::size_t>(l.bias.size())) return l.bias(static_cast<Eigen::Index>(i));
    i -= static_cast<std::size_t>(l.bias.size());
  }
  throw ContractError("Mlp: parameter index out of range");
}

double Mlp::param(std::size_t i) const { return const_cast<Mlp*>(this)->param(i); }

bool Mlp::all_finite() const {
  for (const auto& l : layers_) {
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  }
  return true;
}

bool operator==(const Mlp& a, const Mlp& b) {
  if (a.sizes_ != b.sizes_ || a.norm_mean_.size() != b.norm_mean_.size()) return false;
  if (a.has_normalizer() &&
      (a.norm_mean_ != b.norm_mean_ || a.norm_scale_ != b.norm_scale_)) {
    return false;
  }
  for (std::size_t l = 0; l < a.layers_.size(); ++l) {
    if (a.layers_[l].weight != b.layers_[l].weight || a.layers_[l].bias != b.layers_[l].bias) {
      return false;
    }
  }
  return true;
}

ParamTensors zeros_like(const Mlp& net) {
  ParamTensors t;
  for (const auto& l : net.layers()) {
    t.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()),
                 Eigen::VectorXd::Zero(l.bias.size())});
  }
  return t;
}

// --- Adam ------------------------------------------------------------------

AdamState AdamState::for_net(const Mlp& net, double lr) {
  AdamState s;
  s.lr = lr;
  s.m = zeros_like(net);
  s.v = zeros_like(net);
  return s;
}

void AdamState::apply(Mlp& net, const ParamTensors& grads) {
  if (m.size() != net.layers().size()) {
    m = zeros_like(net);
    v = zeros_like(net);
  }
  ++step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  auto update = [&](auto& p, auto& mm, auto& vv, const auto& g) {
    mm = beta1 * mm + (1.0 - beta1) * g;
    vv = beta2 * vv + (1.0 - beta2) * g.cwiseProduct(g);
    p.array() -= lr * (mm.array() / c1) / ((vv.array() / c2).sqrt() + eps);
  };
  for (std::size_t l = 0; l < grads.size(); ++l) {
    auto& layer = net.layers()[l];
    update(layer.weight, m[l].weight, v[l].weight, grads[l].weight);
    update(layer.bias, m[l].bias, v[l].bias, grads[l].bias);
  }
}

// --- TD loss ---------------------------------------------------------------

double huber(double x, double delta) {
  const double a = std::abs(x);
  return a <= delta ? 0.5 * x * x : delta * (a - 0.5 * delta);
}

namespace {

Eigen::MatrixXd stack(std::span<const Transition> batch, bool next, int dim) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(batch.size()), dim);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const ObsPtr& obs = next ? batch[i].next_state : batch[i].state;
    if (!obs || static_cast<int>(obs->size()) != dim) {
      throw ContractError("td update: observation missing or not sized input_dim");
    }
    for (int k = 0; k < dim; ++k) x(static_cast<Eigen::Index>(i), k) = (*obs)[k];
  }
  return x;
}

std::vector<double> td_targets(std::span<const Transition> batch,
                               const Mlp& target_net, const TdConfig& cfg) {
  std::vector<double> y(batch.size());
  std::vector<Transition> live;
  std::vector<std::size_t> live_idx;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    y[i] = batch[i].reward;
    if (!batch[i].terminal) {
      live.push_back(batch[i]);
      live_idx.push_back(i);
    }
  }
  if (!live.empty()) {
    const Eigen::MatrixXd q_next =
        target_net.forward_batch(stack(live, true, target_net.input_dim()));
    for (std::size_t j = 0; j < live.size(); ++j) {
      y[live_idx[j]] += cfg.gamma * q_next.row(static_cast<Eigen::Index>(j)).maxCoeff();
    }
  }
  return y;
}

void check_batch(std::span<const Transition> batch, const Mlp& net) {
  if (batch.empty()) throw ContractError("td update: empty batch");
  for (const auto& t : batch) {
    if (t.action < 0 || t.action >= net.output_dim()) {
      throw ContractError("td update: action index out of range");
    }
  }
}

}  // namespace

double td_loss(const Mlp& net, std::span<const Transition> batch,
               const Mlp& target_net, const TdConfig& cfg) {
  check_batch(batch, net);
  const auto y = td_targets(batch, target_net, cfg);
  const Eigen::MatrixXd q = net.forward_batch(stack(batch, false, net.input_dim()));
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    loss += huber(q(static_cast<Eigen::Index>(i), batch[i].action) - y[i], cfg.huber_delta);
  }
  return loss / static_cast<double>(batch.size());
}

double td_gradients(const Mlp& net, std::span<const Transition> batch,
                    const Mlp& target_net, const TdConfig& cfg,
                    ParamTensors& grads) {
  check_batch(batch, net);
  const auto y = td_targets(batch, target_net, cfg);
  const auto& layers = net.layers();
  const std::size_t L = layers.size();
  const auto B = static_cast<Eigen::Index>(batch.size());

  // acts[l] is the input of layer l; zs[l] its pre-activation.
  std::vector<Eigen::MatrixXd> acts(L);
  std::vector<Eigen::MatrixXd> zs(L);
  {
    Eigen::MatrixXd x = stack(batch, false, net.input_dim());
    if (net.has_normalizer()) {
      x = (x.rowwise() - net.normalizer_mean().transpose()).array().rowwise() *
          net.normalizer_scale().transpose().array();
    }
    acts[0] = std::move(x);
  }
  for (std::size_t l = 0; l < L; ++l) {
    zs[l] = acts[l] * layers[l].weight;
    zs[l].rowwise() += layers[l].bias.transpose();
    if (l + 1 < L) acts[l + 1] = zs[l].cwiseMax(0.0);
  }

  Eigen::MatrixXd delta = Eigen::MatrixXd::Zero(B, net.output_dim());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto& t = batch[static_cast<std::size_t>(i)];
    const double diff = zs[L - 1](i, t.action) - y[static_cast<std::size_t>(i)];
    loss += huber(diff, cfg.huber_delta);
    delta(i, t.action) = std::clamp(diff, -cfg.huber_delta, cfg.huber_delta) / static_cast<double>(B);
  }
  loss /= static_cast<double>(B);

  if (grads.size() != L) grads = zeros_like(net);
  for (std::size_t l = L; l-- > 0;) {
    grads[l].weight.noalias() = acts[l].transpose() * delta;
    grads[l].bias = delta.colwise().sum().transpose();
    if (l == 0) break;
    Eigen::MatrixXd back = delta * layers[l].weight.transpose();
    delta = back.cwiseProduct((zs[l - 1].array() > 0.0).cast<double>().matrix());
  }
  return loss;
}

double td_batch_update(Mlp& net, AdamState& adam, std::span<const Transition> batch,
                       const Mlp& target_net, const TdConfig& cfg) {
  ParamTensors grads;
  const double loss = td_gradients(net, batch, target_net, cfg, grads);
  if (!std::isfinite(loss)) {
    throw NonFiniteLossError("non-finite TD loss (learning rate too high?)", -1, -1);
  }
  adam.apply(net, grads);
  if (!net.all_finite()) {
    throw NonFiniteLossError("non-finite network parameters after Adam step", -1, -1);
  }
  return loss;
}

void sync_target(const Mlp& net, Mlp& target_net) { target_net = net; }

// --- checkpoints -----------------------------------------------------------
//
// Little-endian layout:
//   8  bytes  magic "DFLQNET\0"
//   u32       format version
//   u32       number of layer sizes n, then n x u32 sizes
//   u8        normalizer flag; if 1: f64[input] mean, f64[input] scale
//   f64[...]  parameters, per layer: weight row-major (fan_in x fan_out), bias
//   f64 x 4   adam lr, beta1, beta2, eps;  u64 adam step
//   f64[...]  adam first moments, then second moments (parameter order)
//   u32       length of progress JSON, then its UTF-8 bytes
//   u64       FNV-1a hash of every preceding byte

namespace {

constexpr char kMagic[8] = {'D', 'F', 'L', 'Q', 'N', 'E', 'T', '\0'};

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    bytes.insert(bytes.end(), b, b + sizeof(T));
  }
  void put_raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    bytes.insert(bytes.end(), c, c + n);
  }
  void put_tensors(const ParamTensors& t) {
    for (const auto& l : t) {
      for (Eigen::Index i = 0; i < l.weight.rows(); ++i) {
        for (Eigen::Index j = 0; j < l.weight.cols(); ++j) put<double>(l.weight(i, j));
      }
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) put<double>(l.bias(i));
    }
  }
  std::vector<unsigned char> bytes;
};

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& b, std::size_t end, std::string path)
      : bytes_(b), end_(end), path_(std::move(path)) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char b[sizeof(T)];
    std::memcpy(b, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void get_tensors(ParamTensors& t) {
    for (auto& l : t) {
      for (Eigen::Index i = 0; i < l.weight.rows(); ++i) {
        for (Eigen::Index j = 0; j < l.weight.cols(); ++j) l.weight(i, j) = get<double>();
      }
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = get<double>();
    }
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw FormatError("checkpoint " + path_ + " is truncated");
  }
  const std::vector<unsigned char>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string path_;
};

std::uint64_t fnv1a(const unsigned char* p, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Mlp& net,
                     const AdamState& adam, const nlohmann::json& progress) {
  ByteWriter w;
  w.put_raw(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(net.layer_sizes().size()));
  for (int s : net.layer_sizes()) w.put<std::uint32_t>(static_cast<std::uint32_t>(s));
  w.put<std::uint8_t>(net.has_normalizer() ? 1 : 0);
  if (net.has_normalizer()) {
    for (Eigen::Index i = 0; i < net.normalizer_mean().size(); ++i) w.put<double>(net.normalizer_mean()(i));
    for (Eigen::Index i = 0; i < net.normalizer_scale().size(); ++i) w.put<double>(net.normalizer_scale()(i));
  }
  w.put_tensors(net.layers());
  w.put<double>(adam.lr);
  w.put<double>(adam.beta1);
  w.put<double>(adam.beta2);
  w.put<double>(adam.eps);
  w.put<std::uint64_t>(adam.step);
  w.put_tensors(adam.m.size() == net.layers().size() ? adam.m : zeros_like(net));
  w.put_tensors(adam.v.size() == net.layers().size() ? adam.v : zeros_like(net));
  const std::string meta = progress.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
  w.put_raw(meta.data(), meta.size());
  w.put<std::uint64_t>(fnv1a(w.bytes.data(), w.bytes.size()));

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(w.bytes.data()),
              static_cast<std::streamsize>(w.bytes.size()));
    if (!out) throw IoError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());
  const std::string where = path.string();
  if (bytes.size() < sizeof(kMagic) + 4 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("checkpoint " + where + ": bad magic bytes (expected defloc Q-network format version " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  ByteReader header(bytes, bytes.size(), where);
  header.get_string(sizeof(kMagic));
  const auto version = header.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint " + where + ": format version " + std::to_string(version) +
                      ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  if (bytes.size() < 8 + sizeof(kMagic) + 4) throw FormatError("checkpoint " + where + " is truncated");
  const std::size_t body = bytes.size() - 8;
  ByteReader tail(bytes, bytes.size(), where);
  tail.get_string(body);
  if (tail.get<std::uint64_t>() != fnv1a(bytes.data(), body)) {
    throw FormatError("checkpoint " + where + ": checksum mismatch (format version " +
                      std::to_string(version) + "), file is corrupt");
  }

  ByteReader r(bytes, body, where);
  r.get_string(sizeof(kMagic));
  r.get<std::uint32_t>();
  const auto n_sizes = r.get<std::uint32_t>();
  if (n_sizes < 2 || n_sizes > 64) throw FormatError("checkpoint " + where + ": implausible layer count");
  std::vector<int> sizes;
  for (std::uint32_t i = 0; i < n_sizes; ++i) sizes.push_back(static_cast<int>(r.get<std::uint32_t>()));
  Checkpoint ck;
  ck.net = Mlp(sizes);
  if (r.get<std::uint8_t>() == 1) {
    Eigen::VectorXd mean(sizes.front());
    Eigen::VectorXd scale(sizes.front());
    for (Eigen::Index i = 0; i < mean.size(); ++i) mean(i) = r.get<double>();
    for (Eigen::Index i = 0; i < scale.size(); ++i) scale(i) = r.get<double>();
    ck.net.set_normalizer(std::move(mean), std::move(scale));
  }
  r.get_tensors(ck.net.layers());
  ck.adam = AdamState::for_net(ck.net);
  ck.adam.lr = r.get<double>();
  ck.adam.beta1 = r.get<double>();
  ck.adam.beta2 = r.get<double>();
  ck.adam.eps = r.get<double>();
  ck.adam.step = r.get<std::uint64_t>();
  r.get_tensors(ck.adam.m);
  r.get_tensors(ck.adam.v);
  const auto meta_len = r.get<std::uint32_t>();
  try {
    ck.progress = nlohmann::json::parse(r.get_string(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + where + ": bad progress block: " + e.what());
  }
  if (r.pos() != body) throw FormatError("checkpoint " + where + ": trailing bytes");
  return ck;
}

}  // namespace defloc
