#pragma once

// Finite-difference oracle for the TD gradients, shared by the unit and
// acceptance suites.

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <vector>

#include "defloc/qnet.hpp"

namespace defloc::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t params = 0;
};

// Random net with at most max_params parameters, a random mixed batch and a
// random target net; compares td_gradients with central differences of
// td_loss. Relative error per parameter is |a - n| / max(|a|, |n|, floor).
inline GradCheck check_random_net(std::uint64_t seed, std::size_t max_params = 64,
                                  double h = 1e-5, double floor = 1e-5) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> small(1, 4);
  std::vector<int> sizes;
  while (true) {
    sizes = {small(rng)};
    const int hidden_layers = small(rng) % 3;
    for (int i = 0; i < hidden_layers; ++i) sizes.push_back(small(rng));
    sizes.push_back(small(rng));
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) n += static_cast<std::size_t>((sizes[l] + 1) * sizes[l + 1]);
    if (n <= max_params) break;
  }
  Mlp net = Mlp::he_init(sizes, seed * 2 + 1);
  Mlp target = Mlp::he_init(sizes, seed * 2 + 2);
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::size_t i = 0; i < net.num_params(); ++i) net.param(i) += 0.1 * g(rng);

  const int in = sizes.front(), out = sizes.back();
  std::uniform_int_distribution<int> act(0, out - 1);
  std::vector<Transition> batch;
  const int b = 1 + small(rng);
  for (int i = 0; i < b; ++i) {
    auto s = std::make_shared<ObsVector>();
    auto s2 = std::make_shared<ObsVector>();
    for (int k = 0; k < in; ++k) {
      s->push_back(static_cast<float>(g(rng)));
      s2->push_back(static_cast<float>(g(rng)));
    }
    Transition t;
    t.state = s;
    t.action = act(rng);
    t.reward = 3.0 * g(rng);
    t.terminal = (i % 2) == 0;
    if (!t.terminal) t.next_state = s2;
    batch.push_back(t);
  }
  TdConfig cfg;
  cfg.gamma = 0.9;
  ParamTensors grads;
  td_gradients(net, batch, target, cfg, grads);
  std::vector<double> analytic;
  for (const auto& l : grads) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) analytic.push_back(l.weight(r, c));
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) analytic.push_back(l.bias(r));
  }
  GradCheck res;
  res.params = net.num_params();
  for (std::size_t i = 0; i < net.num_params(); ++i) {
    const double orig = net.param(i);
    net.param(i) = orig + h;
    const double lp = td_loss(net, batch, target, cfg);
    net.param(i) = orig - h;
    const double lm = td_loss(net, batch, target, cfg);
    net.param(i) = orig;
    const double numeric = (lp - lm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    res.max_rel_error = std::max(res.max_rel_error, std::abs(analytic[i] - numeric) / denom);
  }
  return res;
}

}  // namespace defloc::testing
