#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "defloc/errors.hpp"
#include "defloc/qnet.hpp"
#include "support/gradcheck.hpp"

using namespace defloc;
namespace fs = std::filesystem;

namespace {

ObsPtr obs(std::initializer_list<float> v) { return std::make_shared<const ObsVector>(v); }

fs::path temp_path(const std::string& name) {
  const auto d = fs::temp_directory_path() / "defloc_test_qnet";
  fs::create_directories(d);
  return d / name;
}

std::vector<double> random_input(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x(static_cast<std::size_t>(n));
  for (auto& v : x) v = g(rng);
  return x;
}

}  // namespace

TEST_CASE("forward") {
  SUBCASE("zero net gives zero Q") {
    const Mlp net({5, 7, 9});
    const auto q = net.forward(std::vector<double>{1, -2, 3, 0.5, 9});
    REQUIRE(q.size() == 9);
    for (Eigen::Index i = 0; i < 9; ++i) CHECK(q(i) == 0.0);
  }

  SUBCASE("hand-computed one hidden layer") {
    Mlp net({2, 2, 9});
    auto& l0 = net.layers()[0];
    l0.weight << 1.0, -1.0, 2.0, 0.5;  // rows = inputs
    l0.bias << 0.5, -1.0;
    auto& l1 = net.layers()[1];
    for (int j = 0; j < 9; ++j) {
      l1.weight(0, j) = 0.1 * j;
      l1.weight(1, j) = 1.0;
      l1.bias(j) = -0.25;
    }
    // hidden = relu([1*1 + 2*2 + 0.5, 1*(-1) + 2*0.5 - 1]) = [5.5, 0]
    const auto q = net.forward(std::vector<double>{1.0, 2.0});
    for (int j = 0; j < 9; ++j) CHECK(q(j) == doctest::Approx(5.5 * 0.1 * j - 0.25));
  }

  SUBCASE("deterministic, batch agrees with single") {
    const Mlp net = Mlp::he_init({6, 8, 9}, 3);
    std::mt19937_64 rng(1);
    Eigen::MatrixXd batch(4, 6);
    std::vector<std::vector<double>> rows;
    for (int r = 0; r < 4; ++r) {
      rows.push_back(random_input(rng, 6));
      for (int c = 0; c < 6; ++c) batch(r, c) = rows.back()[static_cast<std::size_t>(c)];
    }
    const Eigen::MatrixXd qb = net.forward_batch(batch);
    for (int r = 0; r < 4; ++r) {
      const auto q1 = net.forward(rows[static_cast<std::size_t>(r)]);
      CHECK(q1 == net.forward(rows[static_cast<std::size_t>(r)]));
      for (int j = 0; j < 9; ++j) CHECK(q1(j) == doctest::Approx(qb(r, j)));
    }
  }

  SUBCASE("normalizer is applied first") {
    Mlp net({2, 9});
    net.layers()[0].weight(0, 0) = 1.0;
    net.layers()[0].weight(1, 0) = 1.0;
    Eigen::VectorXd mean(2), scale(2);
    mean << 1.0, 2.0;
    scale << 2.0, 0.5;
    net.set_normalizer(mean, scale);
    CHECK(net.forward(std::vector<double>{3.0, 6.0})(0) == doctest::Approx(2 * 2.0 + 4 * 0.5));
  }

  SUBCASE("dimension errors") {
    const Mlp net({3, 9});
    CHECK_THROWS_AS(net.forward(std::vector<double>{1, 2}), ContractError);
    CHECK_THROWS_AS(Mlp({3}), ContractError);
    CHECK_THROWS_AS(Mlp({3, 0, 9}), ContractError);
  }
}

TEST_CASE("huber") {
  CHECK(huber(0.5) == doctest::Approx(0.125));
  CHECK(huber(3.0) == doctest::Approx(2.5));
  CHECK(huber(-3.0) == doctest::Approx(2.5));
}

TEST_CASE("td loss") {
  Mlp net({2, 4, 9});
  const Mlp target = net;
  const TdConfig cfg;

  SUBCASE("terminal zero reward on a zero net") {
    std::vector<Transition> b = {{obs({1, 2}), 3, 0.0, nullptr, true}, {obs({0, 1}), 8, 0.0, nullptr, true}};
    CHECK(td_loss(net, b, target, cfg) == 0.0);
    AdamState adam = AdamState::for_net(net);
    CHECK(td_batch_update(net, adam, b, target, cfg) == 0.0);
  }

  SUBCASE("single terminal reward 3") {
    std::vector<Transition> b = {{obs({1, 2}), 0, 3.0, nullptr, true}};
    CHECK(td_loss(net, b, target, cfg) == doctest::Approx(2.5));
    AdamState adam = AdamState::for_net(net);
    CHECK(td_batch_update(net, adam, b, target, cfg) == doctest::Approx(2.5));
    CHECK(adam.step == 1);
    CHECK(td_loss(net, b, target, cfg) < 2.5);
  }

  SUBCASE("bootstrap uses the target network max") {
    Mlp t({2, 9});
    t.layers()[0].bias(4) = 2.0;
    Mlp zero({2, 9});
    std::vector<Transition> b = {{obs({0, 0}), 0, 1.0, obs({0, 0}), false}};
    // y = 1 + 0.9 * 2 = 2.8, Q = 0, huber(2.8) = 2.3
    CHECK(td_loss(zero, b, t, cfg) == doctest::Approx(2.3));
  }

  SUBCASE("errors") {
    std::vector<Transition> empty;
    CHECK_THROWS_AS(td_loss(net, empty, target, cfg), ContractError);
    std::vector<Transition> wrong = {{obs({1, 2, 3}), 0, 0.0, nullptr, true}};
    CHECK_THROWS_AS(td_loss(net, wrong, target, cfg), ContractError);
    std::vector<Transition> blow = {{obs({1, 2}), 0, std::numeric_limits<double>::infinity(), nullptr, true}};
    AdamState adam = AdamState::for_net(net);
    CHECK_THROWS_AS(td_batch_update(net, adam, blow, target, cfg), NonFiniteLossError);
  }
}

TEST_CASE("gradients match finite differences") {
  SUBCASE("16-parameter net") {
    // 1 -> 2 -> 4 has (1+1)*2 + (2+1)*4 = 16 parameters.
    Mlp net = Mlp::he_init({1, 2, 4}, 9);
    CHECK(net.num_params() == 16);
    const Mlp target = Mlp::he_init({1, 2, 4}, 10);
    std::vector<Transition> b = {{obs({0.7f}), 1, 1.0, obs({-0.3f}), false},
                                 {obs({-1.2f}), 3, -3.0, nullptr, true}};
    ParamTensors g;
    td_gradients(net, b, target, TdConfig{}, g);
    std::size_t k = 0;
    for (const auto& l : g) {
      std::vector<double> flat;
      for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) flat.push_back(l.weight(r, c));
      for (Eigen::Index r = 0; r < l.bias.size(); ++r) flat.push_back(l.bias(r));
      for (double a : flat) {
        const double orig = net.param(k);
        net.param(k) = orig + 1e-5;
        const double lp = td_loss(net, b, target, TdConfig{});
        net.param(k) = orig - 1e-5;
        const double lm = td_loss(net, b, target, TdConfig{});
        net.param(k) = orig;
        const double n = (lp - lm) / 2e-5;
        CHECK(std::abs(a - n) <= 1e-4 * std::max({std::abs(a), std::abs(n), 1e-5}));
        ++k;
      }
    }
    CHECK(k == 16);
  }

  SUBCASE("randomized small nets") {
    for (std::uint64_t s = 0; s < 30; ++s) {
      const auto r = testing::check_random_net(s);
      CHECK(r.params <= 64);
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("regression task converges") {
  // Q-values of a random linear function, learned from terminal transitions.
  std::mt19937_64 rng(21);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd w(4, 9);
  for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = g(rng);
  Mlp net = Mlp::he_init({4, 32, 9}, 2);
  const Mlp target = net;
  AdamState adam = AdamState::for_net(net, 3e-3);
  std::uniform_int_distribution<int> act(0, 8);
  auto make_batch = [&] {
    std::vector<Transition> b;
    for (int i = 0; i < 32; ++i) {
      Eigen::RowVectorXd x(4);
      for (int k = 0; k < 4; ++k) x(k) = g(rng);
      const int a = act(rng);
      b.push_back({std::make_shared<const ObsVector>(x.data(), x.data() + 4), a, (x * w)(a), nullptr, true});
    }
    return b;
  };
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 1000; ++step) {
    const double l = td_batch_update(net, adam, make_batch(), target, TdConfig{});
    if (step < 50) first += l / 50;
    if (step >= 950) last += l / 50;
  }
  CHECK(last * 10.0 <= first);
}

TEST_CASE("target sync") {
  Mlp net = Mlp::he_init({3, 5, 9}, 1);
  Mlp target({3, 5, 9});
  sync_target(net, target);
  CHECK(target == net);
  const Mlp snapshot = target;
  net.param(0) += 1.0;
  CHECK(target == snapshot);
  CHECK_FALSE(target == net);
}

TEST_CASE("checkpoints") {
  Mlp net = Mlp::he_init({6, 10, 9}, 4);
  Eigen::VectorXd mean = Eigen::VectorXd::Constant(6, 0.1), scale = Eigen::VectorXd::Constant(6, 2.0);
  net.set_normalizer(mean, scale);
  AdamState adam = AdamState::for_net(net, 5e-4);
  std::vector<Transition> b = {{std::make_shared<const ObsVector>(ObsVector{1, 2, 3, 4, 5, 6}), 2, 1.0, nullptr, true}};
  td_batch_update(net, adam, b, net, TdConfig{});
  const auto path = temp_path("a.ckpt");
  save_checkpoint(path, net, adam, {{"epoch", 3}});

  SUBCASE("round trip") {
    const Checkpoint ck = load_checkpoint(path);
    CHECK(ck.net == net);
    CHECK(ck.adam.step == adam.step);
    CHECK(ck.adam.lr == 5e-4);
    CHECK(ck.progress.at("epoch") == 3);
    std::mt19937_64 rng(8);
    for (int i = 0; i < 100; ++i) {
      const auto x = random_input(rng, 6);
      CHECK(ck.net.forward(x) == net.forward(x));
    }
    save_checkpoint(temp_path("b.ckpt"), ck.net, ck.adam, ck.progress);
    std::ifstream fa(path, std::ios::binary), fb(temp_path("b.ckpt"), std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
    CHECK(sa == sb);
  }

  SUBCASE("corruption is detected") {
    std::string bytes;
    {
      std::ifstream f(path, std::ios::binary);
      bytes.assign((std::istreambuf_iterator<char>(f)), {});
    }
    auto write = [&](const std::string& s) {
      std::ofstream f(temp_path("bad.ckpt"), std::ios::binary | std::ios::trunc);
      f << s;
    };
    std::string magic = bytes;
    magic[0] = 'X';
    write(magic);
    try {
      load_checkpoint(temp_path("bad.ckpt"));
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
    std::string flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x40;
    write(flipped);
    CHECK_THROWS_AS(load_checkpoint(temp_path("bad.ckpt")), FormatError);
    write(bytes.substr(0, bytes.size() - 20));
    CHECK_THROWS_AS(load_checkpoint(temp_path("bad.ckpt")), FormatError);
    std::string version = bytes;
    version[8] = 7;
    write(version);
    CHECK_THROWS_AS(load_checkpoint(temp_path("bad.ckpt")), FormatError);
    CHECK_THROWS_AS(load_checkpoint(temp_path("missing.ckpt")), IoError);
  }
}
