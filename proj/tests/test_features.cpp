#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "defloc/errors.hpp"
#include "defloc/features.hpp"
#include "defloc/geometry.hpp"

using namespace defloc;
namespace fs = std::filesystem;

namespace {

GrayImage random_state(std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> d(kStateSize * kStateSize);
  for (auto& v : d) v = u(rng);
  return GrayImage(kStateSize, kStateSize, std::move(d));
}

bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// Index of (block by, bx, cell k in the block, bin b) in the descriptor.
std::size_t hog_index(int by, int bx, int k, int b) {
  return ((static_cast<std::size_t>(by) * GradientHistogramExtractor::kBlocks + bx) * 4 + k) *
             GradientHistogramExtractor::kBins + b;
}

// Straightforward descriptor with std::atan2, used as the reference.
std::vector<double> reference_hog(const GrayImage& img) {
  constexpr int N = kStateSize, C = 16, nc = N / C, nb = 9;
  std::vector<double> cells(nc * nc * nb, 0.0);
  for (int y = 0; y < N; ++y) {
    for (int x = 0; x < N; ++x) {
      const double gx = img.at(std::min(N - 1, x + 1), y) - img.at(std::max(0, x - 1), y);
      const double gy = img.at(x, std::min(N - 1, y + 1)) - img.at(x, std::max(0, y - 1));
      double deg = std::atan2(gy, gx) * 180.0 / M_PI;
      if (deg < 0) deg += 180.0;
      if (deg >= 180.0) deg -= 180.0;
      const double pos = deg / 20.0 - 0.5;
      const double fl = std::floor(pos);
      const int b0 = (static_cast<int>(fl) + nb) % nb;
      const double mag = std::hypot(gx, gy);
      cells[((y / C) * nc + x / C) * nb + b0] += mag * (1.0 - (pos - fl));
      cells[((y / C) * nc + x / C) * nb + (b0 + 1) % nb] += mag * (pos - fl);
    }
  }
  std::vector<double> out;
  for (int by = 0; by + 1 < nc; ++by) {
    for (int bx = 0; bx + 1 < nc; ++bx) {
      std::vector<double> block;
      for (int cy = by; cy < by + 2; ++cy)
        for (int cx = bx; cx < bx + 2; ++cx)
          for (int b = 0; b < nb; ++b) block.push_back(cells[(cy * nc + cx) * nb + b]);
      double n2 = 1e-6;
      for (double v : block) n2 += v * v;
      for (double v : block) out.push_back(v / std::sqrt(n2));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("registry") {
  CHECK(make_extractor("raw28")->dim() == 784);
  CHECK(make_extractor("hog")->dim() == 13 * 13 * 4 * 9);
  CHECK(make_extractor("hog")->dim() == 6084);
  CHECK(make_extractor("randconv")->dim() == 512);
  CHECK(make_extractor("raw28", {{"side", 14}})->dim() == 196);
  try {
    make_extractor("nope");
    FAIL("expected an error");
  } catch (const ContractError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("raw28") != std::string::npos);
    CHECK(msg.find("hog") != std::string::npos);
    CHECK(msg.find("randconv") != std::string::npos);
  }
  CHECK_THROWS_AS(make_extractor("raw28", {{"side", "big"}}), ContractError);
}

TEST_CASE("input contract") {
  const auto ex = make_extractor("raw28");
  CHECK_THROWS_AS(ex->extract(GrayImage(100, 224, 0.5)), ContractError);
  CHECK_NOTHROW(ex->extract(GrayImage(224, 224, 0.5)));
}

TEST_CASE("raw downsample") {
  const auto ex = make_extractor("raw28");
  for (double v : ex->extract(GrayImage(224, 224, 0.5))) CHECK(v == doctest::Approx(0.5));
  const GrayImage x = random_state(1);
  const auto fx = ex->extract(x);
  for (double a : {0.25, 0.5, 1.0}) {
    std::vector<double> scaled(x.pixels().begin(), x.pixels().end());
    for (auto& v : scaled) v *= a;
    const auto fa = ex->extract(GrayImage(224, 224, std::move(scaled)));
    for (std::size_t i = 0; i < fx.size(); ++i) CHECK(fa[i] == doctest::Approx(a * fx[i]).epsilon(1e-9));
  }
}

TEST_CASE("gradient histogram") {
  const auto ex = make_extractor("hog");

  SUBCASE("constant image gives zeros") {
    for (double v : ex->extract(GrayImage(224, 224, 0.3))) CHECK(v == 0.0);
  }

  SUBCASE("additive shift invariance") {
    const GrayImage x = random_state(2, 0.1, 0.7);
    std::vector<double> shifted(x.pixels().begin(), x.pixels().end());
    for (auto& v : shifted) v += 0.2;
    const auto a = ex->extract(x);
    const auto b = ex->extract(GrayImage(224, 224, std::move(shifted)));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
  }

  SUBCASE("vertical step edge, hand-derived") {
    // Columns < 112 are 0, the rest 1. Central differences give gx = 1 at
    // columns 111 and 112 only; orientation 0 deg sits between bins 8 and 0
    // so each pixel adds 0.5 to both. Cells 6 and 7 (columns 96..127) get
    // 16 * 0.5 = 8 in bins 0 and 8.
    std::vector<double> d(224 * 224, 0.0);
    for (int y = 0; y < 224; ++y)
      for (int x = 112; x < 224; ++x) d[static_cast<std::size_t>(y) * 224 + x] = 1.0;
    const auto f = ex->extract(GrayImage(224, 224, std::move(d)));
    // Block (by 0, bx 5): cells 5 and 6 in two rows; only cell 6 is non-zero.
    // norm = sqrt(4 * 8^2) = 16, so each entry is 0.5.
    const double e1 = 8.0 / std::sqrt(256.0 + 1e-6);
    CHECK(f[hog_index(0, 5, 1, 0)] == doctest::Approx(e1));  // cell (0, 6)
    CHECK(f[hog_index(0, 5, 1, 8)] == doctest::Approx(e1));
    CHECK(f[hog_index(0, 5, 0, 0)] == 0.0);                  // cell (0, 5)
    // Block (0, 6): four non-zero cells, norm sqrt(8 * 64).
    const double e2 = 8.0 / std::sqrt(512.0 + 1e-6);
    for (int k = 0; k < 4; ++k) {
      CHECK(f[hog_index(0, 6, k, 0)] == doctest::Approx(e2));
      CHECK(f[hog_index(0, 6, k, 8)] == doctest::Approx(e2));
      for (int b = 1; b < 8; ++b) CHECK(f[hog_index(0, 6, k, b)] == 0.0);
    }
    CHECK(f[hog_index(3, 0, 0, 0)] == 0.0);
  }

  SUBCASE("matches an atan2 reference") {
    for (std::uint64_t seed : {4, 5}) {
      const GrayImage x = random_state(seed);
      const auto got = ex->extract(x);
      const auto want = reference_hog(x);
      REQUIRE(got.size() == want.size());
      double worst = 0.0;
      for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
      CHECK(worst < 1e-5);
    }
  }

  SUBCASE("horizontal edge lands in the 90 degree bin") {
    std::vector<double> d(224 * 224, 0.0);
    for (int y = 112; y < 224; ++y)
      for (int x = 0; x < 224; ++x) d[static_cast<std::size_t>(y) * 224 + x] = 1.0;
    const auto f = ex->extract(GrayImage(224, 224, std::move(d)));
    // Rows 111/112 in cell rows 6/7; 90 deg / 20 - 0.5 = 4 exactly: bin 4.
    const double e = 16.0 / std::sqrt(4 * 256.0 + 1e-6);
    CHECK(f[hog_index(6, 0, 0, 4)] == doctest::Approx(e));
    CHECK(f[hog_index(6, 0, 0, 3)] < 1e-9);
    CHECK(f[hog_index(6, 0, 0, 5)] < 1e-9);
  }
}

TEST_CASE("random conv") {
  const auto a = make_extractor("randconv", {{"seed", 3}});
  const auto b = make_extractor("randconv", {{"seed", 3}});
  const auto c = make_extractor("randconv", {{"seed", 4}});
  const GrayImage x = random_state(5);
  CHECK(a->extract(x) == a->extract(x));
  CHECK(a->extract(x) == b->extract(x));
  CHECK(a->extract(x) != c->extract(x));
  for (double v : a->extract(x)) CHECK(v >= 0.0);  // ReLU then averaging
  CHECK(a->metadata().at("seed") == 3);
}

TEST_CASE("no non-finite outputs on random inputs") {
  for (const char* name : {"raw28", "hog", "randconv"}) {
    const auto ex = make_extractor(name);
    for (std::uint64_t s = 0; s < 1000; s += (std::string(name) == "raw28" ? 1 : 10)) {
      CHECK(all_finite(ex->extract(random_state(s))));
    }
  }
}

TEST_CASE("state raster") {
  std::vector<double> d(64 * 48);
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<double>(i % 64) / 63.0;
  const GrayImage img(64, 48, std::move(d));
  const GrayImage s = state_raster(img, full_box(64, 48));
  CHECK(s.width() == kStateSize);
  CHECK(s.height() == kStateSize);
  CHECK(s == resize_bilinear(img, kStateSize, kStateSize));
  CHECK(state_raster(img, Box{8, 8, 24, 24}) == resize_bilinear(crop(img, Box{8, 8, 24, 24}), 224, 224));
}

TEST_CASE("vector line parsing") {
  CHECK(parse_vector_line("1 2.5 -3e-2") == std::vector<double>{1.0, 2.5, -0.03});
  CHECK(parse_vector_line("  4\t5 \r\n") == std::vector<double>{4.0, 5.0});
  CHECK_THROWS_AS(parse_vector_line("1 two 3"), FormatError);
}

TEST_CASE("external provider process") {
  const std::string provider = DEFLOC_FAKE_PROVIDER;
  const auto cache = fs::temp_directory_path() / "defloc_test_features" / "cache";
  fs::remove_all(cache);

  SUBCASE("handshake, embed, cache, precomputed lookup") {
    const GrayImage x = random_state(7);
    std::vector<double> v;
    {
      const auto ex = make_extractor("external", {{"command", provider}, {"cache_dir", cache.string()}});
      CHECK(ex->dim() == 3);
      v = ex->extract(x);
      REQUIRE(v.size() == 3);
      CHECK(v[2] == 0.5);
      CHECK(ex->extract(x) == v);
      CHECK(ex->metadata().at("command") == provider);
    }
    CHECK(fs::exists(cache / (content_hash(x) + ".vec")));
    const auto pre = make_extractor("external", {{"vec_dir", cache.string()}});
    CHECK(pre->dim() == 3);
    const auto w = pre->extract(x);
    for (int i = 0; i < 3; ++i) CHECK(w[static_cast<std::size_t>(i)] == doctest::Approx(v[static_cast<std::size_t>(i)]));
    CHECK_THROWS(pre->extract(random_state(8)));
  }

  SUBCASE("environment variable fallback") {
    ::setenv(kProviderEnvVar, provider.c_str(), 1);
    const auto ex = make_extractor("external");
    CHECK(ex->dim() == 3);
    ::unsetenv(kProviderEnvVar);
    CHECK_THROWS_AS(make_extractor("external"), ContractError);
  }

  SUBCASE("misbehaving providers") {
    CHECK_THROWS_AS(make_extractor("external", {{"command", provider + " baddim"}}), FormatError);
    CHECK_THROWS_AS(make_extractor("external", {{"command", "exit 0"}}), IoError);
    const auto shortp = make_extractor("external", {{"command", provider + " short"}});
    CHECK_THROWS_AS(shortp->extract(random_state(1)), FormatError);
    const auto dead = make_extractor("external", {{"command", provider + " die"}});
    CHECK_THROWS_AS(dead->extract(random_state(1)), IoError);
  }
}

TEST_CASE("content hash") {
  const GrayImage a = random_state(1);
  CHECK(content_hash(a) == content_hash(a));
  CHECK(content_hash(a).size() == 64);
  CHECK(content_hash(a) != content_hash(random_state(2)));
}
