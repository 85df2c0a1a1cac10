#include "defloc/features.hpp"

#include <openssl/evp.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "defloc/errors.hpp"

namespace defloc {

nlohmann::json FeatureExtractor::metadata() const {
  return {{"name", name()}, {"dim", dim()}};
}

std::vector<double> FeatureExtractor::extract(const GrayImage& state) const {
  if (state.width() != kStateSize || state.height() != kStateSize) {
    throw ContractError(name() + ": expected a " + std::to_string(kStateSize) + "x" +
                        std::to_string(kStateSize) + " input, got " +
                        std::to_string(state.width()) + "x" + std::to_string(state.height()));
  }
  std::vector<double> out = compute(state);
  if (static_cast<int>(out.size()) != dim()) {
    throw FormatError(name() + ": produced " + std::to_string(out.size()) +
                      " values, declared dim " + std::to_string(dim()));
  }
  for (double v : out) {
    if (!std::isfinite(v)) throw FormatError(name() + ": non-finite feature value");
  }
  return out;
}

GrayImage state_raster(const GrayImage& img, const Box& box) {
  return resize_bilinear(crop(img, box), kStateSize, kStateSize);
}

// --- raw ---------------------------------------------------------------------

RawDownsampleExtractor::RawDownsampleExtractor(int side) : side_(side) {
  if (side < 1 || side > kStateSize) {
    throw ContractError("raw extractor: side must lie in [1, 224]");
  }
}

nlohmann::json RawDownsampleExtractor::metadata() const {
  return {{"name", name()}, {"dim", dim()}, {"side", side_}, {"interpolation", "bilinear"}};
}

std::vector<double> RawDownsampleExtractor::compute(const GrayImage& state) const {
  const GrayImage small = resize_bilinear(state, side_, side_);
  return {small.pixels().begin(), small.pixels().end()};
}

// --- gradient histogram ----------------------------------------------------

nlohmann::json GradientHistogramExtractor::metadata() const {
  return {{"name", name()}, {"dim", dim()},        {"cell", kCell},
          {"bins", kBins},  {"block", "2x2 cells, stride 1, L2"}};
}

namespace {

// Unsigned gradient orientation in degrees, [0, 180). Odd minimax
// polynomial for atan on [0, 1]; max error about 1e-4 degrees, exact on the
// axes.
double orientation_deg(double gx, double gy) {
  const double ax = std::abs(gx);
  const double ay = std::abs(gy);
  const double t = std::min(ax, ay) / std::max(ax, ay);
  const double t2 = t * t;
  double a = t * (0.99997726 + t2 * (-0.33262347 + t2 * (0.19354346 + t2 * (-0.11643287 +
                                     t2 * (0.05265332 + t2 * -0.01172120)))));
  if (ay > ax) a = 0.5 * std::numbers::pi - a;
  if ((gx < 0.0) != (gy < 0.0) && a > 0.0) a = std::numbers::pi - a;
  return a * (180.0 / std::numbers::pi);
}

}  // namespace

std::vector<double> GradientHistogramExtractor::compute(const GrayImage& state) const {
  constexpr int N = kStateSize;
  constexpr double kBinWidth = 180.0 / kBins;
  constexpr double kEps = 1e-3;
  std::vector<double> cells(static_cast<std::size_t>(kCells) * kCells * kBins, 0.0);
  const auto px = state.pixels();
  for (int y = 0; y < N; ++y) {
    const int ym = std::max(0, y - 1);
    const int yp = std::min(N - 1, y + 1);
    double* row_hist = &cells[static_cast<std::size_t>(y / kCell) * kCells * kBins];
    for (int x = 0; x < N; ++x) {
      const int xm = std::max(0, x - 1);
      const int xp = std::min(N - 1, x + 1);
      const double gx = px[static_cast<std::size_t>(y) * N + xp] - px[static_cast<std::size_t>(y) * N + xm];
      const double gy = px[static_cast<std::size_t>(yp) * N + x] - px[static_cast<std::size_t>(ym) * N + x];
      if (gx == 0.0 && gy == 0.0) continue;
      const double mag = std::sqrt(gx * gx + gy * gy);
      const double deg = orientation_deg(gx, gy);
      const double pos = deg / kBinWidth - 0.5;
      const double base = std::floor(pos);
      const double frac = pos - base;
      const int b0 = (static_cast<int>(base) + kBins) % kBins;
      const int b1 = (b0 + 1) % kBins;
      double* h = row_hist + static_cast<std::size_t>(x / kCell) * kBins;
      h[b0] += mag * (1.0 - frac);
      h[b1] += mag * frac;
    }
  }
  std::vector<double> out;
  out.reserve(kDim);
  for (int by = 0; by < kBlocks; ++by) {
    for (int bx = 0; bx < kBlocks; ++bx) {
      const std::size_t start = out.size();
      double norm2 = 0.0;
      for (int cy = by; cy < by + 2; ++cy) {
        for (int cx = bx; cx < bx + 2; ++cx) {
          const double* h = &cells[(static_cast<std::size_t>(cy) * kCells + cx) * kBins];
          for (int b = 0; b < kBins; ++b) {
            out.push_back(h[b]);
            norm2 += h[b] * h[b];
          }
        }
      }
      const double inv = 1.0 / std::sqrt(norm2 + kEps * kEps);
      for (std::size_t i = start; i < out.size(); ++i) out[i] *= inv;
    }
  }
  return out;
}

// --- random convolution ----------------------------------------------------

RandomConvExtractor::RandomConvExtractor(std::uint64_t seed, double weight_std)
    : seed_(seed), weight_std_(weight_std) {
  if (!(weight_std > 0.0)) throw ContractError("randconv: weight_std must be > 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, weight_std);
  weights_.resize(static_cast<std::size_t>(kFilters) * kKernel * kKernel);
  for (double& w : weights_) w = dist(rng);
}

nlohmann::json RandomConvExtractor::metadata() const {
  return {{"name", name()},     {"dim", dim()},       {"seed", seed_},
          {"weight_std", weight_std_}, {"filters", kFilters}, {"kernel", kKernel},
          {"stride", kStride},  {"grid", kGrid}};
}

std::vector<double> RandomConvExtractor::compute(const GrayImage& state) const {
  constexpr int K2 = kKernel * kKernel;
  Eigen::MatrixXd patches(kOut * kOut, K2);
  const auto px = state.pixels();
  for (int oy = 0; oy < kOut; ++oy) {
    for (int ox = 0; ox < kOut; ++ox) {
      const int row = oy * kOut + ox;
      for (int ky = 0; ky < kKernel; ++ky) {
        const double* src = &px[static_cast<std::size_t>(oy * kStride + ky) * kStateSize + ox * kStride];
        for (int kx = 0; kx < kKernel; ++kx) patches(row, ky * kKernel + kx) = src[kx];
      }
    }
  }
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      w(weights_.data(), kFilters, K2);
  const Eigen::MatrixXd response = (patches * w.transpose()).cwiseMax(0.0);  // [pos][filter]
  std::vector<double> out(static_cast<std::size_t>(dim()), 0.0);
  for (int gy = 0; gy < kGrid; ++gy) {
    const int y0 = gy * kOut / kGrid;
    const int y1 = ((gy + 1) * kOut + kGrid - 1) / kGrid;
    for (int gx = 0; gx < kGrid; ++gx) {
      const int x0 = gx * kOut / kGrid;
      const int x1 = ((gx + 1) * kOut + kGrid - 1) / kGrid;
      const double inv = 1.0 / ((y1 - y0) * (x1 - x0));
      for (int f = 0; f < kFilters; ++f) {
        double acc = 0.0;
        for (int y = y0; y < y1; ++y) {
          for (int x = x0; x < x1; ++x) acc += response(y * kOut + x, f);
        }
        out[static_cast<std::size_t>(f) * kGrid * kGrid + gy * kGrid + gx] = acc * inv;
      }
    }
  }
  return out;
}

// --- precomputed vectors ---------------------------------------------------

std::string content_hash(const GrayImage& img) {
  const auto bytes = encode_png(img);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("content_hash: SHA-256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  hex.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(kHex[digest[i] >> 4]);
    hex.push_back(kHex[digest[i] & 0xf]);
  }
  return hex;
}

std::vector<double> parse_vector_line(const std::string& line) {
  std::vector<double> v;
  const char* p = line.c_str();
  char* end = nullptr;
  while (true) {
    const double x = std::strtod(p, &end);
    if (end == p) break;
    v.push_back(x);
    p = end;
  }
  while (*p == ' ' || *p == '\t' || *p == '\r' || *p == '\n') ++p;
  if (*p != '\0') throw FormatError("unparseable embedding value near '" + std::string(p).substr(0, 16) + "'");
  return v;
}

namespace {

std::vector<double> read_vec_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing embedding file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  std::string text = ss.str();
  std::replace(text.begin(), text.end(), '\n', ' ');
  return parse_vector_line(text);
}

}  // namespace

PrecomputedVectorExtractor::PrecomputedVectorExtractor(std::filesystem::path dir, int dim)
    : dir_(std::move(dir)), dim_(dim) {
  if (!std::filesystem::is_directory(dir_)) {
    throw IoError("vector directory does not exist: " + dir_.string());
  }
  if (dim_ <= 0) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir_)) {
      if (e.path().extension() == ".vec") files.push_back(e.path());
    }
    if (files.empty()) throw IoError("no .vec files in " + dir_.string() + " to infer dim from");
    std::sort(files.begin(), files.end());
    dim_ = static_cast<int>(read_vec_file(files.front()).size());
  }
  if (dim_ <= 0) throw FormatError("precomputed vectors are empty");
}

nlohmann::json PrecomputedVectorExtractor::metadata() const {
  return {{"name", name()}, {"dim", dim_}, {"vec_dir", dir_.string()}, {"mode", "precomputed"}};
}

std::vector<double> PrecomputedVectorExtractor::compute(const GrayImage& state) const {
  return read_vec_file(dir_ / (content_hash(state) + ".vec"));
}

// --- registry --------------------------------------------------------------

std::vector<std::string> registered_extractors() {
  return {"raw28", "hog", "randconv", "external"};
}

std::unique_ptr<FeatureExtractor> make_extractor(std::string_view name,
                                                 const nlohmann::json& params) {
  const nlohmann::json p = params.is_null() ? nlohmann::json::object() : params;
  if (!p.is_object()) throw ContractError("extractor params must be a JSON object");
  try {
    if (name == "raw28") return std::make_unique<RawDownsampleExtractor>(p.value("side", 28));
    if (name == "hog") return std::make_unique<GradientHistogramExtractor>();
    if (name == "randconv") {
      return std::make_unique<RandomConvExtractor>(p.value("seed", std::uint64_t{0}),
                                                   p.value("weight_std", 0.1));
    }
    if (name == "external") {
      if (p.contains("vec_dir")) {
        return std::make_unique<PrecomputedVectorExtractor>(p.at("vec_dir").get<std::string>(),
                                                            p.value("dim", 0));
      }
      std::string command = p.value("command", std::string());
      if (command.empty()) {
        const char* env = std::getenv(kProviderEnvVar);
        if (env != nullptr) command = env;
      }
      if (command.empty()) {
        throw ContractError(std::string("external extractor needs params.command, params.vec_dir or $") +
                            kProviderEnvVar);
      }
      return std::make_unique<ExternalProcessExtractor>(command, p.value("cache_dir", std::string()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ContractError("invalid params for extractor '" + std::string(name) + "': " + e.what());
  }
  std::string known;
  for (const auto& n : registered_extractors()) known += (known.empty() ? "" : ", ") + n;
  throw ContractError("unknown feature extractor '" + std::string(name) + "' (available: " + known + ")");
}

}  // namespace defloc
