#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "defloc/imaging.hpp"

namespace defloc {

// Side length of the square state raster every crop is resized to.
inline constexpr int kStateSize = 224;

// Frozen embedding of a kStateSize x kStateSize state raster. Implementations
// hold no trainable state; extract() is deterministic and thread-safe.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;

  virtual std::string name() const = 0;
  virtual int dim() const = 0;
  // Parameters and provenance recorded in run outputs.
  virtual nlohmann::json metadata() const;

  // Checks the input contract and that every output is finite.
  std::vector<double> extract(const GrayImage& state) const;

 protected:
  virtual std::vector<double> compute(const GrayImage& state) const = 0;
};

// Bilinear downsample to side x side, flattened row-major.
class RawDownsampleExtractor final : public FeatureExtractor {
 public:
  explicit RawDownsampleExtractor(int side = 28);
  std::string name() const override { return "raw" + std::to_string(side_); }
  int dim() const override { return side_ * side_; }
  nlohmann::json metadata() const override;

 protected:
  std::vector<double> compute(const GrayImage& state) const override;

 private:
  int side_;
};

// Dalal-Triggs style descriptor: central differences, 16 px cells, 9
// unsigned orientation bins, 2x2-cell blocks at stride 1 with L2 norm.
class GradientHistogramExtractor final : public FeatureExtractor {
 public:
  static constexpr int kCell = 16;
  static constexpr int kBins = 9;
  static constexpr int kCells = kStateSize / kCell;  // 14
  static constexpr int kBlocks = kCells - 1;         // 13
  static constexpr int kDim = kBlocks * kBlocks * 4 * kBins;

  std::string name() const override { return "hog"; }
  int dim() const override { return kDim; }
  nlohmann::json metadata() const override;

 protected:
  std::vector<double> compute(const GrayImage& state) const override;
};

// One frozen random convolution layer (32 filters, 7x7, stride 4, no
// padding) with ReLU and average pooling onto a 4x4 grid per channel.
class RandomConvExtractor final : public FeatureExtractor {
 public:
  static constexpr int kFilters = 32;
  static constexpr int kKernel = 7;
  static constexpr int kStride = 4;
  static constexpr int kGrid = 4;
  static constexpr int kOut = (kStateSize - kKernel) / kStride + 1;  // 55

  explicit RandomConvExtractor(std::uint64_t seed = 0, double weight_std = 0.1);
  std::string name() const override { return "randconv"; }
  int dim() const override { return kFilters * kGrid * kGrid; }
  nlohmann::json metadata() const override;

 protected:
  std::vector<double> compute(const GrayImage& state) const override;

 private:
  std::uint64_t seed_;
  double weight_std_;
  std::vector<double> weights_;  // [filter][ky][kx]
};

// Talks to a child process over line-delimited stdin/stdout:
//   provider -> "DIM <n>" once at startup
//   harness  -> "EMBED <png path>", provider -> n floats on one line
//   harness  -> "QUIT" at shutdown
// Requests are serialized. With a cache directory every reply is also
// stored as <sha256 of crop PNG>.vec for PrecomputedVectorExtractor.
class ExternalProcessExtractor final : public FeatureExtractor {
 public:
  explicit ExternalProcessExtractor(std::string command,
                                    std::filesystem::path cache_dir = {});
  ~ExternalProcessExtractor() override;
  ExternalProcessExtractor(const ExternalProcessExtractor&) = delete;
  ExternalProcessExtractor& operator=(const ExternalProcessExtractor&) = delete;

  std::string name() const override { return "external"; }
  int dim() const override { return dim_; }
  nlohmann::json metadata() const override;

 protected:
  std::vector<double> compute(const GrayImage& state) const override;

 private:
  void shutdown() noexcept;
  std::string read_line() const;
  void write_line(const std::string& line) const;

  std::string command_;
  std::filesystem::path cache_dir_;
  std::filesystem::path scratch_dir_;
  int pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  int dim_ = 0;
  mutable std::string buffer_;
  mutable std::mutex mutex_;
  mutable std::uint64_t requests_ = 0;
};

// Looks up <sha256 of the crop's PNG encoding>.vec in a directory.
class PrecomputedVectorExtractor final : public FeatureExtractor {
 public:
  // dim <= 0 infers the length from the first .vec file in the directory.
  explicit PrecomputedVectorExtractor(std::filesystem::path dir, int dim = 0);
  std::string name() const override { return "external"; }
  int dim() const override { return dim_; }
  nlohmann::json metadata() const override;

 protected:
  std::vector<double> compute(const GrayImage& state) const override;

 private:
  std::filesystem::path dir_;
  int dim_;
};

// Hex SHA-256 of the 8-bit PNG encoding of img.
std::string content_hash(const GrayImage& img);
std::vector<double> parse_vector_line(const std::string& line);

inline constexpr const char* kProviderEnvVar = "DEFLOC_EMBED_PROVIDER";

// Names: raw28 (params: side), hog, randconv (seed, weight_std),
// external (command | vec_dir, cache_dir, dim). external falls back to the
// DEFLOC_EMBED_PROVIDER environment variable for its command.
std::unique_ptr<FeatureExtractor> make_extractor(std::string_view name,
                                                 const nlohmann::json& params = nlohmann::json::object());
std::vector<std::string> registered_extractors();

// The state raster for a box: crop, then bilinear resize to kStateSize.
GrayImage state_raster(const GrayImage& img, const Box& box);

}  // namespace defloc
