#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "defloc/geometry.hpp"

namespace defloc {

// Row-major grayscale raster, intensities in [0, 1].
class GrayImage {
 public:
  GrayImage() = default;
  GrayImage(int width, int height, double fill = 0.0);
  // Throws ContractError if the size or any intensity is out of range.
  GrayImage(int width, int height, std::vector<double> data);

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return data_.empty(); }

  double at(int x, int y) const { return data_[index(x, y)]; }
  double& at(int x, int y) { return data_[index(x, y)]; }

  std::span<const double> pixels() const { return data_; }
  std::span<double> pixels() { return data_; }

  double mean() const;

  friend bool operator==(const GrayImage&, const GrayImage&) = default;

 private:
  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<double> data_;
};

// Sub-raster under the box, rounded outward and clamped. Throws
// ContractError when nothing of the box lies inside the image.
GrayImage crop(const GrayImage& img, const Box& box);
GrayImage crop(const GrayImage& img, const PixelRect& rect);

// Corner-aligned bilinear resampling: output pixel i maps to source
// coordinate i * (in - 1) / (out - 1).
GrayImage resize_bilinear(const GrayImage& img, int out_w, int out_h);

inline constexpr double kDefaultBarFraction = 1.0 / 3.0;

// Paints a black cross centered on the (rasterized) box: a horizontal bar
// bar_fraction * box height tall spanning the box width, and a vertical bar
// bar_fraction * box width wide spanning the box height.
GrayImage mask_cross(const GrayImage& img, const Box& box,
                     double bar_fraction = kDefaultBarFraction);

// 8-bit grayscale on write; 8- or 16-bit grayscale accepted on read.
GrayImage read_png(const std::filesystem::path& path);
void write_png(const GrayImage& img, const std::filesystem::path& path);
std::vector<unsigned char> encode_png(const GrayImage& img);
GrayImage decode_png(std::span<const unsigned char> bytes);

}  // namespace defloc
