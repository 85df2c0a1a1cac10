#include "defloc/imaging.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>

#include "defloc/errors.hpp"

namespace defloc {

GrayImage::GrayImage(int width, int height, double fill)
    : width_(width), height_(height) {
  if (width <= 0 || height <= 0) {
    throw ContractError("GrayImage: dimensions must be positive");
  }
  if (!(fill >= 0.0 && fill <= 1.0)) {
    throw ContractError("GrayImage: fill intensity outside [0, 1]");
  }
  data_.assign(static_cast<std::size_t>(width) * height, fill);
}

GrayImage::GrayImage(int width, int height, std::vector<double> data)
    : width_(width), height_(height), data_(std::move(data)) {
  if (width <= 0 || height <= 0) {
    throw ContractError("GrayImage: dimensions must be positive");
  }
  if (data_.size() != static_cast<std::size_t>(width) * height) {
    throw ContractError("GrayImage: data length does not match width*height");
  }
  for (double v : data_) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ContractError("GrayImage: intensity outside [0, 1]");
    }
  }
}

double GrayImage::mean() const {
  if (data_.empty()) return 0.0;
  return std::accumulate(data_.begin(), data_.end(), 0.0) /
         static_cast<double>(data_.size());
}

GrayImage crop(const GrayImage& img, const PixelRect& r) {
  if (r.empty() || r.x0 < 0 || r.y0 < 0 || r.x1 > img.width() ||
      r.y1 > img.height()) {
    throw ContractError("crop: degenerate or out-of-image rectangle");
  }
  GrayImage out(r.width(), r.height());
  for (int y = 0; y < r.height(); ++y) {
    const double* src = &img.pixels()[static_cast<std::size_t>(r.y0 + y) * img.width() + r.x0];
    std::copy(src, src + r.width(), &out.at(0, y));
  }
  return out;
}

GrayImage crop(const GrayImage& img, const Box& box) {
  const PixelRect r = rasterize(box, img.width(), img.height());
  if (r.empty()) {
    throw ContractError("crop: box does not intersect the image");
  }
  return crop(img, r);
}

namespace {

struct Tap {
  int i0;
  int i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(int in, int out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  const double scale = out > 1 ? static_cast<double>(in - 1) / (out - 1) : 0.0;
  for (int i = 0; i < out; ++i) {
    const double src = out > 1 ? i * scale : 0.5 * (in - 1);
    int i0 = static_cast<int>(std::floor(src));
    i0 = std::clamp(i0, 0, in - 1);
    const int i1 = std::min(i0 + 1, in - 1);
    taps[i] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace

GrayImage resize_bilinear(const GrayImage& img, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1) {
    throw ContractError("resize_bilinear: output size must be >= 1");
  }
  if (out_w == img.width() && out_h == img.height()) return img;
  const auto xt = bilinear_taps(img.width(), out_w);
  const auto yt = bilinear_taps(img.height(), out_h);
  GrayImage out(out_w, out_h);
  const auto src = img.pixels();
  const std::size_t stride = static_cast<std::size_t>(img.width());
  for (int y = 0; y < out_h; ++y) {
    const Tap& ty = yt[y];
    const double* r0 = &src[ty.i0 * stride];
    const double* r1 = &src[ty.i1 * stride];
    for (int x = 0; x < out_w; ++x) {
      const Tap& tx = xt[x];
      const double top = r0[tx.i0] + tx.w1 * (r0[tx.i1] - r0[tx.i0]);
      const double bot = r1[tx.i0] + tx.w1 * (r1[tx.i1] - r1[tx.i0]);
      out.at(x, y) = std::clamp(top + ty.w1 * (bot - top), 0.0, 1.0);
    }
  }
  return out;
}

GrayImage mask_cross(const GrayImage& img, const Box& box,
                     double bar_fraction) {
  if (!(bar_fraction > 0.0 && bar_fraction <= 1.0)) {
    throw ContractError("mask_cross: bar_fraction must lie in (0, 1]");
  }
  GrayImage out = img;
  const PixelRect r = rasterize(box, img.width(), img.height());
  if (r.empty()) return out;
  const double cx = 0.5 * (r.x0 + r.x1);
  const double cy = 0.5 * (r.y0 + r.y1);
  const double half_h = 0.5 * bar_fraction * r.height();
  const double half_w = 0.5 * bar_fraction * r.width();
  for (int y = r.y0; y < r.y1; ++y) {
    const bool in_hbar = std::abs(y + 0.5 - cy) <= half_h;
    for (int x = r.x0; x < r.x1; ++x) {
      if (in_hbar || std::abs(x + 0.5 - cx) <= half_w) out.at(x, y) = 0.0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PNG via libpng. Errors longjmp back into the calling frame; every C++
// object those frames own is constructed before setjmp.

namespace {

struct PngErrorState {
  std::jmp_buf jump;
  char message[256] = {0};
};

void png_error_fn(png_structp png, png_const_charp msg) {
  auto* state = static_cast<PngErrorState*>(png_get_error_ptr(png));
  std::strncpy(state->message, msg, sizeof(state->message) - 1);
  std::longjmp(state->jump, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

struct ReadCursor {
  const unsigned char* data;
  std::size_t size;
  std::size_t pos;
};

void png_read_fn(png_structp png, png_bytep out, png_size_t n) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + n > cur->size) png_error(png, "truncated PNG stream");
  std::memcpy(out, cur->data + cur->pos, n);
  cur->pos += n;
}

void png_write_fn(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + n);
}

void png_flush_fn(png_structp) {}

}  // namespace

std::vector<unsigned char> encode_png(const GrayImage& img) {
  if (img.empty()) throw ContractError("encode_png: empty image");
  std::vector<unsigned char> out;
  std::vector<png_byte> rows(static_cast<std::size_t>(img.width()) * img.height());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i] = static_cast<png_byte>(std::lround(std::clamp(img.pixels()[i], 0.0, 1.0) * 255.0));
  }
  std::vector<png_bytep> row_ptrs(static_cast<std::size_t>(img.height()));
  for (int y = 0; y < img.height(); ++y) {
    row_ptrs[y] = rows.data() + static_cast<std::size_t>(y) * img.width();
  }
  PngErrorState err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err,
                                            png_error_fn, png_warning_fn);
  if (png == nullptr) throw IoError("encode_png: libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (setjmp(err.jump)) {
    png_destroy_write_struct(&png, &info);
    throw IoError(std::string("encode_png: ") + err.message);
  }
  png_set_write_fn(png, &out, png_write_fn, png_flush_fn);
  png_set_IHDR(png, info, img.width(), img.height(), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_set_rows(png, info, row_ptrs.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

GrayImage decode_png(std::span<const unsigned char> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
    throw FormatError("decode_png: not a PNG stream");
  }
  ReadCursor cursor{bytes.data(), bytes.size(), 0};
  std::vector<png_byte> raw;
  std::vector<png_bytep> row_ptrs;
  png_uint_32 width = 0;
  png_uint_32 height = 0;
  int bit_depth = 0;
  int color_type = 0;
  bool unsupported = false;
  PngErrorState err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err,
                                           png_error_fn, png_warning_fn);
  if (png == nullptr) throw IoError("decode_png: libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (setjmp(err.jump)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(std::string("decode_png: ") + err.message);
  }
  png_set_read_fn(png, &cursor, png_read_fn);
  png_read_info(png, info);
  png_get_IHDR(png, info, &width, &height, &bit_depth, &color_type, nullptr,
               nullptr, nullptr);
  if (color_type != PNG_COLOR_TYPE_GRAY) {
    unsupported = true;
  } else {
    if (bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (bit_depth == 16) png_set_swap(png);  // host order for uint16 reads
    png_read_update_info(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    raw.resize(rowbytes * height);
    row_ptrs.resize(height);
    for (png_uint_32 y = 0; y < height; ++y) row_ptrs[y] = raw.data() + y * rowbytes;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (unsupported) {
    throw FormatError("decode_png: unsupported color type " +
                      std::to_string(color_type) + " (grayscale required)");
  }
  std::vector<double> data(static_cast<std::size_t>(width) * height);
  if (bit_depth == 16) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::uint16_t v;
      std::memcpy(&v, raw.data() + 2 * i, 2);
      data[i] = v / 65535.0;
    }
  } else {
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = raw[i] / 255.0;
  }
  return GrayImage(static_cast<int>(width), static_cast<int>(height), std::move(data));
}

GrayImage read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_png: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  try {
    return decode_png(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_png(const GrayImage& img, const std::filesystem::path& path) {
  const auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("write_png: cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write_png: write failed for " + path.string());
}

}  // namespace defloc
