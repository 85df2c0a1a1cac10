#include "defloc/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <iomanip>

#include "defloc/errors.hpp"

namespace defloc {
namespace {

constexpr std::array<std::string_view, kNumClasses> kClassCodes = {
    "SB", "TB", "LC", "LB", "MBH", "MBNH"};

constexpr int kAnnotationDilation = 2;
constexpr double kAlphaVisible = 1e-3;
constexpr int kPlacementTries = 500;

using Rng = std::mt19937_64;

int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

int pick_weighted(Rng& rng, const ClassMix& w) {
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  double u = uniform01(rng) * total;
  int last = 0;
  for (int i = 0; i < kNumClasses; ++i) {
    if (w[i] <= 0.0) continue;
    last = i;
    if (u < w[i]) return i;
    u -= w[i];
  }
  return last;
}

// A hard-edged rectangle painted toward a target intensity. Strokes of the
// same layer are blurred and composited together; layers go in order.
struct Stroke {
  PixelRect rect;
  double target;
  int layer;
};

using Shape = std::vector<Stroke>;

PixelRect shape_bounds(const Shape& shape) {
  PixelRect b{std::numeric_limits<int>::max(), std::numeric_limits<int>::max(),
              std::numeric_limits<int>::min(), std::numeric_limits<int>::min()};
  for (const auto& s : shape) {
    b.x0 = std::min(b.x0, s.rect.x0);
    b.y0 = std::min(b.y0, s.rect.y0);
    b.x1 = std::max(b.x1, s.rect.x1);
    b.y1 = std::max(b.y1, s.rect.y1);
  }
  return b;
}

int blur_radius(const PatternSpec& spec) {
  return spec.edge_sigma > 0.0 ? static_cast<int>(std::ceil(2.0 * spec.edge_sigma)) : 0;
}

// Predicted annotation footprint of a shape before painting.
Box footprint(const Shape& shape, const PatternSpec& spec) {
  const PixelRect b = shape_bounds(shape);
  const int pad = blur_radius(spec) + kAnnotationDilation;
  return Box{static_cast<double>(b.x0 - pad), static_cast<double>(b.y0 - pad),
             static_cast<double>(b.x1 + pad), static_cast<double>(b.y1 + pad)};
}

bool overlaps(const Box& a, const Box& b) {
  return a.x_min < b.x_max && b.x_min < a.x_max && a.y_min < b.y_max &&
         b.y_min < a.y_max;
}

std::vector<double> gaussian_kernel(double sigma, int radius) {
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Composites the shape into img and returns the bounds of touched pixels.
PixelRect paint(GrayImage& img, const Shape& shape, const PatternSpec& spec,
                Rng& rng) {
  const int W = img.width();
  const int H = img.height();
  const int radius = blur_radius(spec);
  const auto kernel = radius > 0 ? gaussian_kernel(spec.edge_sigma, radius)
                                 : std::vector<double>{1.0};
  std::normal_distribution<double> noise(0.0, 1.0);
  int max_layer = 0;
  for (const auto& s : shape) max_layer = std::max(max_layer, s.layer);

  PixelRect touched{W, H, 0, 0};
  for (int layer = 0; layer <= max_layer; ++layer) {
    Shape strokes;
    for (const auto& s : shape) {
      if (s.layer == layer) strokes.push_back(s);
    }
    if (strokes.empty()) continue;
    const double target = strokes.front().target;
    PixelRect b = shape_bounds(strokes);
    b = {std::max(0, b.x0 - radius), std::max(0, b.y0 - radius),
         std::min(W, b.x1 + radius), std::min(H, b.y1 + radius)};
    const int bw = b.width();
    const int bh = b.height();
    std::vector<double> mask(static_cast<std::size_t>(bw) * bh, 0.0);
    for (const auto& s : strokes) {
      for (int y = std::max(s.rect.y0, b.y0); y < std::min(s.rect.y1, b.y1); ++y) {
        for (int x = std::max(s.rect.x0, b.x0); x < std::min(s.rect.x1, b.x1); ++x) {
          mask[static_cast<std::size_t>(y - b.y0) * bw + (x - b.x0)] = 1.0;
        }
      }
    }
    std::vector<double> alpha = mask;
    if (radius > 0) {
      std::vector<double> tmp(mask.size(), 0.0);
      for (int y = 0; y < bh; ++y) {
        for (int x = 0; x < bw; ++x) {
          double acc = 0.0;
          for (int k = -radius; k <= radius; ++k) {
            const int xx = x + k;
            if (xx >= 0 && xx < bw) acc += kernel[k + radius] * mask[static_cast<std::size_t>(y) * bw + xx];
          }
          tmp[static_cast<std::size_t>(y) * bw + x] = acc;
        }
      }
      for (int y = 0; y < bh; ++y) {
        for (int x = 0; x < bw; ++x) {
          double acc = 0.0;
          for (int k = -radius; k <= radius; ++k) {
            const int yy = y + k;
            if (yy >= 0 && yy < bh) acc += kernel[k + radius] * tmp[static_cast<std::size_t>(yy) * bw + x];
          }
          alpha[static_cast<std::size_t>(y) * bw + x] = acc;
        }
      }
    }
    for (int y = 0; y < bh; ++y) {
      for (int x = 0; x < bw; ++x) {
        const double a = std::min(1.0, alpha[static_cast<std::size_t>(y) * bw + x]);
        if (a <= kAlphaVisible) continue;
        const int ix = b.x0 + x;
        const int iy = b.y0 + y;
        const double fresh = std::clamp(target + spec.noise_sigma * noise(rng), 0.0, 1.0);
        double& px = img.at(ix, iy);
        px = std::clamp(px * (1.0 - a) + fresh * a, 0.0, 1.0);
        touched.x0 = std::min(touched.x0, ix);
        touched.y0 = std::min(touched.y0, iy);
        touched.x1 = std::max(touched.x1, ix + 1);
        touched.y1 = std::max(touched.y1, iy + 1);
      }
    }
  }
  return touched;
}

// Nominal geometry helpers. Line k spans [k*p, k*p + lw); space k spans
// [k*p + lw, (k+1)*p).
struct Lines {
  int p;
  int lw;
  int s;
  int count;  // lines fully inside the image
};

Lines lines_of(const PatternSpec& spec) {
  Lines l{spec.line_pitch, spec.line_width, spec.line_pitch - spec.line_width, 0};
  l.count = spec.width >= l.lw ? (spec.width - l.lw) / l.p + 1 : 0;
  return l;
}

PixelRect bridge_rect(const Lines& l, int k, int y0, int y1) {
  return {k * l.p + l.lw - 1, y0, (k + 1) * l.p + 1, y1};
}

// Samples a random shape of the given class; placement is validated by
// the caller.
Shape sample_shape(DefectClass cls, const PatternSpec& spec, Rng& rng,
                   const std::optional<Box>& anchor) {
  const Lines l = lines_of(spec);
  const int H = spec.height;
  const double line = spec.line_intensity;
  const double space = spec.space_intensity;
  Shape shape;
  switch (cls) {
    case DefectClass::kSB: {
      const int k = uniform_int(rng, 0, l.count - 2);
      const int y0 = uniform_int(rng, 0, H - l.lw);
      shape.push_back({bridge_rect(l, k, y0, y0 + l.lw), line, 0});
      break;
    }
    case DefectClass::kTB: {
      const int k = uniform_int(rng, 0, l.count - 2);
      const int t = uniform_int(rng, 1, 3);
      const int y0 = uniform_int(rng, 2, H - t - 2);
      // Thin necks charge up and image brighter than the lines.
      const double neck = std::min(1.0, line + 0.2);
      shape.push_back({bridge_rect(l, k, y0, y0 + t), neck, 0});
      // Fillets where the neck meets each line.
      const int x_left = k * l.p + l.lw - 1;
      const int x_right = (k + 1) * l.p + 1;
      shape.push_back({{x_left, y0 - 2, x_left + 3, y0 + t + 2}, neck, 0});
      shape.push_back({{x_right - 3, y0 - 2, x_right, y0 + t + 2}, neck, 0});
      break;
    }
    case DefectClass::kLC: {
      const int k = uniform_int(rng, 0, l.count - 2);
      const int taper = 8;
      const int touch = uniform_int(rng, static_cast<int>(std::ceil(0.25 * H)),
                                    std::max(static_cast<int>(std::ceil(0.25 * H)),
                                             static_cast<int>(std::floor(0.4 * H))));
      const int total = touch + 2 * taper;
      const int y0 = uniform_int(rng, 0, std::max(0, H - total));
      const double bright = std::min(1.0, line + 0.2);
      for (int r = 0; r < total; ++r) {
        const double ramp = std::min({1.0, (r + 1.0) / (taper + 1.0),
                                      (total - r) / (taper + 1.0)});
        const int d = static_cast<int>(std::lround(l.s * ramp));
        const int y = y0 + r;
        if (d > 0) shape.push_back({{k * l.p, y, k * l.p + d, y + 1}, space, 0});
        shape.push_back({{k * l.p + d, y, k * l.p + l.lw + d, y + 1}, bright, 1});
        if (d >= l.s) {
          shape.push_back({{(k + 1) * l.p - 2, y, (k + 1) * l.p + 2, y + 1}, 1.0, 2});
        }
      }
      break;
    }
    case DefectClass::kLB: {
      const int g = uniform_int(rng, 4, 12);
      int k = 0;
      int y0 = 0;
      if (anchor) {
        // Lines whose center lies within two pitches of the anchor center.
        std::vector<int> ks;
        for (int c = 0; c < l.count; ++c) {
          const double cx = c * l.p + 0.5 * l.lw;
          if (std::abs(cx - anchor->center_x()) <= 2.0 * l.p) ks.push_back(c);
        }
        if (ks.empty()) return {};
        k = ks[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(ks.size()) - 1))];
        const int lo = std::max(0, static_cast<int>(anchor->y_min));
        const int hi = std::max(lo, static_cast<int>(anchor->y_max) - g);
        y0 = uniform_int(rng, lo, hi);
      } else {
        k = uniform_int(rng, 0, l.count - 1);
        y0 = uniform_int(rng, 0, H - g);
      }
      shape.push_back({{k * l.p - 1, y0, k * l.p + l.lw + 1, y0 + g}, space, 0});
      break;
    }
    case DefectClass::kMBH: {
      const int n = uniform_int(rng, 3, 5);
      const int k = uniform_int(rng, 0, std::max(0, l.count - n));
      const int th = uniform_int(rng, std::min(6, l.lw), l.lw);
      const int y0 = uniform_int(rng, 0, H - th);
      for (int j = k; j < k + n - 1; ++j) shape.push_back({bridge_rect(l, j, y0, y0 + th), line, 0});
      break;
    }
    case DefectClass::kMBNH: {
      const int n = uniform_int(rng, 3, 5);
      const int k = uniform_int(rng, 0, std::max(0, l.count - n));
      const int th = uniform_int(rng, std::min(6, l.lw), l.lw);
      const int step = uniform_int(rng, std::max(2, th / 3), std::max(2, th / 2));
      const int dir = uniform01(rng) < 0.5 ? -1 : 1;
      const int span = (n - 2) * step + th;
      const int y_top = uniform_int(rng, 0, std::max(0, H - span));
      for (int j = 0; j < n - 1; ++j) {
        const int y0 = dir > 0 ? y_top + j * step : y_top + (n - 2 - j) * step;
        shape.push_back({bridge_rect(l, k + j, y0, y0 + th), line, 0});
      }
      break;
    }
  }
  return shape;
}

bool placement_ok(const Shape& shape, const PatternSpec& spec,
                  const InjectOptions& opts) {
  if (shape.empty()) return false;
  const Box fp = footprint(shape, spec);
  const int m = opts.border_margin;
  if (fp.x_min < m || fp.y_min < m || fp.x_max > spec.width - m || fp.y_max > spec.height - m) {
    return false;
  }
  for (const Box& b : opts.avoid) {
    if (overlaps(fp, b)) return false;
  }
  return true;
}

}  // namespace

std::string_view class_code(DefectClass c) { return kClassCodes[static_cast<int>(c)]; }

DefectClass class_from_code(std::string_view code) {
  for (int i = 0; i < kNumClasses; ++i) {
    if (kClassCodes[i] == code) return static_cast<DefectClass>(i);
  }
  throw FormatError("unknown defect class code: " + std::string(code));
}

ClassMix uniform_single_mix() { return {1.0, 1.0, 1.0, 0.0, 1.0, 1.0}; }

ClassMix table_mix() { return {604.0, 5029.0, 498.0, 20.0, 86.0, 98.0}; }

std::string_view split_name(Split s) { return s == Split::kTrain ? "train" : "test"; }

void PatternSpec::validate() const {
  if (width <= 0 || height <= 0) throw ContractError("pattern: image size must be positive");
  if (line_pitch <= 0 || line_width <= 0 || line_width >= line_pitch) {
    throw ContractError("pattern: need 0 < line_width < line_pitch");
  }
  auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in01(line_intensity) || !in01(space_intensity)) {
    throw ContractError("pattern: intensities must lie in [0, 1]");
  }
  if (edge_sigma < 0.0 || noise_sigma < 0.0 || line_edge_roughness < 0.0) {
    throw ContractError("pattern: sigmas and roughness must be >= 0");
  }
}

void GenerateConfig::validate() const {
  pattern.validate();
  if (n_images < 1) throw ContractError("generate: n_images must be >= 1");
  if (border_margin < 0 || 2 * border_margin >= std::min(pattern.width, pattern.height)) {
    throw ContractError("generate: border_margin must be >= 0 and leave room for defects");
  }
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ContractError("generate: train_fraction must lie in (0, 1)");
  }
  if (!(double_defect_fraction >= 0.0 && double_defect_fraction < 1.0)) {
    throw ContractError("generate: double_defect_fraction must lie in [0, 1)");
  }
  double total = 0.0;
  for (double w : class_mix) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ContractError("generate: class weights must be finite and >= 0");
    total += w;
  }
  if (total <= 0.0) throw ContractError("generate: class weights are all zero");
  const double lb = class_mix[static_cast<int>(DefectClass::kLB)];
  if (lb > 0.0 && double_defect_fraction == 0.0) {
    throw ContractError(
        "generate: LB weight > 0 needs double_defect_fraction > 0 "
        "(line breaks are only generated beside a line collapse)");
  }
  if (total - lb <= 0.0) {
    throw ContractError("generate: single-defect images need a non-LB class weight");
  }
}

GenerateConfig profile_config(std::string_view name) {
  GenerateConfig cfg;
  cfg.profile = std::string(name);
  if (name == "easy") {
    cfg.pattern.noise_sigma = 0.05;
    cfg.class_mix = uniform_single_mix();
    cfg.double_defect_fraction = 0.0;
    cfg.border_margin = 64;
  } else if (name == "hard") {
    cfg.pattern.noise_sigma = 0.15;
    cfg.class_mix = table_mix();
    cfg.double_defect_fraction = 103.0 / 6232.0;
  } else {
    throw ContractError("unknown profile '" + std::string(name) + "' (expected easy or hard)");
  }
  return cfg;
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  // splitmix64 over a combination of both inputs
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

GrayImage render_pattern(const PatternSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const int W = spec.width;
  const int H = spec.height;
  const int p = spec.line_pitch;
  const int k_lo = -1;
  const int k_hi = W / p + 1;
  const int n_lines = k_hi - k_lo + 1;
  // Per-line, per-row edge offsets.
  std::vector<double> left(static_cast<std::size_t>(n_lines) * H, 0.0);
  std::vector<double> right(left.size(), 0.0);
  if (spec.line_edge_roughness > 0.0) {
    std::uniform_real_distribution<double> jitter(-spec.line_edge_roughness,
                                                  spec.line_edge_roughness);
    for (std::size_t i = 0; i < left.size(); ++i) {
      left[i] = jitter(rng);
      right[i] = jitter(rng);
    }
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  GrayImage img(W, H);
  const double contrast = spec.line_intensity - spec.space_intensity;
  const double inv_sqrt2_sigma =
      spec.edge_sigma > 0.0 ? 1.0 / (std::sqrt(2.0) * spec.edge_sigma) : 0.0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double xc = x + 0.5;
      const int k0 = static_cast<int>(std::floor(xc / p));
      double cov = 0.0;
      for (int k = std::max(k_lo, k0 - 1); k <= std::min(k_hi, k0 + 1); ++k) {
        const std::size_t li = static_cast<std::size_t>(k - k_lo) * H + y;
        const double L = k * p + left[li];
        const double R = k * p + spec.line_width + right[li];
        if (spec.edge_sigma > 0.0) {
          // Box profile convolved with a Gaussian, sampled at the pixel center.
          cov += 0.5 * (std::erfc((L - xc) * inv_sqrt2_sigma) -
                        std::erfc((R - xc) * inv_sqrt2_sigma));
        } else if (xc >= L && xc < R) {
          cov += 1.0;
        }
      }
      cov = std::clamp(cov, 0.0, 1.0);
      double v = spec.space_intensity + contrast * cov;
      if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise(rng);
      img.at(x, y) = std::clamp(v, 0.0, 1.0);
    }
  }
  return img;
}

Injection inject_defect(const GrayImage& img, DefectClass cls,
                        const PatternSpec& spec, std::uint64_t seed,
                        const InjectOptions& opts) {
  spec.validate();
  if (img.width() != spec.width || img.height() != spec.height) {
    throw ContractError("inject_defect: image size does not match the pattern spec");
  }
  Rng rng(seed);
  const Lines l = lines_of(spec);
  const int min_lines = (cls == DefectClass::kMBH || cls == DefectClass::kMBNH) ? 5 : 3;
  if (l.count < min_lines + 2) {
    throw ContractError("inject_defect: image too small for class " +
                        std::string(class_code(cls)));
  }
  Shape shape;
  bool placed = false;
  for (int attempt = 0; attempt < kPlacementTries && !placed; ++attempt) {
    shape = sample_shape(cls, spec, rng, opts.anchor);
    placed = placement_ok(shape, spec, opts);
  }
  if (!placed) {
    throw ContractError("inject_defect: image too small for class " +
                        std::string(class_code(cls)) + " under the placement constraints");
  }
  Injection out{img, {}};
  const PixelRect t = paint(out.image, shape, spec, rng);
  const int d = kAnnotationDilation;
  out.annotation.cls = cls;
  out.annotation.box = Box{static_cast<double>(std::max(0, t.x0 - d)),
                           static_cast<double>(std::max(0, t.y0 - d)),
                           static_cast<double>(std::min(spec.width, t.x1 + d)),
                           static_cast<double>(std::min(spec.height, t.y1 + d))};
  return out;
}

SyntheticImage synthesize_image(const GenerateConfig& cfg, std::uint64_t index) {
  const std::uint64_t image_seed = derive_seed(cfg.seed, index);
  Rng rng(image_seed);
  const bool is_double = uniform01(rng) < cfg.double_defect_fraction;
  ClassMix single = cfg.class_mix;
  single[static_cast<int>(DefectClass::kLB)] = 0.0;
  const DefectClass first =
      is_double ? DefectClass::kLC : static_cast<DefectClass>(pick_weighted(rng, single));

  SyntheticImage out;
  out.image = render_pattern(cfg.pattern, derive_seed(image_seed, 1));
  InjectOptions first_opts;
  first_opts.border_margin = cfg.border_margin;
  Injection a = inject_defect(out.image, first, cfg.pattern, derive_seed(image_seed, 2), first_opts);
  out.image = std::move(a.image);
  out.annotations.push_back(a.annotation);
  if (is_double) {
    const auto second = static_cast<DefectClass>(pick_weighted(rng, cfg.class_mix));
    InjectOptions opts;
    opts.border_margin = cfg.border_margin;
    opts.avoid.push_back(a.annotation.box);
    if (second == DefectClass::kLB) opts.anchor = a.annotation.box;
    Injection b = inject_defect(out.image, second, cfg.pattern,
                                derive_seed(image_seed, 3), opts);
    out.image = std::move(b.image);
    out.annotations.push_back(b.annotation);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON

nlohmann::json box_to_json(const Box& b) {
  return nlohmann::json::array({std::lround(b.x_min), std::lround(b.y_min),
                                std::lround(b.x_max), std::lround(b.y_max)});
}

Box box_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw FormatError("box must be [x_min, y_min, x_max, y_max]");
  Box b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  if (!b.valid()) throw FormatError("box has non-positive extent");
  return b;
}

nlohmann::json class_mix_to_json(const ClassMix& mix) {
  nlohmann::json j = nlohmann::json::object();
  for (int i = 0; i < kNumClasses; ++i) j[std::string(kClassCodes[i])] = mix[i];
  return j;
}

ClassMix class_mix_from_json(const nlohmann::json& j) {
  ClassMix mix{};
  for (const auto& [key, value] : j.items()) {
    mix[static_cast<int>(class_from_code(key))] = value.get<double>();
  }
  return mix;
}

void to_json(nlohmann::json& j, const PatternSpec& p) {
  j = {{"width", p.width},
       {"height", p.height},
       {"line_pitch", p.line_pitch},
       {"line_width", p.line_width},
       {"line_intensity", p.line_intensity},
       {"space_intensity", p.space_intensity},
       {"edge_sigma", p.edge_sigma},
       {"noise_sigma", p.noise_sigma},
       {"line_edge_roughness", p.line_edge_roughness}};
}

void from_json(const nlohmann::json& j, PatternSpec& p) {
  PatternSpec d;
  p.width = j.value("width", d.width);
  p.height = j.value("height", d.height);
  p.line_pitch = j.value("line_pitch", d.line_pitch);
  p.line_width = j.value("line_width", d.line_width);
  p.line_intensity = j.value("line_intensity", d.line_intensity);
  p.space_intensity = j.value("space_intensity", d.space_intensity);
  p.edge_sigma = j.value("edge_sigma", d.edge_sigma);
  p.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  p.line_edge_roughness = j.value("line_edge_roughness", d.line_edge_roughness);
}

void to_json(nlohmann::json& j, const GenerateConfig& c) {
  j = {{"profile", c.profile},
       {"n_images", c.n_images},
       {"class_mix", class_mix_to_json(c.class_mix)},
       {"double_defect_fraction", c.double_defect_fraction},
       {"pattern", c.pattern},
       {"seed", c.seed},
       {"train_fraction", c.train_fraction},
       {"border_margin", c.border_margin}};
}

void from_json(const nlohmann::json& j, GenerateConfig& c) {
  const std::string profile = j.value("profile", std::string("easy"));
  c = profile == "easy" || profile == "hard" ? profile_config(profile) : GenerateConfig{};
  c.profile = profile;
  c.n_images = j.value("n_images", c.n_images);
  if (j.contains("class_mix")) c.class_mix = class_mix_from_json(j.at("class_mix"));
  c.double_defect_fraction = j.value("double_defect_fraction", c.double_defect_fraction);
  if (j.contains("pattern")) c.pattern = j.at("pattern").get<PatternSpec>();
  c.seed = j.value("seed", c.seed);
  c.train_fraction = j.value("train_fraction", c.train_fraction);
  c.border_margin = j.value("border_margin", c.border_margin);
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : m.records) {
    nlohmann::json anns = nlohmann::json::array();
    for (const auto& a : r.annotations) {
      anns.push_back({{"class", std::string(class_code(a.cls))}, {"box", box_to_json(a.box)}});
    }
    records.push_back({{"file", r.file}, {"annotations", anns}});
  }
  const nlohmann::json j = {{"format", "defloc-manifest"},
                            {"version", 1},
                            {"split", std::string(split_name(m.split))},
                            {"config", m.config},
                            {"records", records}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << j.dump(1) << '\n';
  if (!out) throw IoError("failed writing manifest " + path.string());
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.root = path.parent_path();
  try {
    const std::string split = j.at("split").get<std::string>();
    if (split != "train" && split != "test") throw FormatError("bad split '" + split + "'");
    m.split = split == "train" ? Split::kTrain : Split::kTest;
    m.config = j.at("config").get<GenerateConfig>();
    for (const auto& r : j.at("records")) {
      ManifestRecord rec;
      rec.file = r.at("file").get<std::string>();
      for (const auto& a : r.at("annotations")) {
        rec.annotations.push_back({box_from_json(a.at("box")),
                                   class_from_code(a.at("class").get<std::string>())});
      }
      m.records.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }
  return m;
}

std::pair<DatasetManifest, DatasetManifest> generate_dataset(
    const std::filesystem::path& out_dir, const GenerateConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "images" / "train", ec);
  fs::create_directories(out_dir / "images" / "test", ec);
  if (ec || !fs::is_directory(out_dir / "images" / "test")) {
    throw IoError("cannot create dataset directory " + out_dir.string());
  }

  std::vector<int> order(static_cast<std::size_t>(cfg.n_images));
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(cfg.seed, 0x5b117ULL));
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n_train = static_cast<std::size_t>(std::lround(cfg.train_fraction * cfg.n_images));
  std::vector<bool> is_train(order.size(), false);
  for (std::size_t i = 0; i < n_train && i < order.size(); ++i) is_train[order[i]] = true;

  DatasetManifest train{Split::kTrain, cfg, {}, out_dir};
  DatasetManifest test{Split::kTest, cfg, {}, out_dir};
  for (int i = 0; i < cfg.n_images; ++i) {
    SyntheticImage s = synthesize_image(cfg, static_cast<std::uint64_t>(i));
    const Split split = is_train[i] ? Split::kTrain : Split::kTest;
    std::ostringstream name;
    name << "images/" << split_name(split) << '/' << std::setw(6) << std::setfill('0') << i << ".png";
    write_png(s.image, out_dir / name.str());
    (split == Split::kTrain ? train : test).records.push_back({name.str(), std::move(s.annotations)});
  }
  save_manifest(train, out_dir / "manifest_train.json");
  save_manifest(test, out_dir / "manifest_test.json");
  return {std::move(train), std::move(test)};
}

}  // namespace defloc
