#include "defloc/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "defloc/errors.hpp"

namespace defloc {
namespace {

constexpr std::array<std::string_view, kNumActions> kActionNames = {
    "UP", "DOWN", "RIGHT", "LEFT", "BIGGER", "SMALLER", "THICKER", "THINNER",
    "TRIGGER"};

// Enforces min_side along one axis, then slides the span back inside
// [0, limit] without changing its length.
void floor_side(double& lo, double& hi, double min_side, double limit) {
  const double side = std::min(min_side, limit);
  if (hi - lo < side) {
    const double c = 0.5 * (lo + hi);
    lo = c - 0.5 * side;
    hi = c + 0.5 * side;
  }
  if (lo < 0.0) {
    hi -= lo;
    lo = 0.0;
  }
  if (hi > limit) {
    lo -= hi - limit;
    hi = limit;
  }
  lo = std::max(lo, 0.0);
}

double center_distance(const Box& a, const Box& b) {
  return std::hypot(a.center_x() - b.center_x(), a.center_y() - b.center_y());
}

}  // namespace

Box full_box(int img_w, int img_h) {
  return Box{0.0, 0.0, static_cast<double>(img_w), static_cast<double>(img_h)};
}

PixelRect rasterize(const Box& box, int img_w, int img_h) {
  PixelRect r;
  r.x0 = std::max(0, static_cast<int>(std::floor(box.x_min)));
  r.y0 = std::max(0, static_cast<int>(std::floor(box.y_min)));
  r.x1 = std::min(img_w, static_cast<int>(std::ceil(box.x_max)));
  r.y1 = std::min(img_h, static_cast<int>(std::ceil(box.y_max)));
  return r;
}

Action action_from_index(int index) {
  if (index < 0 || index >= kNumActions) {
    throw ContractError("action index out of range: " + std::to_string(index));
  }
  return static_cast<Action>(index);
}

std::string_view action_name(Action a) { return kActionNames[action_index(a)]; }

Action action_from_name(std::string_view name) {
  for (int i = 0; i < kNumActions; ++i) {
    if (kActionNames[i] == name) return static_cast<Action>(i);
  }
  throw FormatError("unknown action name: " + std::string(name));
}

void TransformConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw ContractError("transform alpha must lie in (0, 1)");
  }
  if (!(min_side >= 1.0)) {
    throw ContractError("transform min_side must be >= 1");
  }
}

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

Box apply_action(const Box& box, Action a, const TransformConfig& cfg,
                 int img_w, int img_h) {
  if (a == Action::kTrigger) {
    throw ContractError("apply_action: TRIGGER does not transform the box");
  }
  const double W = img_w;
  const double H = img_h;
  const double dx = cfg.alpha * box.width();
  const double dy = cfg.alpha * box.height();
  Box out = box;
  switch (a) {
    case Action::kUp: {
      const double s = std::clamp(dy, 0.0, std::max(0.0, box.y_min));
      out.y_min -= s;
      out.y_max -= s;
      break;
    }
    case Action::kDown: {
      const double s = std::clamp(dy, 0.0, std::max(0.0, H - box.y_max));
      out.y_min += s;
      out.y_max += s;
      break;
    }
    case Action::kRight: {
      const double s = std::clamp(dx, 0.0, std::max(0.0, W - box.x_max));
      out.x_min += s;
      out.x_max += s;
      break;
    }
    case Action::kLeft: {
      const double s = std::clamp(dx, 0.0, std::max(0.0, box.x_min));
      out.x_min -= s;
      out.x_max -= s;
      break;
    }
    case Action::kBigger:
      out = {box.x_min - 0.5 * dx, box.y_min - 0.5 * dy, box.x_max + 0.5 * dx,
             box.y_max + 0.5 * dy};
      break;
    case Action::kSmaller:
      out = {box.x_min + 0.5 * dx, box.y_min + 0.5 * dy, box.x_max - 0.5 * dx,
             box.y_max - 0.5 * dy};
      break;
    case Action::kThicker:
      out = {box.x_min - 0.5 * dx, box.y_min + 0.5 * dy, box.x_max + 0.5 * dx,
             box.y_max - 0.5 * dy};
      break;
    case Action::kThinner:
      out = {box.x_min + 0.5 * dx, box.y_min - 0.5 * dy, box.x_max - 0.5 * dx,
             box.y_max + 0.5 * dy};
      break;
    case Action::kTrigger:
      break;
  }
  out.x_min = std::max(out.x_min, 0.0);
  out.y_min = std::max(out.y_min, 0.0);
  out.x_max = std::min(out.x_max, W);
  out.y_max = std::min(out.y_max, H);
  floor_side(out.x_min, out.x_max, cfg.min_side, W);
  floor_side(out.y_min, out.y_max, cfg.min_side, H);
  return out;
}

Match best_match(const Box& box, std::span<const Box> gts) {
  if (gts.empty()) {
    throw ContractError("best_match: no ground-truth boxes");
  }
  Match best{iou(box, gts[0]), 0};
  for (std::size_t i = 1; i < gts.size(); ++i) {
    const double v = iou(box, gts[i]);
    if (v > best.iou) best = {v, i};
  }
  return best;
}

Action greedy_action(const Box& box, const Box& target,
                     const TransformConfig& cfg, int img_w, int img_h) {
  constexpr double kTie = 1e-12;
  Action best = Action::kUp;
  double best_iou = -1.0;
  double best_dist = 0.0;
  for (int i = 0; i < kNumActions - 1; ++i) {
    const Action a = static_cast<Action>(i);
    const Box next = apply_action(box, a, cfg, img_w, img_h);
    const double v = iou(next, target);
    const double d = center_distance(next, target);
    const bool better =
        v > best_iou + kTie || (std::abs(v - best_iou) <= kTie && d < best_dist - kTie);
    if (better) {
      best = a;
      best_iou = v;
      best_dist = d;
    }
  }
  return best;
}

ReachResult greedy_reach(const Box& target, const TransformConfig& cfg,
                         int img_w, int img_h, int max_steps,
                         double threshold) {
  Box box = full_box(img_w, img_h);
  ReachResult r;
  r.final_iou = iou(box, target);
  while (r.final_iou < threshold && r.steps < max_steps) {
    box = apply_action(box, greedy_action(box, target, cfg, img_w, img_h), cfg,
                       img_w, img_h);
    ++r.steps;
    r.final_iou = iou(box, target);
  }
  r.reached = r.final_iou >= threshold;
  return r;
}

}  // namespace defloc
