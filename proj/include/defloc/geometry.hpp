#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string_view>

namespace defloc {

// Axis-aligned box in continuous pixel coordinates. x_max/y_max are
// exclusive edges, so the full image is (0, 0, width, height).
struct Box {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }
  bool valid() const { return x_min < x_max && y_min < y_max; }
  bool within(int img_w, int img_h) const {
    return x_min >= 0.0 && y_min >= 0.0 && x_max <= img_w && y_max <= img_h;
  }

  friend bool operator==(const Box&, const Box&) = default;
};

Box full_box(int img_w, int img_h);

// Half-open integer pixel rectangle [x0, x1) x [y0, y1).
struct PixelRect {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool empty() const { return x1 <= x0 || y1 <= y0; }
  friend bool operator==(const PixelRect&, const PixelRect&) = default;
};

// Rounds min edges down and max edges up, then clamps to the image.
// The result may be empty; callers decide whether that is an error.
PixelRect rasterize(const Box& box, int img_w, int img_h);

enum class Action : int {
  kUp = 0,
  kDown,
  kRight,
  kLeft,
  kBigger,
  kSmaller,
  kThicker,
  kThinner,
  kTrigger,
};

inline constexpr int kNumActions = 9;

inline constexpr std::array<Action, kNumActions> kAllActions = {
    Action::kUp,      Action::kDown,    Action::kRight,
    Action::kLeft,    Action::kBigger,  Action::kSmaller,
    Action::kThicker, Action::kThinner, Action::kTrigger};

constexpr int action_index(Action a) { return static_cast<int>(a); }
Action action_from_index(int index);
std::string_view action_name(Action a);
Action action_from_name(std::string_view name);

struct TransformConfig {
  double alpha = 0.2;      // step size relative to the current side length
  double min_side = 16.0;  // pixels

  void validate() const;
};

double iou(const Box& a, const Box& b);

// Applies a non-terminal action. Translations move by at most the room
// left before the image border, so a flush box stays put. Scale/aspect
// edits clamp each edge independently. Sides shorter than min_side are
// widened about the center and shifted back inside the image.
Box apply_action(const Box& box, Action a, const TransformConfig& cfg,
                 int img_w, int img_h);

struct Match {
  double iou = 0.0;
  std::size_t index = 0;
};

// Highest IoU over gts; ties go to the lowest index. Throws on empty gts.
Match best_match(const Box& box, std::span<const Box> gts);

// Greedy ground-truth oracle: the non-TRIGGER action whose result has the
// highest IoU with target. Equal IoU is broken by smaller distance between
// box and target centers, then by lowest action index.
Action greedy_action(const Box& box, const Box& target,
                     const TransformConfig& cfg, int img_w, int img_h);

struct ReachResult {
  bool reached = false;
  int steps = 0;
  double final_iou = 0.0;
};

// Runs greedy_action from the full-image box until IoU >= threshold or
// max_steps actions have been spent.
ReachResult greedy_reach(const Box& target, const TransformConfig& cfg,
                         int img_w, int img_h, int max_steps,
                         double threshold = 0.5);

}  // namespace defloc
