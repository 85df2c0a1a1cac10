#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "defloc/agent.hpp"
#include "defloc/geometry.hpp"
#include "defloc/synthgen.hpp"

namespace defloc {

inline constexpr double kMatchIou = 0.5;

// For each prediction, the index of the ground truth it matched, if any.
// Greedy in descending score order (input order breaks ties); each ground
// truth is taken at most once, by the unmatched one of highest IoU.
std::vector<std::optional<std::size_t>> match_predictions(const std::vector<Detection>& preds,
                                                          const std::vector<Box>& gts,
                                                          double iou_thresh = kMatchIou);

struct RankedOutcome {
  double score = 0.0;
  bool true_positive = false;
};

// Area under the all-points interpolated precision-recall curve. nullopt
// when num_gt is 0.
std::optional<double> average_precision(std::vector<RankedOutcome> outcomes, std::size_t num_gt);

struct EvalReport {
  std::array<std::optional<double>, kNumClasses> class_ap{};
  std::array<std::size_t, kNumClasses> class_gt{};
  std::optional<double> map;
  double avg_steps = 0.0;
  std::size_t images = 0;
  std::size_t predictions = 0;
  std::size_t matched = 0;    // true positives
  std::size_t unmatched = 0;  // false positives
  std::size_t ground_truths = 0;
  std::size_t missed = 0;
  double iou_threshold = kMatchIou;
};

std::optional<double> mean_ap(const EvalReport& report);
double avg_steps(const PredictionSet& preds, std::size_t n_images);

// Predictions are classless: a matched prediction counts for its ground
// truth's class, an unmatched one is a false positive on every class.
EvalReport evaluate(const PredictionSet& preds, const DatasetManifest& truth,
                    double iou_thresh = kMatchIou);

nlohmann::json report_to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);

// Header and one row in the per-class AP / mAP / steps layout.
std::string markdown_header();
std::string markdown_row(const std::string& label, const EvalReport& r);
std::string report_markdown(const std::string& label, const EvalReport& r);

// Pearson correlation of average ranks. nullopt when either side has no
// rank variance.
std::optional<double> spearman(const std::vector<double>& xs, const std::vector<double>& ys);

}  // namespace defloc
