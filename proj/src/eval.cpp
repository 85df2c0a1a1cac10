#include "defloc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "defloc/errors.hpp"

namespace defloc {

std::vector<std::optional<std::size_t>> match_predictions(const std::vector<Detection>& preds,
                                                          const std::vector<Box>& gts,
                                                          double iou_thresh) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
  std::vector<std::optional<std::size_t>> out(preds.size());
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t p : order) {
    double best = -1.0;
    std::optional<std::size_t> pick;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(preds[p].box, gts[g]);
      if (v > best) {
        best = v;
        pick = g;
      }
    }
    if (pick && best >= iou_thresh) {
      taken[*pick] = true;
      out[p] = pick;
    }
  }
  return out;
}

std::optional<double> average_precision(std::vector<RankedOutcome> outcomes, std::size_t num_gt) {
  if (num_gt == 0) return std::nullopt;
  std::stable_sort(outcomes.begin(), outcomes.end(),
                   [](const RankedOutcome& a, const RankedOutcome& b) { return a.score > b.score; });
  std::vector<double> recall, precision;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (outcomes[i].true_positive) ++tp;
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return std::clamp(ap, 0.0, 1.0);
}

std::optional<double> mean_ap(const EvalReport& report) {
  double sum = 0.0;
  int n = 0;
  for (const auto& ap : report.class_ap) {
    if (ap) {
      sum += *ap;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

double avg_steps(const PredictionSet& preds, std::size_t n_images) {
  if (n_images == 0) throw ContractError("avg_steps: no images");
  double total = 0.0;
  for (const auto& im : preds.images) total += im.total_steps;
  return total / static_cast<double>(n_images);
}

EvalReport evaluate(const PredictionSet& preds, const DatasetManifest& truth, double iou_thresh) {
  if (preds.images.size() != truth.records.size()) {
    throw ContractError("evaluate: " + std::to_string(preds.images.size()) +
                        " predicted images vs " + std::to_string(truth.records.size()) +
                        " in the manifest");
  }
  EvalReport r;
  r.iou_threshold = iou_thresh;
  r.images = truth.records.size();
  std::array<std::vector<RankedOutcome>, kNumClasses> per_class;
  std::vector<RankedOutcome> false_pos;
  for (std::size_t i = 0; i < truth.records.size(); ++i) {
    const auto& rec = truth.records[i];
    const auto& im = preds.images[i];
    if (im.file != rec.file) {
      throw ContractError("evaluate: prediction for '" + im.file + "' where '" + rec.file +
                          "' was expected");
    }
    std::vector<Box> gts;
    for (const auto& a : rec.annotations) {
      gts.push_back(a.box);
      ++r.class_gt[static_cast<std::size_t>(a.cls)];
    }
    r.ground_truths += gts.size();
    r.predictions += im.detections.size();
    const auto m = match_predictions(im.detections, gts, iou_thresh);
    for (std::size_t p = 0; p < m.size(); ++p) {
      const double s = im.detections[p].score;
      if (m[p]) {
        ++r.matched;
        per_class[static_cast<std::size_t>(rec.annotations[*m[p]].cls)].push_back({s, true});
      } else {
        ++r.unmatched;
        false_pos.push_back({s, false});
      }
    }
  }
  r.missed = r.ground_truths - r.matched;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    auto outcomes = per_class[c];
    outcomes.insert(outcomes.end(), false_pos.begin(), false_pos.end());
    r.class_ap[c] = average_precision(std::move(outcomes), r.class_gt[c]);
  }
  r.map = mean_ap(r);
  r.avg_steps = r.images > 0 ? avg_steps(preds, r.images) : 0.0;
  return r;
}

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json ap = nlohmann::json::object();
  nlohmann::json gt = nlohmann::json::object();
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const std::string code(class_code(static_cast<DefectClass>(c)));
    ap[code] = r.class_ap[c] ? nlohmann::json(*r.class_ap[c]) : nlohmann::json(nullptr);
    gt[code] = r.class_gt[c];
  }
  return {{"format", "defloc-eval"},
          {"version", 1},
          {"class_ap", ap},
          {"class_ground_truths", gt},
          {"map", r.map ? nlohmann::json(*r.map) : nlohmann::json(nullptr)},
          {"avg_steps_per_image", r.avg_steps},
          {"images", r.images},
          {"predictions", r.predictions},
          {"matched_predictions", r.matched},
          {"unmatched_predictions", r.unmatched},
          {"ground_truths", r.ground_truths},
          {"missed_ground_truths", r.missed},
          {"iou_threshold", r.iou_threshold},
          {"interpolation", "all-points"},
          {"score", "Q-value of TRIGGER at the final state"},
          {"matching", "class-agnostic; unmatched predictions are false positives for every class"}};
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    if (j.at("format").get<std::string>() != "defloc-eval") throw FormatError("not an eval report");
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const std::string code(class_code(static_cast<DefectClass>(c)));
      const auto& v = j.at("class_ap").at(code);
      if (!v.is_null()) r.class_ap[c] = v.get<double>();
      r.class_gt[c] = j.at("class_ground_truths").at(code).get<std::size_t>();
    }
    if (!j.at("map").is_null()) r.map = j.at("map").get<double>();
    r.avg_steps = j.at("avg_steps_per_image").get<double>();
    r.images = j.at("images").get<std::size_t>();
    r.predictions = j.at("predictions").get<std::size_t>();
    r.matched = j.at("matched_predictions").get<std::size_t>();
    r.unmatched = j.at("unmatched_predictions").get<std::size_t>();
    r.ground_truths = j.at("ground_truths").get<std::size_t>();
    r.missed = j.at("missed_ground_truths").get<std::size_t>();
    r.iou_threshold = j.at("iou_threshold").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed eval report: ") + e.what());
  }
  return r;
}

namespace {

std::string pct(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * *v);
  return buf;
}

}  // namespace

std::string markdown_header() {
  std::ostringstream os;
  os << "| Model |";
  for (DefectClass c : kAllClasses) os << ' ' << class_code(c) << " |";
  os << " All (mAP) | Avg no. steps |\n|---|";
  for (int i = 0; i < kNumClasses; ++i) os << "---:|";
  os << "---:|---:|\n";
  return os.str();
}

std::string markdown_row(const std::string& label, const EvalReport& r) {
  std::ostringstream os;
  os << "| " << label << " |";
  for (std::size_t c = 0; c < kNumClasses; ++c) os << ' ' << pct(r.class_ap[c]) << " |";
  char steps[32];
  std::snprintf(steps, sizeof(steps), "%.1f", r.avg_steps);
  os << ' ' << pct(r.map) << " | " << steps << " |\n";
  return os.str();
}

std::string report_markdown(const std::string& label, const EvalReport& r) {
  std::ostringstream os;
  os << "AP at IoU " << r.iou_threshold << " (all-points interpolation), in percent; "
     << "scores are TRIGGER Q-values.\n\n"
     << markdown_header() << markdown_row(label, r) << "\n"
     << "Images: " << r.images << ", predictions: " << r.predictions
     << " (matched " << r.matched << ", unmatched " << r.unmatched << "), ground truths: "
     << r.ground_truths << " (missed " << r.missed << ").\n";
  return os.str();
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i + j) / 2.0) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

std::optional<double> spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2) {
    throw ContractError("spearman: need two equal-length series of at least 2 values");
  }
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  const double n = static_cast<double>(rx.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

}  // namespace defloc
