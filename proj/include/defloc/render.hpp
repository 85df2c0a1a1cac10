#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "defloc/env.hpp"
#include "defloc/imaging.hpp"

namespace defloc {

// One image's episodes as written under <run>/traces/.
struct TraceFile {
  std::string image;  // path relative to the manifest directory
  std::filesystem::path manifest;
  int width = 0;
  int height = 0;
  double bar_fraction = kDefaultBarFraction;
  std::vector<EpisodeTrace> episodes;
};

TraceFile load_trace_file(const std::filesystem::path& path);

enum class PanelFormat { kSvg, kPng };

struct Panel {
  int episode = 0;
  int step = 0;          // 0 = state after reset
  std::string caption;
  Box box;
  GrayImage image;       // masks already applied
};

// n steps of an episode yield n + 1 panels. Throws ContractError when the
// trace does not fit the image.
std::vector<Panel> build_panels(const TraceFile& trace, const GrayImage& image,
                                const std::vector<Box>& gt_boxes);

std::string panel_svg(const Panel& p, const std::vector<Box>& gt_boxes);
// Grayscale raster with the box outlined white and ground truths dashed black.
GrayImage panel_raster(const Panel& p, const std::vector<Box>& gt_boxes);

// Writes ep<e>_step<k>.{svg,png} and returns the written paths in order.
std::vector<std::filesystem::path> render_trace(const TraceFile& trace, const GrayImage& image,
                                                const std::vector<Box>& gt_boxes,
                                                const std::filesystem::path& out_dir,
                                                PanelFormat format);

}  // namespace defloc
