#include "defloc/render.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <sstream>

#include "defloc/errors.hpp"
#include "defloc/run.hpp"

namespace defloc {

namespace fs = std::filesystem;

TraceFile load_trace_file(const fs::path& path) {
  const nlohmann::json j = read_json_file(path);
  TraceFile t;
  try {
    t.image = j.at("image").get<std::string>();
    t.manifest = j.value("manifest", std::string());
    t.width = j.at("width").get<int>();
    t.height = j.at("height").get<int>();
    t.bar_fraction = j.value("bar_fraction", kDefaultBarFraction);
    for (const auto& e : j.at("episodes")) t.episodes.push_back(trace_from_json(e));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return t;
}

namespace {

std::string fixed(double v, int prec = 2) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

std::string base64(const std::vector<unsigned char>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

}  // namespace

std::vector<Panel> build_panels(const TraceFile& trace, const GrayImage& image,
                                const std::vector<Box>& gt_boxes) {
  if (image.width() != trace.width || image.height() != trace.height) {
    throw ContractError("render: trace was recorded on a " + std::to_string(trace.width) + "x" +
                        std::to_string(trace.height) + " image, got " +
                        std::to_string(image.width()) + "x" + std::to_string(image.height()));
  }
  const Box full = full_box(image.width(), image.height());
  std::vector<Panel> panels;
  for (std::size_t e = 0; e < trace.episodes.size(); ++e) {
    const auto& ep = trace.episodes[e];
    if (!(ep.initial_box == full)) throw ContractError("render: episode does not start from the full image");
    GrayImage masked = image;
    for (const Box& m : ep.masks) {
      if (!m.within(image.width(), image.height())) throw ContractError("render: mask outside the image");
      masked = mask_cross(masked, m, trace.bar_fraction);
    }
    const int ei = static_cast<int>(e);
    panels.push_back({ei, 0, "episode " + std::to_string(e + 1) + ": reset", ep.initial_box, masked});
    for (std::size_t k = 0; k < ep.steps.size(); ++k) {
      const auto& s = ep.steps[k];
      if (!s.box.within(image.width(), image.height())) throw ContractError("render: box outside the image");
      std::string cap = "step " + std::to_string(k + 1) + ": " + std::string(action_name(s.action)) +
                        ", reward " + fixed(s.reward, 0) + ", Q " + fixed(s.q);
      if (k + 1 == ep.steps.size()) {
        cap += ep.triggered ? " | TRIGGER" : " | step cap";
        if (!gt_boxes.empty()) cap += ", IoU " + fixed(best_match(s.box, gt_boxes).iou);
      }
      panels.push_back({ei, static_cast<int>(k + 1), cap, s.box, masked});
    }
  }
  return panels;
}

std::string panel_svg(const Panel& p, const std::vector<Box>& gt_boxes) {
  const int w = p.image.width(), h = p.image.height();
  const int band = 28;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h + band
     << "\" viewBox=\"0 0 " << w << ' ' << h + band << "\">\n";
  os << "<image x=\"0\" y=\"0\" width=\"" << w << "\" height=\"" << h
     << "\" href=\"data:image/png;base64," << base64(encode_png(p.image)) << "\"/>\n";
  for (const Box& g : gt_boxes) {
    os << "<rect class=\"gt\" x=\"" << g.x_min << "\" y=\"" << g.y_min << "\" width=\"" << g.width()
       << "\" height=\"" << g.height()
       << "\" fill=\"none\" stroke=\"#2ca02c\" stroke-width=\"2\" stroke-dasharray=\"6 4\"/>\n";
  }
  os << "<rect class=\"agent\" x=\"" << p.box.x_min << "\" y=\"" << p.box.y_min << "\" width=\""
     << p.box.width() << "\" height=\"" << p.box.height()
     << "\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"2\"/>\n";
  os << "<rect x=\"0\" y=\"" << h << "\" width=\"" << w << "\" height=\"" << band
     << "\" fill=\"white\"/>\n";
  os << "<text x=\"6\" y=\"" << h + 19 << "\" font-family=\"monospace\" font-size=\"14\">"
     << p.caption << "</text>\n</svg>\n";
  return os.str();
}

GrayImage panel_raster(const Panel& p, const std::vector<Box>& gt_boxes) {
  const int w = p.image.width(), h = p.image.height();
  std::vector<double> px(p.image.pixels().begin(), p.image.pixels().end());
  auto outline = [&](const Box& b, double value, bool dashed) {
    const PixelRect r = rasterize(b, w, h);
    auto put = [&](int x, int y, int along) {
      if (x < 0 || y < 0 || x >= w || y >= h) return;
      if (dashed && (along / 6) % 2 == 1) return;
      px[static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)] = value;
    };
    for (int t = 0; t < 2; ++t) {
      for (int x = r.x0; x < r.x1; ++x) {
        put(x, r.y0 + t, x);
        put(x, r.y1 - 1 - t, x);
      }
      for (int y = r.y0; y < r.y1; ++y) {
        put(r.x0 + t, y, y);
        put(r.x1 - 1 - t, y, y);
      }
    }
  };
  for (const Box& g : gt_boxes) outline(g, 0.0, true);
  outline(p.box, 1.0, false);
  return GrayImage(w, h, std::move(px));
}

std::vector<fs::path> render_trace(const TraceFile& trace, const GrayImage& image,
                                   const std::vector<Box>& gt_boxes, const fs::path& out_dir,
                                   PanelFormat format) {
  const auto panels = build_panels(trace, image, gt_boxes);
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& p : panels) {
    char name[64];
    std::snprintf(name, sizeof(name), "ep%d_step%03d.%s", p.episode + 1, p.step,
                  format == PanelFormat::kSvg ? "svg" : "png");
    const fs::path path = out_dir / name;
    if (format == PanelFormat::kSvg) {
      write_text_file(path, panel_svg(p, gt_boxes));
    } else {
      write_png(panel_raster(p, gt_boxes), path);
    }
    index.push_back({{"file", std::string(name)},
                     {"episode", p.episode + 1},
                     {"step", p.step},
                     {"caption", p.caption},
                     {"box", {p.box.x_min, p.box.y_min, p.box.x_max, p.box.y_max}}});
    written.push_back(path);
  }
  write_text_file(out_dir / "panels.json", index.dump(1) + "\n");
  return written;
}

}  // namespace defloc
