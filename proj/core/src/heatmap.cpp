#include "rlens/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "rlens/model.hpp"

namespace rlens {

namespace {

constexpr int kCell = 34;
constexpr int kRowLabelW = 86;
constexpr int kTopLabelH = 40;
constexpr int kPanelGap = 26;
constexpr int kLegendH = 46;

struct Rgb {
  int r, g, b;
};

int lerp_channel(int a, int b, double t) {
  return static_cast<int>(std::lround(a + (b - a) * t));
}

// White -> deep blue for the sequential scale; red -> white -> blue when the
// data has both signs.
Rgb sequential(double t) {
  return {lerp_channel(255, 8, t), lerp_channel(255, 48, t), lerp_channel(255, 107, t)};
}

Rgb diverging(double t) {  // t in [-1, 1]
  if (t < 0.0) {
    return {lerp_channel(255, 178, -t), lerp_channel(255, 24, -t), lerp_channel(255, 43, -t)};
  }
  return sequential(t);
}

std::string fmt(const char* format, double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), format, v);
  return std::string(buf);
}

}  // namespace

std::string render_heatmap_svg(const std::vector<HeatmapPanel>& panels) {
  if (panels.empty()) throw Error("render_heatmap_svg: no panels");
  const int n_layers = panels[0].n_layers;
  for (const auto& p : panels) {
    if (p.n_layers != n_layers ||
        p.values.size() != static_cast<std::size_t>(n_layers) * kModuleKindCount) {
      throw Error("render_heatmap_svg: inconsistent panel shapes");
    }
  }

  double vmin = 0.0, vmax = 0.0;
  for (const auto& p : panels) {
    for (double v : p.values) {
      vmin = std::min(vmin, v);
      vmax = std::max(vmax, v);
    }
  }
  const bool diverging_scale = vmin < 0.0;
  const double vabs = std::max(std::abs(vmin), std::abs(vmax));

  const int panel_w = kRowLabelW + n_layers * kCell;
  const int panel_h = kTopLabelH + kModuleKindCount * kCell + 18;
  const int width = static_cast<int>(panels.size()) * panel_w +
                    (static_cast<int>(panels.size()) - 1) * kPanelGap + 20;
  const int height = panel_h + kLegendH + 20;

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
         "\" height=\"" + std::to_string(height) + "\" font-family=\"monospace\">\n";
  svg += "<rect width=\"" + std::to_string(width) + "\" height=\"" + std::to_string(height) +
         "\" fill=\"white\"/>\n";

  for (std::size_t pi = 0; pi < panels.size(); ++pi) {
    const auto& panel = panels[pi];
    const int ox = 10 + static_cast<int>(pi) * (panel_w + kPanelGap);
    const int oy = 10;
    svg += "<text x=\"" + std::to_string(ox + kRowLabelW) + "\" y=\"" + std::to_string(oy + 14) +
           "\" font-size=\"13\">" + panel.title + "</text>\n";

    for (int kind = 0; kind < kModuleKindCount; ++kind) {
      const int y = oy + kTopLabelH + kind * kCell;
      svg += "<text x=\"" + std::to_string(ox + kRowLabelW - 6) + "\" y=\"" +
             std::to_string(y + kCell / 2 + 4) + "\" font-size=\"10\" text-anchor=\"end\">" +
             module_kind_name(static_cast<ModuleKind>(kind)) + "</text>\n";
    }
    for (int layer = 0; layer < n_layers; ++layer) {
      const int x = ox + kRowLabelW + layer * kCell;
      // 1-based layer labels, matching the common heatmap convention.
      svg += "<text x=\"" + std::to_string(x + kCell / 2) + "\" y=\"" +
             std::to_string(oy + kTopLabelH - 6) +
             "\" font-size=\"10\" text-anchor=\"middle\">" + std::to_string(layer + 1) +
             "</text>\n";
    }

    for (int layer = 0; layer < n_layers; ++layer) {
      for (int kind = 0; kind < kModuleKindCount; ++kind) {
        const double v = panel.values[static_cast<std::size_t>(layer) * kModuleKindCount +
                                      static_cast<std::size_t>(kind)];
        Rgb color{255, 255, 255};
        if (vabs > 0.0) {
          color = diverging_scale ? diverging(v / vabs) : sequential(v / vabs);
        }
        const int x = ox + kRowLabelW + layer * kCell;
        const int y = oy + kTopLabelH + kind * kCell;
        svg += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) + "\" width=\"" +
               std::to_string(kCell) + "\" height=\"" + std::to_string(kCell) + "\" fill=\"rgb(" +
               std::to_string(color.r) + "," + std::to_string(color.g) + "," +
               std::to_string(color.b) + ")\" stroke=\"#cccccc\" stroke-width=\"1\"/>\n";
        const bool dark =
            (color.r * 299 + color.g * 587 + color.b * 114) / 1000 < 128;
        svg += "<text x=\"" + std::to_string(x + kCell / 2) + "\" y=\"" +
               std::to_string(y + kCell / 2 + 3) + "\" font-size=\"7\" text-anchor=\"middle\"" +
               (dark ? " fill=\"white\"" : "") + ">" + fmt("%.2g", v) + "</text>\n";
      }
    }
  }

  const int ly = panel_h + 24;
  svg += "<text x=\"10\" y=\"" + std::to_string(ly) + "\" font-size=\"10\">scale: " +
         (diverging_scale ? fmt("%.6g", -vabs) + " .. " + fmt("%.6g", vabs)
                          : std::string("0 .. ") + fmt("%.6g", vabs)) +
         " (shared across panels)</text>\n";
  svg += "<text x=\"10\" y=\"" + std::to_string(ly + 14) +
         "\" font-size=\"10\">columns: layers 1.." + std::to_string(n_layers) +
         " (tensor names use 0-based indices: layer N here is layers." +
         std::to_string(n_layers - 1) + " at N=" + std::to_string(n_layers) +
         ")</text>\n";
  svg += "</svg>\n";
  return svg;
}

void write_heatmap_svg(const std::filesystem::path& path,
                       const std::vector<HeatmapPanel>& panels) {
  const std::string svg = render_heatmap_svg(panels);
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw Error("cannot write SVG: " + path.string());
  out << svg;
  if (!out) throw Error("I/O error writing SVG: " + path.string());
}

}  // namespace rlens
