#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace rlens {

/// One heatmap panel: rows = the 7 module kinds, columns = layers.
struct HeatmapPanel {
  std::string title;
  int n_layers = 0;
  std::vector<double> values;  // layer * 7 + kind, same cell order as the maps
};

/// Renders the panels side by side with one shared linear color scale
/// (sequential when all values are >= 0, diverging otherwise). Cells carry
/// printed value labels; layer labels are 1-based, with a legend noting that
/// tensor names are 0-based. Output is deterministic: identical inputs give
/// identical bytes.
std::string render_heatmap_svg(const std::vector<HeatmapPanel>& panels);

void write_heatmap_svg(const std::filesystem::path& path,
                       const std::vector<HeatmapPanel>& panels);

}  // namespace rlens
