#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "causalscope/lens.hpp"
#include "causalscope/metrics.hpp"
#include "causalscope/patchlab.hpp"
#include "causalscope/tensor.hpp"

namespace causalscope {

// Sequential runs white to blue over [lo, hi]; diverging runs blue, white,
// red over [-m, m] with m = max |value|.
enum class ColorScale { sequential, diverging };

struct RenderSpec {
    Grid grid;
    std::vector<std::string> row_labels;
    std::vector<std::string> col_labels;
    std::string title;
    std::string row_axis;
    std::string col_axis;
    ColorScale scale = ColorScale::sequential;
    // Sequential limits; defaults to [0, 1] widened to cover the data.
    double lo = 0.0;
    double hi = 1.0;
    std::vector<int> flagged_columns;
};

// "#rrggbb" for v under the spec's scale and limits.
std::string cell_color(const RenderSpec& spec, double v);

// Deterministic SVG with the grid embedded as JSON metadata. RenderError
// lists NaN cells; ArgumentError for label counts that do not fit the grid.
std::string render_svg(const RenderSpec& spec);
// Grid, labels and scale recovered from a document produced by render_svg.
nlohmann::json svg_metadata(const std::string& svg);

RenderSpec spec_for(const HeatmapMatrix& heatmap, std::string title);
RenderSpec spec_for(const SweepResult& sweep, std::string title);
RenderSpec spec_for(const PerLayerLoss& loss, std::string title);
RenderSpec spec_for_difference(const LossContrast& contrast, std::string title);

// Recognizes heatmap, sweep, per-layer loss and loss-contrast JSON; returns
// one spec per figure with a name suffix ("" or clean/corrupted/difference).
std::vector<std::pair<std::string, RenderSpec>> specs_from_artifact(const nlohmann::json& j, const std::string& title);

// Writes {stem}.json, {stem}.csv (when csv is non-empty) and {stem}.svg
// where stem = "{experiment}.{metric}". Returns the written paths.
std::vector<std::filesystem::path> write_artifact(const std::filesystem::path& dir, const std::string& experiment,
                                                  const std::string& metric, const nlohmann::ordered_json& json,
                                                  const std::string& csv, const RenderSpec& spec);

// JSON dumped with a trailing newline; the single formatting used for every artifact.
std::string dump_json(const nlohmann::ordered_json& j);
void write_file(const std::filesystem::path& path, const std::string& bytes);

} // namespace causalscope
