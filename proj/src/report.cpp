#include "causalscope/report.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "causalscope/error.hpp"

namespace causalscope {

namespace {

using Rgb = std::array<double, 3>;
constexpr Rgb kWhite{255, 255, 255};
constexpr Rgb kDeepBlue{8, 48, 107};
constexpr Rgb kBlue{33, 102, 172};
constexpr Rgb kRed{178, 24, 43};

constexpr int kCell = 32;
constexpr int kLeft = 90;
constexpr int kTop = 70;
constexpr int kLegendWidth = 18;
constexpr int kLegendSteps = 32;

std::string hex(const Rgb& a, const Rgb& b, double t) {
    t = std::clamp(t, 0.0, 1.0);
    auto ch = [&](int i) { return static_cast<int>(std::lround(a[i] + (b[i] - a[i]) * t)); };
    return fmt::format("#{:02x}{:02x}{:02x}", ch(0), ch(1), ch(2));
}

std::string xml_escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

std::string xml_unescape(std::string_view s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] != '&') {
            out += s[i];
            continue;
        }
        const auto end = s.find(';', i);
        const auto ent = s.substr(i, end - i + 1);
        if (ent == "&amp;") out += '&';
        else if (ent == "&lt;") out += '<';
        else if (ent == "&gt;") out += '>';
        else if (ent == "&quot;") out += '"';
        else throw ParseError(fmt::format("unknown XML entity {}", ent));
        i = end;
    }
    return out;
}

std::string num(double v) { return fmt::format("{:.4g}", v); }

double diverging_limit(const Grid& g) {
    const double m = g.size() ? g.cwiseAbs().maxCoeff() : 0.0;
    return m > 0.0 ? m : 1.0;
}

std::vector<std::string> index_labels(Eigen::Index n) {
    std::vector<std::string> out;
    for (Eigen::Index i = 0; i < n; ++i) out.push_back(std::to_string(i));
    return out;
}

std::string scale_name(ColorScale s) { return s == ColorScale::sequential ? "sequential" : "diverging"; }

} // namespace

std::string cell_color(const RenderSpec& spec, double v) {
    if (spec.scale == ColorScale::sequential) {
        const double span = spec.hi - spec.lo;
        return hex(kWhite, kDeepBlue, span > 0.0 ? (v - spec.lo) / span : 0.0);
    }
    const double m = diverging_limit(spec.grid);
    return v < 0.0 ? hex(kWhite, kBlue, -v / m) : hex(kWhite, kRed, v / m);
}

std::string render_svg(const RenderSpec& spec) {
    const auto rows = spec.grid.rows();
    const auto cols = spec.grid.cols();
    if (rows == 0 || cols == 0) throw ArgumentError("cannot render an empty grid");
    if (static_cast<Eigen::Index>(spec.row_labels.size()) != rows || static_cast<Eigen::Index>(spec.col_labels.size()) != cols) {
        throw ArgumentError(fmt::format("{} row / {} column labels for a {}x{} grid", spec.row_labels.size(),
                                        spec.col_labels.size(), rows, cols));
    }
    std::vector<std::string> bad;
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            if (!std::isfinite(spec.grid(r, c))) bad.push_back(fmt::format("({}, {})", r, c));
        }
    }
    if (!bad.empty()) throw RenderError(fmt::format("\"{}\" has non-finite cells: {}", spec.title, fmt::join(bad, ", ")));

    Eigen::Index rmin = 0, cmin = 0, rmax = 0, cmax = 0;
    const double vmin = spec.grid.minCoeff(&rmin, &cmin);
    const double vmax = spec.grid.maxCoeff(&rmax, &cmax);
    RenderSpec s = spec;
    if (s.scale == ColorScale::sequential) {
        s.lo = std::min(s.lo, vmin);
        s.hi = std::max(s.hi, vmax);
    }
    const double lo = s.scale == ColorScale::sequential ? s.lo : -diverging_limit(s.grid);
    const double hi = s.scale == ColorScale::sequential ? s.hi : diverging_limit(s.grid);

    const int gw = static_cast<int>(cols) * kCell;
    const int gh = static_cast<int>(rows) * kCell;
    const int legend_x = kLeft + gw + 24;
    const int width = legend_x + kLegendWidth + 80;
    const int height = kTop + gh + 110;

    std::string out;
    out += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out += fmt::format("<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{}\" height=\"{}\" "
                       "viewBox=\"0 0 {} {}\" font-family=\"sans-serif\" font-size=\"11\">\n",
                       width, height, width, height);

    nlohmann::ordered_json meta;
    meta["title"] = s.title;
    meta["scale"] = scale_name(s.scale);
    meta["limits"] = {lo, hi};
    meta["row_axis"] = s.row_axis;
    meta["col_axis"] = s.col_axis;
    meta["row_labels"] = s.row_labels;
    meta["col_labels"] = s.col_labels;
    meta["flagged_columns"] = s.flagged_columns;
    meta["grid"] = grid_to_json(s.grid);
    out += "<metadata id=\"grid-data\">" + xml_escape(meta.dump()) + "</metadata>\n";
    out += "<rect x=\"0\" y=\"0\" width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
    out += fmt::format("<text x=\"{}\" y=\"22\" font-size=\"14\" font-weight=\"bold\">{}</text>\n", kLeft, xml_escape(s.title));
    out += fmt::format("<text x=\"{}\" y=\"40\">min {} at ({}, {}); max {} at ({}, {})</text>\n", kLeft, num(vmin), rmin, cmin,
                       num(vmax), rmax, cmax);

    out += "<g id=\"cells\">\n";
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            const double v = s.grid(r, c);
            out += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"><title>{} {}, {} {}: {}</title></rect>\n",
                               kLeft + c * kCell, kTop + r * kCell, kCell, kCell, cell_color(s, v), xml_escape(s.row_axis),
                               xml_escape(s.row_labels[r]), xml_escape(s.col_axis), xml_escape(s.col_labels[c]), num(v));
        }
    }
    out += "</g>\n";
    for (int c : s.flagged_columns) {
        if (c < 0 || c >= cols) continue;
        out += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#000000\" stroke-width=\"2\"/>\n",
                           kLeft + c * kCell, kTop, kCell, gh);
    }

    out += "<g id=\"row-labels\" text-anchor=\"end\">\n";
    for (Eigen::Index r = 0; r < rows; ++r) {
        out += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", kLeft - 6, kTop + r * kCell + kCell / 2 + 4,
                           xml_escape(s.row_labels[r]));
    }
    out += "</g>\n<g id=\"col-labels\" text-anchor=\"end\">\n";
    for (Eigen::Index c = 0; c < cols; ++c) {
        const int x = kLeft + static_cast<int>(c) * kCell + kCell / 2;
        const int y = kTop + gh + 12;
        const bool flagged = std::find(s.flagged_columns.begin(), s.flagged_columns.end(), c) != s.flagged_columns.end();
        out += fmt::format("<text x=\"{}\" y=\"{}\" transform=\"rotate(-45 {} {})\"{}>{}</text>\n", x, y, x, y,
                           flagged ? " font-weight=\"bold\"" : "", xml_escape(s.col_labels[c]));
    }
    out += "</g>\n";
    out += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", kLeft + gw / 2, height - 8,
                       xml_escape(s.col_axis));
    out += fmt::format("<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
                       kTop + gh / 2, kTop + gh / 2, xml_escape(s.row_axis));

    // Legend: top is the high end.
    out += "<g id=\"legend\">\n";
    const double step_h = static_cast<double>(gh) / kLegendSteps;
    for (int i = 0; i < kLegendSteps; ++i) {
        const double v = hi - (hi - lo) * (i + 0.5) / kLegendSteps;
        const int y0 = kTop + static_cast<int>(std::lround(i * step_h));
        const int y1 = kTop + static_cast<int>(std::lround((i + 1) * step_h));
        out += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n", legend_x, y0, kLegendWidth,
                           y1 - y0, cell_color(s, v));
    }
    out += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444444\"/>\n", legend_x, kTop,
                       kLegendWidth, gh);
    out += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", legend_x + kLegendWidth + 4, kTop + 8, num(hi));
    out += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", legend_x + kLegendWidth + 4, kTop + gh, num(lo));
    out += "</g>\n</svg>\n";
    return out;
}

nlohmann::json svg_metadata(const std::string& svg) {
    const std::string open = "<metadata id=\"grid-data\">";
    const auto b = svg.find(open);
    const auto e = svg.find("</metadata>", b);
    if (b == std::string::npos || e == std::string::npos) throw ParseError("SVG carries no grid metadata");
    return nlohmann::json::parse(xml_unescape(std::string_view(svg).substr(b + open.size(), e - b - open.size())));
}

RenderSpec spec_for(const HeatmapMatrix& h, std::string title) {
    RenderSpec s;
    s.grid = h.mean;
    s.row_labels = index_labels(h.mean.rows());
    s.col_labels = index_labels(h.mean.cols());
    s.title = std::move(title);
    s.row_axis = "layer";
    s.col_axis = "head";
    s.scale = ColorScale::sequential;
    return s;
}

RenderSpec spec_for(const SweepResult& sweep, std::string title) {
    RenderSpec s;
    s.grid = sweep.effect;
    s.row_labels = sweep.row_labels;
    s.col_labels = sweep.col_labels;
    s.title = std::move(title);
    s.row_axis = "layer";
    s.col_axis = sweep.kind == SweepKind::head ? "head" : "position";
    s.scale = ColorScale::diverging;
    s.flagged_columns = sweep.perturbed_columns;
    return s;
}

RenderSpec spec_for(const PerLayerLoss& loss, std::string title) {
    RenderSpec s;
    s.grid = loss.grid;
    s.row_labels = index_labels(loss.grid.rows());
    s.col_labels = loss.tokens;
    s.title = std::move(title);
    s.row_axis = "readout";
    s.col_axis = "token";
    s.scale = ColorScale::sequential;
    return s;
}

RenderSpec spec_for_difference(const LossContrast& c, std::string title) {
    RenderSpec s = spec_for(c.clean, std::move(title));
    s.grid = c.difference;
    s.scale = ColorScale::diverging;
    s.flagged_columns = c.perturbed_columns;
    return s;
}

std::vector<std::pair<std::string, RenderSpec>> specs_from_artifact(const nlohmann::json& j, const std::string& title) {
    if (!j.is_object()) throw ParseError("artifact must be a JSON object");
    if (j.contains("kind") && j.contains("axis")) return {{"", spec_for(sweep_from_json(j), title)}};
    if (j.contains("metric") && j.contains("mean")) return {{"", spec_for(heatmap_from_json(j), title)}};
    if (j.contains("clean") && j.contains("difference")) {
        LossContrast c{per_layer_loss_from_json(j.at("clean")), per_layer_loss_from_json(j.at("corrupted")),
                       grid_from_json(j.at("difference")), j.value("perturbed_columns", std::vector<int>{})};
        return {{"clean", spec_for(c.clean, title + " (clean)")},
                {"corrupted", spec_for(c.corrupted, title + " (corrupted)")},
                {"difference", spec_for_difference(c, title + " (clean - corrupted)")}};
    }
    if (j.contains("tokens") && j.contains("grid")) return {{"", spec_for(per_layer_loss_from_json(j), title)}};
    throw ParseError("unrecognized artifact: expected a heatmap, sweep, per-layer loss or loss contrast");
}

std::string dump_json(const nlohmann::ordered_json& j) { return j.dump(1) + "\n"; }

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(fmt::format("cannot write {}", path.string()));
    out << bytes;
    if (!out) throw Error(fmt::format("failed writing {}", path.string()));
}

std::vector<std::filesystem::path> write_artifact(const std::filesystem::path& dir, const std::string& experiment,
                                                  const std::string& metric, const nlohmann::ordered_json& json,
                                                  const std::string& csv, const RenderSpec& spec) {
    const std::string stem = experiment + "." + metric;
    std::vector<std::filesystem::path> paths{dir / (stem + ".json")};
    const auto svg = render_svg(spec);
    write_file(paths.back(), dump_json(json));
    if (!csv.empty()) {
        paths.push_back(dir / (stem + ".csv"));
        write_file(paths.back(), csv);
    }
    paths.push_back(dir / (stem + ".svg"));
    write_file(paths.back(), svg);
    return paths;
}

} // namespace causalscope
