#include "causalscope/metrics.hpp"

#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "causalscope/error.hpp"

namespace causalscope {

namespace {

void check_spans(const Matrix& pattern, const AnnotatedExample& ex) {
    const int seq = static_cast<int>(pattern.rows());
    if (pattern.cols() != seq) throw ArgumentError("attention pattern must be square");
    auto in_range = [&](const TokenSpan& s) { return s.begin >= 0 && s.begin <= s.end && s.end <= seq; };
    if (!in_range(ex.effect_span) || !in_range(ex.cause_span) || ex.delimiter_index < 0 || ex.delimiter_index >= seq) {
        throw ArgumentError(fmt::format("spans of \"{}\" exceed the {}-token pattern", ex.text, seq));
    }
    if (ex.effect_span.contains(ex.delimiter_index) || ex.cause_span.contains(ex.delimiter_index) ||
        std::max(ex.effect_span.begin, ex.cause_span.begin) < std::min(ex.effect_span.end, ex.cause_span.end)) {
        throw ArgumentError(fmt::format("spans of \"{}\" overlap", ex.text));
    }
}

// Clause tokens: effect, delimiter and cause, in position order.
std::vector<int> clause_tokens(const AnnotatedExample& ex) {
    std::vector<int> out;
    const auto& a = ex.earlier_phrase();
    const auto& b = ex.later_phrase();
    for (int i = a.begin; i < a.end; ++i) out.push_back(i);
    out.push_back(ex.delimiter_index);
    for (int i = b.begin; i < b.end; ++i) out.push_back(i);
    return out;
}

double clause_mass(const Matrix& p, const std::vector<int>& clause) {
    double total = 0.0;
    for (int q : clause) {
        for (int k : clause) total += p(q, k);
    }
    return total;
}

template <typename F>
Grid per_head(const ActivationCache& cache, const AnnotatedExample& ex, const ModelConfig& config, F metric) {
    if (cache.ids() != ex.ids) throw ArgumentError(fmt::format("cache was not produced from \"{}\"", ex.text));
    Grid g(config.n_layers, config.n_heads);
    for (int l = 0; l < config.n_layers; ++l) {
        for (int h = 0; h < config.n_heads; ++h) g(l, h) = metric(cache.get(HookSite::make(SiteKind::attn_pattern, l, h)), ex);
    }
    return g;
}

} // namespace

// The delimiter's own query row is left out of both sums: the metric is the
// attention other clause tokens pay to the delimiter.
double delimiter_proportion(const Matrix& pattern, const AnnotatedExample& ex) {
    check_spans(pattern, ex);
    const auto clause = clause_tokens(ex);
    double num = 0.0, den = 0.0;
    for (int q : clause) {
        if (q == ex.delimiter_index) continue;
        num += pattern(q, ex.delimiter_index);
        for (int k : clause) den += pattern(q, k);
    }
    return den > 0.0 ? num / den : 0.0;
}

double causal_proportion(const Matrix& pattern, const AnnotatedExample& ex) {
    check_spans(pattern, ex);
    const auto& early = ex.earlier_phrase();
    const auto& late = ex.later_phrase();
    double num = 0.0;
    for (int q = late.begin; q < late.end; ++q) {
        for (int k = early.begin; k < early.end; ++k) num += pattern(q, k);
    }
    const double den = clause_mass(pattern, clause_tokens(ex));
    return den > 0.0 ? num / den : 0.0;
}

Grid delimiter_attention(const ActivationCache& cache, const AnnotatedExample& ex, const ModelConfig& config) {
    return per_head(cache, ex, config, delimiter_proportion);
}

Grid causal_attention(const ActivationCache& cache, const AnnotatedExample& ex, const ModelConfig& config) {
    return per_head(cache, ex, config, causal_proportion);
}

AttentionGrids attention_grids(const ModelTensors& model, const AnnotatedExample& ex) {
    ForwardOptions opts;
    opts.trace = TraceRequest::only({SiteKind::attn_pattern});
    opts.compute_logits = false;
    const auto run = forward(model, ex.ids, opts);
    return {delimiter_attention(run.cache, ex, model.config), causal_attention(run.cache, ex, model.config)};
}

HeatmapMatrix aggregate(std::string metric, std::string dataset_id, std::span<const Grid> per_example) {
    if (per_example.empty()) throw ArgumentError(fmt::format("aggregate {}: no examples", metric));
    const auto rows = per_example.front().rows();
    const auto cols = per_example.front().cols();
    Grid sum = Grid::Zero(rows, cols);
    for (const auto& g : per_example) {
        if (g.rows() != rows || g.cols() != cols) throw ArgumentError(fmt::format("aggregate {}: grid shapes differ", metric));
        sum += g;
    }
    const double n = static_cast<double>(per_example.size());
    HeatmapMatrix h{std::move(metric), std::move(dataset_id), per_example.size(), sum / n, Grid::Zero(rows, cols)};
    Grid sq = Grid::Zero(rows, cols);
    for (const auto& g : per_example) sq += (g - h.mean).cwiseAbs2();
    h.std = (sq / n).cwiseSqrt();
    return h;
}

double band_mean(const Grid& grid, int first, int last) {
    if (first < 0 || last >= grid.rows() || first > last) throw ArgumentError("band_mean: row range out of bounds");
    return grid.middleRows(first, last - first + 1).mean();
}

BaselineComparison compare_to_baseline(const HeatmapMatrix& causal, const HeatmapMatrix& noncausal) {
    if (causal.metric != noncausal.metric) {
        throw ArgumentError(fmt::format("cannot compare metric {} with {}", causal.metric, noncausal.metric));
    }
    if (causal.n < 2 || noncausal.n < 2) throw ArgumentError("baseline comparison needs at least two examples per side");
    if (causal.mean.rows() != noncausal.mean.rows() || causal.mean.cols() != noncausal.mean.cols()) {
        throw ArgumentError("baseline comparison: grid shapes differ");
    }
    BaselineComparison c{causal.metric, causal.dataset_id, noncausal.dataset_id, causal.mean - noncausal.mean, {}};
    c.t.resize(c.difference.rows(), c.difference.cols());
    const double n1 = static_cast<double>(causal.n), n2 = static_cast<double>(noncausal.n);
    for (Eigen::Index i = 0; i < c.t.size(); ++i) {
        // Sample variances from the stored population std.
        const double v1 = causal.std(i) * causal.std(i) * n1 / (n1 - 1.0);
        const double v2 = noncausal.std(i) * noncausal.std(i) * n2 / (n2 - 1.0);
        const double se = std::sqrt(v1 / n1 + v2 / n2);
        c.t(i) = se > 0.0 ? c.difference(i) / se : std::numeric_limits<double>::quiet_NaN();
    }
    return c;
}

nlohmann::ordered_json grid_to_json(const Grid& g) {
    auto rows = nlohmann::ordered_json::array();
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
        auto row = nlohmann::ordered_json::array();
        for (Eigen::Index c = 0; c < g.cols(); ++c) {
            // Non-finite values serialize as null.
            if (std::isfinite(g(r, c))) {
                row.push_back(g(r, c));
            } else {
                row.push_back(nullptr);
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

Grid grid_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.empty() || !j.front().is_array()) throw ParseError("grid must be a non-empty array of rows");
    Grid g(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j.front().size()));
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const auto& row = j.at(r);
        if (row.size() != static_cast<std::size_t>(g.cols())) throw ParseError("grid rows have different lengths");
        for (Eigen::Index c = 0; c < g.cols(); ++c) {
            g(r, c) = row.at(c).is_null() ? std::numeric_limits<double>::quiet_NaN() : row.at(c).get<double>();
        }
    }
    return g;
}

nlohmann::ordered_json to_json(const HeatmapMatrix& h) {
    nlohmann::ordered_json j;
    j["metric"] = h.metric;
    j["dataset_id"] = h.dataset_id;
    j["n"] = h.n;
    j["mean"] = grid_to_json(h.mean);
    j["std"] = grid_to_json(h.std);
    return j;
}

HeatmapMatrix heatmap_from_json(const nlohmann::json& j) {
    try {
        return {j.at("metric").get<std::string>(), j.at("dataset_id").get<std::string>(), j.at("n").get<std::size_t>(),
                grid_from_json(j.at("mean")), grid_from_json(j.at("std"))};
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(fmt::format("malformed heatmap: {}", e.what()));
    }
}

nlohmann::ordered_json to_json(const BaselineComparison& c) {
    nlohmann::ordered_json j;
    j["metric"] = c.metric;
    j["dataset_id"] = c.dataset_id;
    j["baseline_id"] = c.baseline_id;
    j["difference"] = grid_to_json(c.difference);
    j["t"] = grid_to_json(c.t);
    return j;
}

std::string to_csv(const HeatmapMatrix& h) {
    std::string out = "layer,head,mean,std\n";
    for (Eigen::Index l = 0; l < h.mean.rows(); ++l) {
        for (Eigen::Index k = 0; k < h.mean.cols(); ++k) {
            out += fmt::format("{},{},{:.17g},{:.17g}\n", l, k, h.mean(l, k), h.std(l, k));
        }
    }
    return out;
}

} // namespace causalscope
