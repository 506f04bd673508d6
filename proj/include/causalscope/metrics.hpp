#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "causalscope/corpus.hpp"
#include "causalscope/hooks.hpp"
#include "causalscope/model.hpp"
#include "causalscope/tensor.hpp"

namespace causalscope {

// Share of clause-internal attention that clause queries send to the delimiter key.
double delimiter_proportion(const Matrix& pattern, const AnnotatedExample& ex);
// Share of clause-internal attention sent from later-phrase queries to earlier-phrase keys.
double causal_proportion(const Matrix& pattern, const AnnotatedExample& ex);

// [n_layers x n_heads] grids over the attn_pattern sites of a cache built from ex.ids.
Grid delimiter_attention(const ActivationCache& cache, const AnnotatedExample& ex, const ModelConfig& config);
Grid causal_attention(const ActivationCache& cache, const AnnotatedExample& ex, const ModelConfig& config);

struct AttentionGrids {
    Grid delimiter;
    Grid causal;
};

// Runs the model on ex.ids recording attention patterns only.
AttentionGrids attention_grids(const ModelTensors& model, const AnnotatedExample& ex);

struct HeatmapMatrix {
    std::string metric;
    std::string dataset_id;
    std::size_t n = 0;
    Grid mean;
    Grid std; // population standard deviation
};

// Per-cell mean and population std, reduced in input order.
HeatmapMatrix aggregate(std::string metric, std::string dataset_id, std::span<const Grid> per_example);

// Mean over rows [first, last] and all columns.
double band_mean(const Grid& grid, int first, int last);

struct BaselineComparison {
    std::string metric;
    std::string dataset_id;
    std::string baseline_id;
    Grid difference; // causal mean - baseline mean
    Grid t;          // Welch t statistic; NaN where undefined
};

BaselineComparison compare_to_baseline(const HeatmapMatrix& causal, const HeatmapMatrix& noncausal);

nlohmann::ordered_json grid_to_json(const Grid& g);
Grid grid_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const HeatmapMatrix& h);
HeatmapMatrix heatmap_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const BaselineComparison& c);
// Rows "layer,head,mean,std".
std::string to_csv(const HeatmapMatrix& h);

} // namespace causalscope
