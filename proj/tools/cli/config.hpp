#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "causalscope/patchlab.hpp"
#include "causalscope/trace.hpp"

namespace causalscope::cli {

struct DatasetConfig {
    std::filesystem::path lexicon_dir;
    std::vector<std::string> syntax_templates;
    std::vector<std::string> semantic_templates;
    int n_per_template = 200; // syntax examples per template variant
    int max_pairs = 60;       // contrastive pairs per semantic template
};

struct SyntaxScanConfig {
    std::vector<std::string> delimiters{"because", "so", "therefore", "resulting", "since"};
    std::pair<int, int> early_layers{0, 2};
    std::pair<int, int> late_layers{9, 11};
};

struct PatchSweepConfig {
    std::vector<std::string> templates; // empty = dataset.semantic_templates
    int max_pairs = 50;
    std::vector<SweepKind> resid_sites{SweepKind::resid_pre, SweepKind::attn_out, SweepKind::mlp_out};
    int resid_pairs = 2; // pairs per template that also get residual sweeps
    int top_k = 10;
    std::vector<HeadRef> watch_heads{{11, 2}, {10, 0}, {8, 8}};
};

struct LensConfig {
    std::vector<std::string> sentences;
    std::vector<std::pair<std::string, std::string>> pairs;
};

struct AblateConfig {
    std::vector<std::string> templates; // empty = dataset.semantic_templates
    int max_pairs = 50;
    std::vector<HeadRef> heads;  // explicit head set
    int semantic_top_k = 0;      // top-k heads of the template's prior head sweep
    int syntax_top_k = 0;        // top-k mean P_c heads of a prior syntax scan
    std::string syntax_delimiter = "because";
    int control_k = 0;           // k heads with the smallest |effect| in the prior sweep
    std::vector<AblationMode> modes{AblationMode::zero, AblationMode::resample};
};

struct RunConfig {
    std::filesystem::path weights_path;
    std::filesystem::path vocab_path;
    std::filesystem::path merges_path;
    std::filesystem::path output_dir;
    std::uint64_t seed = 0;
    int threads = 1;
    DatasetConfig dataset;
    SyntaxScanConfig syntax_scan;
    PatchSweepConfig patch_sweep;
    LensConfig lens;
    AblateConfig ablate;

    // Patch sweep / ablation template lists after defaulting.
    const std::vector<std::string>& sweep_templates() const;
    const std::vector<std::string>& ablate_templates() const;
};

// Parses a config document; relative paths resolve against base_dir.
// ConfigError messages start with the offending field path.
RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
RunConfig load_config(const std::filesystem::path& path);

// Checks that every path a command reads exists; weights only when needed.
void validate_paths(const RunConfig& config, bool needs_weights);

// Canonical form (resolved values; threads and output_dir left out since
// they never change results) and its FNV-1a hash as 16 hex digits.
nlohmann::ordered_json canonical_json(const RunConfig& config);
std::string config_hash(const RunConfig& config);

} // namespace causalscope::cli
