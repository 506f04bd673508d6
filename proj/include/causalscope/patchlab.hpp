#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "causalscope/corpus.hpp"
#include "causalscope/model.hpp"
#include "causalscope/tensor.hpp"
#include "causalscope/trace.hpp"

namespace causalscope {

// logit(answer_clean) - logit(answer_corrupted) at the pair's answer position.
double logit_diff(const Matrix& logits, const ContrastivePair& pair);
// Same quantity from a final residual stream, in double after the final norm.
// Sweeps use this path for every run so no-patch and full-patch cells are exact.
double logit_diff_from_residual(const ModelTensors& model, const Matrix& final_residual, const ContrastivePair& pair);

// Pairs whose clean and corrupted logit differences are closer than this are
// uninformative and never enter averages.
inline constexpr double kMinLogitGap = 1e-6;

enum class SweepKind { head, resid_pre, attn_out, mlp_out };
std::string_view to_string(SweepKind kind);
SweepKind parse_sweep_kind(std::string_view name);

struct SweepResult {
    SweepKind kind = SweepKind::head;
    std::string template_id;
    std::vector<std::string> row_labels; // layers
    std::vector<std::string> col_labels; // heads, or tokens for residual sweeps
    Grid effect;                         // (LD_patched - LD_corr) / (LD_clean - LD_corr)
    Grid raw;                            // LD_patched - LD_corr
    double ld_clean = 0.0;               // mean over contributing pairs
    double ld_corrupted = 0.0;
    std::size_t n = 0;       // contributing pairs
    std::size_t skipped = 0; // uninformative pairs
    std::vector<int> perturbed_columns;
    // Calibration, per contributing pair.
    std::vector<double> no_patch_effect;
    std::vector<double> full_patch_effect;

    bool informative() const { return n > 0; }
};

struct SweepOptions {
    int threads = 1;
    // Also run the no-patch and all-sites calibration runs.
    bool calibrate = true;
    const BpeTables* tables = nullptr; // token labels for residual sweeps
};

// Patches clean head_result(layer, head) into the corrupted run at every
// position, one head at a time. An uninformative pair yields n = 0, skipped = 1
// and NaN grids.
SweepResult head_patch_sweep(const ModelTensors& model, const ContrastivePair& pair, const SweepOptions& options = {});

// One patched run per (layer, position) of a residual-stream site.
SweepResult resid_patch_sweep(const ModelTensors& model, const ContrastivePair& pair, SweepKind kind,
                              const SweepOptions& options = {});

// Recomputes one sweep cell with a standalone forward pass.
double patch_cell(const ModelTensors& model, const ContrastivePair& pair, SweepKind kind, int layer, int column);

// Mean of the informative sweeps (same kind and shape). ArgumentError when
// none is informative or shapes differ.
SweepResult average_sweeps(std::span<const SweepResult> sweeps);

struct RankedHead {
    int layer = 0;
    int head = 0;
    double effect = 0.0;
};

// Top-k cells by |effect|, ties by (layer, head). ArgumentError when k exceeds the grid.
std::vector<RankedHead> select_heads(const SweepResult& sweep, std::size_t k);
// 1-based rank of a head under the select_heads order.
int head_rank(const SweepResult& sweep, int layer, int head);

struct AblationReport {
    AblationMode mode = AblationMode::zero;
    std::vector<HeadRef> heads;
    std::uint64_t seed = 0;
    std::size_t n = 0;       // pairs evaluated
    std::size_t skipped = 0; // resample mode: pairs without a same-length partner
    double mean_ld = 0.0;
    double mean_ld_ablated = 0.0;
    double mean_loss = 0.0; // -log p(answer_clean) at the answer position
    double mean_loss_ablated = 0.0;

    double mean_delta_ld() const { return mean_ld_ablated - mean_ld; }
    double mean_delta_loss() const { return mean_loss_ablated - mean_loss; }
};

// Ablates `heads` on each clean prompt. Resample mode draws replacement
// head outputs from the other pairs of equal length under a per-pair seed.
AblationReport ablation_study(const ModelTensors& model, std::span<const ContrastivePair> pairs,
                              std::span<const HeadRef> heads, AblationMode mode, std::uint64_t seed, int threads = 1);

nlohmann::ordered_json to_json(const SweepResult& sweep);
SweepResult sweep_from_json(const nlohmann::json& j);
std::string to_csv(const SweepResult& sweep);
nlohmann::ordered_json to_json(const std::vector<RankedHead>& ranking);
nlohmann::ordered_json to_json(const AblationReport& report);

} // namespace causalscope
