#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "causalscope/hooks.hpp"
#include "causalscope/model.hpp"

namespace causalscope {

struct PatchTarget {
    HookSite site;
    PositionSelector positions;
};

// Clean-run activations to re-inject into a (corrupted) run.
struct PatchSpec {
    std::vector<PatchTarget> targets;
    const ActivationCache* donor = nullptr;

    // Targets for every hook site of the model at every position.
    static PatchSpec everything(const ModelConfig& config, const ActivationCache& donor);
};

struct TracedRun {
    Matrix logits;
    ActivationCache cache;
};

// Every site of the catalog for `config` (attn_pattern and head_result per head).
std::vector<HookSite> all_sites(const ModelConfig& config);

TracedRun run_with_cache(const ModelTensors& model, std::span<const TokenId> ids,
                         const TraceRequest& trace = TraceRequest::everything());

// Validates the spec (donor length, duplicate targets, donor coverage) before
// any computation; throws PatchError on violation.
TracedRun run_with_patches(const ModelTensors& model, std::span<const TokenId> ids, const PatchSpec& patch,
                           const TraceRequest& trace = TraceRequest::everything());

using HeadRef = std::pair<int, int>; // (layer, head)

enum class AblationMode { zero, resample };

std::string_view to_string(AblationMode mode);
AblationMode parse_ablation_mode(std::string_view name);

// Zero mode replaces each head_result with zeros; resample mode with the same
// head's head_result from a pool cache drawn uniformly under `seed`.
Matrix ablate(const ModelTensors& model, std::span<const TokenId> ids, std::span<const HeadRef> heads, AblationMode mode,
              std::span<const ActivationCache> resample_pool = {}, std::uint64_t seed = 0);

// Debug dump: one raw little-endian float32 file per site plus manifest.json.
void dump_cache(const ActivationCache& cache, const std::filesystem::path& dir);

} // namespace causalscope
