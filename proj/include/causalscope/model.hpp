#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "causalscope/hooks.hpp"
#include "causalscope/tensor.hpp"
#include "causalscope/tokenizer.hpp"

namespace causalscope {

struct ModelConfig {
    int n_layers = 12;
    int n_heads = 12;
    int d_model = 768;
    int d_head = 64;
    int d_mlp = 3072;
    int vocab_size = 50257;
    int n_ctx = 1024;
    float ln_eps = 1e-5f;

    static ModelConfig gpt2_small() { return {}; }
    // Throws ArgumentError when counts are non-positive or d_model != n_heads * d_head.
    void validate() const;
};

struct LayerWeights {
    RowVector ln1_gain, ln1_bias;
    Matrix qkv_weight; // [3*d_model x d_model]
    RowVector qkv_bias;
    Matrix out_weight; // [d_model x d_model], input columns grouped by head
    RowVector out_bias;
    RowVector ln2_gain, ln2_bias;
    Matrix fc_weight; // [d_mlp x d_model]
    RowVector fc_bias;
    Matrix proj_weight; // [d_model x d_mlp]
    RowVector proj_bias;
};

// GPT-2 parameters in the engine's [out x in] orientation. The unembedding
// is token_embedding transposed.
struct ModelTensors {
    ModelConfig config;
    Matrix token_embedding;    // [vocab x d_model]
    Matrix position_embedding; // [n_ctx x d_model]
    std::vector<LayerWeights> layers;
    RowVector lnf_gain, lnf_bias;

    std::size_t parameter_count() const;
};

// Loads a safetensors checkpoint with the released GPT-2 tensor names
// (optionally prefixed "transformer."). Conv1D kernels stored [in, out]
// are transposed; 16-bit payloads are up-cast.
ModelTensors load_weights(const std::filesystem::path& path, const ModelConfig& config = ModelConfig::gpt2_small());

// Canonical tensor names and released-checkpoint shapes for `config`.
std::vector<std::pair<std::string, std::vector<std::int64_t>>> checkpoint_layout(const ModelConfig& config);

struct ForwardOptions {
    TraceRequest trace = TraceRequest::nothing();
    std::span<const Override> overrides;
    // Resume at `start_layer` with `start_residual` as its resid_pre instead of
    // embedding the ids. Sites before start_layer are neither traced nor patched.
    int start_layer = 0;
    const Matrix* start_residual = nullptr;
    // When false only `final_residual` is produced (no unembedding).
    bool compute_logits = true;
};

struct ForwardResult {
    Matrix logits;         // [seq x vocab], empty when compute_logits is false
    Matrix final_residual; // resid_post of the last layer, after overrides
    ActivationCache cache;
};

// Full-sequence GPT-2 forward pass with optional tracing and overrides.
ForwardResult forward(const ModelTensors& model, std::span<const TokenId> ids, const ForwardOptions& options = {});

// Runs copies of one sequence that differ only in their overrides, stacking
// them so every projection is a single GEMM. Returns each copy's final
// residual; a copy's result equals forward() with the same overrides.
std::vector<Matrix> forward_variants(const ModelTensors& model, std::span<const TokenId> ids,
                                     std::span<const std::vector<Override>> variants, int start_layer = 0,
                                     const Matrix* start_residual = nullptr);

// Building blocks shared with the lens and patch drivers.
Matrix layer_norm(const Matrix& x, const RowVector& gain, const RowVector& bias, float eps);
// Final layer norm followed by the tied unembedding.
Matrix unembed(const ModelTensors& model, const Matrix& residual);
// Final layer norm of a single residual row.
RowVector final_norm_row(const ModelTensors& model, const Eigen::Ref<const RowVector>& residual_row);
float gelu(float x);
// Vectorized tanh-approximation GELU applied row by row, in place.
void gelu_rows(Matrix& x);

} // namespace causalscope
