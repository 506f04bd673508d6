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

// Readouts are taken after the embedding and after every layer: n_layers + 1.
int readout_count(const ModelConfig& config);

// Residual stream of readout r: resid_pre of layer r, or resid_post of the
// last layer for r = n_layers. ArgumentError when the cache lacks it.
const Matrix& readout_residual(const ActivationCache& cache, const ModelConfig& config, int readout);

// [readouts] of [seq x vocab] logits: final layer norm, then unembedding.
std::vector<Matrix> per_layer_logits(const ActivationCache& cache, const ModelTensors& model);

// Next-token cross entropy of every row: loss[t] = -log softmax(logits[t])[ids[t+1]].
std::vector<double> token_losses(const Matrix& logits, std::span<const TokenId> ids);

struct PerLayerLoss {
    Grid grid;                        // [readouts x seq-1]
    std::vector<std::string> tokens;  // column labels: token at t, predicting t+1
    std::vector<std::string> targets; // token at t+1
};

// ArgumentError for seq < 2 or logits not matching ids.
PerLayerLoss per_layer_loss(std::span<const TokenId> ids, std::span<const Matrix> logits13);

// Runs the model and computes the grid one readout at a time. Column labels
// are filled when tables are given.
PerLayerLoss lens_loss(const ModelTensors& model, std::span<const TokenId> ids, const BpeTables* tables = nullptr);

struct LossContrast {
    PerLayerLoss clean;
    PerLayerLoss corrupted;
    Grid difference; // clean - corrupted
    // Columns whose input or target token lies in the perturbed span.
    std::vector<int> perturbed_columns;
};

// AnnotationError when the pair is not token-aligned.
LossContrast loss_contrast(const ContrastivePair& pair, const ModelTensors& model, const BpeTables* tables = nullptr);

nlohmann::ordered_json to_json(const PerLayerLoss& loss);
PerLayerLoss per_layer_loss_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const LossContrast& contrast);

} // namespace causalscope
