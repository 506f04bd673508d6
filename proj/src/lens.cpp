#include "causalscope/lens.hpp"

#include <cmath>

#include <fmt/format.h>

#include "causalscope/error.hpp"
#include "causalscope/metrics.hpp"

namespace causalscope {

namespace {

void check_ids(std::span<const TokenId> ids) {
    if (ids.size() < 2) throw ArgumentError(fmt::format("per-layer loss needs at least 2 tokens, got {}", ids.size()));
}

std::vector<std::string> labels(const BpeTables* tables, std::span<const TokenId> ids) {
    std::vector<std::string> out;
    for (TokenId id : ids) out.push_back(tables ? token_text(*tables, id) : std::to_string(id));
    return out;
}

void fill_labels(PerLayerLoss& loss, std::span<const TokenId> ids, const BpeTables* tables) {
    auto all = labels(tables, ids);
    loss.tokens.assign(all.begin(), all.end() - 1);
    loss.targets.assign(all.begin() + 1, all.end());
}

} // namespace

int readout_count(const ModelConfig& config) { return config.n_layers + 1; }

const Matrix& readout_residual(const ActivationCache& cache, const ModelConfig& config, int readout) {
    if (readout < 0 || readout > config.n_layers) {
        throw ArgumentError(fmt::format("readout {} outside [0, {}]", readout, config.n_layers));
    }
    const auto site = readout < config.n_layers ? HookSite::make(SiteKind::resid_pre, readout)
                                                : HookSite::make(SiteKind::resid_post, config.n_layers - 1);
    return cache.get(site);
}

std::vector<Matrix> per_layer_logits(const ActivationCache& cache, const ModelTensors& model) {
    std::vector<Matrix> out;
    for (int r = 0; r < readout_count(model.config); ++r) {
        const auto& resid = readout_residual(cache, model.config, r);
        out.push_back(unembed(model, resid));
    }
    return out;
}

std::vector<double> token_losses(const Matrix& logits, std::span<const TokenId> ids) {
    check_ids(ids);
    if (logits.rows() != static_cast<Eigen::Index>(ids.size())) {
        throw ArgumentError(fmt::format("logits have {} rows for {} tokens", logits.rows(), ids.size()));
    }
    std::vector<double> out(ids.size() - 1);
    for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
        const auto target = ids[t + 1];
        if (target < 0 || target >= logits.cols()) throw ArgumentError(fmt::format("token id {} outside the vocabulary", target));
        const auto row = logits.row(static_cast<Eigen::Index>(t)).cast<double>();
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        out[t] = lse - row(target);
    }
    return out;
}

PerLayerLoss per_layer_loss(std::span<const TokenId> ids, std::span<const Matrix> logits13) {
    check_ids(ids);
    if (logits13.empty()) throw ArgumentError("per-layer loss needs at least one readout");
    PerLayerLoss out;
    out.grid.resize(static_cast<Eigen::Index>(logits13.size()), static_cast<Eigen::Index>(ids.size() - 1));
    for (std::size_t r = 0; r < logits13.size(); ++r) {
        const auto row = token_losses(logits13[r], ids);
        for (std::size_t t = 0; t < row.size(); ++t) out.grid(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(t)) = row[t];
    }
    fill_labels(out, ids, nullptr);
    return out;
}

PerLayerLoss lens_loss(const ModelTensors& model, std::span<const TokenId> ids, const BpeTables* tables) {
    check_ids(ids);
    ForwardOptions opts;
    opts.trace = TraceRequest::only({SiteKind::resid_pre, SiteKind::resid_post});
    opts.compute_logits = false;
    const auto run = forward(model, ids, opts);
    PerLayerLoss out;
    const int readouts = readout_count(model.config);
    out.grid.resize(readouts, static_cast<Eigen::Index>(ids.size() - 1));
    for (int r = 0; r < readouts; ++r) {
        const auto& resid = readout_residual(run.cache, model.config, r);
        const auto logits = unembed(model, resid);
        const auto row = token_losses(logits, ids);
        for (std::size_t t = 0; t < row.size(); ++t) out.grid(r, static_cast<Eigen::Index>(t)) = row[t];
    }
    fill_labels(out, ids, tables);
    return out;
}

LossContrast loss_contrast(const ContrastivePair& pair, const ModelTensors& model, const BpeTables* tables) {
    if (pair.clean.ids.size() != pair.corrupted.ids.size()) {
        throw AnnotationError(fmt::format("pair is not token-aligned: {} vs {} tokens", pair.clean.ids.size(),
                                          pair.corrupted.ids.size()));
    }
    LossContrast c{lens_loss(model, pair.clean.ids, tables), lens_loss(model, pair.corrupted.ids, tables), {}, {}};
    c.difference = c.clean.grid - c.corrupted.grid;
    for (int t = 0; t < static_cast<int>(c.difference.cols()); ++t) {
        if (pair.perturbed_span.contains(t) || pair.perturbed_span.contains(t + 1)) c.perturbed_columns.push_back(t);
    }
    return c;
}

nlohmann::ordered_json to_json(const PerLayerLoss& loss) {
    nlohmann::ordered_json j;
    j["tokens"] = loss.tokens;
    j["targets"] = loss.targets;
    j["grid"] = grid_to_json(loss.grid);
    return j;
}

PerLayerLoss per_layer_loss_from_json(const nlohmann::json& j) {
    try {
        PerLayerLoss out{grid_from_json(j.at("grid")), j.at("tokens").get<std::vector<std::string>>(),
                         j.value("targets", std::vector<std::string>{})};
        if (out.tokens.size() != static_cast<std::size_t>(out.grid.cols())) {
            throw ParseError("per-layer loss: token labels do not match grid columns");
        }
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(fmt::format("malformed per-layer loss: {}", e.what()));
    }
}

nlohmann::ordered_json to_json(const LossContrast& contrast) {
    nlohmann::ordered_json j;
    j["clean"] = to_json(contrast.clean);
    j["corrupted"] = to_json(contrast.corrupted);
    j["difference"] = grid_to_json(contrast.difference);
    j["perturbed_columns"] = contrast.perturbed_columns;
    return j;
}

} // namespace causalscope
