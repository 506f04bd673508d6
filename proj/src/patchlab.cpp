#include "causalscope/patchlab.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "causalscope/error.hpp"
#include "causalscope/hashing.hpp"
#include "causalscope/metrics.hpp"
#include "causalscope/parallel.hpp"

namespace causalscope {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_answers(const ModelTensors& model, const ContrastivePair& pair, Eigen::Index rows) {
    const int pos = pair.clean.answer_position;
    if (pos < 0 || pos >= rows) throw ArgumentError(fmt::format("answer position {} outside {} rows", pos, rows));
    for (TokenId id : {pair.answer_clean, pair.answer_corrupted}) {
        if (id < 0 || id >= model.config.vocab_size) throw ArgumentError(fmt::format("answer id {} outside the vocabulary", id));
    }
}

SiteKind site_kind(SweepKind kind) {
    switch (kind) {
    case SweepKind::head: return SiteKind::head_result;
    case SweepKind::resid_pre: return SiteKind::resid_pre;
    case SweepKind::attn_out: return SiteKind::attn_out;
    case SweepKind::mlp_out: return SiteKind::mlp_out;
    }
    throw ArgumentError("unknown sweep kind");
}

std::vector<Override> cell_overrides(SweepKind kind, int layer, int column, const ActivationCache& clean) {
    if (kind == SweepKind::head) {
        const auto site = HookSite::make(SiteKind::head_result, layer, column);
        return {{site, PositionSelector::every(), &clean.get(site)}};
    }
    const auto site = HookSite::make(site_kind(kind), layer);
    return {{site, PositionSelector::at({column}), &clean.get(site)}};
}

struct Baselines {
    ForwardResult clean;
    ForwardResult corrupted;
    double ld_clean = 0.0;
    double ld_corrupted = 0.0;

    double gap() const { return ld_clean - ld_corrupted; }
};

Baselines run_baselines(const ModelTensors& model, const ContrastivePair& pair, TraceRequest clean_trace) {
    check_pair(pair);
    Baselines b;
    ForwardOptions co;
    co.trace = std::move(clean_trace);
    co.compute_logits = false;
    b.clean = forward(model, pair.clean.ids, co);
    ForwardOptions ro;
    ro.trace = TraceRequest::only({SiteKind::resid_pre});
    ro.compute_logits = false;
    b.corrupted = forward(model, pair.corrupted.ids, ro);
    b.ld_clean = logit_diff_from_residual(model, b.clean.final_residual, pair);
    b.ld_corrupted = logit_diff_from_residual(model, b.corrupted.final_residual, pair);
    return b;
}

SweepResult run_sweep(const ModelTensors& model, const ContrastivePair& pair, SweepKind kind, const SweepOptions& opt) {
    const auto& cfg = model.config;
    const int seq = static_cast<int>(pair.clean.ids.size());
    const int cols = kind == SweepKind::head ? cfg.n_heads : seq;
    const auto trace = opt.calibrate ? TraceRequest::everything() : TraceRequest::only({site_kind(kind)});
    const auto base = run_baselines(model, pair, trace);

    SweepResult r;
    r.kind = kind;
    r.template_id = pair.template_id;
    for (int l = 0; l < cfg.n_layers; ++l) r.row_labels.push_back(std::to_string(l));
    for (int c = 0; c < cols; ++c) {
        if (kind == SweepKind::head) {
            r.col_labels.push_back(std::to_string(c));
        } else {
            const auto id = pair.clean.ids[c];
            r.col_labels.push_back(opt.tables ? token_text(*opt.tables, id) : std::to_string(id));
        }
    }
    if (kind != SweepKind::head) {
        for (int c = pair.perturbed_span.begin; c < pair.perturbed_span.end; ++c) r.perturbed_columns.push_back(c);
    }
    r.ld_clean = base.ld_clean;
    r.ld_corrupted = base.ld_corrupted;
    r.effect = Grid::Constant(cfg.n_layers, cols, kNaN);
    r.raw = Grid::Constant(cfg.n_layers, cols, kNaN);
    const double gap = base.gap();
    if (!(std::abs(gap) >= kMinLogitGap)) {
        r.skipped = 1;
        return r;
    }
    r.n = 1;

    parallel_for(static_cast<std::size_t>(cfg.n_layers), opt.threads, [&](std::size_t li) {
        const int l = static_cast<int>(li);
        std::vector<std::vector<Override>> variants;
        for (int c = 0; c < cols; ++c) variants.push_back(cell_overrides(kind, l, c, base.clean.cache));
        const auto& start = base.corrupted.cache.get(HookSite::make(SiteKind::resid_pre, l));
        const auto finals = forward_variants(model, pair.corrupted.ids, variants, l, &start);
        for (int c = 0; c < cols; ++c) {
            const double raw = logit_diff_from_residual(model, finals[c], pair) - base.ld_corrupted;
            r.raw(l, c) = raw;
            r.effect(l, c) = raw / gap;
        }
    });

    if (opt.calibrate) {
        const std::vector<std::vector<Override>> none(1);
        const auto plain = forward_variants(model, pair.corrupted.ids, none);
        r.no_patch_effect.push_back((logit_diff_from_residual(model, plain[0], pair) - base.ld_corrupted) / gap);
        const auto spec = PatchSpec::everything(cfg, base.clean.cache);
        std::vector<Override> all;
        // final_logits sits after the residual read-out and cannot change it.
        for (const auto& t : spec.targets) {
            if (t.site.kind != SiteKind::final_logits) all.push_back({t.site, t.positions, &base.clean.cache.get(t.site)});
        }
        ForwardOptions fo;
        fo.overrides = all;
        fo.compute_logits = false;
        const auto full = forward(model, pair.corrupted.ids, fo);
        r.full_patch_effect.push_back((logit_diff_from_residual(model, full.final_residual, pair) - base.ld_corrupted) / gap);
    }
    return r;
}

double answer_loss(const Matrix& logits, const ContrastivePair& pair) {
    const auto row = logits.row(pair.clean.answer_position).cast<double>();
    const double mx = row.maxCoeff();
    return mx + std::log((row.array() - mx).exp().sum()) - row(pair.answer_clean);
}

// Sorted cell order shared by select_heads and head_rank.
std::vector<RankedHead> ranked_cells(const SweepResult& sweep) {
    if (sweep.kind != SweepKind::head) throw ArgumentError("head selection needs a head sweep");
    std::vector<RankedHead> cells;
    for (int l = 0; l < sweep.effect.rows(); ++l) {
        for (int h = 0; h < sweep.effect.cols(); ++h) {
            if (std::isnan(sweep.effect(l, h))) throw ArgumentError(fmt::format("sweep cell ({}, {}) is NaN", l, h));
            cells.push_back({l, h, sweep.effect(l, h)});
        }
    }
    std::stable_sort(cells.begin(), cells.end(),
                     [](const RankedHead& a, const RankedHead& b) { return std::abs(a.effect) > std::abs(b.effect); });
    return cells;
}

} // namespace

double logit_diff(const Matrix& logits, const ContrastivePair& pair) {
    const int pos = pair.clean.answer_position;
    if (pos < 0 || pos >= logits.rows()) throw ArgumentError(fmt::format("answer position {} outside {} rows", pos, logits.rows()));
    for (TokenId id : {pair.answer_clean, pair.answer_corrupted}) {
        if (id < 0 || id >= logits.cols()) throw ArgumentError(fmt::format("answer id {} outside the logits", id));
    }
    return static_cast<double>(logits(pos, pair.answer_clean)) - static_cast<double>(logits(pos, pair.answer_corrupted));
}

double logit_diff_from_residual(const ModelTensors& model, const Matrix& final_residual, const ContrastivePair& pair) {
    check_answers(model, pair, final_residual.rows());
    const RowVector normed = final_norm_row(model, final_residual.row(pair.clean.answer_position));
    const auto a = model.token_embedding.row(pair.answer_clean);
    const auto b = model.token_embedding.row(pair.answer_corrupted);
    double ld = 0.0;
    for (Eigen::Index j = 0; j < normed.size(); ++j) {
        ld += static_cast<double>(normed(j)) * (static_cast<double>(a(j)) - static_cast<double>(b(j)));
    }
    return ld;
}

std::string_view to_string(SweepKind kind) {
    switch (kind) {
    case SweepKind::head: return "head";
    case SweepKind::resid_pre: return "resid_pre";
    case SweepKind::attn_out: return "attn_out";
    case SweepKind::mlp_out: return "mlp_out";
    }
    return "?";
}

SweepKind parse_sweep_kind(std::string_view name) {
    for (auto k : {SweepKind::head, SweepKind::resid_pre, SweepKind::attn_out, SweepKind::mlp_out}) {
        if (to_string(k) == name) return k;
    }
    throw ArgumentError(fmt::format("unknown sweep kind \"{}\" (expected head, resid_pre, attn_out or mlp_out)", name));
}

SweepResult head_patch_sweep(const ModelTensors& model, const ContrastivePair& pair, const SweepOptions& options) {
    return run_sweep(model, pair, SweepKind::head, options);
}

SweepResult resid_patch_sweep(const ModelTensors& model, const ContrastivePair& pair, SweepKind kind,
                              const SweepOptions& options) {
    if (kind == SweepKind::head) throw ArgumentError("resid_patch_sweep needs resid_pre, attn_out or mlp_out");
    return run_sweep(model, pair, kind, options);
}

double patch_cell(const ModelTensors& model, const ContrastivePair& pair, SweepKind kind, int layer, int column) {
    const auto& cfg = model.config;
    const int cols = kind == SweepKind::head ? cfg.n_heads : static_cast<int>(pair.clean.ids.size());
    if (layer < 0 || layer >= cfg.n_layers || column < 0 || column >= cols) {
        throw ArgumentError(fmt::format("cell ({}, {}) outside the sweep grid", layer, column));
    }
    const auto base = run_baselines(model, pair, TraceRequest::only({site_kind(kind)}));
    const auto overrides = cell_overrides(kind, layer, column, base.clean.cache);
    ForwardOptions fo;
    fo.overrides = overrides;
    fo.compute_logits = false;
    const auto run = forward(model, pair.corrupted.ids, fo);
    return (logit_diff_from_residual(model, run.final_residual, pair) - base.ld_corrupted) / base.gap();
}

SweepResult average_sweeps(std::span<const SweepResult> sweeps) {
    const SweepResult* first = nullptr;
    std::size_t skipped = 0;
    for (const auto& s : sweeps) {
        skipped += s.skipped;
        if (s.informative() && !first) first = &s;
    }
    if (!first) throw ArgumentError(fmt::format("all {} pairs are uninformative", sweeps.size()));
    SweepResult out;
    out.kind = first->kind;
    out.template_id = first->template_id;
    out.row_labels = first->row_labels;
    out.col_labels = first->col_labels;
    out.perturbed_columns = first->perturbed_columns;
    out.effect = Grid::Zero(first->effect.rows(), first->effect.cols());
    out.raw = out.effect;
    out.skipped = skipped;
    double ld_clean = 0.0, ld_corr = 0.0;
    for (const auto& s : sweeps) {
        if (!s.informative()) continue;
        if (s.kind != out.kind || s.effect.rows() != out.effect.rows() || s.effect.cols() != out.effect.cols()) {
            throw ArgumentError("cannot average sweeps of different kind or shape");
        }
        const double w = static_cast<double>(s.n);
        out.effect += w * s.effect;
        out.raw += w * s.raw;
        ld_clean += w * s.ld_clean;
        ld_corr += w * s.ld_corrupted;
        out.n += s.n;
        out.no_patch_effect.insert(out.no_patch_effect.end(), s.no_patch_effect.begin(), s.no_patch_effect.end());
        out.full_patch_effect.insert(out.full_patch_effect.end(), s.full_patch_effect.begin(), s.full_patch_effect.end());
    }
    const double n = static_cast<double>(out.n);
    out.effect /= n;
    out.raw /= n;
    out.ld_clean = ld_clean / n;
    out.ld_corrupted = ld_corr / n;
    return out;
}

std::vector<RankedHead> select_heads(const SweepResult& sweep, std::size_t k) {
    const auto cells = static_cast<std::size_t>(sweep.effect.size());
    if (k > cells) throw ArgumentError(fmt::format("cannot select {} heads from {} cells", k, cells));
    auto ranked = ranked_cells(sweep);
    ranked.resize(k);
    return ranked;
}

int head_rank(const SweepResult& sweep, int layer, int head) {
    const auto ranked = ranked_cells(sweep);
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        if (ranked[i].layer == layer && ranked[i].head == head) return static_cast<int>(i) + 1;
    }
    throw ArgumentError(fmt::format("head ({}, {}) outside the sweep grid", layer, head));
}

AblationReport ablation_study(const ModelTensors& model, std::span<const ContrastivePair> pairs,
                              std::span<const HeadRef> heads, AblationMode mode, std::uint64_t seed, int threads) {
    if (pairs.empty()) throw ArgumentError("ablation study: dataset is empty");
    if (heads.empty()) throw ArgumentError("ablation study: head set is empty");
    const std::size_t n = pairs.size();
    std::vector<double> ld(n), loss(n);
    std::vector<ActivationCache> donors(n);
    // Baselines; keep only the ablated heads' outputs for resampling.
    parallel_for(n, threads, [&](std::size_t i) {
        check_pair(pairs[i]);
        ForwardOptions fo;
        fo.trace = mode == AblationMode::resample ? TraceRequest::only({SiteKind::head_result}) : TraceRequest::nothing();
        auto run = forward(model, pairs[i].clean.ids, fo);
        ld[i] = logit_diff(run.logits, pairs[i]);
        loss[i] = answer_loss(run.logits, pairs[i]);
        if (mode == AblationMode::resample) {
            ActivationCache keep(pairs[i].clean.ids);
            for (const auto& [l, h] : heads) {
                const auto site = HookSite::make(SiteKind::head_result, l, h);
                keep.put(site, run.cache.get(site));
            }
            donors[i] = std::move(keep);
        }
    });

    std::vector<double> ld_abl(n, kNaN), loss_abl(n, kNaN);
    parallel_for(n, threads, [&](std::size_t i) {
        std::vector<ActivationCache> pool;
        if (mode == AblationMode::resample) {
            for (std::size_t j = 0; j < n; ++j) {
                if (j != i && donors[j].seq_len() == pairs[i].clean.ids.size()) pool.push_back(donors[j]);
            }
            if (pool.empty()) return;
        }
        const auto logits = ablate(model, pairs[i].clean.ids, heads, mode, pool, sub_seed(seed, fmt::format("pair/{}", i)));
        ld_abl[i] = logit_diff(logits, pairs[i]);
        loss_abl[i] = answer_loss(logits, pairs[i]);
    });

    AblationReport r;
    r.mode = mode;
    r.heads.assign(heads.begin(), heads.end());
    r.seed = seed;
    for (std::size_t i = 0; i < n; ++i) {
        if (std::isnan(ld_abl[i])) {
            ++r.skipped;
            continue;
        }
        ++r.n;
        r.mean_ld += ld[i];
        r.mean_ld_ablated += ld_abl[i];
        r.mean_loss += loss[i];
        r.mean_loss_ablated += loss_abl[i];
    }
    if (r.n == 0) throw ArgumentError("ablation study: no pair has a same-length resample partner");
    const double k = static_cast<double>(r.n);
    r.mean_ld /= k;
    r.mean_ld_ablated /= k;
    r.mean_loss /= k;
    r.mean_loss_ablated /= k;
    return r;
}

nlohmann::ordered_json to_json(const SweepResult& s) {
    nlohmann::ordered_json j;
    j["kind"] = to_string(s.kind);
    j["template_id"] = s.template_id;
    j["axis"] = {{"rows", "layer"}, {"cols", s.kind == SweepKind::head ? "head" : "position"},
                 {"row_labels", s.row_labels}, {"col_labels", s.col_labels}};
    j["grid"] = grid_to_json(s.effect);
    j["raw"] = grid_to_json(s.raw);
    j["baselines"] = {{"ld_clean", s.ld_clean}, {"ld_corrupted", s.ld_corrupted}};
    j["n"] = s.n;
    j["skipped"] = s.skipped;
    j["perturbed_columns"] = s.perturbed_columns;
    j["calibration"] = {{"no_patch", s.no_patch_effect}, {"full_patch", s.full_patch_effect}};
    return j;
}

SweepResult sweep_from_json(const nlohmann::json& j) {
    try {
        SweepResult s;
        s.kind = parse_sweep_kind(j.at("kind").get<std::string>());
        s.template_id = j.at("template_id").get<std::string>();
        s.row_labels = j.at("axis").at("row_labels").get<std::vector<std::string>>();
        s.col_labels = j.at("axis").at("col_labels").get<std::vector<std::string>>();
        s.effect = grid_from_json(j.at("grid"));
        s.raw = grid_from_json(j.at("raw"));
        s.ld_clean = j.at("baselines").at("ld_clean").get<double>();
        s.ld_corrupted = j.at("baselines").at("ld_corrupted").get<double>();
        s.n = j.at("n").get<std::size_t>();
        s.skipped = j.at("skipped").get<std::size_t>();
        s.perturbed_columns = j.at("perturbed_columns").get<std::vector<int>>();
        s.no_patch_effect = j.at("calibration").at("no_patch").get<std::vector<double>>();
        s.full_patch_effect = j.at("calibration").at("full_patch").get<std::vector<double>>();
        if (s.row_labels.size() != static_cast<std::size_t>(s.effect.rows()) ||
            s.col_labels.size() != static_cast<std::size_t>(s.effect.cols())) {
            throw ParseError("sweep labels do not match the grid");
        }
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(fmt::format("malformed sweep: {}", e.what()));
    } catch (const ArgumentError& e) {
        throw ParseError(fmt::format("malformed sweep: {}", e.what()));
    }
}

std::string to_csv(const SweepResult& s) {
    std::string out = fmt::format("layer,{},effect,raw\n", s.kind == SweepKind::head ? "head" : "position");
    for (Eigen::Index l = 0; l < s.effect.rows(); ++l) {
        for (Eigen::Index c = 0; c < s.effect.cols(); ++c) {
            out += fmt::format("{},{},{:.17g},{:.17g}\n", l, c, s.effect(l, c), s.raw(l, c));
        }
    }
    return out;
}

nlohmann::ordered_json to_json(const std::vector<RankedHead>& ranking) {
    auto j = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < ranking.size(); ++i) {
        j.push_back({{"rank", i + 1}, {"layer", ranking[i].layer}, {"head", ranking[i].head}, {"effect", ranking[i].effect}});
    }
    return j;
}

nlohmann::ordered_json to_json(const AblationReport& r) {
    nlohmann::ordered_json j;
    j["mode"] = to_string(r.mode);
    auto heads = nlohmann::ordered_json::array();
    for (const auto& [l, h] : r.heads) heads.push_back({l, h});
    j["heads"] = heads;
    j["seed"] = r.seed;
    j["n"] = r.n;
    j["skipped"] = r.skipped;
    j["mean_ld"] = r.mean_ld;
    j["mean_ld_ablated"] = r.mean_ld_ablated;
    j["mean_delta_ld"] = r.mean_delta_ld();
    j["mean_loss"] = r.mean_loss;
    j["mean_loss_ablated"] = r.mean_loss_ablated;
    j["mean_delta_loss"] = r.mean_delta_loss();
    return j;
}

} // namespace causalscope
