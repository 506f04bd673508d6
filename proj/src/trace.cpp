#include "causalscope/trace.hpp"

#include <bit>
#include <fstream>
#include <random>
#include <set>

#include <fmt/format.h>
#include <json.hpp>

#include "causalscope/error.hpp"

namespace causalscope {

namespace {

constexpr std::pair<SiteKind, std::string_view> kSiteNames[] = {
    {SiteKind::resid_pre, "resid_pre"},     {SiteKind::attn_pattern, "attn_pattern"},
    {SiteKind::head_result, "head_result"}, {SiteKind::attn_out, "attn_out"},
    {SiteKind::resid_mid, "resid_mid"},     {SiteKind::mlp_out, "mlp_out"},
    {SiteKind::resid_post, "resid_post"},   {SiteKind::final_logits, "final_logits"},
};

} // namespace

std::string_view to_string(SiteKind kind) {
    for (const auto& [k, name] : kSiteNames) {
        if (k == kind) return name;
    }
    return "unknown";
}

SiteKind parse_site_kind(std::string_view name) {
    for (const auto& [k, n] : kSiteNames) {
        if (n == name) return k;
    }
    throw ArgumentError(fmt::format("unknown hook site kind '{}'", name));
}

bool site_has_head(SiteKind kind) { return kind == SiteKind::attn_pattern || kind == SiteKind::head_result; }

HookSite HookSite::make(SiteKind kind, int layer, std::optional<int> head) {
    if (site_has_head(kind) != head.has_value()) {
        throw ArgumentError(fmt::format("hook site {}: head index {}", to_string(kind),
                                        site_has_head(kind) ? "required" : "not allowed"));
    }
    return HookSite{kind, layer, head};
}

std::string HookSite::name() const {
    if (head) return fmt::format("blocks.{}.{}.{}", layer, to_string(kind), *head);
    return fmt::format("blocks.{}.{}", layer, to_string(kind));
}

const Matrix& ActivationCache::get(const HookSite& site) const {
    auto it = tensors_.find(site);
    if (it == tensors_.end()) throw ArgumentError(fmt::format("activation cache has no site {}", site.name()));
    return it->second;
}

void ActivationCache::put(const HookSite& site, Matrix value) {
    if (static_cast<std::size_t>(value.rows()) != ids_.size()) {
        throw ArgumentError(fmt::format("site {}: {} rows for a {}-token run", site.name(), value.rows(), ids_.size()));
    }
    tensors_.insert_or_assign(site, std::move(value));
}

std::vector<HookSite> all_sites(const ModelConfig& config) {
    std::vector<HookSite> out;
    for (int l = 0; l < config.n_layers; ++l) {
        out.push_back(HookSite::make(SiteKind::resid_pre, l));
        for (int h = 0; h < config.n_heads; ++h) out.push_back(HookSite::make(SiteKind::attn_pattern, l, h));
        for (int h = 0; h < config.n_heads; ++h) out.push_back(HookSite::make(SiteKind::head_result, l, h));
        out.push_back(HookSite::make(SiteKind::attn_out, l));
        out.push_back(HookSite::make(SiteKind::resid_mid, l));
        out.push_back(HookSite::make(SiteKind::mlp_out, l));
        out.push_back(HookSite::make(SiteKind::resid_post, l));
    }
    out.push_back(HookSite::make(SiteKind::final_logits, config.n_layers - 1));
    return out;
}

PatchSpec PatchSpec::everything(const ModelConfig& config, const ActivationCache& donor) {
    PatchSpec spec;
    spec.donor = &donor;
    for (const auto& site : all_sites(config)) spec.targets.push_back({site, PositionSelector::every()});
    return spec;
}

TracedRun run_with_cache(const ModelTensors& model, std::span<const TokenId> ids, const TraceRequest& trace) {
    ForwardOptions opts;
    opts.trace = trace;
    auto r = forward(model, ids, opts);
    return {std::move(r.logits), std::move(r.cache)};
}

namespace {

void validate_patch(const ModelConfig& config, std::span<const TokenId> ids, const PatchSpec& patch) {
    if (patch.donor == nullptr) throw PatchError("patch spec has no donor cache");
    if (patch.donor->seq_len() != ids.size()) {
        throw PatchError(fmt::format("donor sequence length {} differs from patched run length {}",
                                     patch.donor->seq_len(), ids.size()));
    }
    std::set<std::pair<HookSite, int>> seen_positions;
    std::set<HookSite> seen_all;
    for (const auto& t : patch.targets) {
        if (t.site.layer < 0 || t.site.layer >= config.n_layers ||
            (t.site.head && (*t.site.head < 0 || *t.site.head >= config.n_heads))) {
            throw PatchError(fmt::format("patch target {} outside the model", t.site.name()));
        }
        if (!patch.donor->contains(t.site)) {
            throw PatchError(fmt::format("donor cache lacks patch target {}", t.site.name()));
        }
        const bool dup_all = seen_all.contains(t.site);
        if (t.positions.all) {
            bool any = false;
            for (const auto& [s, p] : seen_positions) any = any || s == t.site;
            if (dup_all || any) throw PatchError(fmt::format("duplicate patch target {}", t.site.name()));
            seen_all.insert(t.site);
        } else {
            for (int p : t.positions.positions) {
                if (p < 0 || static_cast<std::size_t>(p) >= ids.size()) {
                    throw PatchError(fmt::format("patch target {}: position {} out of range", t.site.name(), p));
                }
                if (dup_all || !seen_positions.insert({t.site, p}).second) {
                    throw PatchError(fmt::format("duplicate patch target {} at position {}", t.site.name(), p));
                }
            }
        }
    }
}

} // namespace

TracedRun run_with_patches(const ModelTensors& model, std::span<const TokenId> ids, const PatchSpec& patch,
                           const TraceRequest& trace) {
    validate_patch(model.config, ids, patch);
    std::vector<Override> overrides;
    overrides.reserve(patch.targets.size());
    for (const auto& t : patch.targets) overrides.push_back({t.site, t.positions, &patch.donor->get(t.site)});

    ForwardOptions opts;
    opts.trace = trace;
    opts.overrides = overrides;
    auto r = forward(model, ids, opts);
    return {std::move(r.logits), std::move(r.cache)};
}

std::string_view to_string(AblationMode mode) { return mode == AblationMode::zero ? "zero" : "resample"; }

AblationMode parse_ablation_mode(std::string_view name) {
    if (name == "zero") return AblationMode::zero;
    if (name == "resample") return AblationMode::resample;
    throw ArgumentError(fmt::format("unknown ablation mode '{}' (expected zero or resample)", name));
}

Matrix ablate(const ModelTensors& model, std::span<const TokenId> ids, std::span<const HeadRef> heads, AblationMode mode,
              std::span<const ActivationCache> resample_pool, std::uint64_t seed) {
    const auto& cfg = model.config;
    if (heads.empty()) throw ArgumentError("ablate: head set is empty");
    std::set<HeadRef> unique(heads.begin(), heads.end());
    if (unique.size() != heads.size()) throw ArgumentError("ablate: duplicate head in head set");
    for (const auto& [l, h] : heads) {
        if (l < 0 || l >= cfg.n_layers || h < 0 || h >= cfg.n_heads) {
            throw ArgumentError(fmt::format("ablate: head ({}, {}) outside the model", l, h));
        }
    }
    if (mode == AblationMode::resample) {
        if (resample_pool.empty()) throw ArgumentError("ablate: resample mode needs a non-empty pool");
        for (const auto& c : resample_pool) {
            if (c.seq_len() != ids.size()) throw ArgumentError("ablate: pool cache length differs from the run");
        }
    }

    const Matrix zeros = Matrix::Zero(static_cast<Eigen::Index>(ids.size()), cfg.d_model);
    std::mt19937_64 rng(seed);
    std::vector<Override> overrides;
    for (const auto& [l, h] : heads) {
        const auto site = HookSite::make(SiteKind::head_result, l, h);
        const Matrix* values = &zeros;
        if (mode == AblationMode::resample) {
            std::uniform_int_distribution<std::size_t> pick(0, resample_pool.size() - 1);
            values = &resample_pool[pick(rng)].get(site);
        }
        overrides.push_back({site, PositionSelector::every(), values});
    }
    ForwardOptions opts;
    opts.overrides = overrides;
    return forward(model, ids, opts).logits;
}

void dump_cache(const ActivationCache& cache, const std::filesystem::path& dir) {
    static_assert(std::endian::native == std::endian::little, "raw dumps assume a little-endian host");
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json manifest;
    manifest["ids"] = cache.ids();
    manifest["sites"] = nlohmann::ordered_json::object();
    for (const auto& [site, m] : cache.tensors()) {
        const auto file = site.name() + ".f32";
        std::ofstream out(dir / file, std::ios::binary);
        if (!out) throw Error(fmt::format("cannot write {}", (dir / file).string()));
        out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
        manifest["sites"][site.name()] = {{"file", file}, {"shape", {m.rows(), m.cols()}}};
    }
    std::ofstream mf(dir / "manifest.json");
    mf << manifest.dump(1) << '\n';
}

} // namespace causalscope
