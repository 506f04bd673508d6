#pragma once

#include <compare>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "causalscope/tensor.hpp"
#include "causalscope/tokenizer.hpp"

namespace causalscope {

enum class SiteKind {
    resid_pre,
    attn_pattern,
    head_result,
    attn_out,
    resid_mid,
    mlp_out,
    resid_post,
    final_logits,
};

std::string_view to_string(SiteKind kind);
SiteKind parse_site_kind(std::string_view name);
bool site_has_head(SiteKind kind);

// One activation site. `head` is set exactly for attn_pattern and head_result;
// final_logits uses layer = n_layers - 1 by convention.
struct HookSite {
    SiteKind kind = SiteKind::resid_pre;
    int layer = 0;
    std::optional<int> head;

    static HookSite make(SiteKind kind, int layer, std::optional<int> head = std::nullopt);

    std::string name() const;
    auto operator<=>(const HookSite&) const = default;
};

// Which sites a run records.
struct TraceRequest {
    bool all = true;
    std::set<SiteKind> kinds;

    static TraceRequest everything() { return {}; }
    static TraceRequest nothing() { return {false, {}}; }
    static TraceRequest only(std::set<SiteKind> kinds) { return {false, std::move(kinds)}; }

    bool wants(SiteKind kind) const { return all || kinds.contains(kind); }
};

// Every recorded activation of one completed run.
class ActivationCache {
public:
    ActivationCache() = default;
    explicit ActivationCache(std::vector<TokenId> ids) : ids_(std::move(ids)) {}

    const std::vector<TokenId>& ids() const { return ids_; }
    std::size_t seq_len() const { return ids_.size(); }

    bool contains(const HookSite& site) const { return tensors_.contains(site); }
    // Throws ArgumentError naming the site when absent.
    const Matrix& get(const HookSite& site) const;
    const std::map<HookSite, Matrix>& tensors() const { return tensors_; }
    std::size_t size() const { return tensors_.size(); }

    void put(const HookSite& site, Matrix value);

private:
    std::vector<TokenId> ids_;
    std::map<HookSite, Matrix> tensors_;
};

// Which rows (sequence positions) of a site an override touches.
struct PositionSelector {
    bool all = true;
    std::set<int> positions;

    static PositionSelector every() { return {}; }
    static PositionSelector at(std::set<int> positions) { return {false, std::move(positions)}; }

    bool includes(int pos) const { return all || positions.contains(pos); }
    auto operator<=>(const PositionSelector&) const = default;
};

// Low-level intervention consumed by the forward pass: rows of `site` are
// replaced by the matching rows of `values` at the site's read point.
struct Override {
    HookSite site;
    PositionSelector positions;
    const Matrix* values = nullptr;
};

} // namespace causalscope
