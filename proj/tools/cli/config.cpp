#include "config.hpp"

#include <fstream>
#include <set>

#include <fmt/format.h>

#include "causalscope/corpus.hpp"
#include "causalscope/error.hpp"
#include "causalscope/hashing.hpp"

namespace causalscope::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Reads the fields of one JSON object, tracking the path for error messages
// and rejecting keys nobody asked for.
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) fail(path_, "expected an object");
    }

    [[noreturn]] static void fail(const std::string& path, const std::string& what) {
        throw ConfigError(fmt::format("{}: {}", path, what));
    }

    std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key);
    }

    const json& raw(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    std::string str(const std::string& key, std::optional<std::string> def = std::nullopt) {
        if (!has(key)) return required(key, def);
        const auto& v = j_.at(key);
        if (!v.is_string()) fail(at(key), "expected a string");
        return v.get<std::string>();
    }

    std::int64_t integer(const std::string& key, std::optional<std::int64_t> def, std::int64_t lo,
                         std::int64_t hi = std::numeric_limits<std::int64_t>::max()) {
        if (!has(key)) return required(key, def);
        const auto& v = j_.at(key);
        if (!v.is_number_integer() && !v.is_number_unsigned()) fail(at(key), "expected an integer");
        const auto x = v.get<std::int64_t>();
        if (x < lo || x > hi) fail(at(key), fmt::format("{} outside [{}, {}]", x, lo, hi));
        return x;
    }

    std::vector<std::string> strings(const std::string& key, std::vector<std::string> def) {
        if (!has(key)) return def;
        const auto& v = j_.at(key);
        if (!v.is_array()) fail(at(key), "expected an array of strings");
        std::vector<std::string> out;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_string()) fail(fmt::format("{}[{}]", at(key), i), "expected a string");
            out.push_back(v[i].get<std::string>());
        }
        return out;
    }

    std::vector<HeadRef> heads(const std::string& key, std::vector<HeadRef> def) {
        if (!has(key)) return def;
        const auto& v = j_.at(key);
        if (!v.is_array()) fail(at(key), "expected an array of [layer, head]");
        std::vector<HeadRef> out;
        for (std::size_t i = 0; i < v.size(); ++i) {
            const auto& h = v[i];
            if (!h.is_array() || h.size() != 2 || !h[0].is_number_integer() || !h[1].is_number_integer()) {
                fail(fmt::format("{}[{}]", at(key), i), "expected [layer, head]");
            }
            out.emplace_back(h[0].get<int>(), h[1].get<int>());
        }
        return out;
    }

    std::pair<int, int> range(const std::string& key, std::pair<int, int> def) {
        if (!has(key)) return def;
        const auto& v = j_.at(key);
        if (!v.is_array() || v.size() != 2 || !v[0].is_number_integer() || !v[1].is_number_integer() ||
            v[0].get<int>() < 0 || v[0].get<int>() > v[1].get<int>() || v[1].get<int>() >= 12) {
            fail(at(key), "expected a [first, last] layer range within 0..11");
        }
        return {v[0].get<int>(), v[1].get<int>()};
    }

    void finish() const {
        for (const auto& [k, _] : j_.items()) {
            if (!seen_.contains(k)) fail(at(k), "unknown field");
        }
    }

private:
    template <typename T>
    T required(const std::string& key, const std::optional<T>& def) const {
        if (!def) fail(at(key), "missing required field");
        return *def;
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : (base / path).lexically_normal();
}

const json kEmpty = json::object();

const json& section(Fields& f, const std::string& key) { return f.has(key) ? f.raw(key) : kEmpty; }

void check_heads(const std::vector<HeadRef>& heads, const std::string& path) {
    for (const auto& [l, h] : heads) {
        if (l < 0 || l >= 12 || h < 0 || h >= 12) Fields::fail(path, fmt::format("head ({}, {}) outside 12x12", l, h));
    }
}

} // namespace

const std::vector<std::string>& RunConfig::sweep_templates() const {
    return patch_sweep.templates.empty() ? dataset.semantic_templates : patch_sweep.templates;
}

const std::vector<std::string>& RunConfig::ablate_templates() const {
    return ablate.templates.empty() ? dataset.semantic_templates : ablate.templates;
}

RunConfig parse_config(const json& j, const fs::path& base_dir) {
    RunConfig c;
    Fields top(j, "");
    if (const auto w = top.str("weights_path", ""); !w.empty()) c.weights_path = resolve(base_dir, w);
    c.vocab_path = resolve(base_dir, top.str("vocab_path"));
    c.merges_path = resolve(base_dir, top.str("merges_path"));
    c.output_dir = resolve(base_dir, top.str("output_dir"));
    c.seed = static_cast<std::uint64_t>(top.integer("seed", std::nullopt, 0));
    c.threads = static_cast<int>(top.integer("threads", 1, 1, 256));

    Fields ds(section(top, "dataset"), "dataset");
    c.dataset.lexicon_dir = resolve(base_dir, ds.str("lexicon_dir"));
    std::vector<std::string> all_syntax;
    for (const auto& t : syntax_templates()) {
        if (all_syntax.empty() || all_syntax.back() != t.id) all_syntax.push_back(t.id);
    }
    std::vector<std::string> all_semantic;
    for (const auto& t : semantic_templates()) all_semantic.push_back(t.id);
    c.dataset.syntax_templates = ds.strings("syntax_templates", all_syntax);
    c.dataset.semantic_templates = ds.strings("semantic_templates", all_semantic);
    for (std::size_t i = 0; i < c.dataset.syntax_templates.size(); ++i) {
        try {
            syntax_template_variants(c.dataset.syntax_templates[i]);
        } catch (const ConfigError& e) {
            Fields::fail(fmt::format("dataset.syntax_templates[{}]", i), e.what());
        }
    }
    auto check_semantic = [](const std::vector<std::string>& ids, const std::string& path) {
        for (std::size_t i = 0; i < ids.size(); ++i) {
            try {
                semantic_template(ids[i]);
            } catch (const ConfigError& e) {
                Fields::fail(fmt::format("{}[{}]", path, i), e.what());
            }
        }
    };
    check_semantic(c.dataset.semantic_templates, "dataset.semantic_templates");
    c.dataset.n_per_template = static_cast<int>(ds.integer("n_per_template", 200, 1, 100000));
    c.dataset.max_pairs = static_cast<int>(ds.integer("max_pairs", 60, 1, 100000));
    ds.finish();

    Fields ex(section(top, "experiments"), "experiments");
    Fields ss(section(ex, "syntax_scan"), "experiments.syntax_scan");
    c.syntax_scan.delimiters = ss.strings("delimiters", c.syntax_scan.delimiters);
    for (std::size_t i = 0; i < c.syntax_scan.delimiters.size(); ++i) {
        if (!is_causal_delimiter(c.syntax_scan.delimiters[i])) {
            Fields::fail(fmt::format("experiments.syntax_scan.delimiters[{}]", i),
                         fmt::format("\"{}\" is not a causal delimiter", c.syntax_scan.delimiters[i]));
        }
    }
    c.syntax_scan.early_layers = ss.range("early_layers", c.syntax_scan.early_layers);
    c.syntax_scan.late_layers = ss.range("late_layers", c.syntax_scan.late_layers);
    ss.finish();

    Fields ps(section(ex, "patch_sweep"), "experiments.patch_sweep");
    c.patch_sweep.templates = ps.strings("templates", {});
    check_semantic(c.patch_sweep.templates, "experiments.patch_sweep.templates");
    c.patch_sweep.max_pairs = static_cast<int>(ps.integer("max_pairs", 50, 1, 100000));
    std::vector<std::string> sites;
    for (auto k : c.patch_sweep.resid_sites) sites.emplace_back(to_string(k));
    sites = ps.strings("resid_sites", sites);
    c.patch_sweep.resid_sites.clear();
    for (std::size_t i = 0; i < sites.size(); ++i) {
        try {
            const auto k = parse_sweep_kind(sites[i]);
            if (k == SweepKind::head) throw ArgumentError("head is not a residual site");
            c.patch_sweep.resid_sites.push_back(k);
        } catch (const ArgumentError& e) {
            Fields::fail(fmt::format("experiments.patch_sweep.resid_sites[{}]", i), e.what());
        }
    }
    c.patch_sweep.resid_pairs = static_cast<int>(ps.integer("resid_pairs", 2, 0, 100000));
    c.patch_sweep.top_k = static_cast<int>(ps.integer("top_k", 10, 1, 144));
    c.patch_sweep.watch_heads = ps.heads("watch_heads", c.patch_sweep.watch_heads);
    check_heads(c.patch_sweep.watch_heads, "experiments.patch_sweep.watch_heads");
    ps.finish();

    Fields ln(section(ex, "lens"), "experiments.lens");
    c.lens.sentences = ln.strings("sentences", {});
    if (ln.has("pairs")) {
        const auto& v = ln.raw("pairs");
        if (!v.is_array()) Fields::fail("experiments.lens.pairs", "expected an array of [clean, corrupted]");
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_array() || v[i].size() != 2 || !v[i][0].is_string() || !v[i][1].is_string()) {
                Fields::fail(fmt::format("experiments.lens.pairs[{}]", i), "expected [clean, corrupted] strings");
            }
            c.lens.pairs.emplace_back(v[i][0].get<std::string>(), v[i][1].get<std::string>());
        }
    }
    ln.finish();

    Fields ab(section(ex, "ablate"), "experiments.ablate");
    c.ablate.templates = ab.strings("templates", {});
    check_semantic(c.ablate.templates, "experiments.ablate.templates");
    c.ablate.max_pairs = static_cast<int>(ab.integer("max_pairs", 50, 1, 100000));
    c.ablate.heads = ab.heads("heads", {});
    check_heads(c.ablate.heads, "experiments.ablate.heads");
    c.ablate.semantic_top_k = static_cast<int>(ab.integer("semantic_top_k", 0, 0, 144));
    c.ablate.syntax_top_k = static_cast<int>(ab.integer("syntax_top_k", 0, 0, 144));
    c.ablate.syntax_delimiter = ab.str("syntax_delimiter", c.ablate.syntax_delimiter);
    c.ablate.control_k = static_cast<int>(ab.integer("control_k", 0, 0, 144));
    const auto modes = ab.strings("modes", {"zero", "resample"});
    c.ablate.modes.clear();
    for (std::size_t i = 0; i < modes.size(); ++i) {
        try {
            c.ablate.modes.push_back(parse_ablation_mode(modes[i]));
        } catch (const Error& e) {
            Fields::fail(fmt::format("experiments.ablate.modes[{}]", i), e.what());
        }
    }
    if (c.ablate.modes.empty()) Fields::fail("experiments.ablate.modes", "at least one mode is required");
    ab.finish();
    ex.finish();
    top.finish();
    return c;
}

RunConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(fmt::format("cannot read config {}", path.string()));
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
    }
    return parse_config(j, fs::absolute(path).parent_path());
}

void validate_paths(const RunConfig& c, bool needs_weights) {
    auto need = [](const fs::path& p, const char* field) {
        if (!fs::exists(p)) throw ConfigError(fmt::format("{}: {} does not exist", field, p.string()));
    };
    need(c.vocab_path, "vocab_path");
    need(c.merges_path, "merges_path");
    need(c.dataset.lexicon_dir, "dataset.lexicon_dir");
    if (needs_weights) {
        if (c.weights_path.empty()) throw ConfigError("weights_path: missing required field");
        need(c.weights_path, "weights_path");
    }
}

nlohmann::ordered_json canonical_json(const RunConfig& c) {
    auto heads = [](const std::vector<HeadRef>& hs) {
        auto a = nlohmann::ordered_json::array();
        for (const auto& [l, h] : hs) a.push_back({l, h});
        return a;
    };
    nlohmann::ordered_json j;
    j["weights_path"] = c.weights_path.string();
    j["vocab_path"] = c.vocab_path.string();
    j["merges_path"] = c.merges_path.string();
    j["seed"] = c.seed;
    j["dataset"] = {{"lexicon_dir", c.dataset.lexicon_dir.string()},
                    {"syntax_templates", c.dataset.syntax_templates},
                    {"semantic_templates", c.dataset.semantic_templates},
                    {"n_per_template", c.dataset.n_per_template},
                    {"max_pairs", c.dataset.max_pairs}};
    std::vector<std::string> sites;
    for (auto k : c.patch_sweep.resid_sites) sites.emplace_back(to_string(k));
    std::vector<std::string> modes;
    for (auto m : c.ablate.modes) modes.emplace_back(to_string(m));
    auto pairs = nlohmann::ordered_json::array();
    for (const auto& [a, b] : c.lens.pairs) pairs.push_back({a, b});
    j["experiments"] = {
        {"syntax_scan",
         {{"delimiters", c.syntax_scan.delimiters},
          {"early_layers", {c.syntax_scan.early_layers.first, c.syntax_scan.early_layers.second}},
          {"late_layers", {c.syntax_scan.late_layers.first, c.syntax_scan.late_layers.second}}}},
        {"patch_sweep",
         {{"templates", c.patch_sweep.templates},
          {"max_pairs", c.patch_sweep.max_pairs},
          {"resid_sites", sites},
          {"resid_pairs", c.patch_sweep.resid_pairs},
          {"top_k", c.patch_sweep.top_k},
          {"watch_heads", heads(c.patch_sweep.watch_heads)}}},
        {"lens", {{"sentences", c.lens.sentences}, {"pairs", pairs}}},
        {"ablate",
         {{"templates", c.ablate.templates},
          {"max_pairs", c.ablate.max_pairs},
          {"heads", heads(c.ablate.heads)},
          {"semantic_top_k", c.ablate.semantic_top_k},
          {"syntax_top_k", c.ablate.syntax_top_k},
          {"syntax_delimiter", c.ablate.syntax_delimiter},
          {"control_k", c.ablate.control_k},
          {"modes", modes}}}};
    return j;
}

std::string config_hash(const RunConfig& c) { return fmt::format("{:016x}", fnv1a(canonical_json(c).dump())); }

} // namespace causalscope::cli
