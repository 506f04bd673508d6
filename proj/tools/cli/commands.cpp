#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include <fmt/format.h>

#include "causalscope/corpus.hpp"
#include "causalscope/error.hpp"
#include "causalscope/lens.hpp"
#include "causalscope/metrics.hpp"
#include "causalscope/parallel.hpp"
#include "causalscope/patchlab.hpp"
#include "causalscope/report.hpp"

#ifndef CAUSALSCOPE_VERSION
#define CAUSALSCOPE_VERSION "0.0.0"
#endif

namespace causalscope::cli {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

void log(const std::string& msg) { std::cerr << msg << '\n'; }

struct Context {
    const RunConfig& cfg;
    BpeTables tables;
    LexiconSet lexicons;
    std::optional<ModelTensors> model;

    Context(const RunConfig& c, bool needs_weights) : cfg(c) {
        validate_paths(c, needs_weights);
        tables = load_bpe(c.vocab_path, c.merges_path);
        lexicons = load_lexicons(c.dataset.lexicon_dir);
        if (needs_weights) {
            log(fmt::format("loading {}", c.weights_path.string()));
            model = load_weights(c.weights_path);
        }
    }

    const ModelTensors& m() const { return *model; }
    fs::path dir(const char* sub) const { return cfg.output_dir / sub; }
};

// Shared manifest: one section per command. A different config hash starts
// a fresh manifest so stale sections never mix with new ones.
void update_manifest(const RunConfig& cfg, const std::string& command, ojson section) {
    const auto path = cfg.output_dir / "manifest.json";
    const auto hash = config_hash(cfg);
    nlohmann::json commands = nlohmann::json::object();
    if (fs::exists(path)) {
        try {
            std::ifstream in(path);
            const auto old = nlohmann::json::parse(in);
            if (old.value("config_hash", "") == hash) commands = old.at("commands");
        } catch (const nlohmann::json::exception&) {
            // Unreadable manifests are replaced.
        }
    }
    commands[command] = nlohmann::json::parse(section.dump());
    ojson m;
    m["tool"] = "causalscope";
    m["version"] = CAUSALSCOPE_VERSION;
    m["artifact_format"] = 1;
    m["config_hash"] = hash;
    m["seed"] = cfg.seed;
    m["config"] = canonical_json(cfg);
    m["commands"] = commands; // keys sorted: independent of command order
    write_file(path, dump_json(m));
}

ojson stats_json(const GenerationStats& s) {
    ojson j;
    j["attempted"] = s.attempted;
    j["generated"] = s.generated;
    j["dropped"] = s.dropped;
    return j;
}

SyntaxDataset syntax_data(const Context& ctx) {
    std::vector<Template> templates;
    for (const auto& id : ctx.cfg.dataset.syntax_templates) {
        for (auto& t : syntax_template_variants(id)) templates.push_back(std::move(t));
    }
    return generate_syntax_dataset(templates, ctx.lexicons, ctx.cfg.dataset.n_per_template, ctx.cfg.seed, ctx.tables);
}

PairDataset pair_data(const Context& ctx, const std::string& id, int max_pairs) {
    return generate_semantic_pairs(id, ctx.lexicons, ctx.cfg.seed, ctx.tables, static_cast<std::size_t>(max_pairs));
}

ojson heads_json(const std::vector<HeadRef>& heads) {
    auto a = ojson::array();
    for (const auto& [l, h] : heads) a.push_back({l, h});
    return a;
}

std::vector<HeadRef> to_heads(const std::vector<RankedHead>& ranked) {
    std::vector<HeadRef> out;
    for (const auto& r : ranked) out.emplace_back(r.layer, r.head);
    return out;
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(fmt::format("cannot read {}", path.string()));
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(fmt::format("{}: {}", path.string(), e.what()));
    }
}

TokenSpan diff_span(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
    int first = -1, last = -1;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i]) {
            if (first < 0) first = static_cast<int>(i);
            last = static_cast<int>(i);
        }
    }
    return first < 0 ? TokenSpan{} : TokenSpan{first, last + 1};
}

} // namespace

void cmd_gen_data(const RunConfig& cfg) {
    const Context ctx(cfg, false);
    const auto syntax = syntax_data(ctx);
    fs::create_directories(ctx.dir("data"));
    write_jsonl(ctx.dir("data") / "syntax.jsonl", syntax.examples);
    ojson section;
    section["syntax"]["examples"] = syntax.examples.size();
    for (const auto& [key, s] : syntax.stats) section["syntax"]["templates"][key] = stats_json(s);
    for (const auto& id : cfg.dataset.semantic_templates) {
        const auto pairs = pair_data(ctx, id, cfg.dataset.max_pairs);
        write_jsonl(ctx.dir("data") / fmt::format("pairs.{}.jsonl", id), pairs.pairs);
        section["pairs"][id] = stats_json(pairs.stats);
        log(fmt::format("{}: {} pairs", id, pairs.pairs.size()));
    }
    update_manifest(cfg, "gen-data", section);
}

void cmd_syntax_scan(const RunConfig& cfg) {
    const Context ctx(cfg, true);
    const auto data = syntax_data(ctx);
    const auto& ex = data.examples;
    std::vector<AttentionGrids> grids(ex.size());
    std::vector<bool> wanted(ex.size(), false);
    for (std::size_t i = 0; i < ex.size(); ++i) {
        const bool delim = std::find(cfg.syntax_scan.delimiters.begin(), cfg.syntax_scan.delimiters.end(), ex[i].delimiter) !=
                           cfg.syntax_scan.delimiters.end();
        wanted[i] = ex[i].variant != Variant::random && (delim || ex[i].variant == Variant::non_causal);
    }
    log(fmt::format("syntax-scan: {} examples", std::count(wanted.begin(), wanted.end(), true)));
    parallel_for(ex.size(), cfg.threads, [&](std::size_t i) {
        if (wanted[i]) grids[i] = attention_grids(ctx.m(), ex[i]);
    });

    ojson section;
    section["warnings"] = ojson::array();
    const auto [e0, e1] = cfg.syntax_scan.early_layers;
    const auto [l0, l1] = cfg.syntax_scan.late_layers;
    for (const auto& d : cfg.syntax_scan.delimiters) {
        std::vector<Grid> pd, pc, base_pd, base_pc;
        std::set<std::string> template_ids;
        for (std::size_t i = 0; i < ex.size(); ++i) {
            if (ex[i].variant == Variant::causal && ex[i].delimiter == d) {
                pd.push_back(grids[i].delimiter);
                pc.push_back(grids[i].causal);
                template_ids.insert(ex[i].template_id);
            }
        }
        if (pd.empty()) {
            const auto w = fmt::format("no examples for delimiter \"{}\"; panel skipped", d);
            log("warning: " + w);
            section["warnings"].push_back(w);
            continue;
        }
        for (std::size_t i = 0; i < ex.size(); ++i) {
            if (ex[i].variant == Variant::non_causal && template_ids.contains(ex[i].template_id)) {
                base_pd.push_back(grids[i].delimiter);
                base_pc.push_back(grids[i].causal);
            }
        }
        ojson panel;
        panel["n"] = pd.size();
        panel["n_non_causal"] = base_pd.size();
        panel["templates"] = template_ids;
        for (const auto& [metric, per, base] : {std::tuple{"P_d", &pd, &base_pd}, std::tuple{"P_c", &pc, &base_pc}}) {
            const auto h = aggregate(metric, d, *per);
            write_artifact(ctx.dir("heatmaps"), d, metric, to_json(h), to_csv(h), spec_for(h, fmt::format("{} \"{}\"", metric, d)));
            if (per->size() >= 2 && base->size() >= 2) {
                const auto b = aggregate(metric, d + "/non-causal", *base);
                const auto cmp = compare_to_baseline(h, b);
                RenderSpec spec = spec_for(h, fmt::format("{} \"{}\" minus non-causal", metric, d));
                spec.grid = cmp.difference;
                spec.scale = ColorScale::diverging;
                write_artifact(ctx.dir("heatmaps"), d, std::string(metric) + ".vs-non-causal", to_json(cmp), "", spec);
            }
            if (std::string_view(metric) == "P_c") {
                const double early = band_mean(h.mean, e0, e1);
                const double late = band_mean(h.mean, l0, l1);
                panel["early_layer_check"] = {{"early_layers", {e0, e1}}, {"late_layers", {l0, l1}},
                                              {"early_mean", early}, {"late_mean", late}, {"early_exceeds_late", early > late}};
            }
        }
        section["panels"][d] = panel;
    }
    if (!section.contains("panels")) throw ArgumentError("syntax-scan: no delimiter has examples");
    update_manifest(cfg, "syntax-scan", section);
}

void cmd_patch_sweep(const RunConfig& cfg) {
    const Context ctx(cfg, true);
    ojson section;
    for (const auto& id : cfg.sweep_templates()) {
        const auto data = pair_data(ctx, id, cfg.patch_sweep.max_pairs);
        const auto& pairs = data.pairs;
        if (pairs.empty()) throw ArgumentError(fmt::format("patch-sweep: template {} produced no pairs", id));
        log(fmt::format("patch-sweep {}: {} pairs", id, pairs.size()));
        std::vector<SweepResult> sweeps(pairs.size());
        SweepOptions opt;
        opt.tables = &ctx.tables;
        parallel_for(pairs.size(), cfg.threads, [&](std::size_t i) { sweeps[i] = head_patch_sweep(ctx.m(), pairs[i], opt); });
        const auto avg = average_sweeps(sweeps);
        write_artifact(ctx.dir("sweeps"), id, "head", to_json(avg), to_csv(avg),
                       spec_for(avg, fmt::format("{}: head_result patching, mean over {} pairs", id, avg.n)));
        const auto top = select_heads(avg, static_cast<std::size_t>(cfg.patch_sweep.top_k));
        write_file(ctx.dir("sweeps") / fmt::format("{}.head.top.json", id), dump_json(to_json(top)));

        ojson t;
        t["pairs"] = pairs.size();
        t["n"] = avg.n;
        t["skipped_uninformative"] = avg.skipped;
        t["generation"] = stats_json(data.stats);
        double full_err = 0.0, none_err = 0.0;
        for (double v : avg.full_patch_effect) full_err = std::max(full_err, std::abs(v - 1.0));
        for (double v : avg.no_patch_effect) none_err = std::max(none_err, std::abs(v));
        t["calibration"] = {{"max_full_patch_error", full_err}, {"max_no_patch_effect", none_err},
                            {"holds", full_err <= 1e-4 && none_err == 0.0}};
        double full_mean = 0.0;
        for (double v : avg.full_patch_effect) full_mean += v;
        full_mean /= static_cast<double>(avg.full_patch_effect.size());
        t["additivity_residual"] = full_mean - avg.effect.sum();
        for (const auto& [l, h] : cfg.patch_sweep.watch_heads) {
            t["watch_ranks"][fmt::format("{}.{}", l, h)] = head_rank(avg, l, h);
        }
        t["top"] = to_json(top);

        // Residual sweeps on the first informative pairs, one file per pair and site.
        auto resid = ojson::array();
        int done = 0;
        for (std::size_t i = 0; i < pairs.size() && done < cfg.patch_sweep.resid_pairs; ++i) {
            if (!sweeps[i].informative()) continue;
            ++done;
            ojson entry;
            entry["pair"] = i;
            entry["perturbed_span"] = {pairs[i].perturbed_span.begin, pairs[i].perturbed_span.end};
            std::vector<SweepResult> rs(cfg.patch_sweep.resid_sites.size());
            SweepOptions ropt = opt;
            ropt.threads = cfg.threads;
            for (std::size_t k = 0; k < rs.size(); ++k) {
                const auto kind = cfg.patch_sweep.resid_sites[k];
                rs[k] = resid_patch_sweep(ctx.m(), pairs[i], kind, ropt);
                const auto metric = fmt::format("pair-{}.{}", i, to_string(kind));
                write_artifact(ctx.dir("sweeps"), id, metric, to_json(rs[k]), to_csv(rs[k]),
                               spec_for(rs[k], fmt::format("{} pair {}: {} patching", id, i, to_string(kind))));
                if (kind == SweepKind::resid_pre) {
                    auto cells = ojson::array();
                    for (int c : rs[k].perturbed_columns) cells.push_back(rs[k].effect(0, c));
                    entry["layer0_perturbed_effects"] = cells;
                    entry["layer0_before_perturbed_max"] =
                        pairs[i].perturbed_span.begin > 0
                            ? rs[k].effect.row(0).head(pairs[i].perturbed_span.begin).cwiseAbs().maxCoeff()
                            : 0.0;
                }
            }
            resid.push_back(entry);
        }
        t["resid_sweeps"] = resid;
        section["templates"][id] = t;
    }
    update_manifest(cfg, "patch-sweep", section);
}

void cmd_lens(const RunConfig& cfg) {
    const Context ctx(cfg, true);
    if (cfg.lens.sentences.empty() && cfg.lens.pairs.empty()) {
        throw ConfigError("experiments.lens: no sentences or pairs configured");
    }
    ojson section;
    section["sentences"] = ojson::array();
    section["pairs"] = ojson::array();
    for (std::size_t i = 0; i < cfg.lens.sentences.size(); ++i) {
        const auto& text = cfg.lens.sentences[i];
        const auto ids = encode(ctx.tables, text).ids;
        if (ids.size() < 2) throw ArgumentError(fmt::format("lens sentence \"{}\" has fewer than 2 tokens", text));
        const auto loss = lens_loss(ctx.m(), ids, &ctx.tables);
        const auto name = fmt::format("sentence-{}", i);
        write_artifact(ctx.dir("lens"), name, "loss", to_json(loss), "", spec_for(loss, fmt::format("per-layer loss: {}", text)));
        section["sentences"].push_back({{"name", name}, {"text", text}, {"tokens", ids.size()},
                                        {"final_mean_loss", loss.grid.row(loss.grid.rows() - 1).mean()}});
    }
    for (std::size_t i = 0; i < cfg.lens.pairs.size(); ++i) {
        const auto& [clean, corrupted] = cfg.lens.pairs[i];
        ContrastivePair pair;
        pair.clean.text = clean;
        pair.corrupted.text = corrupted;
        pair.clean.ids = encode(ctx.tables, clean).ids;
        pair.corrupted.ids = encode(ctx.tables, corrupted).ids;
        for (const auto* s : {&pair.clean, &pair.corrupted}) {
            if (s->ids.size() < 2) throw ArgumentError(fmt::format("lens sentence \"{}\" has fewer than 2 tokens", s->text));
        }
        if (pair.clean.ids.size() != pair.corrupted.ids.size()) {
            throw AnnotationError(fmt::format("lens pair {} is not token-aligned: {} vs {} tokens", i, pair.clean.ids.size(),
                                              pair.corrupted.ids.size()));
        }
        pair.perturbed_span = diff_span(pair.clean.ids, pair.corrupted.ids);
        const auto c = loss_contrast(pair, ctx.m(), &ctx.tables);
        const auto name = fmt::format("pair-{}", i);
        write_artifact(ctx.dir("lens"), name, "loss-contrast", to_json(c), "",
                       spec_for_difference(c, fmt::format("per-layer loss difference: {} / {}", clean, corrupted)));
        write_file(ctx.dir("lens") / (name + ".loss-clean.svg"), render_svg(spec_for(c.clean, "per-layer loss: " + clean)));
        write_file(ctx.dir("lens") / (name + ".loss-corrupted.svg"),
                   render_svg(spec_for(c.corrupted, "per-layer loss: " + corrupted)));
        section["pairs"].push_back({{"name", name}, {"clean", clean}, {"corrupted", corrupted},
                                    {"perturbed_columns", c.perturbed_columns}});
    }
    update_manifest(cfg, "lens", section);
}

void cmd_ablate(const RunConfig& cfg) {
    const auto& ab = cfg.ablate;
    if (ab.heads.empty() && ab.semantic_top_k == 0 && ab.syntax_top_k == 0 && ab.control_k == 0) {
        throw ConfigError("experiments.ablate: no head set configured (heads, semantic_top_k, syntax_top_k or control_k)");
    }
    // Resolve prior outputs before loading the model.
    std::vector<HeadRef> syntax_heads;
    if (ab.syntax_top_k > 0) {
        const auto path = cfg.output_dir / "heatmaps" / fmt::format("{}.P_c.json", ab.syntax_delimiter);
        if (!fs::exists(path)) throw ConfigError(fmt::format("experiments.ablate.syntax_top_k: missing prior syntax scan {}", path.string()));
        SweepResult as_sweep;
        as_sweep.effect = heatmap_from_json(read_json(path)).mean;
        syntax_heads = to_heads(select_heads(as_sweep, static_cast<std::size_t>(ab.syntax_top_k)));
    }
    std::map<std::string, SweepResult> prior;
    if (ab.semantic_top_k > 0 || ab.control_k > 0) {
        for (const auto& id : cfg.ablate_templates()) {
            const auto path = cfg.output_dir / "sweeps" / fmt::format("{}.head.json", id);
            if (!fs::exists(path)) throw ConfigError(fmt::format("experiments.ablate: missing prior head sweep {}", path.string()));
            prior[id] = sweep_from_json(read_json(path));
        }
    }

    const Context ctx(cfg, true);
    ojson section;
    for (const auto& id : cfg.ablate_templates()) {
        const auto pairs = pair_data(ctx, id, ab.max_pairs).pairs;
        if (pairs.empty()) throw ArgumentError(fmt::format("ablate: template {} produced no pairs", id));
        std::vector<std::pair<std::string, std::vector<HeadRef>>> sets;
        if (!ab.heads.empty()) sets.emplace_back("explicit", ab.heads);
        if (ab.semantic_top_k > 0) {
            sets.emplace_back(fmt::format("semantic-top{}", ab.semantic_top_k),
                              to_heads(select_heads(prior.at(id), static_cast<std::size_t>(ab.semantic_top_k))));
        }
        if (ab.syntax_top_k > 0) sets.emplace_back(fmt::format("syntax-top{}", ab.syntax_top_k), syntax_heads);
        if (ab.control_k > 0) {
            auto all = select_heads(prior.at(id), static_cast<std::size_t>(prior.at(id).effect.size()));
            std::reverse(all.begin(), all.end());
            all.resize(static_cast<std::size_t>(ab.control_k));
            auto heads = to_heads(all);
            std::sort(heads.begin(), heads.end());
            sets.emplace_back(fmt::format("control-{}", ab.control_k), heads);
        }
        ojson t;
        t["pairs"] = pairs.size();
        for (const auto& [name, heads] : sets) {
            ojson s;
            s["heads"] = heads_json(heads);
            for (auto mode : ab.modes) {
                log(fmt::format("ablate {} {} {}", id, name, to_string(mode)));
                const auto report = ablation_study(ctx.m(), pairs, heads, mode, cfg.seed, cfg.threads);
                write_file(ctx.dir("ablation") / fmt::format("{}.{}.{}.json", id, name, to_string(mode)), dump_json(to_json(report)));
                s[std::string(to_string(mode))] = to_json(report);
            }
            t["sets"][name] = s;
        }
        section["templates"][id] = t;
    }
    update_manifest(cfg, "ablate", section);
}

std::vector<fs::path> cmd_render(const std::vector<fs::path>& inputs, const fs::path& out_dir) {
    if (inputs.empty()) throw ArgumentError("render: no input files");
    std::vector<fs::path> written;
    for (const auto& in : inputs) {
        const auto stem = in.stem().string();
        const auto dir = out_dir.empty() ? in.parent_path() : out_dir;
        for (const auto& [suffix, spec] : specs_from_artifact(read_json(in), stem)) {
            const auto path = dir / (suffix.empty() ? stem + ".svg" : stem + "." + suffix + ".svg");
            write_file(path, render_svg(spec));
            written.push_back(path);
        }
    }
    return written;
}

} // namespace causalscope::cli
