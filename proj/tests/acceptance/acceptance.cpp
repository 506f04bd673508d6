// Acceptance checks, one PASS/FAIL line per criterion. Exit status is nonzero
// when any selected criterion fails.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "causalscope/corpus.hpp"
#include "causalscope/error.hpp"
#include "causalscope/lens.hpp"
#include "causalscope/metrics.hpp"
#include "causalscope/model.hpp"
#include "causalscope/patchlab.hpp"
#include "causalscope/tokenizer.hpp"
#include "causalscope/trace.hpp"

namespace fs = std::filesystem;
using namespace causalscope;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Env {
    fs::path assets;
    fs::path fixtures;
    fs::path checkpoint; // synthetic GPT-2 geometry
    fs::path cli;
    fs::path work;
    std::string gpt2_weights; // released weights, when provided

    const BpeTables& tables() const {
        static const auto t = load_bpe(assets / "gpt2/vocab.json", assets / "gpt2/merges.txt");
        return t;
    }
    const LexiconSet& lexicons() const {
        static const auto l = load_lexicons(assets / "lexicons");
        return l;
    }
    const ModelTensors& synthetic() const {
        static const auto m = load_weights(checkpoint);
        return m;
    }
};

nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    return nlohmann::json::parse(in);
}

std::vector<TokenId> random_ids(std::mt19937_64& rng, int len) {
    std::uniform_int_distribution<int> pick(0, 50256);
    std::vector<TokenId> ids(len);
    for (auto& id : ids) id = pick(rng);
    return ids;
}

double max_abs(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

// 1. Logit parity against the frozen float64 reference, plus forward latency.
Outcome model_parity(const Env& env) {
    const auto ref = read_json(env.fixtures / "reference_logits.json");
    const auto& m = env.synthetic();
    const int stride = ref.at("stride").get<int>();
    double worst = 0.0;
    int argmax_mismatch = 0;
    for (const auto& p : ref.at("prompts")) {
        const auto ids = p.at("ids").get<std::vector<TokenId>>();
        const auto text_ids = encode(env.tables(), p.at("text").get<std::string>()).ids;
        if (text_ids != ids) return {false, fmt::format("tokenization of \"{}\" differs from the fixture", p.at("text").get<std::string>())};
        const auto logits = forward(m, ids).logits;
        for (std::size_t t = 0; t < ids.size(); ++t) {
            const auto& row = p.at("positions").at(t);
            const auto& sampled = row.at("sampled");
            for (std::size_t k = 0; k < sampled.size(); ++k) {
                worst = std::max(worst, std::abs(logits(t, static_cast<Eigen::Index>(k) * stride) - sampled[k].get<double>()));
            }
            Eigen::Index am = 0;
            const double mx = logits.row(t).maxCoeff(&am);
            worst = std::max(worst, std::abs(mx - row.at("max").get<double>()));
            if (am != row.at("argmax").get<Eigen::Index>()) ++argmax_mismatch;
        }
    }
    std::mt19937_64 rng(1);
    const auto ids20 = random_ids(rng, 20);
    forward(m, ids20);
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < 5; ++i) forward(m, ids20);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 5;
    const bool pass = worst < 1e-3 && argmax_mismatch == 0 && secs < 1.0;
    return {pass, fmt::format("max |dlogit| {:.3g} over {} prompts (synthetic GPT-2 checkpoint vs HF float64), argmax mismatches {}, "
                              "20-token forward {:.3f} s",
                              worst, ref.at("prompts").size(), argmax_mismatch, secs)};
}

// 2. Tokenizer ids and round trip on the frozen corpus.
Outcome tokenizer_parity(const Env& env) {
    const auto ref = read_json(env.fixtures / "tokenizer_reference.json");
    int id_mismatch = 0, roundtrip = 0, n = 0;
    for (const auto& s : ref.at("sentences")) {
        const auto text = s.at("text").get<std::string>();
        const auto ids = encode(env.tables(), text).ids;
        if (ids != s.at("ids").get<std::vector<TokenId>>()) ++id_mismatch;
        if (decode(env.tables(), ids) != text) ++roundtrip;
        ++n;
    }
    return {n >= 100 && id_mismatch == 0 && roundtrip == 0,
            fmt::format("{} strings, {} id mismatches, {} round-trip failures", n, id_mismatch, roundtrip)};
}

// 3. Attention rows, residual decomposition and head sum on 20 random prompts.
Outcome structural(const Env& env) {
    const auto& m = env.synthetic();
    const auto& c = m.config;
    std::mt19937_64 rng(3);
    double rows = 0.0, resid = 0.0, heads = 0.0;
    for (int i = 0; i < 20; ++i) {
        const auto ids = random_ids(rng, 4 + i);
        const auto run = run_with_cache(m, ids);
        auto get = [&](SiteKind k, int l, std::optional<int> h = std::nullopt) -> const Matrix& {
            return run.cache.get(HookSite::make(k, l, h));
        };
        for (int l = 0; l < c.n_layers; ++l) {
            Matrix sum = Matrix::Zero(static_cast<Eigen::Index>(ids.size()), c.d_model);
            for (int h = 0; h < c.n_heads; ++h) {
                const auto& p = get(SiteKind::attn_pattern, l, h);
                rows = std::max(rows, static_cast<double>((p.rowwise().sum().array() - 1.0f).abs().maxCoeff()));
                sum += get(SiteKind::head_result, l, h);
            }
            sum.rowwise() += m.layers[l].out_bias;
            heads = std::max(heads, max_abs(sum, get(SiteKind::attn_out, l)));
            const Matrix recomposed = get(SiteKind::resid_pre, l) + get(SiteKind::attn_out, l) + get(SiteKind::mlp_out, l);
            resid = std::max(resid, max_abs(recomposed, get(SiteKind::resid_post, l)));
        }
    }
    return {rows <= 1e-5 && resid <= 1e-4 && heads <= 1e-4,
            fmt::format("max |row sum - 1| {:.2g}, residual decomposition {:.2g}, head sum {:.2g} (20 prompts x 12 layers)", rows,
                        resid, heads)};
}

// 4. Patching identities on 50 random clean/corrupted pairs.
Outcome patching_identities(const Env& env) {
    const auto& m = env.synthetic();
    std::mt19937_64 rng(4);
    double full = 0.0, zero = 0.0;
    int self_mismatch = 0;
    for (int i = 0; i < 50; ++i) {
        const int len = 3 + i % 12;
        const auto clean = random_ids(rng, len);
        auto corrupted = clean;
        corrupted[rng() % len] = random_ids(rng, 1)[0];
        const auto donor = run_with_cache(m, clean);
        const auto patched = run_with_patches(m, corrupted, PatchSpec::everything(m.config, donor.cache), TraceRequest::nothing());
        full = std::max(full, max_abs(patched.logits, donor.logits));
        const auto self = run_with_patches(m, clean, PatchSpec::everything(m.config, donor.cache), TraceRequest::nothing());
        if (self.logits != donor.logits) ++self_mismatch;

        std::vector<HeadRef> heads{{static_cast<int>(rng() % 12), static_cast<int>(rng() % 12)}};
        if (heads[0] != HeadRef{11, 2}) heads.emplace_back(11, 2);
        const auto ablated = ablate(m, corrupted, heads, AblationMode::zero);
        const Matrix zeros = Matrix::Zero(len, m.config.d_model);
        std::vector<Override> ov;
        for (const auto& [l, h] : heads) ov.push_back({HookSite::make(SiteKind::head_result, l, h), PositionSelector::every(), &zeros});
        ForwardOptions fo;
        fo.overrides = ov;
        zero = std::max(zero, max_abs(ablated, forward(m, corrupted, fo).logits));
    }
    return {full <= 1e-6 && self_mismatch == 0 && zero <= 1e-6,
            fmt::format("full patch vs donor {:.2g}, self-patch mismatches {}, zero-ablation vs zero-patch {:.2g} (50 pairs)", full,
                        self_mismatch, zero)};
}

// 5. Readout 12 of the lens equals the model loss; also checked against the
// frozen float64 per-layer reference.
Outcome lens_identity(const Env& env) {
    const auto& m = env.synthetic();
    std::vector<std::vector<TokenId>> corpus;
    const auto tok = read_json(env.fixtures / "tokenizer_reference.json");
    for (const auto& s : tok.at("sentences")) {
        auto ids = s.at("ids").get<std::vector<TokenId>>();
        if (ids.size() >= 2) corpus.push_back(std::move(ids));
    }
    std::vector<Template> templates;
    for (const auto& t : syntax_templates()) {
        if (t.variant == Variant::causal) templates.push_back(t);
    }
    for (auto& ex : generate_syntax_dataset(templates, env.lexicons(), 5, 5, env.tables()).examples) corpus.push_back(ex.ids);
    double worst = 0.0;
    bool finite = true;
    for (const auto& ids : corpus) {
        const auto loss = lens_loss(m, ids);
        const auto direct = token_losses(forward(m, ids).logits, ids);
        for (std::size_t t = 0; t < direct.size(); ++t) worst = std::max(worst, std::abs(loss.grid(12, t) - direct[t]));
        finite = finite && loss.grid.allFinite() && loss.grid.minCoeff() >= 0.0;
    }
    double oracle = 0.0;
    const auto ref = read_json(env.fixtures / "lens_reference.json");
    for (const auto& p : ref.at("prompts")) {
        const auto ids = p.at("ids").get<std::vector<TokenId>>();
        const auto g = lens_loss(m, ids).grid;
        const auto& rg = p.at("grid");
        for (int r = 0; r < 13; ++r) {
            for (std::size_t t = 0; t + 1 < ids.size(); ++t) oracle = std::max(oracle, std::abs(g(r, t) - rg[r][t].get<double>()));
        }
    }
    return {worst <= 1e-5 && finite && oracle <= 1e-3,
            fmt::format("{} sentences: max |readout 12 - model loss| {:.2g}; all losses finite and >= 0: {}; "
                        "max deviation from float64 per-layer oracle {:.2g}",
                        corpus.size(), worst, finite ? "yes" : "no", oracle)};
}

double brute(const Matrix& p, const AnnotatedExample& ex, bool delimiter) {
    const auto& early = ex.earlier_phrase();
    const auto& late = ex.later_phrase();
    const int lo = early.begin, hi = late.end, d = ex.delimiter_index;
    double num = 0.0, den = 0.0;
    for (int q = lo; q < hi; ++q) {
        if (delimiter && q == d) continue;
        for (int k = lo; k < hi; ++k) {
            den += p(q, k);
            if (delimiter ? k == d : (q >= late.begin && k < early.end)) num += p(q, k);
        }
    }
    return den > 0.0 ? num / den : 0.0;
}

// 6. P_d / P_c against explicit double sums on 100 generated examples.
Outcome metric_oracle(const Env& env) {
    const auto& m = env.synthetic();
    const auto data = generate_syntax_dataset(syntax_templates(), env.lexicons(), 5, 6, env.tables()).examples;
    double worst = 0.0;
    bool in_range = true;
    int n = 0;
    for (std::size_t i = 0; i < data.size() && n < 100; i += 1, ++n) {
        const auto& ex = data[i];
        const auto run = run_with_cache(m, ex.ids, TraceRequest::only({SiteKind::attn_pattern}));
        const auto pd = delimiter_attention(run.cache, ex, m.config);
        const auto pc = causal_attention(run.cache, ex, m.config);
        for (int l = 0; l < 12; ++l) {
            for (int h = 0; h < 12; ++h) {
                const auto& p = run.cache.get(HookSite::make(SiteKind::attn_pattern, l, h));
                worst = std::max({worst, std::abs(pd(l, h) - brute(p, ex, true)), std::abs(pc(l, h) - brute(p, ex, false))});
                in_range = in_range && pd(l, h) >= 0 && pd(l, h) <= 1 && pc(l, h) >= 0 && pc(l, h) <= 1;
            }
        }
    }
    return {n == 100 && worst <= 1e-6 && in_range,
            fmt::format("{} examples x 144 heads: max deviation {:.2g}, all in [0,1]: {}", n, worst, in_range ? "yes" : "no")};
}

// 7. Early-layer concentration of P_c; needs the released weights.
Outcome syntax_localization(const Env& env) {
    if (env.gpt2_weights.empty()) {
        return {false, "blocked: needs the released GPT-2 small weights (set CAUSALSCOPE_GPT2_WEIGHTS to a .safetensors file); "
                       "synthetic weights cannot test this claim"};
    }
    const auto m = load_weights(env.gpt2_weights);
    std::vector<std::string> parts;
    bool pass = true;
    for (const auto& [delim, ids] : std::vector<std::pair<std::string, std::vector<std::string>>>{
             {"because", {"syntax-1", "syntax-2", "syntax-3"}}, {"so", {"syntax-4", "syntax-5"}}}) {
        std::vector<Template> templates;
        for (const auto& id : ids) {
            for (const auto& t : syntax_template_variants(id)) {
                if (t.variant == Variant::causal) templates.push_back(t);
            }
        }
        const int n = static_cast<int>((200 + templates.size() - 1) / templates.size());
        const auto data = generate_syntax_dataset(templates, env.lexicons(), n, 7, env.tables()).examples;
        std::vector<Grid> pc;
        for (const auto& ex : data) pc.push_back(attention_grids(m, ex).causal);
        const auto h = aggregate("P_c", delim, pc);
        const double early = band_mean(h.mean, 0, 2), late = band_mean(h.mean, 9, 11);
        pass = pass && pc.size() >= 200 && early > late;
        parts.push_back(fmt::format("{}: n={} early {:.4f} vs late {:.4f}", delim, pc.size(), early, late));
    }
    return {pass, fmt::format("{}", fmt::join(parts, "; "))};
}

// 8. Averaged head sweeps: head ranks, with the calibration fallback.
Outcome head_reproduction(const Env& env) {
    const bool real = !env.gpt2_weights.empty();
    const auto owned = real ? std::optional<ModelTensors>(load_weights(env.gpt2_weights)) : std::nullopt;
    const auto& m = real ? *owned : env.synthetic();
    const std::vector<HeadRef> watch{{11, 2}, {10, 0}, {8, 8}};
    std::map<HeadRef, int> top10_count;
    double full_err = 0.0, none_err = 0.0, layer0_min = 1e9, before_max = 0.0;
    std::size_t used = 0, skipped = 0;
    std::vector<std::string> ranks;
    for (const auto& id : {"ALB", "AOB", "ALS", "ALS-2", "AOS"}) {
        const auto pairs = generate_semantic_pairs(id, env.lexicons(), 8, env.tables(), 50).pairs;
        if (pairs.size() < 50) return {false, fmt::format("{} yields only {} pairs", id, pairs.size())};
        std::vector<SweepResult> sweeps;
        for (const auto& p : pairs) {
            sweeps.push_back(head_patch_sweep(m, p));
            const auto& s = sweeps.back();
            if (!s.informative()) continue;
            full_err = std::max(full_err, std::abs(s.full_patch_effect[0] - 1.0));
            none_err = std::max(none_err, std::abs(s.no_patch_effect[0]));
            // Layer-0 resid_pre patch over the perturbed span, and the cells before it.
            const double gap = s.ld_clean - s.ld_corrupted;
            const auto clean = run_with_cache(m, p.clean.ids, TraceRequest::only({SiteKind::resid_pre}));
            const auto& src = clean.cache.get(HookSite::make(SiteKind::resid_pre, 0));
            std::set<int> span;
            for (int c = p.perturbed_span.begin; c < p.perturbed_span.end; ++c) span.insert(c);
            const std::vector<Override> ov{{HookSite::make(SiteKind::resid_pre, 0), PositionSelector::at(span), &src}};
            ForwardOptions fo;
            fo.overrides = ov;
            fo.compute_logits = false;
            const auto run = forward(m, p.corrupted.ids, fo);
            layer0_min = std::min(layer0_min, (logit_diff_from_residual(m, run.final_residual, p) - s.ld_corrupted) / gap);
            if (p.perturbed_span.begin > 0) {
                before_max = std::max(before_max, std::abs(patch_cell(m, p, SweepKind::resid_pre, 0, p.perturbed_span.begin - 1)));
            }
        }
        const auto avg = average_sweeps(sweeps);
        used += avg.n;
        skipped += avg.skipped;
        std::vector<std::string> r;
        for (const auto& [l, h] : watch) {
            const int rank = head_rank(avg, l, h);
            if (rank <= 10) ++top10_count[{l, h}];
            r.push_back(fmt::format("({},{})#{}", l, h, rank));
        }
        ranks.push_back(fmt::format("{} {}", id, fmt::join(r, " ")));
    }
    bool target = true;
    for (const auto& h : watch) target = target && top10_count[h] >= 3;
    const bool calibration = full_err <= 1e-4 && none_err == 0.0 && layer0_min > 0.9 && before_max == 0.0;
    const std::string weights = real ? "released weights" : "synthetic weights, head ranks carry no meaning";
    const std::string verdict = target ? "rank target met" : "rank target missed, calibration fallback";
    return {target || calibration,
            fmt::format("{} ({}); {} pairs used, {} uninformative; ranks: {}; max |full-1| {:.2g}, max |no-patch| {:.2g}, "
                        "min layer-0 perturbed effect {:.4f}, max layer-0 effect before the span {:.2g}",
                        verdict, weights, used, skipped, fmt::join(ranks, "; "), full_err, none_err, layer0_min, before_max)};
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::ifstream in(e.path(), std::ios::binary);
        files[fs::relative(e.path(), dir).string()] = {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    }
    return files;
}

// 9. Every CLI command run twice (different thread counts) gives identical bytes.
Outcome determinism(const Env& env) {
    fs::remove_all(env.work);
    fs::create_directories(env.work);
    nlohmann::ordered_json cfg;
    cfg["weights_path"] = env.checkpoint.string();
    cfg["vocab_path"] = (env.assets / "gpt2/vocab.json").string();
    cfg["merges_path"] = (env.assets / "gpt2/merges.txt").string();
    cfg["output_dir"] = (env.work / "unused").string();
    cfg["seed"] = 3;
    cfg["dataset"] = {{"lexicon_dir", (env.assets / "lexicons").string()},
                      {"syntax_templates", {"syntax-1", "syntax-4"}},
                      {"semantic_templates", {"ALB", "ALS"}},
                      {"n_per_template", 3},
                      {"max_pairs", 4}};
    cfg["experiments"] = {
        {"patch_sweep", {{"max_pairs", 2}, {"resid_pairs", 1}, {"resid_sites", {"resid_pre"}}}},
        {"lens", {{"sentences", {"I opened an umbrella because it started raining"}},
                  {"pairs", nlohmann::ordered_json::array({nlohmann::ordered_json::array(
                               {"we went shopping because we were bored", "we went shopping because we were sleepy"})})}}},
        {"ablate", {{"max_pairs", 3}, {"heads", {{11, 2}}}, {"semantic_top_k", 2}, {"syntax_top_k", 2}, {"control_k", 2}}}};
    const auto cfg_path = env.work / "config.json";
    std::ofstream(cfg_path) << cfg.dump(1);

    std::vector<std::string> failures;
    for (const auto& [run, threads] : {std::pair{"a", 1}, std::pair{"b", 2}}) {
        const auto out = env.work / run;
        for (const auto* cmd : {"gen-data", "syntax-scan", "patch-sweep", "lens", "ablate"}) {
            const auto line = fmt::format("\"{}\" --config \"{}\" --output \"{}\" --threads {} {} > \"{}\" 2>&1", env.cli.string(),
                                          cfg_path.string(), out.string(), threads, cmd, (env.work / "log.txt").string());
            if (std::system(line.c_str()) != 0) failures.push_back(fmt::format("{} (run {}) failed", cmd, run));
        }
        const auto render = fmt::format("\"{}\" --output \"{}\" render \"{}\" \"{}\" > \"{}\" 2>&1", env.cli.string(),
                                        (out / "rendered").string(), (out / "sweeps/ALB.head.json").string(),
                                        (out / "lens/pair-0.loss-contrast.json").string(), (env.work / "log.txt").string());
        if (std::system(render.c_str()) != 0) failures.push_back(fmt::format("render (run {}) failed", run));
    }
    if (!failures.empty()) return {false, fmt::format("{}", fmt::join(failures, "; "))};
    const auto a = snapshot(env.work / "a");
    const auto b = snapshot(env.work / "b");
    std::size_t differing = 0;
    for (const auto& [name, bytes] : a) {
        const auto it = b.find(name);
        if (it == b.end() || it->second != bytes) ++differing;
    }
    const bool same_set = a.size() == b.size();
    return {same_set && differing == 0 && a.size() > 20,
            fmt::format("{} output files from gen-data, syntax-scan, patch-sweep, lens, ablate and render; {} differ between "
                        "runs (threads 1 vs 2)",
                        a.size(), differing + (same_set ? 0 : 1))};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    std::vector<int> criteria;
    Env env;
    env.assets = CAUSALSCOPE_ASSETS;
    env.fixtures = CAUSALSCOPE_FIXTURES;
    env.checkpoint = CAUSALSCOPE_CHECKPOINT;
    env.cli = CAUSALSCOPE_CLI;
    env.work = fs::current_path() / "acceptance_work";
    app.add_option("--criteria", criteria, "criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 9));
    app.add_option("--checkpoint", env.checkpoint, "synthetic GPT-2 geometry checkpoint");
    app.add_option("--work", env.work, "scratch directory for CLI runs");
    CLI11_PARSE(app, argc, argv);
    if (const char* w = std::getenv("CAUSALSCOPE_GPT2_WEIGHTS")) env.gpt2_weights = w;
    if (criteria.empty()) criteria = {1, 2, 3, 4, 5, 6, 7, 8, 9};

    const std::map<int, std::pair<std::string, std::function<Outcome(const Env&)>>> checks{
        {1, {"model parity", model_parity}},
        {2, {"tokenizer parity", tokenizer_parity}},
        {3, {"structural invariants", structural}},
        {4, {"patching identities", patching_identities}},
        {5, {"lens identity", lens_identity}},
        {6, {"metric oracle equivalence", metric_oracle}},
        {7, {"syntax localization", syntax_localization}},
        {8, {"patching head reproduction", head_reproduction}},
        {9, {"determinism", determinism}},
    };
    bool all = true;
    for (int c : criteria) {
        const auto& [name, fn] = checks.at(c);
        Outcome o;
        try {
            o = fn(env);
        } catch (const std::exception& e) {
            o = {false, fmt::format("error: {}", e.what())};
        }
        all = all && o.pass;
        std::cout << fmt::format("criterion {} ({}): {}: {}", c, name, o.pass ? "PASS" : "FAIL", o.detail) << std::endl;
    }
    return all ? 0 : 1;
}
