#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "causalscope/error.hpp"
#include "commands.hpp"

namespace {

using namespace causalscope;

std::string error_kind(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return "ConfigError";
    if (dynamic_cast<const ParseError*>(&e)) return "ParseError";
    if (dynamic_cast<const LoadError*>(&e)) return "LoadError";
    if (dynamic_cast<const ArgumentError*>(&e)) return "ArgumentError";
    if (dynamic_cast<const PatchError*>(&e)) return "PatchError";
    if (dynamic_cast<const AnnotationError*>(&e)) return "AnnotationError";
    if (dynamic_cast<const RenderError*>(&e)) return "RenderError";
    if (dynamic_cast<const Error*>(&e)) return "Error";
    return "InternalError";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Attention, lens and patching experiments on GPT-2 small"};
    app.require_subcommand(1);
    std::string config_path, output;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    app.add_option("--config", config_path, "run config (JSON)")->check(CLI::ExistingFile);
    app.add_option("--output", output, "output directory (overrides output_dir)");
    app.add_option("--seed", seed, "seed (overrides the config)");
    app.add_option("--threads", threads, "worker threads")->check(CLI::Range(1, 256));

    auto* gen = app.add_subcommand("gen-data", "generate syntax examples and contrastive pairs");
    auto* scan = app.add_subcommand("syntax-scan", "P_d / P_c heatmaps per delimiter");
    auto* sweep = app.add_subcommand("patch-sweep", "head and residual activation patching sweeps");
    auto* lens = app.add_subcommand("lens", "per-layer loss grids");
    auto* ablate = app.add_subcommand("ablate", "zero / resample head ablation");
    auto* render = app.add_subcommand("render", "render SVGs from JSON artifacts");
    std::vector<std::string> inputs;
    render->add_option("inputs", inputs, "heatmap, sweep or loss JSON files")->required()->check(CLI::ExistingFile);
    for (auto* sub : {gen, scan, sweep, lens, ablate, render}) sub->fallthrough();
    CLI11_PARSE(app, argc, argv);

    try {
        if (render->parsed()) {
            std::vector<std::filesystem::path> paths(inputs.begin(), inputs.end());
            for (const auto& p : cli::cmd_render(paths, output)) std::cout << p.string() << '\n';
            return 0;
        }
        if (config_path.empty()) throw ConfigError("--config: required for this command");
        auto cfg = cli::load_config(config_path);
        if (!output.empty()) cfg.output_dir = std::filesystem::absolute(output).lexically_normal();
        if (seed) cfg.seed = *seed;
        if (threads) cfg.threads = *threads;
        if (gen->parsed()) cli::cmd_gen_data(cfg);
        if (scan->parsed()) cli::cmd_syntax_scan(cfg);
        if (sweep->parsed()) cli::cmd_patch_sweep(cfg);
        if (lens->parsed()) cli::cmd_lens(cfg);
        if (ablate->parsed()) cli::cmd_ablate(cfg);
        std::cout << (cfg.output_dir / "manifest.json").string() << '\n';
    } catch (const std::exception& e) {
        nlohmann::ordered_json err;
        err["error"] = {{"kind", error_kind(e)}, {"message", e.what()}};
        std::cerr << err.dump() << '\n';
        return dynamic_cast<const ConfigError*>(&e) ? 2 : 1;
    }
    return 0;
}
