#include <doctest.h>

#include <string>

#include "causalscope/error.hpp"
#include "config.hpp"

using namespace causalscope;
using namespace causalscope::cli;
using nlohmann::json;

namespace {

json minimal() {
    return json::parse(R"({
        "vocab_path": "assets/vocab.json",
        "merges_path": "assets/merges.txt",
        "output_dir": "out",
        "seed": 7,
        "dataset": {"lexicon_dir": "lex"}
    })");
}

std::string config_error(const json& j) {
    try {
        parse_config(j, "/base");
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST_CASE("config: minimal document gets defaults and resolved paths") {
    const auto c = parse_config(minimal(), "/base");
    CHECK(c.seed == 7);
    CHECK(c.threads == 1);
    CHECK(c.weights_path.empty());
    CHECK(c.vocab_path == "/base/assets/vocab.json");
    CHECK(c.dataset.lexicon_dir == "/base/lex");
    CHECK(c.dataset.n_per_template == 200);
    CHECK(!c.dataset.syntax_templates.empty());
    CHECK(c.sweep_templates() == c.dataset.semantic_templates);
    CHECK(c.ablate.modes.size() == 2);
}

TEST_CASE("config: errors name the offending field") {
    auto j = minimal();
    j.erase("seed");
    CHECK(config_error(j).starts_with("seed: missing required field"));

    j = minimal();
    j["bogus"] = 1;
    CHECK(config_error(j).starts_with("bogus: unknown field"));

    j = minimal();
    j["dataset"]["semantic_templates"] = {"ALB", "NOPE"};
    CHECK(config_error(j).starts_with("dataset.semantic_templates[1]"));

    j = minimal();
    j["experiments"]["patch_sweep"]["resid_sites"] = {"head"};
    CHECK(config_error(j).starts_with("experiments.patch_sweep.resid_sites[0]"));

    j = minimal();
    j["experiments"]["lens"]["pairs"] = json::array({json::array({"only one"})});
    CHECK(config_error(j).starts_with("experiments.lens.pairs[0]"));

    j = minimal();
    j["experiments"]["ablate"]["heads"] = {{12, 0}};
    CHECK(config_error(j).starts_with("experiments.ablate.heads"));

    j = minimal();
    j["experiments"]["syntax_scan"]["delimiters"] = {"and"};
    CHECK(config_error(j).starts_with("experiments.syntax_scan.delimiters[0]"));
}

TEST_CASE("config: hash ignores threads and output_dir only") {
    auto j = minimal();
    const auto base = config_hash(parse_config(j, "/base"));
    CHECK(base.size() == 16);
    j["threads"] = 4;
    j["output_dir"] = "elsewhere";
    CHECK(config_hash(parse_config(j, "/base")) == base);
    j["seed"] = 8;
    CHECK(config_hash(parse_config(j, "/base")) != base);
}
