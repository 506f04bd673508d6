// Writes a deterministic random checkpoint with GPT-2 tensor names and shapes.
// Used to build parity fixtures when the released weights are not available.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "causalscope/error.hpp"
#include "causalscope/synthetic.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Generate a synthetic GPT-2 geometry safetensors checkpoint"};
    std::string out;
    std::uint64_t seed = 20241;
    std::string geometry = "gpt2-small";
    std::string dtype = "f32";
    bool skip_existing = false;
    app.add_option("--out", out, "output .safetensors path")->required();
    app.add_option("--seed", seed, "generator seed");
    app.add_option("--geometry", geometry, "gpt2-small or tiny")->check(CLI::IsMember({"gpt2-small", "tiny"}));
    app.add_option("--dtype", dtype, "payload dtype")->check(CLI::IsMember({"f32", "f16"}));
    app.add_flag("--skip-existing", skip_existing, "do nothing when the output already exists");
    CLI11_PARSE(app, argc, argv);

    try {
        if (skip_existing && std::filesystem::exists(out)) return 0;
        const auto config = geometry == "tiny" ? causalscope::tiny_config() : causalscope::ModelConfig::gpt2_small();
        const auto tensors = causalscope::synthetic_checkpoint(config, seed);
        const auto tmp = out + ".tmp";
        causalscope::safetensors::write(tmp, tensors,
                                        dtype == "f16" ? causalscope::safetensors::DType::f16
                                                       : causalscope::safetensors::DType::f32);
        std::filesystem::rename(tmp, out);
    } catch (const causalscope::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
