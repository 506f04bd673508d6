#include "causalscope/synthetic.hpp"

#include <string_view>

#include "causalscope/hashing.hpp"

namespace causalscope {

namespace {

// Irwin-Hall(4) centred and scaled to unit variance; exact in float.
float unit_noise(std::uint64_t key) {
    float acc = 0.0f;
    for (int k = 0; k < 4; ++k) {
        key = splitmix64(key);
        acc += static_cast<float>(key >> 40) * (1.0f / 16777216.0f);
    }
    return (acc - 2.0f) * 1.7320508f;
}

safetensors::NamedTensor make(const std::string& name, std::vector<std::int64_t> shape, std::uint64_t seed, float mean,
                              float stddev) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    safetensors::NamedTensor t{name, std::move(shape), std::vector<float>(static_cast<std::size_t>(n))};
    const std::uint64_t base = splitmix64(seed ^ fnv1a(name));
    for (std::int64_t i = 0; i < n; ++i) {
        t.values[i] = mean + stddev * unit_noise(base + static_cast<std::uint64_t>(i) * 0x632BE59BD9B4E019ull);
    }
    return t;
}

} // namespace

std::vector<safetensors::NamedTensor> synthetic_checkpoint(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::vector<safetensors::NamedTensor> out;
    for (const auto& [name, shape] : checkpoint_layout(config)) {
        float mean = 0.0f;
        float stddev = 0.02f;
        const std::string_view n = name;
        if (n == "wte.weight") {
            stddev = 0.1f;
        } else if (n.ends_with("ln_1.weight") || n.ends_with("ln_2.weight") || n == "ln_f.weight") {
            mean = 1.0f;
            stddev = 0.1f;
        } else if (n.ends_with("c_attn.weight")) {
            stddev = 0.06f;
        } else if (n.ends_with("mlp.c_fc.weight")) {
            stddev = 0.04f;
        } else if (n.ends_with("c_proj.weight")) {
            stddev = 0.03f;
        }
        out.push_back(make(name, shape, seed, mean, stddev));
    }
    return out;
}

ModelConfig tiny_config(int vocab_size) {
    ModelConfig c;
    c.n_layers = 3;
    c.n_heads = 4;
    c.d_head = 8;
    c.d_model = 32;
    c.d_mlp = 128; // widths where Eigen GEMM rows are batch-independent
    c.vocab_size = vocab_size;
    c.n_ctx = 64;
    return c;
}

} // namespace causalscope
