#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "causalscope/model.hpp"
#include "causalscope/safetensors.hpp"
#include "causalscope/synthetic.hpp"
#include "causalscope/tokenizer.hpp"

namespace test_support {

inline std::filesystem::path assets() { return CAUSALSCOPE_ASSETS; }
inline std::filesystem::path fixtures() { return CAUSALSCOPE_FIXTURES; }

inline const causalscope::BpeTables& gpt2_tables() {
    static const auto tables = causalscope::load_bpe(assets() / "gpt2/vocab.json", assets() / "gpt2/merges.txt");
    return tables;
}

// Scratch directory removed on scope exit.
class TempDir {
public:
    TempDir() {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("causalscope_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path file(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

inline std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Tiny-geometry model with synthetic weights, loaded through the real loader.
inline causalscope::ModelTensors tiny_model(std::uint64_t seed = 7) {
    TempDir dir;
    const auto cfg = causalscope::tiny_config();
    causalscope::safetensors::write(dir.file("tiny.safetensors"), causalscope::synthetic_checkpoint(cfg, seed));
    return causalscope::load_weights(dir.file("tiny.safetensors"), cfg);
}

inline std::vector<causalscope::TokenId> random_ids(std::mt19937_64& rng, int len, int vocab) {
    std::uniform_int_distribution<int> pick(0, vocab - 1);
    std::vector<causalscope::TokenId> ids(len);
    for (auto& id : ids) id = pick(rng);
    return ids;
}

} // namespace test_support
