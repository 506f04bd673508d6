#include <doctest.h>

#include <cmath>
#include <numeric>

#include <json.hpp>

#include "causalscope/error.hpp"
#include "causalscope/model.hpp"
#include "causalscope/safetensors.hpp"
#include "causalscope/synthetic.hpp"
#include "causalscope/trace.hpp"
#include "support.hpp"

using namespace causalscope;

namespace {

const ModelTensors& tiny() {
    static const auto m = test_support::tiny_model();
    return m;
}

// Straight double-precision GPT-2 forward over the raw checkpoint tensors,
// written without the engine's helpers.
std::vector<std::vector<double>> naive_logits(const std::vector<safetensors::NamedTensor>& ckpt, const ModelConfig& c,
                                              const std::vector<TokenId>& ids) {
    std::map<std::string, const std::vector<float>*> t;
    for (const auto& nt : ckpt) t[nt.name] = &nt.values;
    const int d = c.d_model, seq = static_cast<int>(ids.size()), dh = c.d_head;
    using Mat = std::vector<std::vector<double>>;
    auto ln = [&](const Mat& x, const std::string& p) {
        Mat y(seq, std::vector<double>(d));
        for (int r = 0; r < seq; ++r) {
            double mean = 0, var = 0;
            for (double v : x[r]) mean += v;
            mean /= d;
            for (double v : x[r]) var += (v - mean) * (v - mean);
            var /= d;
            for (int i = 0; i < d; ++i) {
                y[r][i] = (x[r][i] - mean) / std::sqrt(var + c.ln_eps) * (*t[p + ".weight"])[i] + (*t[p + ".bias"])[i];
            }
        }
        return y;
    };
    // Conv1D: y[o] = b[o] + sum_i x[i] * W[i][o] with W stored [in, out].
    auto conv = [&](const Mat& x, const std::string& p, int in, int out) {
        Mat y(seq, std::vector<double>(out));
        const auto& w = *t[p + ".weight"];
        const auto& b = *t[p + ".bias"];
        for (int r = 0; r < seq; ++r) {
            for (int o = 0; o < out; ++o) {
                double acc = b[o];
                for (int i = 0; i < in; ++i) acc += x[r][i] * w[static_cast<std::size_t>(i) * out + o];
                y[r][o] = acc;
            }
        }
        return y;
    };
    Mat x(seq, std::vector<double>(d));
    for (int r = 0; r < seq; ++r) {
        for (int i = 0; i < d; ++i) {
            x[r][i] = (*t["wte.weight"])[static_cast<std::size_t>(ids[r]) * d + i] + (*t["wpe.weight"])[r * d + i];
        }
    }
    for (int l = 0; l < c.n_layers; ++l) {
        const auto p = "h." + std::to_string(l) + ".";
        auto qkv = conv(ln(x, p + "ln_1"), p + "attn.c_attn", d, 3 * d);
        Mat merged(seq, std::vector<double>(d, 0.0));
        for (int h = 0; h < c.n_heads; ++h) {
            for (int q = 0; q < seq; ++q) {
                std::vector<double> s(q + 1);
                double mx = -1e300;
                for (int k = 0; k <= q; ++k) {
                    double dot = 0;
                    for (int j = 0; j < dh; ++j) dot += qkv[q][h * dh + j] * qkv[k][d + h * dh + j];
                    s[k] = dot / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, s[k]);
                }
                double sum = 0;
                for (auto& v : s) sum += (v = std::exp(v - mx));
                for (int k = 0; k <= q; ++k) {
                    for (int j = 0; j < dh; ++j) merged[q][h * dh + j] += s[k] / sum * qkv[k][2 * d + h * dh + j];
                }
            }
        }
        auto attn = conv(merged, p + "attn.c_proj", d, d);
        for (int r = 0; r < seq; ++r)
            for (int i = 0; i < d; ++i) x[r][i] += attn[r][i];
        auto hidden = conv(ln(x, p + "ln_2"), p + "mlp.c_fc", d, c.d_mlp);
        for (auto& row : hidden) {
            for (auto& v : row) v = 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
        }
        auto mlp = conv(hidden, p + "mlp.c_proj", c.d_mlp, d);
        for (int r = 0; r < seq; ++r)
            for (int i = 0; i < d; ++i) x[r][i] += mlp[r][i];
    }
    auto xf = ln(x, "ln_f");
    Mat logits(seq, std::vector<double>(c.vocab_size));
    for (int r = 0; r < seq; ++r) {
        for (int v = 0; v < c.vocab_size; ++v) {
            double acc = 0;
            for (int i = 0; i < d; ++i) acc += xf[r][i] * (*t["wte.weight"])[static_cast<std::size_t>(v) * d + i];
            logits[r][v] = acc;
        }
    }
    return logits;
}

} // namespace

TEST_CASE("model config validation") {
    CHECK_NOTHROW(ModelConfig::gpt2_small().validate());
    auto c = ModelConfig::gpt2_small();
    c.d_head = 32;
    CHECK_THROWS_AS(c.validate(), ArgumentError);
    c = ModelConfig::gpt2_small();
    c.n_layers = 0;
    CHECK_THROWS_AS(c.validate(), ArgumentError);
}

TEST_CASE("GPT-2 small checkpoint layout sums to 124,439,808 parameters") {
    std::int64_t total = 0;
    for (const auto& [name, shape] : checkpoint_layout(ModelConfig::gpt2_small())) {
        total += std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
    }
    CHECK(total == 124439808);
    const auto layout = checkpoint_layout(ModelConfig::gpt2_small());
    const auto it = std::find_if(layout.begin(), layout.end(), [](auto& e) { return e.first == "h.0.attn.c_attn.weight"; });
    REQUIRE(it != layout.end());
    CHECK(it->second == std::vector<std::int64_t>{768, 2304});
}

TEST_CASE("load_weights re-orients Conv1D kernels and counts parameters") {
    const auto cfg = tiny_config();
    const auto ckpt = synthetic_checkpoint(cfg, 7);
    const auto& m = tiny();
    CHECK(m.parameter_count() == [&] {
        std::size_t n = 0;
        for (const auto& t : ckpt) n += t.values.size();
        return n;
    }());
    const auto& raw = std::find_if(ckpt.begin(), ckpt.end(), [](auto& t) { return t.name == "h.1.attn.c_attn.weight"; })->values;
    REQUIRE(m.layers[1].qkv_weight.rows() == 3 * cfg.d_model);
    REQUIRE(m.layers[1].qkv_weight.cols() == cfg.d_model);
    for (int i = 0; i < cfg.d_model; i += 5) {
        for (int o = 0; o < 3 * cfg.d_model; o += 7) {
            CHECK(m.layers[1].qkv_weight(o, i) == raw[static_cast<std::size_t>(i) * 3 * cfg.d_model + o]);
        }
    }
}

TEST_CASE("load_weights errors name the offending tensor") {
    const auto cfg = tiny_config();
    test_support::TempDir dir;
    auto ckpt = synthetic_checkpoint(cfg, 3);

    SUBCASE("missing tensor") {
        auto pruned = ckpt;
        pruned.erase(std::remove_if(pruned.begin(), pruned.end(), [](auto& t) { return t.name == "ln_f.weight"; }),
                     pruned.end());
        safetensors::write(dir.file("m.safetensors"), pruned);
        try {
            load_weights(dir.file("m.safetensors"), cfg);
            FAIL("expected LoadError");
        } catch (const LoadError& e) {
            CHECK(std::string(e.what()) == "missing tensor ln_f.weight");
        }
    }
    SUBCASE("shape mismatch") {
        for (auto& t : ckpt) {
            if (t.name == "h.0.attn.c_attn.weight") t.shape = {3 * cfg.d_model, cfg.d_model};
        }
        safetensors::write(dir.file("m.safetensors"), ckpt);
        try {
            load_weights(dir.file("m.safetensors"), cfg);
            FAIL("expected LoadError");
        } catch (const LoadError& e) {
            CHECK(std::string(e.what()).find("h.0.attn.c_attn.weight") != std::string::npos);
        }
    }
    SUBCASE("truncated file") {
        safetensors::write(dir.file("m.safetensors"), ckpt);
        const auto size = std::filesystem::file_size(dir.file("m.safetensors"));
        std::filesystem::resize_file(dir.file("m.safetensors"), size - 64);
        try {
            load_weights(dir.file("m.safetensors"), cfg);
            FAIL("expected LoadError");
        } catch (const LoadError& e) {
            CHECK(std::string(e.what()).find("ln_f.bias") != std::string::npos);
        }
    }
    SUBCASE("unsupported dtype") {
        safetensors::write(dir.file("m.safetensors"), ckpt);
        auto bytes = test_support::read_text(dir.file("m.safetensors"));
        const auto pos = bytes.find("\"F32\"");
        REQUIRE(pos != std::string::npos);
        bytes.replace(pos, 5, "\"I32\"");
        test_support::write_text(dir.file("m.safetensors"), bytes);
        CHECK_THROWS_AS(load_weights(dir.file("m.safetensors"), cfg), LoadError);
    }
    SUBCASE("float16 checkpoints are up-cast") {
        safetensors::write(dir.file("h.safetensors"), ckpt, safetensors::DType::f16);
        const auto m16 = load_weights(dir.file("h.safetensors"), cfg);
        safetensors::write(dir.file("f.safetensors"), ckpt);
        const auto m32 = load_weights(dir.file("f.safetensors"), cfg);
        const float err = (m16.token_embedding - m32.token_embedding).cwiseAbs().maxCoeff();
        CHECK(err > 0.0f);
        CHECK(err < 1e-3f);
    }
    SUBCASE("transformer. prefix is accepted") {
        auto prefixed = ckpt;
        for (auto& t : prefixed) t.name = "transformer." + t.name;
        safetensors::write(dir.file("p.safetensors"), prefixed);
        CHECK_NOTHROW(load_weights(dir.file("p.safetensors"), cfg));
    }
}

TEST_CASE("half precision conversion") {
    for (float f : {0.0f, 1.0f, -2.5f, 65504.0f, 6.1035156e-05f, 5.9604645e-08f, 0.1f}) {
        CHECK(safetensors::half_to_float(safetensors::float_to_half(f)) == doctest::Approx(f).epsilon(1e-3));
    }
    CHECK(safetensors::float_to_half(1.0f) == 0x3C00);
    CHECK(std::isinf(safetensors::half_to_float(0x7C00)));
}

TEST_CASE("forward matches a double-precision naive implementation") {
    const auto cfg = tiny_config();
    const auto ckpt = synthetic_checkpoint(cfg, 7);
    std::mt19937_64 rng(11);
    for (int len : {1, 5, 17}) {
        const auto ids = test_support::random_ids(rng, len, cfg.vocab_size);
        const auto expected = naive_logits(ckpt, cfg, ids);
        const auto got = forward(tiny(), ids).logits;
        REQUIRE(got.rows() == len);
        REQUIRE(got.cols() == cfg.vocab_size);
        double worst = 0;
        for (int r = 0; r < len; ++r)
            for (int v = 0; v < cfg.vocab_size; ++v) worst = std::max(worst, std::abs(expected[r][v] - got(r, v)));
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("single-token input attends to itself") {
    const std::vector<TokenId> ids{42};
    const auto run = run_with_cache(tiny(), ids);
    CHECK(run.logits.rows() == 1);
    for (int l = 0; l < tiny().config.n_layers; ++l) {
        for (int h = 0; h < tiny().config.n_heads; ++h) {
            const auto& p = run.cache.get(HookSite::make(SiteKind::attn_pattern, l, h));
            REQUIRE(p.rows() == 1);
            CHECK(p(0, 0) == 1.0f);
        }
    }
}

TEST_CASE("structural invariants hold on random prompts") {
    const auto& m = tiny();
    const auto& c = m.config;
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        const auto ids = test_support::random_ids(rng, 3 + trial * 4, c.vocab_size);
        const auto run = run_with_cache(m, ids);
        for (int l = 0; l < c.n_layers; ++l) {
            Matrix head_sum = Matrix::Zero(static_cast<Eigen::Index>(ids.size()), c.d_model);
            for (int h = 0; h < c.n_heads; ++h) {
                const auto& p = run.cache.get(HookSite::make(SiteKind::attn_pattern, l, h));
                for (Eigen::Index q = 0; q < p.rows(); ++q) {
                    CHECK(std::abs(p.row(q).head(q + 1).sum() - 1.0f) < 1e-5f);
                    CHECK(p.row(q).minCoeff() >= 0.0f);
                    for (Eigen::Index k = q + 1; k < p.cols(); ++k) CHECK(p(q, k) == 0.0f);
                }
                head_sum += run.cache.get(HookSite::make(SiteKind::head_result, l, h));
            }
            head_sum.rowwise() += m.layers[l].out_bias;
            const auto& attn = run.cache.get(HookSite::make(SiteKind::attn_out, l));
            CHECK((attn - head_sum).cwiseAbs().maxCoeff() < 1e-4f);
            const Matrix recomposed = run.cache.get(HookSite::make(SiteKind::resid_pre, l)) + attn +
                                      run.cache.get(HookSite::make(SiteKind::mlp_out, l));
            CHECK((run.cache.get(HookSite::make(SiteKind::resid_post, l)) - recomposed).cwiseAbs().maxCoeff() < 1e-4f);
        }
    }
}

TEST_CASE("forward is deterministic and causal") {
    const auto& m = tiny();
    std::mt19937_64 rng(9);
    auto ids = test_support::random_ids(rng, 12, m.config.vocab_size);
    const auto a = forward(m, ids).logits;
    const auto b = forward(m, ids).logits;
    CHECK(a == b);
    ids[8] = (ids[8] + 1) % m.config.vocab_size;
    ids[11] = (ids[11] + 5) % m.config.vocab_size;
    const auto c = forward(m, ids).logits;
    CHECK(c.topRows(8) == a.topRows(8));
    CHECK(c.row(8) != a.row(8));
}

TEST_CASE("forward argument errors") {
    const auto& m = tiny();
    CHECK_THROWS_AS(forward(m, std::vector<TokenId>{}), ArgumentError);
    CHECK_THROWS_AS(forward(m, std::vector<TokenId>(m.config.n_ctx + 1, 1)), ArgumentError);
    CHECK_THROWS_AS(forward(m, std::vector<TokenId>{m.config.vocab_size}), ArgumentError);
}
