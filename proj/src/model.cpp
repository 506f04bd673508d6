#include "causalscope/model.hpp"

#include <cmath>

#include <fmt/format.h>

#include "causalscope/error.hpp"
#include "causalscope/safetensors.hpp"

namespace causalscope {

void ModelConfig::validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_head <= 0 || d_mlp <= 0 || vocab_size <= 0 || n_ctx <= 0) {
        throw ArgumentError("model config: all counts must be strictly positive");
    }
    if (d_model != n_heads * d_head) {
        throw ArgumentError(fmt::format("model config: d_model {} != n_heads {} * d_head {}", d_model, n_heads, d_head));
    }
    if (!(ln_eps > 0.0f)) throw ArgumentError("model config: ln_eps must be positive");
}

std::size_t ModelTensors::parameter_count() const {
    std::size_t n = token_embedding.size() + position_embedding.size() + lnf_gain.size() + lnf_bias.size();
    for (const auto& l : layers) {
        n += l.ln1_gain.size() + l.ln1_bias.size() + l.qkv_weight.size() + l.qkv_bias.size() + l.out_weight.size() +
             l.out_bias.size() + l.ln2_gain.size() + l.ln2_bias.size() + l.fc_weight.size() + l.fc_bias.size() +
             l.proj_weight.size() + l.proj_bias.size();
    }
    return n;
}

std::vector<std::pair<std::string, std::vector<std::int64_t>>> checkpoint_layout(const ModelConfig& c) {
    const std::int64_t d = c.d_model;
    std::vector<std::pair<std::string, std::vector<std::int64_t>>> out;
    out.push_back({"wte.weight", {c.vocab_size, d}});
    out.push_back({"wpe.weight", {c.n_ctx, d}});
    for (int i = 0; i < c.n_layers; ++i) {
        const auto p = fmt::format("h.{}.", i);
        out.push_back({p + "ln_1.weight", {d}});
        out.push_back({p + "ln_1.bias", {d}});
        out.push_back({p + "attn.c_attn.weight", {d, 3 * d}});
        out.push_back({p + "attn.c_attn.bias", {3 * d}});
        out.push_back({p + "attn.c_proj.weight", {d, d}});
        out.push_back({p + "attn.c_proj.bias", {d}});
        out.push_back({p + "ln_2.weight", {d}});
        out.push_back({p + "ln_2.bias", {d}});
        out.push_back({p + "mlp.c_fc.weight", {d, c.d_mlp}});
        out.push_back({p + "mlp.c_fc.bias", {c.d_mlp}});
        out.push_back({p + "mlp.c_proj.weight", {c.d_mlp, d}});
        out.push_back({p + "mlp.c_proj.bias", {d}});
    }
    out.push_back({"ln_f.weight", {d}});
    out.push_back({"ln_f.bias", {d}});
    return out;
}

namespace {

class TensorReader {
public:
    TensorReader(const safetensors::File& file) : file_(file) {
        for (const auto& [name, _] : file.tensors()) {
            if (name.starts_with("transformer.")) prefix_ = "transformer.";
        }
    }

    std::vector<float> read(const std::string& name, const std::vector<std::int64_t>& shape) const {
        const auto full = resolve(name);
        const auto& info = file_.info(full);
        if (info.shape != shape) {
            throw LoadError(fmt::format("tensor {}: shape {} does not match expected {}", name,
                                        fmt::join(info.shape, "x"), fmt::join(shape, "x")));
        }
        if (info.dtype != "F32" && info.dtype != "F16" && info.dtype != "BF16") {
            throw LoadError(fmt::format("tensor {}: unsupported dtype {}", name, info.dtype));
        }
        auto values = file_.read_f32(full);
        for (float v : values) {
            if (!std::isfinite(v)) throw LoadError(fmt::format("tensor {}: non-finite value", name));
        }
        return values;
    }

private:
    std::string resolve(const std::string& name) const {
        if (file_.contains(name)) return name;
        if (file_.contains(prefix_ + name)) return prefix_ + name;
        throw LoadError(fmt::format("missing tensor {}", name));
    }

    const safetensors::File& file_;
    std::string prefix_;
};

RowVector to_row(const std::vector<float>& v) {
    return Eigen::Map<const RowVector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Matrix to_matrix(const std::vector<float>& v, std::int64_t rows, std::int64_t cols) {
    return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

// Conv1D kernels are stored [in, out]; the engine keeps [out, in].
Matrix to_matrix_transposed(const std::vector<float>& v, std::int64_t in, std::int64_t out) {
    return Eigen::Map<const Matrix>(v.data(), in, out).transpose();
}

} // namespace

ModelTensors load_weights(const std::filesystem::path& path, const ModelConfig& config) {
    config.validate();
    safetensors::File file(path);
    TensorReader reader(file);
    const std::int64_t d = config.d_model;

    // Resolve every name up front so a missing tensor is reported before any payload is read.
    for (const auto& [name, shape] : checkpoint_layout(config)) {
        (void)shape;
        if (!file.contains(name) && !file.contains("transformer." + name)) {
            throw LoadError(fmt::format("missing tensor {}", name));
        }
    }

    ModelTensors m;
    m.config = config;
    m.token_embedding = to_matrix(reader.read("wte.weight", {config.vocab_size, d}), config.vocab_size, d);
    m.position_embedding = to_matrix(reader.read("wpe.weight", {config.n_ctx, d}), config.n_ctx, d);
    m.layers.resize(config.n_layers);
    for (int i = 0; i < config.n_layers; ++i) {
        const auto p = fmt::format("h.{}.", i);
        auto& l = m.layers[i];
        l.ln1_gain = to_row(reader.read(p + "ln_1.weight", {d}));
        l.ln1_bias = to_row(reader.read(p + "ln_1.bias", {d}));
        l.qkv_weight = to_matrix_transposed(reader.read(p + "attn.c_attn.weight", {d, 3 * d}), d, 3 * d);
        l.qkv_bias = to_row(reader.read(p + "attn.c_attn.bias", {3 * d}));
        l.out_weight = to_matrix_transposed(reader.read(p + "attn.c_proj.weight", {d, d}), d, d);
        l.out_bias = to_row(reader.read(p + "attn.c_proj.bias", {d}));
        l.ln2_gain = to_row(reader.read(p + "ln_2.weight", {d}));
        l.ln2_bias = to_row(reader.read(p + "ln_2.bias", {d}));
        l.fc_weight = to_matrix_transposed(reader.read(p + "mlp.c_fc.weight", {d, config.d_mlp}), d, config.d_mlp);
        l.fc_bias = to_row(reader.read(p + "mlp.c_fc.bias", {config.d_mlp}));
        l.proj_weight = to_matrix_transposed(reader.read(p + "mlp.c_proj.weight", {config.d_mlp, d}), config.d_mlp, d);
        l.proj_bias = to_row(reader.read(p + "mlp.c_proj.bias", {d}));
    }
    m.lnf_gain = to_row(reader.read("ln_f.weight", {d}));
    m.lnf_bias = to_row(reader.read("ln_f.bias", {d}));
    return m;
}

float gelu(float x) {
    constexpr float k = 0.7978845608028654f; // sqrt(2/pi)
    return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

void gelu_rows(Matrix& x) {
    constexpr float k = 0.7978845608028654f;
    // Each row goes through the same aligned scratch buffer, so its SIMD
    // split (and result bits) never depends on where the row sits in a batch.
    Eigen::Array<float, 1, Eigen::Dynamic> row(x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        row = x.row(r).array();
        row = 0.5f * row * (1.0f + (k * (row + 0.044715f * row.cube())).tanh());
        x.row(r) = row.matrix();
    }
}

Matrix layer_norm(const Matrix& x, const RowVector& gain, const RowVector& bias, float eps) {
    Matrix out(x.rows(), x.cols());
    const float inv_n = 1.0f / static_cast<float>(x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const float mean = x.row(r).sum() * inv_n;
        const auto centered = (x.row(r).array() - mean).matrix();
        const float var = centered.squaredNorm() * inv_n;
        const float inv_std = 1.0f / std::sqrt(var + eps);
        out.row(r) = (centered.array() * inv_std * gain.array() + bias.array()).matrix();
    }
    return out;
}

RowVector final_norm_row(const ModelTensors& model, const Eigen::Ref<const RowVector>& residual_row) {
    Matrix row = residual_row;
    return layer_norm(row, model.lnf_gain, model.lnf_bias, model.config.ln_eps).row(0);
}

Matrix unembed(const ModelTensors& model, const Matrix& residual) {
    const Matrix normed = layer_norm(residual, model.lnf_gain, model.lnf_bias, model.config.ln_eps);
    Matrix logits = normed * model.token_embedding.transpose();
    return logits;
}

namespace {

void masked_softmax(Matrix& scores) {
    for (Eigen::Index q = 0; q < scores.rows(); ++q) {
        float mx = scores(q, 0);
        for (Eigen::Index k = 1; k <= q; ++k) mx = std::max(mx, scores(q, k));
        float sum = 0.0f;
        for (Eigen::Index k = 0; k <= q; ++k) {
            const float e = std::exp(scores(q, k) - mx);
            scores(q, k) = e;
            sum += e;
        }
        const float inv = 1.0f / sum;
        for (Eigen::Index k = 0; k <= q; ++k) scores(q, k) *= inv;
        for (Eigen::Index k = q + 1; k < scores.cols(); ++k) scores(q, k) = 0.0f;
    }
}

// One forward over `variants.size()` stacked copies of the same sequence.
// Tracing is only supported for a single copy.
class BatchRunner {
public:
    BatchRunner(const ModelTensors& model, std::span<const TokenId> ids, std::span<const std::vector<Override>> variants,
                const TraceRequest& trace, ActivationCache* cache)
        : model_(model), variants_(variants), trace_(trace), cache_(cache),
          seq_(static_cast<Eigen::Index>(ids.size())) {}

    Matrix run(Matrix resid, int start_layer) {
        const auto& cfg = model_.config;
        const int d = cfg.d_model;
        const int dh = cfg.d_head;
        const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
        const auto rows = resid.rows();

        Matrix z(rows, dh);
        Matrix head_result(rows, d);
        for (int layer = start_layer; layer < cfg.n_layers; ++layer) {
            const auto& w = model_.layers[layer];
            visit(HookSite::make(SiteKind::resid_pre, layer), resid);

            const Matrix normed = layer_norm(resid, w.ln1_gain, w.ln1_bias, cfg.ln_eps);
            Matrix qkv = normed * w.qkv_weight.transpose();
            qkv.rowwise() += w.qkv_bias;

            Matrix attn_out = Matrix::Zero(rows, d);
            for (int h = 0; h < cfg.n_heads; ++h) {
                const auto site = HookSite::make(SiteKind::attn_pattern, layer, h);
                for (std::size_t b = 0; b < variants_.size(); ++b) {
                    const auto r0 = static_cast<Eigen::Index>(b) * seq_;
                    const auto q = qkv.block(r0, h * dh, seq_, dh);
                    const auto k = qkv.block(r0, d + h * dh, seq_, dh);
                    const auto v = qkv.block(r0, 2 * d + h * dh, seq_, dh);
                    Matrix pattern = (q * k.transpose()) * scale;
                    masked_softmax(pattern);
                    visit_one(site, b, pattern);
                    z.middleRows(r0, seq_).noalias() = pattern * v;
                }
                head_result.noalias() = z * w.out_weight.middleCols(h * dh, dh).transpose();
                visit(HookSite::make(SiteKind::head_result, layer, h), head_result);
                attn_out += head_result;
            }
            attn_out.rowwise() += w.out_bias;
            visit(HookSite::make(SiteKind::attn_out, layer), attn_out);

            Matrix mid = resid + attn_out;
            visit(HookSite::make(SiteKind::resid_mid, layer), mid);

            const Matrix normed2 = layer_norm(mid, w.ln2_gain, w.ln2_bias, cfg.ln_eps);
            Matrix hidden = normed2 * w.fc_weight.transpose();
            hidden.rowwise() += w.fc_bias;
            gelu_rows(hidden);
            Matrix mlp_out = hidden * w.proj_weight.transpose();
            mlp_out.rowwise() += w.proj_bias;
            visit(HookSite::make(SiteKind::mlp_out, layer), mlp_out);

            resid = mid + mlp_out;
            visit(HookSite::make(SiteKind::resid_post, layer), resid);
        }
        return resid;
    }

    // Applies overrides and tracing to a single-copy tensor (final logits).
    void visit_single(const HookSite& site, Matrix& value) { visit_one(site, 0, value); }

private:
    void visit(const HookSite& site, Matrix& stacked) {
        for (std::size_t b = 0; b < variants_.size(); ++b) {
            auto block = stacked.middleRows(static_cast<Eigen::Index>(b) * seq_, seq_);
            apply(site, variants_[b], block);
        }
        if (cache_ != nullptr && trace_.wants(site.kind)) cache_->put(site, stacked);
    }

    template <typename Block>
    void visit_one(const HookSite& site, std::size_t variant, Block& value) {
        apply(site, variants_[variant], value);
        if (cache_ != nullptr && trace_.wants(site.kind)) cache_->put(site, value);
    }

    template <typename Block>
    void apply(const HookSite& site, const std::vector<Override>& overrides, Block& value) {
        for (const auto& ov : overrides) {
            if (ov.site != site) continue;
            if (ov.values == nullptr || ov.values->rows() != value.rows() || ov.values->cols() != value.cols()) {
                throw PatchError(fmt::format("override for {}: replacement shape does not match activation {}x{}",
                                             site.name(), value.rows(), value.cols()));
            }
            if (ov.positions.all) {
                value = *ov.values;
            } else {
                for (int p : ov.positions.positions) {
                    if (p < 0 || p >= seq_) {
                        throw PatchError(fmt::format("override for {}: position {} out of range", site.name(), p));
                    }
                    value.row(p) = ov.values->row(p);
                }
            }
        }
    }

    const ModelTensors& model_;
    std::span<const std::vector<Override>> variants_;
    const TraceRequest& trace_;
    ActivationCache* cache_;
    Eigen::Index seq_;
};

void check_ids(const ModelConfig& cfg, std::span<const TokenId> ids) {
    const auto seq = static_cast<int>(ids.size());
    if (seq < 1) throw ArgumentError("forward: empty token sequence");
    if (seq > cfg.n_ctx) throw ArgumentError(fmt::format("forward: sequence length {} exceeds n_ctx {}", seq, cfg.n_ctx));
    for (auto id : ids) {
        if (id < 0 || id >= cfg.vocab_size) throw ArgumentError(fmt::format("forward: token id {} out of range", id));
    }
}

Matrix initial_residual(const ModelTensors& model, std::span<const TokenId> ids, int start_layer,
                        const Matrix* start_residual) {
    const auto& cfg = model.config;
    const auto seq = static_cast<Eigen::Index>(ids.size());
    if (start_layer < 0 || start_layer > cfg.n_layers) {
        throw ArgumentError(fmt::format("forward: start_layer {} out of range", start_layer));
    }
    if (start_residual != nullptr) {
        if (start_residual->rows() != seq || start_residual->cols() != cfg.d_model) {
            throw ArgumentError("forward: start residual shape mismatch");
        }
        return *start_residual;
    }
    if (start_layer != 0) throw ArgumentError("forward: start_layer > 0 requires a start residual");
    Matrix resid(seq, cfg.d_model);
    for (Eigen::Index t = 0; t < seq; ++t) {
        resid.row(t) = model.token_embedding.row(ids[t]) + model.position_embedding.row(t);
    }
    return resid;
}

void check_overrides(std::span<const Override> overrides, int start_layer) {
    for (const auto& ov : overrides) {
        if (ov.site.layer < start_layer) {
            throw ArgumentError(fmt::format("forward: override {} precedes start layer {}", ov.site.name(), start_layer));
        }
    }
}

} // namespace

ForwardResult forward(const ModelTensors& model, std::span<const TokenId> ids, const ForwardOptions& options) {
    check_ids(model.config, ids);
    check_overrides(options.overrides, options.start_layer);
    Matrix resid = initial_residual(model, ids, options.start_layer, options.start_residual);

    ForwardResult result;
    result.cache = ActivationCache(std::vector<TokenId>(ids.begin(), ids.end()));
    const std::vector<std::vector<Override>> variants{
        std::vector<Override>(options.overrides.begin(), options.overrides.end())};
    BatchRunner runner(model, ids, variants, options.trace, &result.cache);
    resid = runner.run(std::move(resid), options.start_layer);

    if (options.compute_logits) {
        result.logits = unembed(model, resid);
        runner.visit_single(HookSite::make(SiteKind::final_logits, model.config.n_layers - 1), result.logits);
    }
    result.final_residual = std::move(resid);
    return result;
}

std::vector<Matrix> forward_variants(const ModelTensors& model, std::span<const TokenId> ids,
                                     std::span<const std::vector<Override>> variants, int start_layer,
                                     const Matrix* start_residual) {
    check_ids(model.config, ids);
    if (variants.empty()) return {};
    for (const auto& v : variants) check_overrides(v, start_layer);
    const Matrix one = initial_residual(model, ids, start_layer, start_residual);
    const auto seq = one.rows();
    Matrix stacked(seq * static_cast<Eigen::Index>(variants.size()), one.cols());
    for (std::size_t b = 0; b < variants.size(); ++b) stacked.middleRows(static_cast<Eigen::Index>(b) * seq, seq) = one;

    const auto trace = TraceRequest::nothing();
    BatchRunner runner(model, ids, variants, trace, nullptr);
    const Matrix out = runner.run(std::move(stacked), start_layer);
    std::vector<Matrix> finals;
    finals.reserve(variants.size());
    for (std::size_t b = 0; b < variants.size(); ++b) finals.emplace_back(out.middleRows(static_cast<Eigen::Index>(b) * seq, seq));
    return finals;
}

} // namespace causalscope
