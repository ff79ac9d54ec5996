#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "elcbert/error.hpp"
#include "elcbert/mixing.hpp"
#include "elcbert/rng.hpp"
#include "elcbert/tensor.hpp"

namespace elcbert {

struct EncoderConfig {
    std::size_t num_layers = 4;
    std::size_t hidden_size = 64;
    std::size_t num_heads = 4;
    std::size_t ff_size = 256;
    std::size_t vocab_size = 128;
    std::size_t max_seq_len = 16;
    WiringMode wiring;
    double dropout = 0.0;
    double layer_norm_eps = 1e-7;
    double mix_eps = 1e-7;  // divisor eps for the strict-normalization variant

    void validate() const {
        if (hidden_size == 0 || num_heads == 0 || ff_size == 0 || vocab_size == 0 ||
            max_seq_len == 0) {
            throw ConfigError("encoder config: all extents must be positive");
        }
        if (hidden_size % num_heads != 0) {
            throw ConfigError("encoder config: hidden_size must be divisible by num_heads");
        }
        if (dropout < 0.0 || dropout >= 1.0) {
            throw ConfigError("encoder config: dropout must be in [0, 1)");
        }
        if (!(layer_norm_eps > 0.0) || !(mix_eps > 0.0)) {
            throw ConfigError("encoder config: eps values must be positive");
        }
        wiring.validate();
    }

    bool operator==(const EncoderConfig&) const = default;
};

// The key projection carries no bias: a bias on keys shifts every softmax
// row by a constant, so it cannot affect the attention output.
struct AttentionParams {
    Tensor norm_gain, norm_bias;
    Tensor wq, bq, wk, wv, bv, wo, bo;
};

struct MlpParams {
    Tensor norm_gain, norm_bias;
    Tensor w1, b1, w2, b2;
};

struct LayerParams {
    AttentionParams att;
    MlpParams mlp;
};

struct HeadParams {
    Tensor norm_gain, norm_bias;
    Tensor w, b;
};

// All learnable state of the encoder. Forward passes over a frozen state are
// safe from many threads; training mutates it from exactly one.
struct EncoderState {
    EncoderConfig config;
    Tensor token_embedding;     // vocab x hidden
    Tensor position_embedding;  // max_seq x hidden
    Tensor embed_norm_gain, embed_norm_bias;
    std::vector<LayerParams> layers;
    HeadParams head;
    MixWeights mix;  // engaged when wiring is elc

    static EncoderState init(const EncoderConfig& config, std::uint64_t seed) {
        config.validate();
        EncoderState s;
        s.config = config;
        Rng rng = Rng(seed).split("init");
        const double std = 0.02;
        const std::size_t d = config.hidden_size;

        const auto weight = [&](std::size_t r, std::size_t c) {
            return Tensor::randn({r, c}, rng, std).set_requires_grad(true);
        };
        const auto zeros = [&](std::size_t n) {
            return Tensor::zeros({n}).set_requires_grad(true);
        };
        const auto ones = [&](std::size_t n) {
            return Tensor::full({n}, 1.0).set_requires_grad(true);
        };

        s.token_embedding = weight(config.vocab_size, d);
        s.position_embedding = weight(config.max_seq_len, d);
        s.embed_norm_gain = ones(d);
        s.embed_norm_bias = zeros(d);
        for (std::size_t n = 0; n < config.num_layers; ++n) {
            LayerParams layer;
            layer.att.norm_gain = ones(d);
            layer.att.norm_bias = zeros(d);
            layer.att.wq = weight(d, d);
            layer.att.bq = zeros(d);
            layer.att.wk = weight(d, d);
            layer.att.wv = weight(d, d);
            layer.att.bv = zeros(d);
            layer.att.wo = weight(d, d);
            layer.att.bo = zeros(d);
            layer.mlp.norm_gain = ones(d);
            layer.mlp.norm_bias = zeros(d);
            layer.mlp.w1 = weight(d, config.ff_size);
            layer.mlp.b1 = zeros(config.ff_size);
            layer.mlp.w2 = weight(config.ff_size, d);
            layer.mlp.b2 = zeros(d);
            s.layers.push_back(std::move(layer));
        }
        s.head.norm_gain = ones(d);
        s.head.norm_bias = zeros(d);
        s.head.w = weight(d, config.vocab_size);
        s.head.b = zeros(config.vocab_size);
        if (config.wiring.is_elc()) {
            s.mix = MixWeights::init(config.num_layers, config.wiring.init,
                                     config.wiring.weighted_output);
        }
        return s;
    }

    std::vector<std::pair<std::string, Tensor>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor>> named;
        named.emplace_back("embedding.token", token_embedding);
        named.emplace_back("embedding.position", position_embedding);
        named.emplace_back("embedding.norm_gain", embed_norm_gain);
        named.emplace_back("embedding.norm_bias", embed_norm_bias);
        for (std::size_t n = 0; n < layers.size(); ++n) {
            const std::string p = "layer" + std::to_string(n + 1);
            const LayerParams& l = layers[n];
            named.emplace_back(p + ".att.norm_gain", l.att.norm_gain);
            named.emplace_back(p + ".att.norm_bias", l.att.norm_bias);
            named.emplace_back(p + ".att.wq", l.att.wq);
            named.emplace_back(p + ".att.bq", l.att.bq);
            named.emplace_back(p + ".att.wk", l.att.wk);
            named.emplace_back(p + ".att.wv", l.att.wv);
            named.emplace_back(p + ".att.bv", l.att.bv);
            named.emplace_back(p + ".att.wo", l.att.wo);
            named.emplace_back(p + ".att.bo", l.att.bo);
            named.emplace_back(p + ".mlp.norm_gain", l.mlp.norm_gain);
            named.emplace_back(p + ".mlp.norm_bias", l.mlp.norm_bias);
            named.emplace_back(p + ".mlp.w1", l.mlp.w1);
            named.emplace_back(p + ".mlp.b1", l.mlp.b1);
            named.emplace_back(p + ".mlp.w2", l.mlp.w2);
            named.emplace_back(p + ".mlp.b2", l.mlp.b2);
        }
        named.emplace_back("head.norm_gain", head.norm_gain);
        named.emplace_back("head.norm_bias", head.norm_bias);
        named.emplace_back("head.w", head.w);
        named.emplace_back("head.b", head.b);
        for (std::size_t i = 0; i < mix.raw.size(); ++i) {
            named.emplace_back("mix.dest" + std::to_string(i + 1), mix.raw[i]);
        }
        return named;
    }
};

namespace detail {

inline Tensor dropout(const Tensor& x, double p, Rng* rng) {
    if (p <= 0.0 || rng == nullptr) {
        return x;
    }
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.numel());
    for (double& m : mask) {
        m = rng->next_double() < p ? 0.0 : keep_scale;
    }
    return mul_constant(x, std::move(mask));
}

}  // namespace detail

// Token embedding + learned absolute position embedding, then layer norm.
// tokens holds batch * seq_len indices in row-major order.
inline Tensor embed(const EncoderState& state, const std::vector<std::int32_t>& tokens,
                    std::size_t batch, std::size_t seq_len, Rng* dropout_rng = nullptr) {
    const EncoderConfig& cfg = state.config;
    if (tokens.size() != batch * seq_len) {
        throw ShapeMismatch("embed: token count does not match batch * seq_len");
    }
    if (seq_len > cfg.max_seq_len) {
        throw SequenceTooLong("embed: sequence length " + std::to_string(seq_len) +
                              " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    for (std::int32_t id : tokens) {
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
            throw IndexOutOfVocab("embed: token id " + std::to_string(id) +
                                  " outside vocab of size " + std::to_string(cfg.vocab_size));
        }
    }
    std::vector<std::int32_t> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) {
        positions[i] = static_cast<std::int32_t>(i % (seq_len == 0 ? 1 : seq_len));
    }
    const Tensor tok = gather_rows(state.token_embedding, tokens);
    const Tensor pos = gather_rows(state.position_embedding, positions);
    const Tensor normed = layer_norm(add(tok, pos), state.embed_norm_gain, state.embed_norm_bias,
                                     cfg.layer_norm_eps);
    return detail::dropout(normed, cfg.dropout, dropout_rng);
}

inline Tensor embed(const EncoderState& state, const std::vector<std::int32_t>& tokens) {
    return embed(state, tokens, 1, tokens.size());
}

// Pre-norm multi-head bidirectional self-attention with output projection.
// keep marks real tokens; masked positions neither attend nor are attended
// to, and their output rows are zero.
inline Tensor attention(const AttentionParams& params, const Tensor& h,
                        const std::vector<std::uint8_t>& keep, std::size_t batch,
                        std::size_t seq_len, const EncoderConfig& cfg,
                        Rng* dropout_rng = nullptr) {
    const std::size_t d = cfg.hidden_size;
    const std::size_t heads = cfg.num_heads;
    const std::size_t dh = d / heads;
    if (h.rank() != 2 || h.cols() != d || h.rows() != batch * seq_len) {
        throw ShapeMismatch("attention: input must be (batch*seq_len x hidden), got " +
                            shape_str(h.shape()));
    }
    if (!keep.empty() && keep.size() != batch * seq_len) {
        throw ShapeMismatch("attention: mask length must be batch * seq_len");
    }
    const bool all_kept = [&] {
        for (std::uint8_t k : keep) {
            if (!k) {
                return false;
            }
        }
        return true;
    }();

    const Tensor u = layer_norm(h, params.norm_gain, params.norm_bias, cfg.layer_norm_eps);
    const Tensor q = add_rowvec(matmul(u, params.wq), params.bq);
    const Tensor k = matmul(u, params.wk);
    const Tensor v = add_rowvec(matmul(u, params.wv), params.bv);

    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> rows;
    rows.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        const Tensor qb = slice_rows(q, b * seq_len, seq_len);
        const Tensor kb = slice_rows(k, b * seq_len, seq_len);
        const Tensor vb = slice_rows(v, b * seq_len, seq_len);
        std::vector<double> mask_add;
        if (!all_kept) {
            mask_add.assign(seq_len * seq_len, 0.0);
            for (std::size_t j = 0; j < seq_len; ++j) {
                if (!keep[b * seq_len + j]) {
                    for (std::size_t i = 0; i < seq_len; ++i) {
                        mask_add[i * seq_len + j] = -1e30;
                    }
                }
            }
        }
        std::vector<Tensor> ctx;
        ctx.reserve(heads);
        for (std::size_t hi = 0; hi < heads; ++hi) {
            const Tensor qh = slice_cols(qb, hi * dh, dh);
            const Tensor kh = slice_cols(kb, hi * dh, dh);
            const Tensor vh = slice_cols(vb, hi * dh, dh);
            Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt_dh);
            if (!all_kept) {
                scores = add_constant(scores, mask_add);
            }
            Tensor probs = softmax_rows(scores);
            probs = detail::dropout(probs, cfg.dropout, dropout_rng);
            ctx.push_back(matmul(probs, vh));
        }
        rows.push_back(heads == 1 ? ctx[0] : concat_cols(ctx));
    }
    Tensor context = batch == 1 ? rows[0] : concat_rows(rows);
    Tensor out = add_rowvec(matmul(context, params.wo), params.bo);
    if (!all_kept) {
        std::vector<double> row_mask(out.numel());
        for (std::size_t i = 0; i < batch * seq_len; ++i) {
            const double kept = keep[i] ? 1.0 : 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                row_mask[i * d + j] = kept;
            }
        }
        out = mul_constant(out, std::move(row_mask));
    }
    return detail::dropout(out, cfg.dropout, dropout_rng);
}

// Single-sequence convenience overload.
inline Tensor attention(const AttentionParams& params, const Tensor& h,
                        const std::vector<std::uint8_t>& keep, const EncoderConfig& cfg) {
    return attention(params, h, keep, 1, h.rows(), cfg);
}

// Pre-norm MLP: up-projection, GELU, down-projection.
inline Tensor mlp_forward(const MlpParams& params, const Tensor& u, const EncoderConfig& cfg,
                          Rng* dropout_rng = nullptr) {
    const Tensor t = layer_norm(u, params.norm_gain, params.norm_bias, cfg.layer_norm_eps);
    const Tensor z = gelu(add_rowvec(matmul(t, params.w1), params.b1));
    const Tensor out = add_rowvec(matmul(z, params.w2), params.b2);
    return detail::dropout(out, cfg.dropout, dropout_rng);
}

// One encoder layer. With mlp_residual the MLP reads h + att(h); without it
// the MLP reads att(h) alone.
inline Tensor layer_forward(const LayerParams& params, const Tensor& h_in,
                            const std::vector<std::uint8_t>& keep, std::size_t batch,
                            std::size_t seq_len, const EncoderConfig& cfg, bool mlp_residual,
                            Rng* dropout_rng = nullptr) {
    const Tensor att = attention(params.att, h_in, keep, batch, seq_len, cfg, dropout_rng);
    const Tensor mlp_in = mlp_residual ? add(h_in, att) : att;
    const Tensor mlp = mlp_forward(params.mlp, mlp_in, cfg, dropout_rng);
    return add(att, mlp);
}

// Runs the full stack and keeps every layer output h0..hN; the weighted
// output head and the layer report both need all of them.
inline std::vector<Tensor> encode(const EncoderState& state,
                                  const std::vector<std::int32_t>& tokens,
                                  const std::vector<std::uint8_t>& keep, std::size_t batch,
                                  std::size_t seq_len, Rng* dropout_rng = nullptr) {
    const EncoderConfig& cfg = state.config;
    std::vector<Tensor> outputs;
    outputs.reserve(cfg.num_layers + 1);
    outputs.push_back(embed(state, tokens, batch, seq_len, dropout_rng));
    for (std::size_t n = 1; n <= cfg.num_layers; ++n) {
        Tensor h_in;
        if (cfg.wiring.is_elc()) {
            h_in = combine(outputs, state.mix.alpha(n), cfg.wiring.normalize_outputs, cfg.mix_eps);
        } else {
            h_in = residual_combine(outputs);
        }
        outputs.push_back(layer_forward(state.layers[n - 1], h_in, keep, batch, seq_len, cfg,
                                        cfg.wiring.effective_mlp_residual(), dropout_rng));
    }
    return outputs;
}

inline std::vector<Tensor> encode(const EncoderState& state,
                                  const std::vector<std::int32_t>& tokens,
                                  const std::vector<std::uint8_t>& keep = {}) {
    return encode(state, tokens, keep, 1, tokens.size());
}

// Final layer norm + vocabulary projection.
inline Tensor lm_head_apply(const EncoderState& state, const Tensor& input) {
    const Tensor t =
        layer_norm(input, state.head.norm_gain, state.head.norm_bias, state.config.layer_norm_eps);
    return add_rowvec(matmul(t, state.head.w), state.head.b);
}

// Logits over the vocabulary. Normally the head reads the last layer output;
// the weighted-output variant feeds it a learned convex combination of all
// layer outputs instead.
inline Tensor lm_logits(const EncoderState& state, const std::vector<Tensor>& all_outputs) {
    const EncoderConfig& cfg = state.config;
    if (all_outputs.size() != cfg.num_layers + 1) {
        throw ShapeMismatch("lm_logits: expected " + std::to_string(cfg.num_layers + 1) +
                            " layer outputs, got " + std::to_string(all_outputs.size()));
    }
    Tensor input;
    if (cfg.wiring.weighted_output) {
        if (!state.mix.has_output_head || state.mix.raw.size() != cfg.num_layers + 1) {
            throw MissingHeadWeights("lm_logits: weighted output requires mix weights for "
                                     "destination N+1");
        }
        input = convex_mix(all_outputs, state.mix.alpha(cfg.num_layers + 1));
    } else {
        input = all_outputs.back();
    }
    return lm_head_apply(state, input);
}

}  // namespace elcbert
