#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "elcbert/checkpoint.hpp"
#include "elcbert/data.hpp"
#include "elcbert/encoder.hpp"
#include "elcbert/error.hpp"
#include "elcbert/rng.hpp"
#include "elcbert/tensor.hpp"

namespace elcbert {

enum class OptimizerKind { kAdamW, kLamb };

struct TrainConfig {
    std::uint64_t steps = 2000;
    std::size_t batch_size = 32;
    std::size_t seq_len = 16;
    double mask_ratio = 0.15;
    double peak_lr = 3e-3;
    double final_lr = 3e-4;
    double warmup_ratio = 0.016;
    double weight_decay = 0.1;
    double grad_clip = 2.0;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::kAdamW;

    std::uint64_t warmup_steps() const {
        return static_cast<std::uint64_t>(std::llround(warmup_ratio * static_cast<double>(steps)));
    }

    void validate() const {
        if (batch_size == 0 || seq_len < 3) {
            throw ConfigError("train config: batch_size must be positive and seq_len >= 3");
        }
        if (!(mask_ratio > 0.0) || !(mask_ratio < 1.0)) {
            throw ConfigError("train config: mask_ratio must lie in (0, 1)");
        }
        if (!(peak_lr > 0.0) || final_lr < 0.0 || final_lr > peak_lr) {
            throw ConfigError("train config: need peak_lr > 0 and 0 <= final_lr <= peak_lr");
        }
        if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) {
            throw ConfigError("train config: warmup_ratio must lie in [0, 1)");
        }
        if (steps > 0 && warmup_steps() >= steps) {
            throw ConfigError("train config: warmup covers the whole run");
        }
        if (weight_decay < 0.0) {
            throw ConfigError("train config: weight_decay must be nonnegative");
        }
        if (!(grad_clip > 0.0)) {
            throw ConfigError("train config: grad_clip must be positive");
        }
    }
};

struct MaskedBatch {
    std::vector<std::int32_t> tokens;
    std::vector<std::int64_t> labels;  // original id at selected positions, -1 elsewhere
};

// BERT-style masking: each non-special position is selected independently
// with probability mask_ratio; selected positions become [MASK] 80% of the
// time, a random regular token 10%, and stay unchanged 10%.
inline MaskedBatch mask_tokens(std::vector<std::int32_t> tokens, double mask_ratio,
                               const std::vector<std::int32_t>& special_ids, Rng& rng,
                               std::size_t vocab_size) {
    if (!(mask_ratio > 0.0) || !(mask_ratio < 1.0)) {
        throw ConfigError("mask_tokens: mask_ratio must lie in (0, 1)");
    }
    const auto is_special = [&](std::int32_t id) {
        for (std::int32_t s : special_ids) {
            if (s == id) {
                return true;
            }
        }
        return false;
    };
    bool any_maskable = false;
    for (std::int32_t t : tokens) {
        any_maskable = any_maskable || !is_special(t);
    }
    if (!any_maskable) {
        throw NoMaskableTokens("mask_tokens: every position is a special token");
    }

    MaskedBatch out;
    out.labels.assign(tokens.size(), -1);
    const std::size_t regular = vocab_size > Vocab::kReserved ? vocab_size - Vocab::kReserved : 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (is_special(tokens[i])) {
            continue;
        }
        if (rng.next_double() >= mask_ratio) {
            continue;
        }
        out.labels[i] = tokens[i];
        const double r = rng.next_double();
        if (r < 0.8) {
            tokens[i] = Vocab::kMask;
        } else if (r < 0.9 && regular > 0) {
            tokens[i] = static_cast<std::int32_t>(Vocab::kReserved + rng.next_below(regular));
        }
        // else: left unchanged
    }
    out.tokens = std::move(tokens);
    return out;
}

// Mean cross-entropy over the labeled positions.
inline Tensor mlm_loss(const Tensor& logits, const std::vector<std::int64_t>& labels) {
    const std::size_t n = count_labeled(labels);
    if (n == 0) {
        throw NoLabeledPositions("mlm_loss: no labeled positions in batch");
    }
    return scale(cross_entropy_sum(logits, labels), 1.0 / static_cast<double>(n));
}

// Linear warmup to peak_lr, then cosine decay to final_lr at step == steps.
inline double lr_at(std::uint64_t step, const TrainConfig& cfg) {
    if (step > cfg.steps) {
        throw StepOutOfRange("lr_at: step " + std::to_string(step) + " exceeds " +
                             std::to_string(cfg.steps));
    }
    const std::uint64_t warmup = cfg.warmup_steps();
    if (step < warmup) {
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    if (cfg.steps == warmup) {
        return cfg.final_lr;
    }
    const double progress =
        static_cast<double>(step - warmup) / static_cast<double>(cfg.steps - warmup);
    return cfg.final_lr +
           (cfg.peak_lr - cfg.final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// Adam-family moments, one pair per parameter, aligned with the parameter
// list order.
struct OptimizerState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::uint64_t t = 0;  // completed update steps

    static OptimizerState init(const std::vector<std::pair<std::string, Tensor>>& params) {
        OptimizerState s;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const auto& [name, p] : params) {
            s.m.push_back(Tensor::zeros(p.shape()));
            s.v.push_back(Tensor::zeros(p.shape()));
        }
        return s;
    }
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.98;
inline constexpr double kAdamEps = 1e-6;

// Weight decay targets matrices only; biases, norm gains/biases, and the raw
// mixing weights are exempt. Decaying the mixing logits would pull every
// alpha row toward uniform.
inline bool decays(const std::string& name, const Tensor& p) {
    return p.rank() >= 2 && name.rfind("mix.", 0) != 0;
}

// One clipped AdamW/LAMB update over all parameters. Gradients are read from
// the tensors' grad fields and must be finite; the whole gradient is scaled
// so its global norm does not exceed grad_clip. Returns the pre-clip norm.
inline double optimizer_step(OptimizerState& opt,
                             const std::vector<std::pair<std::string, Tensor>>& params, double lr,
                             const TrainConfig& cfg) {
    double sq_norm = 0.0;
    for (const auto& [name, p] : params) {
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double g = p.grad_at(i);
            if (!std::isfinite(g)) {
                throw NonFiniteGradient("optimizer_step: non-finite gradient in '" + name + "'");
            }
            sq_norm += g * g;
        }
    }
    const double norm = std::sqrt(sq_norm);
    const double clip_scale = norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;

    opt.t += 1;
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(opt.t));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(opt.t));

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto& [name, p] = params[pi];
        const double wd = decays(name, p) ? cfg.weight_decay : 0.0;
        auto pdata = p.data();
        auto mdata = opt.m[pi].data();
        auto vdata = opt.v[pi].data();
        double p_sq = 0.0;
        double u_sq = 0.0;
        std::vector<double> update(p.numel());
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double g = p.grad_at(i) * clip_scale;
            mdata[i] = kAdamBeta1 * mdata[i] + (1.0 - kAdamBeta1) * g;
            vdata[i] = kAdamBeta2 * vdata[i] + (1.0 - kAdamBeta2) * g * g;
            const double mhat = mdata[i] / bc1;
            const double vhat = vdata[i] / bc2;
            update[i] = mhat / (std::sqrt(vhat) + kAdamEps) + wd * pdata[i];
            p_sq += pdata[i] * pdata[i];
            u_sq += update[i] * update[i];
        }
        double trust = 1.0;
        if (cfg.optimizer == OptimizerKind::kLamb && p_sq > 0.0 && u_sq > 0.0) {
            trust = std::sqrt(p_sq) / std::sqrt(u_sq);
        }
        for (std::size_t i = 0; i < p.numel(); ++i) {
            pdata[i] -= lr * trust * update[i];
            if (!std::isfinite(pdata[i])) {
                throw NonFiniteValue("optimizer_step: parameter '" + name +
                                     "' became non-finite");
            }
        }
    }
    return norm;
}

struct StepRecord {
    std::uint64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;  // pre-clip global norm
};

struct TrainCallbacks {
    std::function<void(const StepRecord&)> on_step;
    std::uint64_t checkpoint_every = 0;  // 0 = final checkpoint only
    std::function<void(const Checkpoint&)> on_checkpoint;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<StepRecord> trace;
};

inline Checkpoint make_checkpoint(const EncoderState& state, const OptimizerState& opt,
                                  const std::vector<std::string>& vocab_tokens,
                                  std::uint64_t step, std::uint64_t seed) {
    Checkpoint ckpt;
    ckpt.config = state.config;
    ckpt.step = step;
    ckpt.seed = seed;
    ckpt.vocab_tokens = vocab_tokens;
    const auto params = state.named_parameters();
    for (const auto& [name, p] : params) {
        ckpt.tensors.emplace_back(name, p.detach());
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        ckpt.tensors.emplace_back("optim.m." + params[i].first, opt.m[i].detach());
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        ckpt.tensors.emplace_back("optim.v." + params[i].first, opt.v[i].detach());
    }
    return ckpt;
}

// Masked-language-model pretraining. Every random draw is a pure function of
// (seed, step), so a run can be interrupted at any checkpoint and resumed
// bit-exactly.
inline TrainResult train(EncoderState& state, const Corpus& corpus, const Vocab& vocab,
                         const TrainConfig& cfg, const TrainCallbacks& callbacks = {},
                         const Checkpoint* resume = nullptr) {
    cfg.validate();
    const auto params = state.named_parameters();
    OptimizerState opt = OptimizerState::init(params);

    std::uint64_t start_step = 0;
    if (resume != nullptr) {
        if (!(resume->config == state.config)) {
            ensure_wiring(*resume, state.config.wiring);
            throw ConfigError("resume: checkpoint encoder config does not match");
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& [name, p] = params[i];
            const Tensor* saved = resume->find(name);
            const Tensor* m = resume->find("optim.m." + name);
            const Tensor* v = resume->find("optim.v." + name);
            if (saved == nullptr || m == nullptr || v == nullptr) {
                throw CorruptCheckpoint("resume: checkpoint is missing tensor '" + name + "'");
            }
            std::copy(saved->data().begin(), saved->data().end(), p.data().begin());
            std::copy(m->data().begin(), m->data().end(), opt.m[i].data().begin());
            std::copy(v->data().begin(), v->data().end(), opt.v[i].data().begin());
        }
        start_step = resume->step;
        opt.t = resume->step;
    }

    // materialized once per epoch; rebuilt deterministically from (seed, epoch)
    std::uint64_t current_epoch = UINT64_MAX;
    std::unique_ptr<BatchStream> stream;
    const auto stream_for = [&](std::uint64_t epoch) -> BatchStream& {
        if (epoch != current_epoch) {
            stream = std::make_unique<BatchStream>(corpus, cfg.seq_len, cfg.batch_size, cfg.seed,
                                                   epoch);
            current_epoch = epoch;
        }
        return *stream;
    };
    const std::size_t batches_per_epoch = stream_for(0).size();
    if (batches_per_epoch == 0) {
        throw EmptyCorpus("train: corpus yields no full batch");
    }

    const std::vector<std::int32_t> specials = {Vocab::kPad, Vocab::kUnk, Vocab::kMask,
                                                Vocab::kCls, Vocab::kSep};
    TrainResult result;
    result.trace.reserve(cfg.steps - start_step);

    for (std::uint64_t step = start_step; step < cfg.steps; ++step) {
        const std::uint64_t epoch = step / batches_per_epoch;
        const std::size_t index = static_cast<std::size_t>(step % batches_per_epoch);
        const Batch batch = stream_for(epoch).batch(index);

        // Small batches can select zero positions by chance; re-mask with the
        // next sub-stream so mlm_loss always sees at least one label.
        MaskedBatch masked;
        for (std::uint64_t attempt = 0;; ++attempt) {
            Rng mask_rng = Rng(cfg.seed).split("mask").split(step).split(attempt);
            masked = mask_tokens(batch.tokens, cfg.mask_ratio, specials, mask_rng, vocab.size());
            if (count_labeled(masked.labels) > 0) {
                break;
            }
            if (attempt >= 1000) {
                throw NoLabeledPositions("train: masking selected nothing in 1000 attempts");
            }
        }

        Rng dropout_rng = Rng(cfg.seed).split("dropout").split(step);
        Rng* drop = state.config.dropout > 0.0 ? &dropout_rng : nullptr;

        Tape tape;
        double loss_value = 0.0;
        {
            Tape::Scope scope(tape);
            const auto outputs =
                encode(state, masked.tokens, batch.keep, batch.batch_size, batch.seq_len, drop);
            const Tensor loss = mlm_loss(lm_logits(state, outputs), masked.labels);
            loss_value = loss.item();
            if (!std::isfinite(loss_value)) {
                throw NonFiniteValue("train: loss diverged at step " + std::to_string(step));
            }
            tape.backward(loss);
        }

        const double lr = lr_at(step + 1, cfg);
        const double grad_norm = optimizer_step(opt, params, lr, cfg);
        for (const auto& [name, p] : params) {
            p.zero_grad();
        }

        const StepRecord record = {step, lr, loss_value, grad_norm};
        result.trace.push_back(record);
        if (callbacks.on_step) {
            callbacks.on_step(record);
        }
        if (callbacks.checkpoint_every > 0 && callbacks.on_checkpoint &&
            (step + 1) % callbacks.checkpoint_every == 0 && step + 1 < cfg.steps) {
            callbacks.on_checkpoint(
                make_checkpoint(state, opt, vocab.tokens, step + 1, cfg.seed));
        }
    }

    result.checkpoint = make_checkpoint(state, opt, vocab.tokens, cfg.steps, cfg.seed);
    return result;
}

inline void write_trace_csv(std::ostream& os, const std::vector<StepRecord>& trace) {
    os << "step,lr,loss,grad_norm\n";
    char buf[96];
    for (const StepRecord& r : trace) {
        std::snprintf(buf, sizeof(buf), "%llu,%.17g,%.17g,%.17g\n",
                      static_cast<unsigned long long>(r.step), r.lr, r.loss, r.grad_norm);
        os << buf;
    }
}

}  // namespace elcbert
