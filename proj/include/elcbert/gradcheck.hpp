#pragma once

#include <cstdint>
#include <vector>

#include "elcbert/encoder.hpp"

namespace elcbert {

struct GradcheckResult {
    double max_rel_error = 0.0;
    std::size_t entries = 0;
};

// Builds the 2-layer desk model (hidden 8, heads 2, vocab 11, length 5) for
// the given wiring and compares the analytic MLM-loss gradient of every
// parameter entry against central finite differences at step h.
//
// sever_one_parameter forces one parameter's analytic gradient to zero while
// leaving the forward pass untouched; the check must then report an error
// near 1, which is how the detector itself is tested.
inline GradcheckResult model_gradcheck(const WiringMode& wiring, std::uint64_t seed,
                                       bool sever_one_parameter = false, double h = 1e-4) {
    EncoderConfig cfg;
    cfg.num_layers = 2;
    cfg.hidden_size = 8;
    cfg.num_heads = 2;
    cfg.ff_size = 16;
    cfg.vocab_size = 11;
    cfg.max_seq_len = 5;
    cfg.wiring = wiring;
    cfg.dropout = 0.0;

    EncoderState state = EncoderState::init(cfg, seed);

    // Re-draw every parameter at O(1) scale. The training-time init keeps
    // activations tiny, which parks layer norm in its high-curvature region
    // and inflates the truncation error of central differences; the check
    // needs a generic well-conditioned point, not the training start.
    Rng point = Rng(seed).split("gradcheck-point");
    for (const auto& [name, tensor] : state.named_parameters()) {
        const bool is_gain = name.ends_with("norm_gain");
        for (double& v : tensor.data()) {
            v = is_gain ? 0.7 + 0.6 * point.next_double() : -0.6 + 1.2 * point.next_double();
        }
    }

    if (sever_one_parameter) {
        state.head.b.set_requires_grad(false);
    }

    Rng rng = Rng(seed).split("gradcheck-data");
    const std::size_t len = 5;
    std::vector<std::int32_t> tokens(len);
    for (std::int32_t& t : tokens) {
        t = static_cast<std::int32_t>(rng.next_below(cfg.vocab_size));
    }
    std::vector<std::int64_t> labels(len, -1);
    labels[1] = static_cast<std::int64_t>(rng.next_below(cfg.vocab_size));
    labels[3] = static_cast<std::int64_t>(rng.next_below(cfg.vocab_size));
    const std::vector<std::uint8_t> keep(len, 1);
    const double inv_count = 1.0 / static_cast<double>(count_labeled(labels));

    const auto build_loss = [&] {
        const std::vector<Tensor> outputs = encode(state, tokens, keep, 1, len);
        const Tensor logits = lm_logits(state, outputs);
        return scale(cross_entropy_sum(logits, labels), inv_count);
    };

    GradcheckResult result;
    std::vector<Tensor> params;
    for (const auto& [name, tensor] : state.named_parameters()) {
        params.push_back(tensor);
        result.entries += tensor.numel();
    }
    result.max_rel_error = finite_diff_check(build_loss, params, h);
    return result;
}

}  // namespace elcbert
