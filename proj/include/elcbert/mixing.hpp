#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "elcbert/error.hpp"
#include "elcbert/tensor.hpp"

namespace elcbert {

enum class WiringScheme { kStandardResidual, kElc };
enum class InitScheme { kBiased, kZero };

// How layer inputs are wired together. The four ELC variants plus the plain
// residual baseline map onto the presets below.
struct WiringMode {
    WiringScheme scheme = WiringScheme::kStandardResidual;
    InitScheme init = InitScheme::kBiased;
    bool mlp_residual = false;       // restore the h + att(h) input to the MLP
    bool normalize_outputs = false;  // unit-normalize sources entering the combination
    bool weighted_output = false;    // LM head consumes a weighted sum of all layers

    bool is_elc() const { return scheme == WiringScheme::kElc; }

    // The baseline layer always keeps its MLP residual; ELC removes it unless
    // the variant restores it.
    bool effective_mlp_residual() const { return !is_elc() || mlp_residual; }

    void validate() const {
        if (scheme == WiringScheme::kStandardResidual &&
            (init != InitScheme::kBiased || mlp_residual || normalize_outputs || weighted_output)) {
            throw ConfigError("wiring: standard-residual forbids the ELC-only flags");
        }
    }

    static WiringMode preset(const std::string& name) {
        if (name == "bert-baseline") {
            return {};
        }
        if (name == "elc") {
            return {WiringScheme::kElc, InitScheme::kBiased, false, false, false};
        }
        if (name == "elc-zero") {
            return {WiringScheme::kElc, InitScheme::kZero, true, false, false};
        }
        if (name == "elc-norm") {
            return {WiringScheme::kElc, InitScheme::kZero, true, true, false};
        }
        if (name == "elc-weighted") {
            return {WiringScheme::kElc, InitScheme::kZero, true, false, true};
        }
        throw ConfigError("wiring: unknown preset '" + name + "'");
    }

    static const std::vector<std::string>& preset_names() {
        static const std::vector<std::string> kNames = {"bert-baseline", "elc", "elc-zero",
                                                        "elc-norm", "elc-weighted"};
        return kNames;
    }

    bool operator==(const WiringMode&) const = default;
};

// Raw weight vector for destination layer n over sources 0..n-1. Biased puts
// a single 1 on the immediately preceding layer; zero leaves a uniform
// softmax.
inline std::vector<double> init_mix_weights(std::size_t n, InitScheme scheme) {
    if (n < 1) {
        throw InvalidLayerIndex("init_mix_weights: destination layer index must be >= 1");
    }
    std::vector<double> raw(n, 0.0);
    if (scheme == InitScheme::kBiased) {
        raw[n - 1] = 1.0;
    }
    return raw;
}

// Softmax of a raw weight vector; the output sums to 1.
inline Tensor mix_alphas(const Tensor& raw) {
    if (raw.numel() == 0) {
        throw EmptyVector("mix_alphas: raw weight vector is empty");
    }
    return softmax_rows(raw);
}

// Convex combination of previous layer outputs, optionally unit-normalizing
// each source per token before it enters the sum. Differentiable through both
// alpha and the outputs.
inline Tensor combine(const std::vector<Tensor>& prev_outputs, const Tensor& alpha, bool normalize,
                      double eps) {
    if (prev_outputs.empty()) {
        throw EmptyVector("combine: no previous outputs");
    }
    if (!normalize) {
        return convex_mix(prev_outputs, alpha);
    }
    std::vector<Tensor> normalized;
    normalized.reserve(prev_outputs.size());
    for (const Tensor& h : prev_outputs) {
        normalized.push_back(unit_normalize_rows(h, eps));
    }
    return convex_mix(normalized, alpha);
}

// Unweighted sum of all previous outputs: the standard residual wiring and
// the oracle the ELC path is compared against. Accumulates in index order,
// matching convex_mix.
inline Tensor residual_combine(const std::vector<Tensor>& prev_outputs) {
    if (prev_outputs.empty()) {
        throw EmptyVector("residual_combine: no previous outputs");
    }
    const Shape& shape = prev_outputs[0].shape();
    std::vector<detail::NodePtr> inputs;
    inputs.reserve(prev_outputs.size());
    for (const Tensor& h : prev_outputs) {
        if (h.shape() != shape) {
            throw ShapeMismatch("residual_combine: " + shape_str(h.shape()) + " vs " +
                                shape_str(shape));
        }
        inputs.push_back(h.node());
    }
    const std::size_t n = shape_numel(shape);
    std::vector<double> out(n, 0.0);
    for (const detail::NodePtr& in : inputs) {
        for (std::size_t j = 0; j < n; ++j) {
            out[j] += in->value[j];
        }
    }
    auto captured = inputs;
    return detail::make_op(shape, std::move(out), std::move(inputs), [captured, n](detail::Node& o) {
        for (const detail::NodePtr& in : captured) {
            if (in->requires_grad) {
                double* dh = in->grad_data();
                for (std::size_t j = 0; j < n; ++j) {
                    dh[j] += o.grad[j];
                }
            }
        }
    });
}

// Per destination layer n in 1..N (plus destination N+1 when the LM head is
// weighted), the raw learnable weights over sources 0..n-1. Layer 0 is the
// embedding output.
struct MixWeights {
    std::size_t num_layers = 0;
    bool has_output_head = false;
    std::vector<Tensor> raw;

    static MixWeights init(std::size_t num_layers, InitScheme scheme, bool weighted_output) {
        MixWeights mw;
        mw.num_layers = num_layers;
        mw.has_output_head = weighted_output;
        for (std::size_t n = 1; n <= num_layers; ++n) {
            mw.raw.push_back(
                Tensor::from({n}, init_mix_weights(n, scheme)).set_requires_grad(true));
        }
        if (weighted_output) {
            // The head row is always zero-initialized: it weights sources
            // 0..N uniformly at the start.
            mw.raw.push_back(Tensor::zeros({num_layers + 1}).set_requires_grad(true));
        }
        return mw;
    }

    const Tensor& raw_for(std::size_t dest) const {
        if (dest < 1 || dest > raw.size()) {
            throw InvalidLayerIndex("mix weights: no destination " + std::to_string(dest));
        }
        return raw[dest - 1];
    }

    Tensor alpha(std::size_t dest) const { return mix_alphas(raw_for(dest)); }

    // Detached alpha values, one row per destination (1..N, then N+1 when the
    // weighted head is present).
    std::vector<std::vector<double>> alpha_matrix() const {
        std::vector<std::vector<double>> rows;
        rows.reserve(raw.size());
        for (const Tensor& r : raw) {
            const Tensor a = mix_alphas(r.detach());
            rows.emplace_back(a.data().begin(), a.data().end());
        }
        return rows;
    }
};

// Multiplies row k by k so learned weights compare against the implicit unit
// weights of a plain residual stack; row k then sums to k.
inline std::vector<std::vector<double>> rescale_for_display(
    const std::vector<std::vector<double>>& alpha_rows) {
    std::vector<std::vector<double>> out;
    out.reserve(alpha_rows.size());
    for (std::size_t i = 0; i < alpha_rows.size(); ++i) {
        const std::vector<double>& row = alpha_rows[i];
        const double k = static_cast<double>(i + 1);
        if (row.size() != i + 1) {
            throw LengthMismatch("rescale_for_display: row " + std::to_string(i + 1) + " has " +
                                 std::to_string(row.size()) + " entries");
        }
        double total = 0.0;
        for (double v : row) {
            total += v;
        }
        if (std::abs(total - 1.0) > 1e-6) {
            throw RowNotNormalized("rescale_for_display: row " + std::to_string(i + 1) +
                                   " sums to " + std::to_string(total));
        }
        std::vector<double> scaled(row.size());
        for (std::size_t j = 0; j < row.size(); ++j) {
            scaled[j] = k * row[j];
        }
        out.push_back(std::move(scaled));
    }
    return out;
}

// CSV export: one line per (destination, source) pair.
inline void write_alpha_csv(std::ostream& os, const std::vector<std::vector<double>>& alpha_rows) {
    const auto rescaled = rescale_for_display(alpha_rows);
    os << "dest_layer,src_layer,alpha,rescaled\n";
    char buf[64];
    for (std::size_t i = 0; i < alpha_rows.size(); ++i) {
        for (std::size_t j = 0; j < alpha_rows[i].size(); ++j) {
            os << (i + 1) << ',' << j << ',';
            std::snprintf(buf, sizeof(buf), "%.17g", alpha_rows[i][j]);
            os << buf << ',';
            std::snprintf(buf, sizeof(buf), "%.17g", rescaled[i][j]);
            os << buf << '\n';
        }
    }
}

// Grayscale heatmap of the rescaled matrix (PGM P2, maxval 255). Rows are
// destination layers in order; columns are sources. Cells above the diagonal
// do not exist and render as 0.
inline void write_alpha_pgm(std::ostream& os, const std::vector<std::vector<double>>& rescaled) {
    std::size_t width = 0;
    double vmax = 0.0;
    for (const auto& row : rescaled) {
        width = std::max(width, row.size());
        for (double v : row) {
            vmax = std::max(vmax, v);
        }
    }
    os << "P2\n" << width << ' ' << rescaled.size() << "\n255\n";
    for (const auto& row : rescaled) {
        for (std::size_t j = 0; j < width; ++j) {
            double v = j < row.size() ? row[j] : 0.0;
            v = std::min(std::max(v, 0.0), vmax);
            const int pixel = vmax > 0.0 ? static_cast<int>(std::lround(255.0 * v / vmax)) : 0;
            os << pixel << (j + 1 < width ? ' ' : '\n');
        }
    }
}

}  // namespace elcbert
