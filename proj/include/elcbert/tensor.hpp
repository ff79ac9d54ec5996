#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "elcbert/error.hpp"
#include "elcbert/rng.hpp"

namespace elcbert {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) {
        n *= e;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) {
        os << (i ? "x" : "") << s[i];
    }
    os << ')';
    return os.str();
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One value in the computation graph. Leaves (parameters, constants) have no
// inputs; op outputs carry the closure that routes their gradient backwards.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<NodePtr> inputs;
    std::function<void(Node&)> backprop;
    std::uint64_t tape_id = 0;  // 0 = not recorded
    std::size_t tape_index = 0;

    bool leaf() const { return inputs.empty(); }

    double* grad_data() {
        if (grad.empty()) {
            grad.assign(value.size(), 0.0);
        }
        return grad.data();
    }
};

}  // namespace detail

// Value-semantics handle to a graph node. Copies share the node.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape) { return from(std::move(shape), {}); }

    static Tensor full(Shape shape, double v) {
        const std::size_t n = shape_numel(shape);
        Tensor t = from(std::move(shape), {});
        t.node_->value.assign(n, v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> data) {
        auto node = std::make_shared<detail::Node>();
        const std::size_t n = shape_numel(shape);
        if (data.empty()) {
            data.assign(n, 0.0);
        } else if (data.size() != n) {
            throw ShapeMismatch("tensor: data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
        }
        node->shape = std::move(shape);
        node->value = std::move(data);
        return Tensor(std::move(node));
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, double stddev) {
        Tensor t = zeros(std::move(shape));
        for (double& v : t.node_->value) {
            v = stddev * rng.next_normal();
        }
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return node_->shape.at(1); }

    std::span<double> data() const { return node_->value; }

    std::span<const double> grad() const {
        static const std::vector<double> kEmpty;
        return node_->grad.empty() ? kEmpty : node_->grad;
    }

    double grad_at(std::size_t i) const { return node_->grad.empty() ? 0.0 : node_->grad[i]; }

    double item() const {
        if (numel() != 1) {
            throw NotScalar("item: tensor has " + std::to_string(numel()) + " elements");
        }
        return node_->value[0];
    }

    double at(std::size_t i) const { return node_->value.at(i); }
    double at(std::size_t i, std::size_t j) const { return node_->value.at(i * cols() + j); }

    bool requires_grad() const { return node_->requires_grad; }

    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    void zero_grad() const { node_->grad.clear(); }

    bool all_finite() const {
        for (double v : node_->value) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    // Constant copy with no history.
    Tensor detach() const { return from(node_->shape, node_->value); }

    const detail::NodePtr& node() const { return node_; }

    explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

  private:
    detail::NodePtr node_;
};

// Ordered record of executed primitive operations. Execution order is
// topological order, so one reverse sweep visits each record exactly once.
// A tape is activated with Tape::Scope; ops executed while no tape is active
// compute forward values only.
class Tape {
  public:
    Tape() : id_(next_id()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return records_.size(); }

    void record(const detail::NodePtr& node) {
        node->tape_id = id_;
        node->tape_index = records_.size();
        records_.push_back(node);
    }

    // Populates d(loss)/d(leaf) on every requires_grad leaf reachable from
    // loss. Leaf gradients accumulate across calls; intermediate gradients
    // are recomputed from scratch each call.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1) {
            throw NotScalar("backward: loss must be scalar, got " + shape_str(loss.shape()));
        }
        const detail::NodePtr& top = loss.node();
        if (top->tape_id != id_) {
            throw DetachedTensor("backward: loss is not on this tape");
        }
        for (std::size_t i = 0; i <= top->tape_index; ++i) {
            records_[i]->grad.clear();
        }
        top->grad.assign(1, 1.0);
        for (std::size_t i = top->tape_index + 1; i-- > 0;) {
            detail::Node& n = *records_[i];
            if (!n.grad.empty() && n.backprop) {
                n.backprop(n);
            }
        }
    }

    class Scope {
      public:
        explicit Scope(Tape& t) : prev_(active_tape()) { active_tape() = &t; }
        ~Scope() { active_tape() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

      private:
        Tape* prev_;
    };

    static Tape* active() { return active_tape(); }

  private:
    static Tape*& active_tape() {
        thread_local Tape* tape = nullptr;
        return tape;
    }

    static std::uint64_t next_id() {
        static std::atomic<std::uint64_t> counter{0};
        return ++counter;
    }

    std::uint64_t id_;
    std::vector<detail::NodePtr> records_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> value, std::vector<NodePtr> inputs,
                      std::function<void(Node&)> backprop) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool needs_grad = false;
    for (const NodePtr& in : inputs) {
        needs_grad = needs_grad || in->requires_grad;
    }
    Tape* tape = Tape::active();
    if (tape != nullptr && needs_grad) {
        node->requires_grad = true;
        node->inputs = std::move(inputs);
        node->backprop = std::move(backprop);
        tape->record(node);
    }
    return Tensor(std::move(node));
}

// C (m x n) += A (m x k) * B (k x n)
inline void mm_accum(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// C (m x n) += A (m x d) * B^T, with B stored (n x d)
inline void mm_nt_accum(const double* a, const double* b, double* c, std::size_t m, std::size_t d,
                        std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * d;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * d;
            double acc = 0.0;
            for (std::size_t q = 0; q < d; ++q) {
                acc += arow[q] * brow[q];
            }
            crow[j] += acc;
        }
    }
}

// C (k x n) += A^T * B, with A stored (m x k), B stored (m x n)
inline void mm_tn_accum(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                        std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

enum class Elementwise { kAdd, kSub, kMul };

inline Tensor elementwise_op(const Tensor& a, const Tensor& b, Elementwise kind,
                             const char* name) {
    const NodePtr& an = a.node();
    const NodePtr& bn = b.node();
    const bool same = an->shape == bn->shape;
    const bool a_scalar = an->value.size() == 1;
    const bool b_scalar = bn->value.size() == 1;
    if (!same && !a_scalar && !b_scalar) {
        throw ShapeMismatch(std::string(name) + ": " + shape_str(an->shape) + " vs " +
                            shape_str(bn->shape));
    }
    const Shape& out_shape = (same || b_scalar) ? an->shape : bn->shape;
    const std::size_t n = shape_numel(out_shape);
    std::vector<double> out(n);
    const auto& av = an->value;
    const auto& bv = bn->value;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[same || !a_scalar ? i : 0];
        const double y = bv[same || !b_scalar ? i : 0];
        switch (kind) {
            case Elementwise::kAdd: out[i] = x + y; break;
            case Elementwise::kSub: out[i] = x - y; break;
            case Elementwise::kMul: out[i] = x * y; break;
        }
    }
    const bool broadcast_a = !same && a_scalar;
    const bool broadcast_b = !same && b_scalar;
    return make_op(out_shape, std::move(out), {an, bn},
                   [an, bn, kind, broadcast_a, broadcast_b](Node& o) {
                       const std::size_t count = o.value.size();
                       const double* g = o.grad.data();
                       if (an->requires_grad) {
                           double* da = an->grad_data();
                           for (std::size_t i = 0; i < count; ++i) {
                               const double y = bn->value[broadcast_b ? 0 : i];
                               double piece = g[i];
                               if (kind == Elementwise::kMul) {
                                   piece *= y;
                               }
                               da[broadcast_a ? 0 : i] += piece;
                           }
                       }
                       if (bn->requires_grad) {
                           double* db = bn->grad_data();
                           for (std::size_t i = 0; i < count; ++i) {
                               const double x = an->value[broadcast_a ? 0 : i];
                               double piece = g[i];
                               if (kind == Elementwise::kSub) {
                                   piece = -piece;
                               } else if (kind == Elementwise::kMul) {
                                   piece *= x;
                               }
                               db[broadcast_b ? 0 : i] += piece;
                           }
                       }
                   });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::elementwise_op(a, b, detail::Elementwise::kAdd, "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::elementwise_op(a, b, detail::Elementwise::kSub, "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::elementwise_op(a, b, detail::Elementwise::kMul, "mul");
}

// Scale by a plain constant (no gradient for c).
inline Tensor scale(const Tensor& a, double c) {
    const detail::NodePtr& an = a.node();
    std::vector<double> out(an->value.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = c * an->value[i];
    }
    return detail::make_op(an->shape, std::move(out), {an}, [an, c](detail::Node& o) {
        if (!an->requires_grad) {
            return;
        }
        double* da = an->grad_data();
        for (std::size_t i = 0; i < o.value.size(); ++i) {
            da[i] += c * o.grad[i];
        }
    });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const detail::NodePtr& an = a.node();
    const detail::NodePtr& bn = b.node();
    if (an->shape.size() != 2 || bn->shape.size() != 2 || an->shape[1] != bn->shape[0]) {
        throw ShapeMismatch("matmul: " + shape_str(an->shape) + " vs " + shape_str(bn->shape));
    }
    const std::size_t m = an->shape[0];
    const std::size_t k = an->shape[1];
    const std::size_t n = bn->shape[1];
    std::vector<double> out(m * n, 0.0);
    detail::mm_accum(an->value.data(), bn->value.data(), out.data(), m, k, n);
    return detail::make_op({m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](detail::Node& o) {
        if (an->requires_grad) {
            detail::mm_nt_accum(o.grad.data(), bn->value.data(), an->grad_data(), m, n, k);
        }
        if (bn->requires_grad) {
            detail::mm_tn_accum(an->value.data(), o.grad.data(), bn->grad_data(), m, k, n);
        }
    });
}

// a (m x d) times b^T with b stored (n x d); result (m x n).
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    const detail::NodePtr& an = a.node();
    const detail::NodePtr& bn = b.node();
    if (an->shape.size() != 2 || bn->shape.size() != 2 || an->shape[1] != bn->shape[1]) {
        throw ShapeMismatch("matmul_nt: " + shape_str(an->shape) + " vs " + shape_str(bn->shape));
    }
    const std::size_t m = an->shape[0];
    const std::size_t d = an->shape[1];
    const std::size_t n = bn->shape[0];
    std::vector<double> out(m * n, 0.0);
    detail::mm_nt_accum(an->value.data(), bn->value.data(), out.data(), m, d, n);
    return detail::make_op({m, n}, std::move(out), {an, bn}, [an, bn, m, d, n](detail::Node& o) {
        if (an->requires_grad) {
            detail::mm_accum(o.grad.data(), bn->value.data(), an->grad_data(), m, n, d);
        }
        if (bn->requires_grad) {
            detail::mm_tn_accum(o.grad.data(), an->value.data(), bn->grad_data(), m, n, d);
        }
    });
}

enum class AlgebraKind { kAdd, kSub, kElementwiseMul, kScalarScale, kMatmul };

// Uniform entry point over the basic algebra; kScalarScale expects b to be a
// one-element tensor.
inline Tensor tensor_algebra(const Tensor& a, const Tensor& b, AlgebraKind kind) {
    switch (kind) {
        case AlgebraKind::kAdd: return add(a, b);
        case AlgebraKind::kSub: return sub(a, b);
        case AlgebraKind::kElementwiseMul: return mul(a, b);
        case AlgebraKind::kScalarScale:
            if (b.numel() != 1) {
                throw ShapeMismatch("scalar-scale: scale factor must have one element, got " +
                                    shape_str(b.shape()));
            }
            return mul(a, b);
        case AlgebraKind::kMatmul: return matmul(a, b);
    }
    throw Error("tensor_algebra: unknown kind");
}

// Softmax over the last axis, stabilized by max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
    const detail::NodePtr& xn = x.node();
    if (xn->shape.empty()) {
        throw ShapeMismatch("softmax_rows: rank must be >= 1");
    }
    const std::size_t last = xn->shape.back();
    std::size_t rows = 1;
    for (std::size_t i = 0; i + 1 < xn->shape.size(); ++i) {
        rows *= xn->shape[i];
    }
    if (last == 0) {
        if (rows > 0) {
            throw EmptyAxis("softmax_rows: last axis has extent 0");
        }
        rows = 0;
    }
    std::vector<double> out(xn->value.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xn->value.data() + r * last;
        double* y = out.data() + r * last;
        double mx = in[0];
        for (std::size_t j = 1; j < last; ++j) {
            mx = std::max(mx, in[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < last; ++j) {
            y[j] = std::exp(in[j] - mx);
            total += y[j];
        }
        for (std::size_t j = 0; j < last; ++j) {
            y[j] /= total;
        }
    }
    return detail::make_op(xn->shape, std::move(out), {xn}, [xn, rows, last](detail::Node& o) {
        if (!xn->requires_grad) {
            return;
        }
        double* dx = xn->grad_data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = o.value.data() + r * last;
            const double* g = o.grad.data() + r * last;
            double dot = 0.0;
            for (std::size_t j = 0; j < last; ++j) {
                dot += g[j] * y[j];
            }
            for (std::size_t j = 0; j < last; ++j) {
                dx[r * last + j] += y[j] * (g[j] - dot);
            }
        }
    });
}

// Normalizes each last-axis slice to mean 0 / variance 1, then applies gain
// and bias. eps sits inside the sqrt.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const detail::NodePtr& xn = x.node();
    const detail::NodePtr& gn = gain.node();
    const detail::NodePtr& bn = bias.node();
    if (xn->shape.empty()) {
        throw ShapeMismatch("layer_norm: rank must be >= 1");
    }
    const std::size_t d = xn->shape.back();
    if (gn->value.size() != d || bn->value.size() != d) {
        throw ShapeMismatch("layer_norm: gain/bias length must match last axis " +
                            std::to_string(d));
    }
    if (!(eps > 0.0)) {
        throw Error("layer_norm: eps must be positive");
    }
    const std::size_t rows = d == 0 ? 0 : xn->value.size() / d;
    std::vector<double> out(xn->value.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xn->value.data() + r * d;
        double* y = out.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            mean += in[j];
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = in[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            y[j] = gn->value[j] * ((in[j] - mean) * inv) + bn->value[j];
        }
    }
    return detail::make_op(
        xn->shape, std::move(out), {xn, gn, bn}, [xn, gn, bn, d, rows, eps](detail::Node& o) {
            std::vector<double> xhat(d);
            std::vector<double> dxhat(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* in = xn->value.data() + r * d;
                const double* g = o.grad.data() + r * d;
                double mean = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    mean += in[j];
                }
                mean /= static_cast<double>(d);
                double var = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double c = in[j] - mean;
                    var += c * c;
                }
                var /= static_cast<double>(d);
                const double inv = 1.0 / std::sqrt(var + eps);
                for (std::size_t j = 0; j < d; ++j) {
                    xhat[j] = (in[j] - mean) * inv;
                }
                if (gn->requires_grad) {
                    double* dg = gn->grad_data();
                    for (std::size_t j = 0; j < d; ++j) {
                        dg[j] += g[j] * xhat[j];
                    }
                }
                if (bn->requires_grad) {
                    double* db = bn->grad_data();
                    for (std::size_t j = 0; j < d; ++j) {
                        db[j] += g[j];
                    }
                }
                if (xn->requires_grad) {
                    double mean_dxhat = 0.0;
                    double mean_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        dxhat[j] = g[j] * gn->value[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    mean_dxhat /= static_cast<double>(d);
                    mean_dxhat_xhat /= static_cast<double>(d);
                    double* dx = xn->grad_data() + r * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        dx[j] += inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
            }
        });
}

// Exact-erf GELU: x * Phi(x).
inline Tensor gelu(const Tensor& x) {
    const detail::NodePtr& xn = x.node();
    std::vector<double> out(xn->value.size());
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = xn->value[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
    return detail::make_op(xn->shape, std::move(out), {xn}, [xn](detail::Node& o) {
        if (!xn->requires_grad) {
            return;
        }
        constexpr double kInvSqrt2Pi = 0.3989422804014326779;
        double* dx = xn->grad_data();
        for (std::size_t i = 0; i < o.value.size(); ++i) {
            const double v = xn->value[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            dx[i] += o.grad[i] * (cdf + v * pdf);
        }
    });
}

// Row gather: out[i] = table[ids[i]]. Indices are validated by the caller.
inline Tensor gather_rows(const Tensor& table, std::vector<std::int32_t> ids) {
    const detail::NodePtr& tn = table.node();
    if (tn->shape.size() != 2) {
        throw ShapeMismatch("gather_rows: table must be rank 2, got " + shape_str(tn->shape));
    }
    const std::size_t rows = tn->shape[0];
    const std::size_t d = tn->shape[1];
    for (std::int32_t id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= rows) {
            throw Error("gather_rows: index " + std::to_string(id) + " out of range [0, " +
                        std::to_string(rows) + ")");
        }
    }
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const double* src = tn->value.data() + static_cast<std::size_t>(ids[i]) * d;
        std::copy(src, src + d, out.data() + i * d);
    }
    const std::size_t n = ids.size();
    return detail::make_op({n, d}, std::move(out), {tn},
                           [tn, ids = std::move(ids), d](detail::Node& o) {
                               if (!tn->requires_grad) {
                                   return;
                               }
                               double* dt = tn->grad_data();
                               for (std::size_t i = 0; i < ids.size(); ++i) {
                                   const double* g = o.grad.data() + i * d;
                                   double* dst = dt + static_cast<std::size_t>(ids[i]) * d;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       dst[j] += g[j];
                                   }
                               }
                           });
}

inline Tensor slice_rows(const Tensor& x, std::size_t row0, std::size_t nrows) {
    const detail::NodePtr& xn = x.node();
    if (xn->shape.size() != 2 || row0 + nrows > xn->shape[0]) {
        throw ShapeMismatch("slice_rows: rows [" + std::to_string(row0) + ", " +
                            std::to_string(row0 + nrows) + ") out of " + shape_str(xn->shape));
    }
    const std::size_t d = xn->shape[1];
    std::vector<double> out(xn->value.begin() + static_cast<std::ptrdiff_t>(row0 * d),
                            xn->value.begin() + static_cast<std::ptrdiff_t>((row0 + nrows) * d));
    return detail::make_op({nrows, d}, std::move(out), {xn}, [xn, row0, d](detail::Node& o) {
        if (!xn->requires_grad) {
            return;
        }
        double* dx = xn->grad_data() + row0 * d;
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            dx[i] += o.grad[i];
        }
    });
}

inline Tensor slice_cols(const Tensor& x, std::size_t col0, std::size_t ncols) {
    const detail::NodePtr& xn = x.node();
    if (xn->shape.size() != 2 || col0 + ncols > xn->shape[1]) {
        throw ShapeMismatch("slice_cols: cols [" + std::to_string(col0) + ", " +
                            std::to_string(col0 + ncols) + ") out of " + shape_str(xn->shape));
    }
    const std::size_t rows = xn->shape[0];
    const std::size_t d = xn->shape[1];
    std::vector<double> out(rows * ncols);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* src = xn->value.data() + i * d + col0;
        std::copy(src, src + ncols, out.data() + i * ncols);
    }
    return detail::make_op({rows, ncols}, std::move(out), {xn},
                           [xn, col0, ncols, rows, d](detail::Node& o) {
                               if (!xn->requires_grad) {
                                   return;
                               }
                               double* dx = xn->grad_data();
                               for (std::size_t i = 0; i < rows; ++i) {
                                   const double* g = o.grad.data() + i * ncols;
                                   double* dst = dx + i * d + col0;
                                   for (std::size_t j = 0; j < ncols; ++j) {
                                       dst[j] += g[j];
                                   }
                               }
                           });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw EmptyVector("concat_cols: no tensors");
    }
    const std::size_t rows = parts[0].rows();
    std::size_t total = 0;
    std::vector<detail::NodePtr> inputs;
    inputs.reserve(parts.size());
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.rows() != rows) {
            throw ShapeMismatch("concat_cols: all parts must share the row count");
        }
        total += p.cols();
        inputs.push_back(p.node());
    }
    std::vector<double> out(rows * total);
    std::size_t col = 0;
    for (const detail::NodePtr& in : inputs) {
        const std::size_t w = in->shape[1];
        for (std::size_t i = 0; i < rows; ++i) {
            std::copy(in->value.data() + i * w, in->value.data() + (i + 1) * w,
                      out.data() + i * total + col);
        }
        col += w;
    }
    auto captured = inputs;
    return detail::make_op({rows, total}, std::move(out), std::move(inputs),
                           [captured, rows, total](detail::Node& o) {
                               std::size_t col = 0;
                               for (const detail::NodePtr& in : captured) {
                                   const std::size_t w = in->shape[1];
                                   if (in->requires_grad) {
                                       double* dst = in->grad_data();
                                       for (std::size_t i = 0; i < rows; ++i) {
                                           const double* g = o.grad.data() + i * total + col;
                                           for (std::size_t j = 0; j < w; ++j) {
                                               dst[i * w + j] += g[j];
                                           }
                                       }
                                   }
                                   col += w;
                               }
                           });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw EmptyVector("concat_rows: no tensors");
    }
    const std::size_t d = parts[0].cols();
    std::size_t total = 0;
    std::vector<detail::NodePtr> inputs;
    inputs.reserve(parts.size());
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.cols() != d) {
            throw ShapeMismatch("concat_rows: all parts must share the column count");
        }
        total += p.rows();
        inputs.push_back(p.node());
    }
    std::vector<double> out;
    out.reserve(total * d);
    for (const detail::NodePtr& in : inputs) {
        out.insert(out.end(), in->value.begin(), in->value.end());
    }
    auto captured = inputs;
    return detail::make_op({total, d}, std::move(out), std::move(inputs),
                           [captured](detail::Node& o) {
                               std::size_t offset = 0;
                               for (const detail::NodePtr& in : captured) {
                                   const std::size_t count = in->value.size();
                                   if (in->requires_grad) {
                                       double* dst = in->grad_data();
                                       for (std::size_t j = 0; j < count; ++j) {
                                           dst[j] += o.grad[offset + j];
                                       }
                                   }
                                   offset += count;
                               }
                           });
}

inline Tensor sum_all(const Tensor& x) {
    const detail::NodePtr& xn = x.node();
    double total = 0.0;
    for (double v : xn->value) {
        total += v;
    }
    return detail::make_op({1}, {total}, {xn}, [xn](detail::Node& o) {
        if (!xn->requires_grad) {
            return;
        }
        double* dx = xn->grad_data();
        const double g = o.grad[0];
        for (std::size_t i = 0; i < xn->value.size(); ++i) {
            dx[i] += g;
        }
    });
}

// mat (m x n) + vec (n), broadcast over rows. The usual bias add.
inline Tensor add_rowvec(const Tensor& mat, const Tensor& vec) {
    const detail::NodePtr& mn = mat.node();
    const detail::NodePtr& vn = vec.node();
    if (mn->shape.size() != 2 || vn->value.size() != mn->shape[1]) {
        throw ShapeMismatch("add_rowvec: " + shape_str(mn->shape) + " vs " + shape_str(vn->shape));
    }
    const std::size_t rows = mn->shape[0];
    const std::size_t d = mn->shape[1];
    std::vector<double> out(mn->value.size());
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            out[i * d + j] = mn->value[i * d + j] + vn->value[j];
        }
    }
    return detail::make_op(mn->shape, std::move(out), {mn, vn}, [mn, vn, rows, d](detail::Node& o) {
        if (mn->requires_grad) {
            double* dm = mn->grad_data();
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                dm[i] += o.grad[i];
            }
        }
        if (vn->requires_grad) {
            double* dv = vn->grad_data();
            for (std::size_t i = 0; i < rows; ++i) {
                for (std::size_t j = 0; j < d; ++j) {
                    dv[j] += o.grad[i * d + j];
                }
            }
        }
    });
}

// Elementwise addition of a plain constant array (attention masks).
inline Tensor add_constant(const Tensor& x, const std::vector<double>& c) {
    const detail::NodePtr& xn = x.node();
    if (c.size() != xn->value.size()) {
        throw ShapeMismatch("add_constant: constant length mismatch");
    }
    std::vector<double> out(xn->value.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = xn->value[i] + c[i];
    }
    return detail::make_op(xn->shape, std::move(out), {xn}, [xn](detail::Node& o) {
        if (!xn->requires_grad) {
            return;
        }
        double* dx = xn->grad_data();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            dx[i] += o.grad[i];
        }
    });
}

// Elementwise multiplication by a plain constant array (dropout, padding).
inline Tensor mul_constant(const Tensor& x, std::vector<double> c) {
    const detail::NodePtr& xn = x.node();
    if (c.size() != xn->value.size()) {
        throw ShapeMismatch("mul_constant: constant length mismatch");
    }
    std::vector<double> out(xn->value.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = xn->value[i] * c[i];
    }
    return detail::make_op(xn->shape, std::move(out), {xn},
                           [xn, c = std::move(c)](detail::Node& o) {
                               if (!xn->requires_grad) {
                                   return;
                               }
                               double* dx = xn->grad_data();
                               for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                   dx[i] += o.grad[i] * c[i];
                               }
                           });
}

// Forward identity that blocks gradient flow.
inline Tensor stop_gradient(const Tensor& x) { return x.detach(); }

// Sum of cross-entropy terms over rows whose label is >= 0; labels use -1 as
// the ignore marker. Pair with count_labeled for the mean.
inline Tensor cross_entropy_sum(const Tensor& logits, std::vector<std::int64_t> labels) {
    const detail::NodePtr& ln = logits.node();
    if (ln->shape.size() != 2 || labels.size() != ln->shape[0]) {
        throw ShapeMismatch("cross_entropy_sum: logits " + shape_str(ln->shape) + " vs " +
                            std::to_string(labels.size()) + " labels");
    }
    const std::size_t v = ln->shape[1];
    for (std::int64_t lab : labels) {
        if (lab >= static_cast<std::int64_t>(v)) {
            throw Error("cross_entropy_sum: label " + std::to_string(lab) + " out of range");
        }
    }
    double total = 0.0;
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] < 0) {
            continue;
        }
        const double* row = ln->value.data() + r * v;
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) {
            mx = std::max(mx, row[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            denom += std::exp(row[j] - mx);
        }
        total += mx + std::log(denom) - row[static_cast<std::size_t>(labels[r])];
    }
    return detail::make_op({1}, {total}, {ln}, [ln, labels = std::move(labels), v](detail::Node& o) {
        if (!ln->requires_grad) {
            return;
        }
        const double g = o.grad[0];
        double* dl = ln->grad_data();
        for (std::size_t r = 0; r < labels.size(); ++r) {
            if (labels[r] < 0) {
                continue;
            }
            const double* row = ln->value.data() + r * v;
            double mx = row[0];
            for (std::size_t j = 1; j < v; ++j) {
                mx = std::max(mx, row[j]);
            }
            double denom = 0.0;
            for (std::size_t j = 0; j < v; ++j) {
                denom += std::exp(row[j] - mx);
            }
            for (std::size_t j = 0; j < v; ++j) {
                const double p = std::exp(row[j] - mx) / denom;
                const double onehot = (static_cast<std::int64_t>(j) == labels[r]) ? 1.0 : 0.0;
                dl[r * v + j] += g * (p - onehot);
            }
        }
    });
}

inline std::size_t count_labeled(const std::vector<std::int64_t>& labels) {
    std::size_t n = 0;
    for (std::int64_t lab : labels) {
        n += lab >= 0 ? 1 : 0;
    }
    return n;
}

// Scales every row (token vector) to L2 norm 1 with an additive eps in the
// divisor: y = v / (|v| + eps).
inline Tensor unit_normalize_rows(const Tensor& x, double eps) {
    const detail::NodePtr& xn = x.node();
    if (xn->shape.size() != 2) {
        throw ShapeMismatch("unit_normalize_rows: rank must be 2, got " + shape_str(xn->shape));
    }
    if (!(eps > 0.0)) {
        throw Error("unit_normalize_rows: eps must be positive");
    }
    const std::size_t rows = xn->shape[0];
    const std::size_t d = xn->shape[1];
    std::vector<double> out(xn->value.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xn->value.data() + r * d;
        double norm2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            norm2 += in[j] * in[j];
        }
        const double s = std::sqrt(norm2) + eps;
        for (std::size_t j = 0; j < d; ++j) {
            out[r * d + j] = in[j] / s;
        }
    }
    return detail::make_op(xn->shape, std::move(out), {xn}, [xn, rows, d, eps](detail::Node& o) {
        if (!xn->requires_grad) {
            return;
        }
        double* dx = xn->grad_data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* in = xn->value.data() + r * d;
            const double* g = o.grad.data() + r * d;
            double norm2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                norm2 += in[j] * in[j];
            }
            const double norm = std::sqrt(norm2);
            const double s = norm + eps;
            if (norm == 0.0) {
                for (std::size_t j = 0; j < d; ++j) {
                    dx[r * d + j] += g[j] / eps;
                }
                continue;
            }
            double gv = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                gv += g[j] * in[j];
            }
            const double coeff = gv / (norm * s * s);
            for (std::size_t j = 0; j < d; ++j) {
                dx[r * d + j] += g[j] / s - in[j] * coeff;
            }
        }
    });
}

// Weighted sum of same-shaped tensors: out = sum_i alpha[i] * hs[i], with
// gradients into both the weights and the summands. Accumulation runs in
// index order so that an all-ones alpha reproduces a plain left-to-right sum
// bit for bit.
inline Tensor convex_mix(const std::vector<Tensor>& hs, const Tensor& alpha) {
    if (hs.empty()) {
        throw EmptyVector("convex_mix: no tensors");
    }
    const detail::NodePtr& an = alpha.node();
    if (an->shape.size() != 1 || an->value.size() != hs.size()) {
        throw LengthMismatch("convex_mix: " + std::to_string(hs.size()) + " tensors vs " +
                             std::to_string(an->value.size()) + " weights");
    }
    const Shape& shape = hs[0].shape();
    std::vector<detail::NodePtr> inputs;
    inputs.reserve(hs.size() + 1);
    for (const Tensor& h : hs) {
        if (h.shape() != shape) {
            throw ShapeMismatch("convex_mix: " + shape_str(h.shape()) + " vs " + shape_str(shape));
        }
        inputs.push_back(h.node());
    }
    const std::size_t n = shape_numel(shape);
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const double a = an->value[i];
        const double* h = inputs[i]->value.data();
        for (std::size_t j = 0; j < n; ++j) {
            out[j] += a * h[j];
        }
    }
    auto captured = inputs;
    inputs.push_back(an);
    return detail::make_op(shape, std::move(out), std::move(inputs),
                           [captured, an, n](detail::Node& o) {
                               const double* g = o.grad.data();
                               for (std::size_t i = 0; i < captured.size(); ++i) {
                                   const detail::NodePtr& h = captured[i];
                                   if (h->requires_grad) {
                                       const double a = an->value[i];
                                       double* dh = h->grad_data();
                                       for (std::size_t j = 0; j < n; ++j) {
                                           dh[j] += a * g[j];
                                       }
                                   }
                               }
                               if (an->requires_grad) {
                                   double* da = an->grad_data();
                                   for (std::size_t i = 0; i < captured.size(); ++i) {
                                       const double* h = captured[i]->value.data();
                                       double dot = 0.0;
                                       for (std::size_t j = 0; j < n; ++j) {
                                           dot += g[j] * h[j];
                                       }
                                       da[i] += dot;
                                   }
                               }
                           });
}

// Max over all parameter entries of the relative disagreement between the
// analytic gradient and a central finite difference. f must be deterministic
// and must read the parameter tensors in place.
inline double finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                double h) {
    if (!(h > 0.0)) {
        throw Error("finite_diff_check: h must be positive");
    }
    const auto eval_scalar = [&f]() {
        const Tensor t = f();
        if (t.numel() != 1) {
            throw NotScalar("finite_diff_check: f must return a scalar");
        }
        const double v = t.item();
        if (!std::isfinite(v)) {
            throw NonFiniteValue("finite_diff_check: f returned a non-finite value");
        }
        return v;
    };

    for (const Tensor& p : params) {
        p.zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tape::Scope scope(tape);
        const Tensor loss = f();
        if (loss.numel() != 1) {
            throw NotScalar("finite_diff_check: f must return a scalar");
        }
        if (!std::isfinite(loss.item())) {
            throw NonFiniteValue("finite_diff_check: f returned a non-finite value");
        }
        tape.backward(loss);
    }
    analytic.reserve(params.size());
    for (const Tensor& p : params) {
        std::vector<double> g(p.numel(), 0.0);
        const auto got = p.grad();
        std::copy(got.begin(), got.end(), g.begin());
        analytic.push_back(std::move(g));
    }

    double max_rel = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto data = params[pi].data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + h;
            const double fp = eval_scalar();
            data[i] = orig - h;
            const double fm = eval_scalar();
            data[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[pi][i];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace elcbert
