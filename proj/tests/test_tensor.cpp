#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "elcbert/tensor.hpp"

using namespace elcbert;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data()) {
        v = lo + (hi - lo) * rng.next_double();
    }
    return t;
}

// Scalarizes an arbitrary output with fixed random weights so every output
// entry influences the loss. Takes the generator by value: a fresh split
// yields the same weights on every evaluation, which finite differencing
// depends on.
Tensor weighted_sum(const Tensor& t, Rng rng) {
    std::vector<double> w(t.numel());
    for (double& v : w) {
        v = -1.0 + 2.0 * rng.next_double();
    }
    return sum_all(mul_constant(t, std::move(w)));
}

}  // namespace

TEST_CASE("tensor_algebra identity and zero cases") {
    const Tensor m = Tensor::from({2, 2}, {3.0, -1.5, 2.25, 7.0});
    const Tensor eye = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    const Tensor prod = tensor_algebra(eye, m, AlgebraKind::kMatmul);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(prod.at(i) == m.at(i));
    }

    const Tensor z = Tensor::zeros({2, 2});
    const Tensor s = tensor_algebra(m, z, AlgebraKind::kAdd);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(s.at(i) == m.at(i));
    }
}

TEST_CASE("matmul hand-checked product") {
    const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    const Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
    const Tensor c = matmul(a, b);
    CHECK(c.at(0, 0) == 19.0);
    CHECK(c.at(0, 1) == 22.0);
    CHECK(c.at(1, 0) == 43.0);
    CHECK(c.at(1, 1) == 50.0);
}

TEST_CASE("shape mismatch raises") {
    const Tensor a = Tensor::zeros({2, 3});
    const Tensor b = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(matmul(a, b), ShapeMismatch);
    CHECK_THROWS_AS(add(a, Tensor::zeros({3, 2})), ShapeMismatch);
    CHECK_THROWS_AS(tensor_algebra(a, b, AlgebraKind::kScalarScale), ShapeMismatch);
}

TEST_CASE("matmul_nt matches matmul against explicit transpose") {
    Rng rng(11);
    const Tensor a = rand_tensor({3, 4}, rng);
    const Tensor b = rand_tensor({5, 4}, rng);
    Tensor bt = Tensor::zeros({4, 5});
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
            bt.data()[j * 5 + i] = b.at(i, j);
        }
    }
    const Tensor viaT = matmul(a, bt);
    const Tensor direct = matmul_nt(a, b);
    for (std::size_t i = 0; i < direct.numel(); ++i) {
        CHECK(direct.at(i) == Catch::Approx(viaT.at(i)).margin(1e-15));
    }
}

TEST_CASE("softmax_rows fixed values") {
    const Tensor flat = softmax_rows(Tensor::from({3}, {0, 0, 0}));
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(flat.at(i) == Catch::Approx(1.0 / 3.0).margin(1e-15));
    }

    const Tensor t = softmax_rows(Tensor::from({3}, {0, 0, 1}));
    CHECK(t.at(0) == Catch::Approx(0.21194).margin(5e-6));
    CHECK(t.at(1) == Catch::Approx(0.21194).margin(5e-6));
    CHECK(t.at(2) == Catch::Approx(0.57612).margin(5e-6));
    // direct exponentiation: e / (2 + e)
    CHECK(t.at(2) == Catch::Approx(std::exp(1.0) / (2.0 + std::exp(1.0))).margin(1e-15));
}

TEST_CASE("softmax_rows shift invariance and row sums") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = rand_tensor({4, 6}, rng, -5.0, 5.0);
        const double c = -20.0 + 40.0 * rng.next_double();
        Tensor shifted = x.detach();
        for (double& v : shifted.data()) {
            v += c;
        }
        const Tensor y0 = softmax_rows(x);
        const Tensor y1 = softmax_rows(shifted);
        for (std::size_t i = 0; i < y0.numel(); ++i) {
            CHECK(y0.at(i) == Catch::Approx(y1.at(i)).margin(1e-12));
        }
        for (std::size_t r = 0; r < 4; ++r) {
            double total = 0.0;
            for (std::size_t j = 0; j < 6; ++j) {
                total += y0.at(r, j);
            }
            CHECK(std::abs(total - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("softmax_rows empty axis") {
    CHECK_THROWS_AS(softmax_rows(Tensor::zeros({2, 0})), EmptyAxis);
}

TEST_CASE("layer_norm fixed cases") {
    const Tensor gain = Tensor::full({3}, 1.0);
    const Tensor bias = Tensor::zeros({3});

    const Tensor constant = layer_norm(Tensor::full({3}, 4.2), gain, bias, 1e-7);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(constant.at(i) == Catch::Approx(0.0).margin(1e-9));
    }

    const Tensor g2 = Tensor::full({2}, 1.0);
    const Tensor b2 = Tensor::zeros({2});
    const Tensor fixed = layer_norm(Tensor::from({2}, {1, -1}), g2, b2, 1e-12);
    CHECK(fixed.at(0) == Catch::Approx(1.0).margin(1e-9));
    CHECK(fixed.at(1) == Catch::Approx(-1.0).margin(1e-9));

    const Tensor zero_gain =
        layer_norm(Tensor::from({3}, {0.3, -2.0, 5.0}), Tensor::zeros({3}), Tensor::full({3}, 0.25), 1e-7);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(zero_gain.at(i) == 0.25);
    }
}

TEST_CASE("layer_norm standardizes each slice") {
    Rng rng(13);
    const Tensor x = rand_tensor({5, 8}, rng);
    const Tensor y = layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}), 1e-12);
    for (std::size_t r = 0; r < 5; ++r) {
        double mean = 0.0;
        double var = 0.0;
        for (std::size_t j = 0; j < 8; ++j) {
            mean += y.at(r, j);
        }
        mean /= 8.0;
        for (std::size_t j = 0; j < 8; ++j) {
            var += (y.at(r, j) - mean) * (y.at(r, j) - mean);
        }
        var /= 8.0;
        CHECK(std::abs(mean) < 1e-9);
        CHECK(std::abs(var - 1.0) < 1e-9);
    }
}

TEST_CASE("gelu fixed values") {
    const Tensor y = gelu(Tensor::from({3}, {0.0, 10.0, 1.0}));
    CHECK(y.at(0) == 0.0);
    CHECK(y.at(1) == Catch::Approx(10.0).margin(1e-6));
    CHECK(y.at(2) == Catch::Approx(0.841345).margin(1e-6));
}

TEST_CASE("backward on x squared") {
    Tensor x = Tensor::scalar(3.0).set_requires_grad(true);
    Tape tape;
    {
        Tape::Scope scope(tape);
        const Tensor loss = mul(x, x);
        tape.backward(loss);
    }
    CHECK(x.grad_at(0) == 6.0);
}

TEST_CASE("backward accumulates until reset") {
    Tensor x = Tensor::scalar(3.0).set_requires_grad(true);
    Tape tape;
    Tape::Scope scope(tape);
    const Tensor loss = mul(x, x);
    tape.backward(loss);
    tape.backward(loss);
    CHECK(x.grad_at(0) == 12.0);
    x.zero_grad();
    tape.backward(loss);
    CHECK(x.grad_at(0) == 6.0);
}

TEST_CASE("softmax cross-entropy closed-form gradient") {
    Rng rng(17);
    Tensor z = rand_tensor({1, 5}, rng).set_requires_grad(true);
    const std::int64_t target = 2;
    Tape tape;
    {
        Tape::Scope scope(tape);
        const Tensor loss = cross_entropy_sum(z, {target});
        tape.backward(loss);
    }
    const Tensor p = softmax_rows(z);
    for (std::size_t j = 0; j < 5; ++j) {
        const double expected = p.at(j) - (j == static_cast<std::size_t>(target) ? 1.0 : 0.0);
        CHECK(z.grad_at(j) == Catch::Approx(expected).margin(1e-12));
    }
}

TEST_CASE("sum of matmul gradient is ones times B transpose") {
    Rng rng(19);
    Tensor a = rand_tensor({3, 4}, rng).set_requires_grad(true);
    const Tensor b = rand_tensor({4, 2}, rng);
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(sum_all(matmul(a, b)));
    }
    // d/dA sum(AB) = ones * B^T, i.e. row-sums of B broadcast over rows of A
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t k = 0; k < 4; ++k) {
            double expected = 0.0;
            for (std::size_t j = 0; j < 2; ++j) {
                expected += b.at(k, j);
            }
            CHECK(a.grad_at(i * 4 + k) == Catch::Approx(expected).margin(1e-12));
        }
    }
}

TEST_CASE("backward error paths") {
    Tensor x = Tensor::from({2}, {1, 2}).set_requires_grad(true);
    Tape tape;
    Tape::Scope scope(tape);
    const Tensor y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), NotScalar);

    const Tensor leaf = Tensor::scalar(1.0);
    CHECK_THROWS_AS(tape.backward(leaf), DetachedTensor);
}

TEST_CASE("ops outside a tape scope are detached") {
    Tensor x = Tensor::scalar(2.0).set_requires_grad(true);
    const Tensor off_tape = mul(x, x);
    Tape tape;
    Tape::Scope scope(tape);
    CHECK_THROWS_AS(tape.backward(off_tape), DetachedTensor);
}

TEST_CASE("finite_diff_check on a quadratic") {
    Tensor x = Tensor::scalar(3.0).set_requires_grad(true);
    const double err = finite_diff_check([&] { return mul(x, x); }, {x}, 1e-4);
    CHECK(err < 1e-8);
}

TEST_CASE("finite_diff_check flags a severed gradient") {
    Tensor x = Tensor::scalar(3.0).set_requires_grad(true);
    const double err =
        finite_diff_check([&] { return add(sum_all(stop_gradient(mul(x, x))), mul(x, Tensor::scalar(0.0))); },
                          {x}, 1e-4);
    CHECK(err == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("finite_diff_check reports non-finite evaluations") {
    Tensor x = Tensor::scalar(1e200).set_requires_grad(true);
    CHECK_THROWS_AS(finite_diff_check([&] { return mul(x, x); }, {x}, 1e-4), NonFiniteValue);
}

TEST_CASE("every primitive passes a finite-difference check") {
    Rng rng(23);
    const double kTol = 1e-6;
    const double kH = 1e-4;

    SECTION("elementwise add/sub/mul with and without scalar broadcast") {
        Tensor a = rand_tensor({3, 4}, rng).set_requires_grad(true);
        Tensor b = rand_tensor({3, 4}, rng).set_requires_grad(true);
        Tensor s = rand_tensor({1}, rng).set_requires_grad(true);
        CHECK(finite_diff_check([&] { return weighted_sum(add(a, b), rng.split("w1")); }, {a, b}, kH) < kTol);
        CHECK(finite_diff_check([&] { return weighted_sum(sub(a, b), rng.split("w2")); }, {a, b}, kH) < kTol);
        CHECK(finite_diff_check([&] { return weighted_sum(mul(a, b), rng.split("w3")); }, {a, b}, kH) < kTol);
        CHECK(finite_diff_check([&] { return weighted_sum(mul(a, s), rng.split("w4")); }, {a, s}, kH) < kTol);
        CHECK(finite_diff_check([&] { return weighted_sum(add(s, b), rng.split("w5")); }, {s, b}, kH) < kTol);
        CHECK(finite_diff_check([&] { return weighted_sum(scale(a, -1.7), rng.split("w6")); }, {a}, kH) < kTol);
    }

    SECTION("matmul family") {
        Tensor a = rand_tensor({3, 4}, rng).set_requires_grad(true);
        Tensor b = rand_tensor({4, 5}, rng).set_requires_grad(true);
        Tensor c = rand_tensor({5, 4}, rng).set_requires_grad(true);
        CHECK(finite_diff_check([&] { return weighted_sum(matmul(a, b), rng.split("w7")); }, {a, b}, kH) < kTol);
        CHECK(finite_diff_check([&] { return weighted_sum(matmul_nt(a, c), rng.split("w8")); }, {a, c}, kH) < kTol);
    }

    SECTION("softmax, layer norm, gelu") {
        Tensor x = rand_tensor({3, 5}, rng).set_requires_grad(true);
        Tensor gain = rand_tensor({5}, rng).set_requires_grad(true);
        Tensor bias = rand_tensor({5}, rng).set_requires_grad(true);
        CHECK(finite_diff_check([&] { return weighted_sum(softmax_rows(x), rng.split("w9")); }, {x}, kH) < kTol);
        CHECK(finite_diff_check([&] { return weighted_sum(layer_norm(x, gain, bias, 1e-7), rng.split("w10")); },
                                {x, gain, bias}, kH) < kTol);
        CHECK(finite_diff_check([&] { return weighted_sum(gelu(x), rng.split("w11")); }, {x}, kH) < kTol);
    }

    SECTION("gather, slices, concat, row ops") {
        Tensor table = rand_tensor({6, 3}, rng).set_requires_grad(true);
        Tensor m = rand_tensor({4, 6}, rng).set_requires_grad(true);
        Tensor v = rand_tensor({6}, rng).set_requires_grad(true);
        Tensor p0 = rand_tensor({4, 2}, rng).set_requires_grad(true);
        Tensor p1 = rand_tensor({4, 3}, rng).set_requires_grad(true);
        CHECK(finite_diff_check([&] { return weighted_sum(gather_rows(table, {4, 0, 0, 5}), rng.split("w12")); },
                                {table}, kH) < kTol);
        CHECK(finite_diff_check([&] { return weighted_sum(slice_rows(m, 1, 2), rng.split("w13")); }, {m}, kH) < kTol);
        CHECK(finite_diff_check([&] { return weighted_sum(slice_cols(m, 2, 3), rng.split("w14")); }, {m}, kH) < kTol);
        CHECK(finite_diff_check([&] { return weighted_sum(concat_cols({p0, p1}), rng.split("w15")); }, {p0, p1}, kH) <
              kTol);
        CHECK(finite_diff_check([&] { return weighted_sum(add_rowvec(m, v), rng.split("w16")); }, {m, v}, kH) < kTol);
    }

    SECTION("constants, cross entropy, normalization, mixing") {
        Tensor logits = rand_tensor({4, 6}, rng).set_requires_grad(true);
        Tensor x = rand_tensor({3, 4}, rng).set_requires_grad(true);
        Tensor h0 = rand_tensor({3, 4}, rng).set_requires_grad(true);
        Tensor h1 = rand_tensor({3, 4}, rng).set_requires_grad(true);
        Tensor alpha = rand_tensor({2}, rng).set_requires_grad(true);
        std::vector<double> mask(12);
        for (double& mv : mask) {
            mv = rng.next_double() < 0.5 ? 0.0 : 1.0;
        }
        CHECK(finite_diff_check([&] { return cross_entropy_sum(logits, {2, -1, 0, 5}); }, {logits}, kH) <
              kTol);
        CHECK(finite_diff_check([&] { return weighted_sum(unit_normalize_rows(x, 1e-7), rng.split("w17")); }, {x}, kH) <
              kTol);
        CHECK(finite_diff_check([&] { return weighted_sum(convex_mix({h0, h1}, alpha), rng.split("w18")); },
                                {h0, h1, alpha}, kH) < kTol);
        CHECK(finite_diff_check([&] { return weighted_sum(mul_constant(x, mask), rng.split("w19")); }, {x}, kH) < kTol);
        CHECK(finite_diff_check([&] { return weighted_sum(add_constant(x, mask), rng.split("w20")); }, {x}, kH) < kTol);
        CHECK(finite_diff_check([&] { return weighted_sum(sum_all(x), rng.split("w21")); }, {x}, kH) < kTol);
    }
}

TEST_CASE("tape replay determinism is bitwise") {
    const auto run = [](std::vector<double>& grads_out) {
        Rng rng(101);
        Tensor a = rand_tensor({4, 4}, rng).set_requires_grad(true);
        Tensor b = rand_tensor({4, 4}, rng).set_requires_grad(true);
        Tape tape;
        Tape::Scope scope(tape);
        const Tensor y = layer_norm(gelu(matmul(a, b)), Tensor::full({4}, 1.0), Tensor::zeros({4}), 1e-7);
        const Tensor loss = sum_all(softmax_rows(y));
        tape.backward(loss);
        std::vector<double> all;
        all.push_back(loss.item());
        for (std::size_t i = 0; i < a.numel(); ++i) {
            all.push_back(a.grad_at(i));
        }
        for (std::size_t i = 0; i < b.numel(); ++i) {
            all.push_back(b.grad_at(i));
        }
        grads_out = all;
    };
    std::vector<double> first;
    std::vector<double> second;
    run(first);
    run(second);
    REQUIRE(first.size() == second.size());
    for (std::size_t i = 0; i < first.size(); ++i) {
        CHECK(std::memcmp(&first[i], &second[i], sizeof(double)) == 0);
    }
}

TEST_CASE("empty tensors flow through shape-preserving ops") {
    const Tensor empty = Tensor::zeros({0, 4});
    CHECK(empty.numel() == 0);
    const Tensor y = layer_norm(empty, Tensor::full({4}, 1.0), Tensor::zeros({4}), 1e-7);
    CHECK(y.shape() == Shape{0, 4});
    const Tensor g = gather_rows(Tensor::zeros({3, 4}), {});
    CHECK(g.shape() == Shape{0, 4});
}
