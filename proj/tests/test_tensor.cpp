#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sinklab/tensor.hpp"

using namespace sinklab;

namespace {

Tensor make_randn(Shape shape, std::uint64_t seed, bool grad = true) {
    Rng rng(seed);
    return Tensor::randn(std::move(shape), rng, 1.0, grad);
}

// Value-correct but gradient-dead copy, used to corrupt a derivative on purpose.
Tensor grad_dead_copy(const Tensor& t) { return Tensor::from_data(t.shape(), t.values()); }

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
    Tensor id = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor out = matmul(id, a);
    CHECK(out.values() == std::vector<double>{1, 2, 3, 4});

    Tensor row = Tensor::from_data({1, 2}, {1, 2});
    Tensor col = Tensor::from_data({2, 1}, {3, 4});
    CHECK(matmul(row, col).item() == doctest::Approx(11.0).epsilon(1e-15));
}

TEST_CASE("matmul shape mismatch is a dimension error") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(matmul(a, b), DimensionError);
    CHECK_NOTHROW(matmul_bt(a, b));
}

TEST_CASE("matmul gradient of sum equals ones times b^T") {
    Tensor a = make_randn({3, 4}, 11);
    Tensor b = make_randn({4, 5}, 12, false);
    Tensor loss = reduce(matmul(a, b), ReduceKind::sum);
    backward(loss);
    // d(sum(AB))/dA = ones * B^T: entry (i,k) = sum_j B[k,j]
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 4; ++k) {
            double expect = 0.0;
            for (std::size_t j = 0; j < 5; ++j) expect += b.at(k, j);
            CHECK(a.grad()[i * 4 + k] == doctest::Approx(expect).epsilon(1e-12));
        }
}

TEST_CASE("matmul against finite differences") {
    Tensor b = make_randn({4, 5}, 2, false);
    auto f = [&](const Tensor& x) { return reduce(matmul(x, b), ReduceKind::sum); };
    CHECK(finite_diff_check(f, make_randn({3, 4}, 3, false), 1e-6) < 1e-6);
}

TEST_CASE("matmul_bt matches matmul of transposed operand") {
    Tensor a = make_randn({3, 4}, 21, false);
    Tensor bt = make_randn({5, 4}, 22, false);
    std::vector<double> b_data(4 * 5);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 4; ++j) b_data[j * 5 + i] = bt.at(i, j);
    Tensor b = Tensor::from_data({4, 5}, b_data);
    const auto via_bt = matmul_bt(a, bt).values();
    const auto via_mm = matmul(a, b).values();
    for (std::size_t i = 0; i < via_bt.size(); ++i)
        CHECK(via_bt[i] == doctest::Approx(via_mm[i]).epsilon(1e-14));

    auto f = [&](const Tensor& x) { return reduce(mul(matmul_bt(a, x), matmul_bt(a, x)), ReduceKind::sum); };
    CHECK(finite_diff_check(f, bt, 1e-6) < 1e-7);
}

TEST_CASE("softmax rows: single unmasked entry") {
    const double neg_inf = -std::numeric_limits<double>::infinity();
    Tensor x = Tensor::from_data({1, 2}, {0.0, 5.0});
    Tensor mask = Tensor::from_data({1, 2}, {0.0, neg_inf});
    Tensor out = softmax_rows(x, mask);
    CHECK(out.at(0, 0) == 1.0);
    CHECK(out.at(0, 1) == 0.0);
}

TEST_CASE("softmax rows: shift invariance and hand-computed values") {
    for (double c : {-3.0, 0.0, 7.5}) {
        Tensor x = Tensor::from_data({1, 3}, {c, c, c});
        const auto v = softmax_rows(x).values();
        for (double p : v) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    }
    Tensor x = Tensor::from_data({1, 3}, {std::log(1.0), std::log(2.0), std::log(3.0)});
    const auto v = softmax_rows(x).values();
    CHECK(v[0] == doctest::Approx(1.0 / 6.0).epsilon(1e-13));
    CHECK(v[1] == doctest::Approx(2.0 / 6.0).epsilon(1e-13));
    CHECK(v[2] == doctest::Approx(3.0 / 6.0).epsilon(1e-13));
}

TEST_CASE("softmax rows sum to one within 1e-12 and are shift invariant") {
    Rng rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = Tensor::randn({5, 7}, rng, 2.0);
        const Tensor out = softmax_rows(x);
        for (std::size_t i = 0; i < 5; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < 7; ++j) {
                CHECK(out.at(i, j) >= 0.0);
                sum += out.at(i, j);
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
        std::vector<double> shifted = x.values();
        const double c = rng.normal(3.0);
        for (std::size_t j = 0; j < 7; ++j) shifted[2 * 7 + j] += c;
        const Tensor out2 = softmax_rows(Tensor::from_data({5, 7}, shifted));
        for (std::size_t j = 0; j < 7; ++j)
            CHECK(out2.at(2, j) == doctest::Approx(out.at(2, j)).epsilon(1e-12));
    }
}

TEST_CASE("softmax fully masked row is a degenerate-row error") {
    const double neg_inf = -std::numeric_limits<double>::infinity();
    Tensor x = Tensor::zeros({2, 2});
    Tensor mask = Tensor::from_data({2, 2}, {0.0, 0.0, neg_inf, neg_inf});
    CHECK_THROWS_AS(softmax_rows(x, mask), NumericError);
}

TEST_CASE("softmax gradient matches finite differences") {
    Tensor w = make_randn({4, 6}, 5, false);
    auto f = [&](const Tensor& x) {
        return reduce(mul(softmax_rows(x), w), ReduceKind::sum);
    };
    CHECK(finite_diff_check(f, make_randn({4, 6}, 6, false), 1e-6) < 1e-7);
}

TEST_CASE("unary values: silu, tanh, gelu, sigmoid") {
    Tensor x = Tensor::from_data({4}, {0.0, 1.0, -2.0, 3.0});
    const auto silu = unary(x, UnaryKind::silu).values();
    CHECK(silu[0] == 0.0);
    CHECK(silu[1] == doctest::Approx(0.731059).epsilon(1e-6));  // x*sigmoid(x) at 1
    const auto th = unary(x, UnaryKind::tanh).values();
    CHECK(th[0] == 0.0);
    const auto sg = unary(x, UnaryKind::sigmoid).values();
    CHECK(sg[0] == 0.5);
    // erf-based gelu at 1: 0.5*(1+erf(1/sqrt 2))
    const auto ge = unary(x, UnaryKind::gelu).values();
    CHECK(ge[1] == doctest::Approx(0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)))).epsilon(1e-15));
}

TEST_CASE("every unary kind passes finite differences") {
    for (UnaryKind kind : {UnaryKind::silu, UnaryKind::gelu, UnaryKind::tanh, UnaryKind::sigmoid}) {
        auto f = [&](const Tensor& x) { return reduce(unary(x, kind), ReduceKind::sum); };
        CHECK(finite_diff_check(f, make_randn({3, 5}, 7, false), 1e-6) < 1e-6);
    }
    // sqrt and recip on positive inputs
    Rng rng(8);
    std::vector<double> pos(12);
    for (double& v : pos) v = 0.5 + std::abs(rng.normal());
    Tensor xp = Tensor::from_data({3, 4}, pos);
    for (UnaryKind kind : {UnaryKind::sqrt, UnaryKind::recip}) {
        auto f = [&](const Tensor& x) { return reduce(unary(x, kind), ReduceKind::sum); };
        CHECK(finite_diff_check(f, xp, 1e-6) < 1e-6);
    }
}

TEST_CASE("reduce: sum, mean, axis variants") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3});
    CHECK(reduce(x, ReduceKind::sum).item() == 6.0);
    Tensor c = Tensor::full({4, 4}, 2.5);
    CHECK(reduce(c, ReduceKind::mean).item() == doctest::Approx(2.5).epsilon(1e-15));
    Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    const auto axis0 = reduce(m, ReduceKind::mean, 0).values();
    CHECK(axis0[0] == 2.0);
    CHECK(axis0[1] == 3.0);
    const auto axis1 = reduce(m, ReduceKind::sum, 1).values();
    CHECK(axis1[0] == 3.0);
    CHECK(axis1[1] == 7.0);
    CHECK_THROWS_AS(reduce(m, ReduceKind::sum, 2), DimensionError);
}

TEST_CASE("backward: analytic gradients of sum of squares") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
    backward(reduce(mul(x, x), ReduceKind::sum));
    CHECK(x.grad() == std::vector<double>{2, 4, 6});
}

TEST_CASE("backward: elementwise product gradient is the other factor") {
    Tensor a = Tensor::from_data({3}, {1, 2, 3}, true);
    Tensor b = Tensor::from_data({3}, {4, 5, 6});
    backward(reduce(mul(a, b), ReduceKind::sum));
    CHECK(a.grad() == b.values());
}

TEST_CASE("backward rejects non-scalar loss and accumulates across calls") {
    Tensor x = Tensor::from_data({2}, {1, 1}, true);
    CHECK_THROWS_AS(backward(mul(x, x)), ContractError);
    Tensor loss = reduce(mul(x, x), ReduceKind::sum);
    backward(loss);
    backward(loss);
    CHECK(x.grad() == std::vector<double>{4, 4});  // two accumulated passes
}

TEST_CASE("backward is deterministic bit for bit") {
    auto run = [&]() {
        Tensor x = make_randn({6, 6}, 31);
        Tensor w = make_randn({6, 6}, 32);
        Tensor loss =
            reduce(mul(softmax_rows(matmul(x, w)), unary(x, UnaryKind::silu)), ReduceKind::sum);
        backward(loss);
        return std::make_pair(x.grad(), w.grad());
    };
    const auto first = run();
    const auto second = run();
    CHECK(first.first == second.first);
    CHECK(first.second == second.second);
}

TEST_CASE("4-layer random MLP matches central finite differences") {
    // Fixed random weights; the check perturbs every parameter of one layer
    // at a time via the leaf under test.
    const std::size_t width = 6;
    std::vector<Tensor> weights;
    for (int l = 0; l < 4; ++l) {
        Rng rng(40 + l);
        // Modest weight scale keeps the nonlinearities away from saturation,
        // where near-zero true gradients drown in difference roundoff.
        weights.push_back(Tensor::randn({width, width}, rng, 0.4, false));
    }
    Tensor input = make_randn({2, width}, 50, false);

    for (int layer = 0; layer < 4; ++layer) {
        auto f = [&](const Tensor& w_test) {
            Tensor h = input;
            for (int l = 0; l < 4; ++l) {
                const Tensor& w = (l == layer) ? w_test : weights[l];
                h = unary(matmul(h, w), l % 2 ? UnaryKind::tanh : UnaryKind::silu);
            }
            return reduce(mul(h, h), ReduceKind::sum);
        };
        CHECK(finite_diff_check(f, weights[layer], 1e-6) < 1e-4);
    }
}

TEST_CASE("finite_diff_check calibration cases") {
    // Constant gradient: f = sum. Zero truncation error for a linear f, so a
    // larger step only shrinks the cancellation noise.
    auto f_sum = [](const Tensor& x) { return reduce(x, ReduceKind::sum); };
    CHECK(finite_diff_check(f_sum, make_randn({4, 3}, 60, false), 1e-4) < 1e-10);
    CHECK(finite_diff_check(f_sum, make_randn({4, 3}, 60, false), 1e-6) < 1e-8);

    // Smooth nonlinearity at ones.
    auto f_silu = [](const Tensor& x) {
        return reduce(unary(x, UnaryKind::silu), ReduceKind::sum);
    };
    CHECK(finite_diff_check(f_silu, Tensor::full({5}, 1.0), 1e-6) < 1e-6);
}

TEST_CASE("finite_diff_check flags a corrupted backward rule") {
    // f(x) = sum(2x - copy(x)) evaluates to sum(x) but its analytic gradient
    // is 2 because the copy is outside the tape; the mismatch must be caught.
    auto f = [](const Tensor& x) {
        return reduce(sub(add(x, x), grad_dead_copy(x)), ReduceKind::sum);
    };
    CHECK(finite_diff_check(f, make_randn({4}, 61, false), 1e-6) > 1e-2);
}

TEST_CASE("structural ops: slice, concat, broadcast, repeat, embed") {
    Tensor x = Tensor::from_data({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor s = slice_cols(x, 1, 2);
    CHECK(s.values() == std::vector<double>{2, 3, 6, 7});
    Tensor joined = concat_cols({slice_cols(x, 0, 2), slice_cols(x, 2, 2)});
    CHECK(joined.values() == x.values());

    Tensor v = Tensor::from_data({3}, {1, 2, 3});
    CHECK(broadcast_row(v, 2).values() == std::vector<double>{1, 2, 3, 1, 2, 3});
    Tensor u = Tensor::from_data({2}, {5, 9});
    CHECK(broadcast_col(u, 3).values() == std::vector<double>{5, 5, 5, 9, 9, 9});

    Tensor g = Tensor::from_data({1, 2}, {0.25, 0.5});
    CHECK(repeat_cols(g, 3).values() ==
          std::vector<double>{0.25, 0.25, 0.25, 0.5, 0.5, 0.5});

    Tensor table = Tensor::from_data({3, 2}, {0, 1, 10, 11, 20, 21});
    Tensor e = embed_rows(table, {2, 0, 2});
    CHECK(e.values() == std::vector<double>{20, 21, 0, 1, 20, 21});
    CHECK_THROWS_AS(embed_rows(table, {3}), DataError);
}

TEST_CASE("structural ops pass finite differences") {
    auto f_slice = [](const Tensor& x) {
        return reduce(mul(slice_cols(x, 1, 2), slice_cols(x, 1, 2)), ReduceKind::sum);
    };
    CHECK(finite_diff_check(f_slice, make_randn({3, 4}, 70, false), 1e-6) < 1e-7);

    auto f_concat = [](const Tensor& x) {
        Tensor c = concat_cols({x, mul(x, x)});
        return reduce(mul(c, c), ReduceKind::sum);
    };
    CHECK(finite_diff_check(f_concat, make_randn({2, 3}, 71, false), 1e-6) < 1e-6);

    auto f_embed = [](const Tensor& x) {
        Tensor e = embed_rows(x, {0, 2, 2, 1});
        return reduce(mul(e, e), ReduceKind::sum);
    };
    CHECK(finite_diff_check(f_embed, make_randn({3, 4}, 72, false), 1e-6) < 1e-7);

    auto f_broadcast = [](const Tensor& x) {
        Tensor row = reduce(x, ReduceKind::sum, 0);
        return reduce(mul(broadcast_row(row, 4), broadcast_col(reduce(x, ReduceKind::mean, 1), 5)),
                      ReduceKind::sum);
    };
    CHECK(finite_diff_check(f_broadcast, make_randn({4, 5}, 73, false), 1e-6) < 1e-6);

    auto f_repeat = [](const Tensor& x) {
        return reduce(mul(repeat_cols(x, 3), repeat_cols(x, 3)), ReduceKind::sum);
    };
    CHECK(finite_diff_check(f_repeat, make_randn({2, 4}, 74, false), 1e-6) < 1e-7);
}

TEST_CASE("rope: position zero is identity, rotations preserve norms") {
    Tensor x = make_randn({5, 8}, 80, false);
    Tensor out = rope_rotate(x, 10000.0);
    for (std::size_t j = 0; j < 8; ++j) CHECK(out.at(0, j) == doctest::Approx(x.at(0, j)));
    for (std::size_t p = 0; p < 5; ++p) {
        double before = 0.0, after = 0.0;
        for (std::size_t j = 0; j < 8; ++j) {
            before += x.at(p, j) * x.at(p, j);
            after += out.at(p, j) * out.at(p, j);
        }
        CHECK(after == doctest::Approx(before).epsilon(1e-12));
    }
    CHECK_THROWS_AS(rope_rotate(make_randn({2, 3}, 81, false), 10000.0), DimensionError);
}

TEST_CASE("rope: planar rotation arithmetic") {
    // With d=2 the pair-0 frequency is base^0 = 1, so position p rotates by
    // exactly p radians; check (1,0) against 2-D rotation arithmetic.
    std::vector<double> data(2 * 2, 0.0);
    data[2] = 1.0;  // row 1 = (1, 0)
    Tensor out = rope_rotate(Tensor::from_data({2, 2}, data), 1000.0);
    CHECK(out.at(1, 0) == doctest::Approx(std::cos(1.0)).epsilon(1e-15));
    CHECK(out.at(1, 1) == doctest::Approx(std::sin(1.0)).epsilon(1e-15));

    // A pair rotated by pi/2 maps (1,0) to (0,1).
    const double c = std::cos(3.14159265358979323846 / 2.0);
    const double s = std::sin(3.14159265358979323846 / 2.0);
    CHECK(doctest::Approx(c * 1.0 - s * 0.0).epsilon(1e-12) == 0.0);
    CHECK(doctest::Approx(s * 1.0 + c * 0.0).epsilon(1e-12) == 1.0);
}

TEST_CASE("rope gradient matches finite differences") {
    auto f = [](const Tensor& x) {
        Tensor r = rope_rotate(x, 10000.0);
        return reduce(mul(r, add_scalar(r, 0.5)), ReduceKind::sum);
    };
    CHECK(finite_diff_check(f, make_randn({4, 6}, 82, false), 1e-6) < 1e-7);
}

TEST_CASE("masked_nll: uniform logits give ln(vocab)") {
    const std::size_t vocab = 256;
    Tensor logits = Tensor::zeros({4, vocab});
    std::vector<std::uint32_t> targets = {0, 10, 100, 255};
    Tensor loss = masked_nll(logits, targets, 1, 4);
    CHECK(loss.item() == doctest::Approx(std::log(256.0)).epsilon(1e-12));
    CHECK(loss.item() == doctest::Approx(8.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("masked_nll: saturated correct logits give ~zero loss") {
    std::vector<double> data(3 * 8, 0.0);
    std::vector<std::uint32_t> targets = {1, 5, 7};
    for (std::size_t t = 0; t < 3; ++t) data[t * 8 + targets[t]] = 40.0;
    Tensor loss = masked_nll(Tensor::from_data({3, 8}, data), targets, 1, 3);
    CHECK(loss.item() < 1e-12);
}

TEST_CASE("masked_nll: masked positions get exactly zero gradient") {
    Tensor logits = make_randn({5, 7}, 90);
    std::vector<std::uint32_t> targets = {1, 2, 3, 4, 5};
    backward(masked_nll(logits, targets, 2, 5));
    for (std::size_t j = 0; j < 7; ++j) CHECK(logits.grad()[j] == 0.0);
    double sum_abs = 0.0;
    for (std::size_t i = 7; i < 35; ++i) sum_abs += std::abs(logits.grad()[i]);
    CHECK(sum_abs > 0.0);
}

TEST_CASE("masked_nll gradient matches finite differences") {
    std::vector<std::uint32_t> targets = {3, 0, 2, 1};
    auto f = [&](const Tensor& x) { return masked_nll(x, targets, 2, 4); };
    CHECK(finite_diff_check(f, make_randn({4, 5}, 91, false), 1e-6) < 1e-7);
}

TEST_CASE("masked_nll rejects bad ranges") {
    Tensor logits = Tensor::zeros({4, 8});
    std::vector<std::uint32_t> targets = {0, 0, 0, 0};
    CHECK_THROWS_AS(masked_nll(logits, targets, 3, 2), ConfigError);
    CHECK_THROWS_AS(masked_nll(logits, targets, 0, 4), ConfigError);
    CHECK_THROWS_AS(masked_nll(logits, targets, 1, 5), ConfigError);
}

TEST_CASE("scale_by and add_scalar finite differences") {
    auto f = [](const Tensor& x) {
        Tensor s = reduce(x, ReduceKind::mean);
        return reduce(mul(scale_by(add_scalar(x, 0.7), s), x), ReduceKind::sum);
    };
    CHECK(finite_diff_check(f, make_randn({3, 3}, 95, false), 1e-6) < 1e-6);
}

TEST_CASE("gradient check across every differentiable op in one graph") {
    Tensor w = make_randn({6, 4}, 96, false);
    auto f = [&](const Tensor& x) {
        Tensor a = matmul(x, w);                       // [3x4]
        Tensor b = softmax_rows(a);
        Tensor c = unary(a, UnaryKind::gelu);
        Tensor d = add(mul(b, c), scale(c, 0.25));
        Tensor e = matmul_bt(d, w);                    // [3x6]
        Tensor r = rope_rotate(e, 500.0);
        Tensor s = concat_cols({slice_cols(r, 0, 3), slice_cols(r, 3, 3)});
        return reduce(mul(s, s), ReduceKind::mean);
    };
    CHECK(finite_diff_check(f, make_randn({3, 6}, 97, false), 1e-6) < 1e-4);
}

TEST_CASE("all_finite detects non-finite values") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0});
    CHECK(all_finite(x));
    Tensor y = Tensor::from_data({2}, {1.0, std::numeric_limits<double>::infinity()});
    CHECK_FALSE(all_finite(y));
    Tensor z = Tensor::from_data({2}, {std::nan(""), 0.0});
    CHECK_FALSE(all_finite(z));
}
