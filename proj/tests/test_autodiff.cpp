// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 TailForge Contributors

#include <catch2/catch_amalgamated.hpp>

#include "tailforge/autodiff.hpp"
#include "tailforge/gradcheck.hpp"

using namespace tailforge;
using namespace tailforge::ad;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

} // namespace

TEST_CASE("softmax of equal logits is uniform") {
    Tape t;
    Var x = t.input({1, 2}, {0.0, 0.0}, false);
    Var y = softmax_rows(x);
    CHECK(y.values()[0] == Catch::Approx(0.5).margin(1e-15));
    CHECK(y.values()[1] == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("softmax rows sum to one and log_softmax matches log(softmax)") {
    Rng rng(7);
    Tape t;
    Var x = t.input({4, 6}, random_vec(rng, 24, -3.0, 3.0), false);
    Var sm = softmax_rows(x);
    Var lsm = log_softmax_rows(x);
    for (std::size_t r = 0; r < 4; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < 6; ++j) s += sm.values()[r * 6 + j];
        CHECK(s == Catch::Approx(1.0).margin(1e-9));
    }
    for (std::size_t i = 0; i < 24; ++i)
        CHECK(lsm.values()[i] == Catch::Approx(std::log(sm.values()[i])).margin(1e-9));
}

TEST_CASE("l2 normalize: 3-4-5 triangle") {
    Tape t;
    Var x = t.input({1, 2}, {3.0, 4.0}, false);
    Var y = l2_normalize_rows(x);
    CHECK(y.values()[0] == Catch::Approx(0.6).margin(1e-12));
    CHECK(y.values()[1] == Catch::Approx(0.8).margin(1e-12));
}

TEST_CASE("l2 normalize rejects a zero row") {
    Tape t;
    Var x = t.input({2, 3}, {1.0, 0.0, 0.0, 0.0, 0.0, 0.0}, false);
    CHECK_THROWS_AS(l2_normalize_rows(x), NumericError);
}

TEST_CASE("matmul by identity is identity") {
    Rng rng(3);
    Tape t;
    auto a_vals = random_vec(rng, 9, -2.0, 2.0);
    Var eye = t.input({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}, false);
    Var a = t.input({3, 3}, a_vals, false);
    Var c = matmul(eye, a);
    for (std::size_t i = 0; i < 9; ++i) CHECK(c.values()[i] == a_vals[i]);
}

TEST_CASE("shape mismatch errors name the operation and both shapes") {
    Tape t;
    Var a = t.input({2, 3}, std::vector<double>(6, 1.0), false);
    Var b = t.input({4, 2}, std::vector<double>(8, 1.0), false);
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,2]") != std::string::npos);
    }
}

TEST_CASE("backward of sum is all-ones") {
    Tape t;
    Var x = t.input({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Var s = sum_all(x);
    t.backward(s);
    for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of mean of squares: x=[1,2] -> grad [1,2]") {
    Tape t;
    Var x = t.input({2}, {1.0, 2.0}, true);
    Var y = mean_all(mul(x, x));
    t.backward(y);
    CHECK(x.grad()[0] == Catch::Approx(1.0).margin(1e-12));
    CHECK(x.grad()[1] == Catch::Approx(2.0).margin(1e-12));
}

TEST_CASE("relu gates the gradient and its subgradient at 0 is 0") {
    Tape t;
    Var x = t.input({3}, {-1.0, 2.0, 0.0}, true);
    Var s = sum_all(relu(x));
    t.backward(s);
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 1.0);
    CHECK(x.grad()[2] == 0.0);
}

TEST_CASE("backward requires a scalar root") {
    Tape t;
    Var x = t.input({2}, {1.0, 2.0}, true);
    Var y = mul(x, x);
    CHECK_THROWS_AS(t.backward(y), ShapeError);
}

TEST_CASE("running backward twice without zeroing doubles the gradients") {
    Rng rng(11);
    Tape t;
    Var x = t.input({2, 2}, random_vec(rng, 4), true);
    Var y = mean_all(mul(exp(x), x));
    t.backward(y);
    auto g1 = x.grad();
    t.backward(y);
    for (std::size_t i = 0; i < g1.size(); ++i)
        CHECK(x.grad()[i] == Catch::Approx(2.0 * g1[i]).margin(1e-15));
    t.zero_grad();
    for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("gradient accumulates additively when a tensor is used twice") {
    Tape t;
    Var x = t.input({2}, {1.0, 3.0}, true);
    Var y = sum_all(add(x, x));
    t.backward(y);
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("gradient linearity: grad(a*f + b*g) = a*grad(f) + b*grad(g)") {
    Rng rng(23);
    for (int trial = 0; trial < 5; ++trial) {
        auto x0 = random_vec(rng, 6, 0.2, 2.0);
        double ca = rng.uniform(-2.0, 2.0), cb = rng.uniform(-2.0, 2.0);

        auto f = [](Tape& t, const Var& x) { return sum_all(mul(x, x)); };
        auto g = [](Tape& t, const Var& x) { return mean_all(exp(x)); };

        Tape t1;
        Var x1 = t1.input({2, 3}, x0, true);
        t1.backward(f(t1, x1));
        auto gf = x1.grad();

        Tape t2;
        Var x2 = t2.input({2, 3}, x0, true);
        t2.backward(g(t2, x2));
        auto gg = x2.grad();

        Tape t3;
        Var x3 = t3.input({2, 3}, x0, true);
        Var combo = add(scale(f(t3, x3), ca), scale(g(t3, x3), cb));
        t3.backward(combo);
        for (std::size_t i = 0; i < x0.size(); ++i)
            CHECK(x3.grad()[i] == Catch::Approx(ca * gf[i] + cb * gg[i]).margin(1e-10));
    }
}

TEST_CASE("determinism: identical inputs give bit-identical outputs and gradients") {
    auto run = [](std::vector<double>& out_vals, std::vector<double>& out_grad) {
        Tape t;
        Var x = t.input({3, 3}, {0.3, -1.2, 0.7, 2.0, 0.1, -0.4, 1.1, 0.9, -2.2}, true);
        Var w = t.input({3, 2}, {0.5, -0.25, 1.5, 0.75, -0.1, 0.3}, true);
        Var y = matmul(relu(x), w);
        Var loss = mean_all(mul(y, y));
        t.backward(loss);
        out_vals = y.values();
        out_grad = w.grad();
    };
    std::vector<double> v1, g1, v2, g2;
    run(v1, g1);
    run(v2, g2);
    CHECK(v1 == v2);
    CHECK(g1 == g2);
}

TEST_CASE("grad_check is exact for linear functions") {
    Rng rng(5);
    auto x0 = random_vec(rng, 8);
    double err = grad_check([](Tape&, const Var& x) { return sum_all(x); }, {2, 4}, x0);
    CHECK(err < 1e-10);
}

TEST_CASE("grad_check rejects non-finite functions") {
    std::vector<double> x0{-1.0};
    CHECK_THROWS_AS(grad_check([](Tape&, const Var& x) { return sum_all(log(x)); }, {1}, x0),
                    NumericError);
}

TEST_CASE("every primitive passes grad_check away from kinks") {
    Rng rng(41);
    const double tol = 1e-4;

    SECTION("add / sub / mul / scale") {
        auto x0 = random_vec(rng, 12);
        auto other = random_vec(rng, 12);
        auto bias = random_vec(rng, 4);
        CHECK(grad_check([&](Tape& t, const Var& x) {
                  return sum_all(mul(add(x, t.input({3, 4}, other, true)), x));
              }, {3, 4}, x0) < tol);
        CHECK(grad_check([&](Tape& t, const Var& x) {
                  return mean_all(mul(sub(x, t.input({3, 4}, other, true)), x));
              }, {3, 4}, x0) < tol);
        CHECK(grad_check([&](Tape& t, const Var& x) { return sum_all(scale(mul(x, x), -1.7)); },
                         {3, 4}, x0) < tol);
        // row-broadcast add, gradient with respect to the bias
        CHECK(grad_check([&](Tape& t, const Var& b) {
                  Var m = t.input({3, 4}, x0, true);
                  return sum_all(mul(add(m, b), add(m, b)));
              }, {4}, bias) < tol);
    }

    SECTION("matmul") {
        auto a0 = random_vec(rng, 6);
        auto b0 = random_vec(rng, 8);
        auto rhs = random_vec(rng, 12);
        CHECK(grad_check([&](Tape& t, const Var& a) {
                  Var b = t.input({3, 4}, rhs, true);
                  return sum_all(matmul(a, b));
              }, {2, 3}, a0) < tol);
        CHECK(grad_check([&](Tape& t, const Var& b) {
                  Var a = t.input({3, 2}, a0, true);
                  return mean_all(mul(matmul(a, b), matmul(a, b)));
              }, {2, 4}, b0) < tol);
    }

    SECTION("conv2d including padding and bias") {
        auto x0 = random_vec(rng, 2 * 2 * 5 * 5);
        auto k0 = random_vec(rng, 3 * 2 * 3 * 3);
        auto b0 = random_vec(rng, 3);
        auto loss_through_conv = [&](Tape& t, const Var& x, const Var& k, const Var& b) {
            Var y = conv2d(x, k, &b, 1);
            return mean_all(mul(y, y));
        };
        CHECK(grad_check([&](Tape& t, const Var& x) {
                  Var k = t.input({3, 2, 3, 3}, k0, false);
                  Var b = t.input({3}, b0, false);
                  return loss_through_conv(t, x, k, b);
              }, {2, 2, 5, 5}, x0) < tol);
        CHECK(grad_check([&](Tape& t, const Var& k) {
                  Var x = t.input({2, 2, 5, 5}, x0, false);
                  Var b = t.input({3}, b0, false);
                  return loss_through_conv(t, x, k, b);
              }, {3, 2, 3, 3}, k0) < tol);
        CHECK(grad_check([&](Tape& t, const Var& b) {
                  Var x = t.input({2, 2, 5, 5}, x0, false);
                  Var k = t.input({3, 2, 3, 3}, k0, false);
                  return loss_through_conv(t, x, k, b);
              }, {3}, b0) < tol);
    }

    SECTION("relu away from 0") {
        std::vector<double> x0(10);
        for (auto& v : x0) {
            v = rng.uniform(-1.0, 1.0);
            if (std::abs(v) < 1e-3) v = 0.1; // keep clear of the kink
        }
        CHECK(grad_check([](Tape&, const Var& x) { return sum_all(mul(relu(x), relu(x))); },
                         {10}, x0) < tol);
    }

    SECTION("exp / log / reductions") {
        auto x0 = random_vec(rng, 6, 0.2, 2.0);
        CHECK(grad_check([](Tape&, const Var& x) { return mean_all(exp(x)); }, {6}, x0) < tol);
        CHECK(grad_check([](Tape&, const Var& x) { return sum_all(log(x)); }, {6}, x0) < tol);
        CHECK(grad_check([](Tape&, const Var& x) { return mean_all(mul(x, x)); }, {2, 3}, x0) <
              tol);
    }

    SECTION("global_avg_pool") {
        auto x0 = random_vec(rng, 2 * 3 * 4 * 4);
        CHECK(grad_check([](Tape&, const Var& x) {
                  Var p = global_avg_pool(x);
                  return sum_all(mul(p, p));
              }, {2, 3, 4, 4}, x0) < tol);
    }

    SECTION("softmax / log_softmax") {
        auto x0 = random_vec(rng, 12, -2.0, 2.0);
        auto w0 = random_vec(rng, 12);
        CHECK(grad_check([&](Tape& t, const Var& x) {
                  Var w = t.input({3, 4}, w0, false);
                  return sum_all(mul(softmax_rows(x), w));
              }, {3, 4}, x0) < tol);
        CHECK(grad_check([&](Tape& t, const Var& x) {
                  Var w = t.input({3, 4}, w0, false);
                  return sum_all(mul(log_softmax_rows(x), w));
              }, {3, 4}, x0) < tol);
    }

    SECTION("l2_normalize_rows") {
        auto x0 = random_vec(rng, 8, 0.5, 2.0);
        auto w0 = random_vec(rng, 8);
        CHECK(grad_check([&](Tape& t, const Var& x) {
                  Var w = t.input({2, 4}, w0, false);
                  return sum_all(mul(l2_normalize_rows(x), w));
              }, {2, 4}, x0) < tol);
    }

    SECTION("pairwise_sqdist") {
        auto a0 = random_vec(rng, 9, -1.0, 1.0);
        auto b0 = random_vec(rng, 6, 2.0, 3.0); // well separated, clamp never active
        auto w0 = random_vec(rng, 6);
        auto w1 = random_vec(rng, 9);
        CHECK(grad_check([&](Tape& t, const Var& a) {
                  Var b = t.input({2, 3}, b0, false);
                  return sum_all(pairwise_sqdist(a, b));
              }, {3, 3}, a0) < tol);
        CHECK(grad_check([&](Tape& t, const Var& b) {
                  Var a = t.input({3, 3}, a0, false);
                  Var w = t.input({3, 2}, w0, false);
                  return sum_all(mul(pairwise_sqdist(a, b), w));
              }, {2, 3}, b0) < tol);
        // both arguments are the same tensor
        CHECK(grad_check([&](Tape& t, const Var& a) {
                  Var w = t.input({3, 3}, w1, false);
                  return sum_all(mul(pairwise_sqdist(a, a), w));
              }, {3, 3}, a0) < tol);
    }

    SECTION("gather_rows accumulates over repeated indices") {
        auto x0 = random_vec(rng, 8);
        CHECK(grad_check([](Tape&, const Var& x) {
                  Var g = gather_rows(x, {1, 3, 1, 0});
                  return sum_all(mul(g, g));
              }, {4, 2}, x0) < tol);
    }

    SECTION("concat along both axes") {
        auto x0 = random_vec(rng, 6);
        auto y0 = random_vec(rng, 6);
        auto y1 = random_vec(rng, 4);
        CHECK(grad_check([&](Tape& t, const Var& x) {
                  Var y = t.input({2, 3}, y0, true);
                  Var c = concat(x, y, 0);
                  return sum_all(mul(c, c));
              }, {2, 3}, x0) < tol);
        CHECK(grad_check([&](Tape& t, const Var& x) {
                  Var y = t.input({2, 2}, y1, true);
                  Var c = concat(x, y, 1);
                  return mean_all(mul(c, c));
              }, {2, 3}, x0) < tol);
    }
}

TEST_CASE("conv2d matches a hand-computed 1x1 example") {
    Tape t;
    // single channel 2x2 input, single 2x2 kernel, no padding -> one output value
    Var x = t.input({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0}, false);
    Var k = t.input({1, 1, 2, 2}, {10.0, 20.0, 30.0, 40.0}, false);
    Var y = conv2d(x, k, nullptr, 0);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.values()[0] == Catch::Approx(1 * 10 + 2 * 20 + 3 * 30 + 4 * 40).margin(1e-12));
}

TEST_CASE("concat values are laid out correctly") {
    Tape t;
    Var a = t.input({2, 2}, {1, 2, 3, 4}, false);
    Var b = t.input({2, 1}, {5, 6}, false);
    Var c = concat(a, b, 1);
    REQUIRE(c.shape() == Shape{2, 3});
    CHECK(c.values() == std::vector<double>{1, 2, 5, 3, 4, 6});
}

TEST_CASE("graph records are topologically ordered and acyclic by construction") {
    Tape t;
    Var x = t.input({2}, {1.0, 2.0}, true);
    Var y = mul(add(x, x), x);
    sum_all(y);
    CHECK(t.num_nodes() == 4);
    CHECK(t.num_records() == 3);
}
