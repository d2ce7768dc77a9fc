#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "pushpull/grad_check.hpp"
#include "pushpull/rng.hpp"
#include "pushpull/tensor.hpp"

using namespace pushpull;

namespace {

Tensor leaf(Shape shape, std::vector<double> v) { return Tensor::from_values(std::move(shape), std::move(v), true); }

}  // namespace

TEST_CASE("matmul forward") {
    SECTION("identity leaves any 2x2 matrix unchanged") {
        const Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
        const Tensor m = Tensor::from_values({2, 2}, {3.5, -1, 2, 7});
        const Tensor out = matmul(eye, m);
        REQUIRE(out.values() == m.values());
    }
    SECTION("hand-evaluated 2x2 by 2x1") {
        const Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
        const Tensor b = Tensor::from_values({2, 1}, {5, 6});
        const Tensor out = matmul(a, b);
        REQUIRE(out.shape() == Shape{2, 1});
        REQUIRE(out.values()[0] == 17.0);
        REQUIRE(out.values()[1] == 39.0);
    }
    SECTION("inner-dimension mismatch names both shapes") {
        const Tensor a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
        const Tensor b = Tensor::from_values({2, 2}, {1, 2, 3, 4});
        REQUIRE_THROWS_WITH(matmul(a, b), Catch::Matchers::ContainsSubstring("[2x3]") &&
                                              Catch::Matchers::ContainsSubstring("[2x2]"));
    }
}

TEST_CASE("matmul gradient matches central differences") {
    RngStream rng(42);
    Tensor a = Tensor::zeros({3, 4}, true);
    Tensor b = Tensor::zeros({4, 2}, true);
    for (double& v : a.values()) v = rng.gaussian();
    for (double& v : b.values()) v = rng.gaussian();
    auto program = [&]() { return sum(matmul(a, b)); };
    const auto report = grad_check(program, {{"a", a}, {"b", b}}, 1e-6);
    CAPTURE(report.max_rel_err);
    REQUIRE(report.pass);
}

TEST_CASE("softmax_rows") {
    SECTION("symmetric input splits evenly") {
        const Tensor out = softmax_rows(Tensor::from_values({2}, {0, 0}));
        REQUIRE(out.values()[0] == Catch::Approx(0.5).margin(1e-15));
        REQUIRE(out.values()[1] == Catch::Approx(0.5).margin(1e-15));
    }
    SECTION("direct evaluation of [1,2]") {
        const Tensor out = softmax_rows(Tensor::from_values({2}, {1, 2}));
        REQUIRE(out.values()[0] == Catch::Approx(0.26894).margin(1e-5));
        REQUIRE(out.values()[1] == Catch::Approx(0.73106).margin(1e-5));
    }
    SECTION("shift invariance") {
        RngStream rng(7);
        std::vector<double> v(6);
        for (double& x : v) x = rng.uniform(-3, 3);
        const Tensor base = softmax_rows(Tensor::from_values({2, 3}, v));
        for (double& x : v) x += 17.25;
        const Tensor shifted = softmax_rows(Tensor::from_values({2, 3}, v));
        for (int i = 0; i < base.size(); ++i) {
            REQUIRE(shifted.values()[i] == Catch::Approx(base.values()[i]).margin(1e-12));
        }
    }
    SECTION("masked entries are exactly zero and rows renormalize") {
        const Mask mask{1, 0, 1};
        const Tensor out = softmax_rows(Tensor::from_values({2, 3}, {1, 99, 1, 0, 99, 2}), &mask);
        REQUIRE(out.values()[1] == 0.0);
        REQUIRE(out.values()[4] == 0.0);
        REQUIRE(out.values()[0] + out.values()[2] == Catch::Approx(1.0).margin(1e-9));
        REQUIRE(out.values()[3] + out.values()[5] == Catch::Approx(1.0).margin(1e-9));
    }
    SECTION("rows sum to one within 1e-9 on random input") {
        RngStream rng(3);
        std::vector<double> v(40);
        for (double& x : v) x = rng.uniform(-30, 30);
        const Tensor out = softmax_rows(Tensor::from_values({5, 8}, v));
        for (int r = 0; r < 5; ++r) {
            double s = 0;
            for (int c = 0; c < 8; ++c) s += out.values()[static_cast<std::size_t>(r) * 8 + c];
            REQUIRE(s == Catch::Approx(1.0).margin(1e-9));
        }
    }
    SECTION("fully masked row is rejected") {
        const Mask mask{0, 0};
        REQUIRE_THROWS_AS(softmax_rows(Tensor::from_values({2}, {1, 2}), &mask), std::invalid_argument);
    }
    SECTION("gradient matches finite differences, with and without mask") {
        RngStream rng(11);
        Tensor x = Tensor::zeros({3, 4}, true);
        for (double& v : x.values()) v = rng.gaussian();
        const Mask mask{1, 1, 0, 1};
        Tensor w = Tensor::zeros({3, 4}, false);
        for (double& v : w.values()) v = rng.gaussian();
        auto program = [&]() { return sum(mul(softmax_rows(x, &mask), Tensor::from_values({3, 4}, w.values()))); };
        const auto report = grad_check(program, {{"x", x}}, 1e-6);
        REQUIRE(report.pass);
    }
}

TEST_CASE("mean_pool") {
    SECTION("single valid row passes through") {
        const Tensor s = Tensor::from_values({3, 2}, {9, 9, 1, 3, 9, 9});
        const Tensor out = mean_pool(s, {0, 1, 0});
        REQUIRE(out.values() == std::vector<double>{1, 3});
    }
    SECTION("hand evaluation of two valid rows") {
        const Tensor s = Tensor::from_values({2, 2}, {1, 3, 3, 5});
        const Tensor out = mean_pool(s, {1, 1});
        REQUIRE(out.values() == std::vector<double>{2, 4});
    }
    SECTION("invariant to padded-row values") {
        Tensor s = Tensor::from_values({3, 2}, {1, 3, 3, 5, 0, 0});
        const Tensor a = mean_pool(s, {1, 1, 0});
        s.values()[4] = 1e9;
        s.values()[5] = -77;
        const Tensor b = mean_pool(Tensor::from_values({3, 2}, s.values()), {1, 1, 0});
        REQUIRE(a.values() == b.values());
    }
    SECTION("empty valid set is rejected") {
        REQUIRE_THROWS_AS(mean_pool(Tensor::from_values({2, 2}, {1, 2, 3, 4}), {0, 0}), std::invalid_argument);
    }
}

TEST_CASE("mse") {
    SECTION("identical operands give zero") {
        const Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
        REQUIRE(mse(a, a).value() == 0.0);
    }
    SECTION("hand evaluation") {
        const Tensor a = Tensor::from_values({2, 2}, {1, 0, 0, 1});
        const Tensor b = Tensor::from_values({2, 2}, {0.5, 0.5, 0.5, 0.5});
        REQUIRE(mse(a, b).value() == Catch::Approx(0.25).margin(1e-15));
    }
    SECTION("mask excludes entries from both the sum and the denominator") {
        const Tensor a = Tensor::from_values({2}, {3, 10});
        const Tensor b = Tensor::from_values({2}, {1, -999});
        const Mask mask{1, 0};
        REQUIRE(mse(a, b, &mask).value() == Catch::Approx(4.0).margin(1e-15));
    }
    SECTION("shape mismatch is a dimension error") {
        REQUIRE_THROWS_AS(mse(Tensor::from_values({2}, {1, 2}), Tensor::from_values({3}, {1, 2, 3})),
                          std::invalid_argument);
    }
}

TEST_CASE("cross_entropy") {
    SECTION("one-hot at gold gives zero") {
        REQUIRE(cross_entropy(Tensor::from_values({3}, {0, 1, 0}), 1).value() == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("uniform two-class prediction costs ln 2") {
        REQUIRE(cross_entropy(Tensor::from_values({2}, {0.5, 0.5}), 0).value() ==
                Catch::Approx(0.693147).margin(1e-6));
    }
    SECTION("out-of-range gold label is rejected") {
        REQUIRE_THROWS_AS(cross_entropy(Tensor::from_values({2}, {0.5, 0.5}), 2), std::invalid_argument);
        REQUIRE_THROWS_AS(cross_entropy(Tensor::from_values({2}, {0.5, 0.5}), -1), std::invalid_argument);
    }
    SECTION("gradient w.r.t. logits matches finite differences") {
        Tensor logits = leaf({4}, {0.3, -1.2, 0.7, 0.1});
        auto program = [&]() { return cross_entropy(softmax_rows(logits), 2); };
        const auto report = grad_check(program, {{"logits", logits}}, 1e-6);
        REQUIRE(report.pass);
    }
}

TEST_CASE("backward") {
    SECTION("root leaf receives gradient one") {
        Tensor x = leaf({1}, {3.0});
        x.backward();
        REQUIRE(x.grad()[0] == 1.0);
    }
    SECTION("sum of elementwise square") {
        Tensor x = leaf({2}, {1, 2});
        Tensor loss = sum(mul(x, x));
        loss.backward();
        REQUIRE(x.grad() == std::vector<double>{2, 4});
    }
    SECTION("diamond graph sums path contributions") {
        Tensor x = leaf({2}, {0.5, -1.5});
        // y = sum(x + x) uses x twice: dy/dx = 2 on every coordinate.
        Tensor loss = sum(add(x, x));
        loss.backward();
        REQUIRE(x.grad() == std::vector<double>{2, 2});

        auto program = [&]() { return sum(mul(add(x, x), x)); };
        x.zero_grad();
        const auto report = grad_check(program, {{"x", x}}, 1e-6);
        REQUIRE(report.pass);
    }
    SECTION("repeated backward accumulates without reset") {
        Tensor x = leaf({1}, {2.0});
        Tensor loss = mul(x, x);
        loss.backward();
        loss.backward();
        REQUIRE(x.grad()[0] == 8.0);  // 2 * (2x)
    }
    SECTION("non-scalar root is a contract error") {
        Tensor x = leaf({2}, {1, 2});
        REQUIRE_THROWS_AS(add(x, x).backward(), std::invalid_argument);
    }
}

TEST_CASE("grad_check harness") {
    SECTION("linear programs are exact to rounding") {
        Tensor x = leaf({3}, {1.0, -2.0, 0.5});
        auto program = [&]() { return sum(scale(x, 3.0)); };
        const auto report = grad_check(program, {{"x", x}}, 1e-10);
        REQUIRE(report.pass);
        REQUIRE(report.max_rel_err <= 1e-10);
    }
    SECTION("deliberately corrupted gradient rule fails") {
        Tensor x = leaf({2}, {1.0, 2.0});
        auto broken_square = [](const Tensor& t) {
            std::vector<double> out(t.values().size());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.values()[i] * t.values()[i];
            return make_op(t.shape(), std::move(out), {t}, [](detail::TensorNode& self) {
                auto* p = self.parents[0].get();
                // wrong rule on purpose: uses 3x instead of 2x
                for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * 3.0 * p->values[i];
            });
        };
        auto program = [&]() { return sum(broken_square(x)); };
        const auto report = grad_check(program, {{"x", x}}, 1e-4);
        REQUIRE_FALSE(report.pass);
    }
}

TEST_CASE("layer_norm and gelu gradients") {
    RngStream rng(5);
    Tensor x = Tensor::zeros({3, 6}, true);
    Tensor g = Tensor::zeros({6}, true);
    Tensor b = Tensor::zeros({6}, true);
    for (double& v : x.values()) v = rng.gaussian(0.0, 2.0);
    for (double& v : g.values()) v = 1.0 + 0.3 * rng.gaussian();
    for (double& v : b.values()) v = 0.1 * rng.gaussian();
    SECTION("layer_norm") {
        auto program = [&]() { return mse(layer_norm(x, g, b), Tensor::zeros({3, 6})); };
        const auto report = grad_check(program, {{"x", x}, {"gain", g}, {"bias", b}}, 1e-6);
        REQUIRE(report.pass);
    }
    SECTION("gelu") {
        auto program = [&]() { return sum(gelu(x)); };
        const auto report = grad_check(program, {{"x", x}}, 1e-6);
        REQUIRE(report.pass);
    }
    SECTION("linear and scaled_dot_nt") {
        Tensor w = Tensor::zeros({4, 6}, true);
        Tensor wb = Tensor::zeros({4}, true);
        for (double& v : w.values()) v = rng.gaussian();
        for (double& v : wb.values()) v = rng.gaussian();
        auto program = [&]() {
            const Tensor h = linear(x, w, wb);
            return sum(scaled_dot_nt(h, h, 0.5));
        };
        const auto report = grad_check(program, {{"x", x}, {"w", w}, {"wb", wb}}, 1e-6);
        REQUIRE(report.pass);
    }
}

TEST_CASE("slicing, concatenation and gather propagate gradients") {
    RngStream rng(9);
    Tensor x = Tensor::zeros({3, 6}, true);
    for (double& v : x.values()) v = rng.gaussian();
    SECTION("slice/concat round trip") {
        const Tensor left = slice_cols(x, 0, 2);
        const Tensor right = slice_cols(x, 2, 4);
        const Tensor back = concat_cols({left, right});
        REQUIRE(back.values() == x.values());
        auto program = [&]() { return mse(concat_cols({slice_cols(x, 0, 2), slice_cols(x, 2, 4)}), Tensor::zeros({3, 6})); };
        const auto report = grad_check(program, {{"x", x}}, 1e-6);
        REQUIRE(report.pass);
    }
    SECTION("gather_rows accumulates into repeated rows") {
        Tensor table = Tensor::zeros({4, 2}, true);
        for (double& v : table.values()) v = rng.gaussian();
        auto program = [&]() { return sum(mul(gather_rows(table, {1, 1, 3}), gather_rows(table, {1, 1, 3}))); };
        const auto report = grad_check(program, {{"table", table}}, 1e-6);
        REQUIRE(report.pass);
    }
    SECTION("row extraction") {
        auto program = [&]() { return sum(mul(row(x, 1), row(x, 1))); };
        const auto report = grad_check(program, {{"x", x}}, 1e-6);
        REQUIRE(report.pass);
    }
    SECTION("zero_rows blocks values and gradients of dropped rows") {
        const Tensor z = zero_rows(x, {1, 0, 1});
        for (int c = 0; c < 6; ++c) REQUIRE(z.values()[6 + c] == 0.0);
        auto program = [&]() { return sum(mul(zero_rows(x, {1, 0, 1}), zero_rows(x, {1, 0, 1}))); };
        const auto report = grad_check(program, {{"x", x}}, 1e-6);
        REQUIRE(report.pass);
    }
}

TEST_CASE("dropout") {
    RngStream rng(123);
    Tensor x = Tensor::full({50, 20}, 1.0, true);
    const Tensor y = dropout(x, 0.25, rng);
    int zeros = 0;
    for (double v : y.values()) {
        if (v == 0.0) {
            ++zeros;
        } else {
            REQUIRE(v == Catch::Approx(1.0 / 0.75).margin(1e-12));
        }
    }
    // 1000 draws at p = 0.25: expect about 250 zeros.
    REQUIRE(zeros > 180);
    REQUIRE(zeros < 320);
    REQUIRE(dropout(x, 0.0, rng).values() == x.values());
}

TEST_CASE("NoGradGuard suppresses graph construction") {
    Tensor x = leaf({2}, {1, 2});
    NoGradGuard guard;
    Tensor y = sum(mul(x, x));
    y.backward();  // no-op: y does not track the graph
    REQUIRE(x.grad() == std::vector<double>{0, 0});
}

TEST_CASE("average and clamp_max") {
    Tensor a = leaf({1}, {1.0});
    Tensor b = leaf({1}, {3.0});
    const Tensor avg = average({a, b});
    REQUIRE(avg.value() == 2.0);
    avg.backward();
    REQUIRE(a.grad()[0] == 0.5);
    REQUIRE(b.grad()[0] == 0.5);

    Tensor c = leaf({1}, {5.0});
    Tensor capped = clamp_max(mul(c, c), 9.0);
    REQUIRE(capped.value() == 9.0);
    capped.backward();
    REQUIRE(c.grad()[0] == 0.0);  // gradient blocked past the cap

    c.zero_grad();
    Tensor open = clamp_max(mul(c, c), 100.0);
    open.backward();
    REQUIRE(c.grad()[0] == 10.0);
}
