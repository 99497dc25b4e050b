// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <vector>

#include "dtme/rng.hpp"
#include "dtme/tensor.hpp"

using namespace dtme;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double spread = 1.0) {
    int n = 1;
    for (int d : shape) n *= d;
    std::vector<double> vals(static_cast<size_t>(n));
    for (auto& v : vals) v = spread * rng.normal();
    return Tensor::from(std::move(shape), std::move(vals));
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("construction and element access") {
    Tensor z = Tensor::zeros({2, 3});
    CHECK(z.numel() == 6);
    CHECK(z.dim(0) == 2);
    CHECK(z.dim(1) == 3);
    for (double v : z.data()) CHECK(v == 0.0);

    Tensor f = Tensor::full({2, 2}, 1.5);
    CHECK(f.at({1, 1}) == 1.5);

    Tensor s = Tensor::scalar(4.0);
    CHECK(s.value() == 4.0);

    CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0}), ShapeError);
}

TEST_CASE("matmul matches a triple-loop reference") {
    Rng rng(11);
    const int m = 5, k = 7, n = 4;
    Tensor a = random_tensor({m, k}, rng);
    Tensor b = random_tensor({k, n}, rng);
    Tensor c = matmul(a, b);
    REQUIRE(c.dim(0) == m);
    REQUIRE(c.dim(1) == n);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int x = 0; x < k; ++x) acc += a.at({i, x}) * b.at({x, j});
            CHECK(c.at({i, j}) == doctest::Approx(acc).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("elementwise ops and scalar forms") {
    Tensor a = Tensor::from({2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor b = Tensor::from({2, 2}, {10.0, 20.0, 30.0, 40.0});
    CHECK((a + b).at({1, 0}) == 33.0);
    CHECK((b - a).at({0, 1}) == 18.0);
    CHECK((a * b).at({1, 1}) == 160.0);
    CHECK((a * 2.0).at({0, 0}) == 2.0);
    CHECK((3.0 * a).at({0, 0}) == 3.0);

    // Trailing-suffix broadcast and scalar broadcast.
    Tensor row = Tensor::from({2}, {100.0, 200.0});
    Tensor br = a + row;
    CHECK(br.at({0, 0}) == 101.0);
    CHECK(br.at({1, 1}) == 204.0);
    Tensor one = Tensor::from({1}, {5.0});
    CHECK((a * one).at({1, 1}) == 20.0);

    Tensor bad = Tensor::from({3}, {1, 2, 3});
    CHECK_THROWS_AS(add(a, bad), ShapeError);
}

TEST_CASE("softmax rows are distributions and match direct math") {
    Tensor x = Tensor::from({2, 3}, {1.0, 2.0, 3.0, -1.0, 0.0, 1.0});
    Tensor y = softmax(x, 1);
    for (int i = 0; i < 2; ++i) {
        double row = 0.0;
        for (int j = 0; j < 3; ++j) row += y.at({i, j});
        CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
    }
    const double d = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    CHECK(y.at({0, 2}) == doctest::Approx(std::exp(3.0) / d).epsilon(1e-12));
    // Shift invariance.
    Tensor y2 = softmax(add(x, Tensor::full({2, 3}, 100.0)), 1);
    CHECK(max_abs_diff(y.data(), y2.data()) < 1e-12);
}

TEST_CASE("layernorm normalizes to zero mean unit variance") {
    Rng rng(3);
    Tensor x = random_tensor({4, 8}, rng, 3.0);
    Tensor y = layernorm(x, 1);
    for (int i = 0; i < 4; ++i) {
        double m = 0.0, v = 0.0;
        for (int j = 0; j < 8; ++j) m += y.at({i, j});
        m /= 8;
        for (int j = 0; j < 8; ++j) v += (y.at({i, j}) - m) * (y.at({i, j}) - m);
        v /= 8;
        CHECK(std::abs(m) < 1e-12);
        CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("cross entropy matches log-sum-exp arithmetic") {
    Tensor logits = Tensor::from({2, 3}, {1.0, 2.0, 3.0, 0.5, -0.5, 0.0});
    Tensor loss = cross_entropy(logits, {2, 0});
    auto row_loss = [&](int r, int label) {
        double mx = -1e300;
        for (int j = 0; j < 3; ++j) mx = std::max(mx, logits.at({r, j}));
        double lse = 0.0;
        for (int j = 0; j < 3; ++j) lse += std::exp(logits.at({r, j}) - mx);
        return mx + std::log(lse) - logits.at({r, label});
    };
    CHECK(loss.value() == doctest::Approx(0.5 * (row_loss(0, 2) + row_loss(1, 0))).epsilon(1e-12));
    CHECK_THROWS_AS(cross_entropy(logits, {0}), ShapeError);
    CHECK_THROWS_AS(cross_entropy(logits, {0, 7}), ContractError);
}

TEST_CASE("losses match closed forms") {
    Tensor p = Tensor::from({1, 3}, {1.0, -2.0, 0.5});
    Tensor t = Tensor::from({1, 3}, {0.0, 1.0, 0.5});
    CHECK(l1_loss(p, t).value() == doctest::Approx((1.0 + 3.0 + 0.0) / 3.0));
    CHECK(mse_loss(p, t).value() == doctest::Approx((1.0 + 9.0 + 0.0) / 3.0));
}

TEST_CASE("finite-difference checks per primitive") {
    Rng rng(21);
    auto check = [&](const std::function<Tensor(const Tensor&)>& f, Tensor x, double tol = 1e-6) {
        CHECK(grad_check(f, x) <= tol);
    };

    check([](const Tensor& x) { return sum(x); }, random_tensor({3, 4}, rng));
    check([](const Tensor& x) { return mean(mul(x, x)); }, random_tensor({3, 4}, rng));

    Tensor other = random_tensor({3, 4}, rng);
    check([&](const Tensor& x) { return sum(add(x, other)); }, random_tensor({3, 4}, rng));
    check([&](const Tensor& x) { return sum(sub(other, x)); }, random_tensor({3, 4}, rng));
    check([&](const Tensor& x) { return sum(mul(x, other)); }, random_tensor({3, 4}, rng));
    check([&](const Tensor& x) { return sum(scale(x, -2.5)); }, random_tensor({3, 4}, rng));

    // Broadcast: gradient of the small side reduces over leading dims.
    Tensor lead = random_tensor({3, 4}, rng);
    check([&](const Tensor& x) { return sum(mul(lead, x)); }, random_tensor({4}, rng));
    check([&](const Tensor& x) { return sum(mul(lead, x)); }, random_tensor({1}, rng));

    Tensor rhs = random_tensor({4, 2}, rng);
    check([&](const Tensor& x) { return sum(matmul(x, rhs)); }, random_tensor({3, 4}, rng));
    Tensor lhs = random_tensor({3, 4}, rng);
    check([&](const Tensor& x) { return sum(matmul(lhs, x)); }, random_tensor({4, 2}, rng));
    check([](const Tensor& x) { return sum(mul(transpose(x), transpose(x))); },
          random_tensor({3, 4}, rng));

    // Keep relu inputs clear of the kink.
    Tensor roff = random_tensor({3, 4}, rng);
    {
        auto d = roff.mutable_data();
        for (auto& v : d) v = (v >= 0 ? v + 0.5 : v - 0.5);
    }
    check([](const Tensor& x) { return sum(relu(x)); }, roff);
    check([](const Tensor& x) { return sum(gelu(x)); }, random_tensor({3, 4}, rng));
    check([](const Tensor& x) { return sum(mul(softmax(x, 1), x)); }, random_tensor({3, 4}, rng),
          5e-6);
    check([](const Tensor& x) { return sum(mul(layernorm(x, 1), layernorm(x, 1))); },
          random_tensor({3, 8}, rng), 5e-6);

    check([](const Tensor& x) { return sum(slice(x, 1, 1, 3)); }, random_tensor({3, 4}, rng));
    Tensor extra = random_tensor({2, 4}, rng);
    check([&](const Tensor& x) { return sum(mul(concat({x, extra}, 0), concat({x, extra}, 0))); },
          random_tensor({3, 4}, rng));

    Tensor target = random_tensor({2, 3}, rng);
    check([&](const Tensor& x) { return mse_loss(x, target); }, random_tensor({2, 3}, rng));
    // Keep l1 inputs away from the non-differentiable tie with the target.
    Tensor l1x = add(target, Tensor::full({2, 3}, 0.75));
    check([&](const Tensor& x) { return l1_loss(x, target); }, l1x);
    check([](const Tensor& x) { return cross_entropy(x, {1, 0}); }, random_tensor({2, 3}, rng));
}

TEST_CASE("finite-difference check of a composite graph") {
    Rng rng(5);
    Tensor w1 = random_tensor({6, 6}, rng, 0.4);
    Tensor w2 = random_tensor({6, 3}, rng, 0.4);
    Tensor tgt = random_tensor({4, 3}, rng);
    auto f = [&](const Tensor& x) {
        Tensor h = gelu(matmul(layernorm(x, 1), w1));
        Tensor y = matmul(softmax(h, 1), w2);
        return add(mse_loss(y, tgt), scale(sum(mul(y, y)), 0.01));
    };
    CHECK(grad_check(f, random_tensor({4, 6}, rng)) <= 1e-4);
}

TEST_CASE("backward accumulates across shared consumers") {
    Tensor a = Tensor::from({2}, {3.0, -2.0});
    a.set_requires_grad(true);
    Tensor loss = sum(add(mul(a, a), scale(a, 4.0)));  // d/da = 2a + 4
    backward(loss);
    REQUIRE(a.grad_ready());
    CHECK(a.grad()[0] == doctest::Approx(10.0));
    CHECK(a.grad()[1] == doctest::Approx(0.0));
}

TEST_CASE("concat and slice route gradients to the right blocks") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({1, 2}, {5, 6});
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    Tensor joined = concat({a, b}, 0);
    Tensor top = slice(joined, 0, 0, 1);     // first row of a
    Tensor bottom = slice(joined, 0, 2, 3);  // the b row
    backward(add(sum(top), scale(sum(bottom), 3.0)));
    CHECK(a.grad()[0] == 1.0);
    CHECK(a.grad()[1] == 1.0);
    CHECK(a.grad()[2] == 0.0);
    CHECK(b.grad()[0] == 3.0);
    CHECK(b.grad()[1] == 3.0);
}

TEST_CASE("repeated backward on one graph gives independent full gradients") {
    Tensor a = Tensor::from({2}, {1.0, 2.0});
    a.set_requires_grad(true);
    Tensor loss = sum(mul(a, a));
    backward(loss);
    const double g0 = a.grad()[0];
    backward(loss);  // accumulates a second, identical vector-Jacobian product
    CHECK(a.grad()[0] == doctest::Approx(2.0 * g0));
    a.zero_grad();
    backward(loss);
    CHECK(a.grad()[0] == doctest::Approx(g0));
}

TEST_CASE("retained activations expose gradients without requires_grad inputs") {
    Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor w = Tensor::from({2, 2}, {0.5, 0.0, 0.0, 0.5});
    w.set_requires_grad(true);
    Tensor h = matmul(x, w);
    h.set_retain_grad(true);
    backward(sum(mul(h, h)));
    REQUIRE(h.grad_ready());
    for (int i = 0; i < 4; ++i) CHECK(h.grad()[static_cast<size_t>(i)] != 0.0);
}

TEST_CASE("backward rejects non-scalar roots and missing graphs") {
    Tensor a = Tensor::from({2}, {1.0, 2.0});
    a.set_requires_grad(true);
    CHECK_THROWS_AS(backward(mul(a, a)), ContractError);
    Tensor leaf = Tensor::from({1}, {2.0});
    CHECK_NOTHROW(backward(leaf));  // no-op graph, scalar-sized
}

TEST_CASE("non-finite results are reported as numeric errors") {
    Tensor big = Tensor::full({2}, 1e308);
    CHECK_THROWS_AS(mul(big, big), NumericError);
}

TEST_CASE("ops without grad-relevant inputs build no graph") {
    Tensor a = Tensor::from({2}, {1.0, 2.0});
    Tensor c = mul(a, a);
    CHECK(c.impl()->node == nullptr);
    a.set_requires_grad(true);
    Tensor d = mul(a, a);
    CHECK(d.impl()->node != nullptr);
}

}
