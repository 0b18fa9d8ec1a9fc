#include <doctest.h>

#include <cmath>
#include <vector>

#include "ett/grad_check.hpp"
#include "ett/gradcheck_suite.hpp"
#include "ett/ops.hpp"
#include "ett/rng.hpp"

using namespace ett;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, bool grad = false) {
    std::vector<Real> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<Real>(rng.normal());
    return Tensor::from(std::move(shape), std::move(v), grad);
}

}  // namespace

TEST_CASE("matmul by the identity leaves the operand unchanged") {
    Rng rng(1);
    Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor x = random_tensor(rng, {3, 4});
    Tensor y = matmul(eye, x);
    CHECK(y.shape() == Shape{3, 4});
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("gelu is zero at the origin and monotone on [-4, 4]") {
    CHECK(gelu(Tensor::scalar(0)).item() == 0);
    std::vector<Real> grid;
    for (int i = 0; i <= 400; ++i) grid.push_back(Real(-4 + 0.02 * i));
    Tensor out = gelu(Tensor::from({static_cast<std::int64_t>(grid.size())}, grid));
    // The tanh form dips slightly below zero left of the origin; it is
    // non-decreasing from its minimum near -0.75 onwards.
    for (std::size_t i = 1; i < grid.size(); ++i) {
        if (grid[i - 1] >= Real(-0.7)) CHECK(out.values()[i] >= out.values()[i - 1]);
    }
    CHECK(out.values().back() == doctest::Approx(4.0).epsilon(1e-3));
}

TEST_CASE("cross entropy vanishes for a confident correct prediction") {
    const std::vector<std::int64_t> target = {2};
    double previous = 1e9;
    for (Real c : {Real(1), Real(10), Real(100)}) {
        Tensor logits = Tensor::from({1, 4}, {0, 0, c, 0});
        const double loss = cross_entropy(logits, target).item();
        CHECK(loss < previous);
        previous = loss;
    }
    CHECK(previous < 1e-12);
}

TEST_CASE("backward of sum gives all-ones gradients") {
    Rng rng(2);
    Tensor x = random_tensor(rng, {2, 3, 4}, true);
    backward(sum(x));
    REQUIRE(x.has_grad());
    for (Real g : x.grad()) CHECK(g == 1);
}

TEST_CASE("mse against a stop-gradient copy has zero gradient") {
    Rng rng(3);
    Tensor x = random_tensor(rng, {5}, true);
    backward(mse(x, stop_gradient(x)));
    for (Real g : x.grad()) CHECK(g == 0);
}

TEST_CASE("backward requires a scalar root") {
    Tensor x = Tensor::zeros({3}, true);
    CHECK_THROWS_AS(backward(scale(x, 2)), ShapeError);
}

TEST_CASE("shape errors name the op and both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    try {
        matmul(a, b);
        FAIL("expected a shape error");
    } catch (const ShapeError& e) {
        CHECK(e.op() == "matmul");
        CHECK(e.lhs() == Shape{2, 3});
        CHECK(e.rhs() == Shape{4, 5});
    }
}

TEST_CASE("tensors without requires_grad never get gradient storage") {
    Tensor w = Tensor::from({2}, {1, 2}, true);
    Tensor c = Tensor::from({2}, {3, 4});
    backward(sum(mul(w, c)));
    CHECK(w.has_grad());
    CHECK_FALSE(c.has_grad());
}

TEST_CASE("grad_check on sum of squares") {
    Tensor x = Tensor::from({3}, {1, 2, 3});
    const std::vector<Tensor> inputs = {x};
    const auto r = grad_check([](std::span<const Tensor> xs) { return sum(square(xs[0])); }, inputs, 1e-5);
    CHECK(r.max_rel_error < 1e-6);
    Tensor y = Tensor::from({3}, {1, 2, 3}, true);
    backward(sum(square(y)));
    CHECK(y.grad()[0] == doctest::Approx(2));
    CHECK(y.grad()[1] == doctest::Approx(4));
    CHECK(y.grad()[2] == doctest::Approx(6));
}

TEST_CASE("grad_check reports NaN gradients as infinite error") {
    Tensor x = Tensor::from({2}, {-1, 2});
    const std::vector<Tensor> inputs = {x};
    const auto r = grad_check([](std::span<const Tensor> xs) { return sum(log(xs[0])); }, inputs, 1e-5);
    CHECK(std::isinf(r.max_rel_error));
}

TEST_CASE("two-layer MLP matches central differences") {
    Rng rng(4);
    const std::vector<Tensor> inputs = {random_tensor(rng, {4, 8}), random_tensor(rng, {8, 16}),
                                        random_tensor(rng, {16}), random_tensor(rng, {16, 3})};
    const std::vector<std::int64_t> targets = {0, 2, 1, 2};
    const auto r = grad_check(
        [&](std::span<const Tensor> xs) {
            return cross_entropy(matmul(gelu(linear(xs[0], xs[1], xs[2])), xs[3]), targets);
        },
        inputs, 1e-5);
    CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("every registered op passes its gradient check on five seeds") {
    for (const auto& name : gradcheck_op_names()) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const auto rep = check_op(name, seed);
            INFO(name << " seed " << seed << " error " << rep.max_rel_error);
            CHECK(rep.passed);
        }
    }
}

TEST_CASE("unknown gradcheck op is rejected") { CHECK_THROWS_AS(check_op("no-such-op", 0), Error); }

TEST_CASE("a second backward pass doubles leaf gradients exactly") {
    Rng rng(5);
    Tensor x = random_tensor(rng, {3, 4}, true);
    Tensor w = random_tensor(rng, {4, 2}, true);
    backward(sum(gelu(matmul(x, w))));
    const std::vector<Real> gx(x.grad().begin(), x.grad().end());
    const std::vector<Real> gw(w.grad().begin(), w.grad().end());
    backward(sum(gelu(matmul(x, w))));
    for (std::size_t i = 0; i < gx.size(); ++i) CHECK(x.grad()[i] == 2 * gx[i]);
    for (std::size_t i = 0; i < gw.size(); ++i) CHECK(w.grad()[i] == 2 * gw[i]);
}

TEST_CASE("identical op sequences give bitwise identical values and gradients") {
    auto run = [] {
        Rng rng(6);
        Tensor x = random_tensor(rng, {2, 5, 8}, true);
        Tensor q = random_tensor(rng, {8, 8}, true);
        Tensor h = matmul(x, q);
        Tensor y = causal_attention(h, h, h, 2);
        Tensor loss = mean(square(layer_norm(y, Tensor::full({8}, 1), Tensor::zeros({8}))));
        backward(loss);
        std::vector<Real> out(q.grad().begin(), q.grad().end());
        out.push_back(loss.item());
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("tape order follows insertion order") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tensor a = square(x);
    Tensor b = exp(a);
    Tensor c = sum(b);
    CHECK(x.seq() < a.seq());
    CHECK(a.seq() < b.seq());
    CHECK(b.seq() < c.seq());
}

TEST_CASE("stop_gradient blocks gradient flow") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tensor y = Tensor::from({2}, {3, 4}, true);
    backward(sum(mul(stop_gradient(x), y)));
    if (x.has_grad()) {
        for (Real g : x.grad()) CHECK(g == 0);
    }
    CHECK(y.grad()[0] == 1);
    CHECK(y.grad()[1] == 2);
}

TEST_CASE("im2patch and patch2im are inverse") {
    Rng rng(7);
    Tensor x = random_tensor(rng, {2, 8, 8, 3});
    Tensor p = im2patch(x, 4);
    CHECK(p.shape() == Shape{2, 4, 48});
    Tensor back = patch2im(p, 8, 8, 3, 4);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(back.values()[i] == x.values()[i]);
}
