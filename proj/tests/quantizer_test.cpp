#include <doctest.h>

#include <cmath>
#include <vector>

#include "ett/quantizer.hpp"
#include "ett/rng.hpp"
#include "support/quantizer_properties.hpp"

using namespace ett;

namespace {

struct Fixture {
    ParamStore store{11};
    QuantizerConfig cfg;
    Codebook cb;

    Fixture(std::int64_t k, std::int64_t d, const std::vector<Real>& table = {}) {
        cfg.codebook_size = k;
        cfg.code_dim = d;
        cb = Codebook::create(store, cfg);
        if (!table.empty()) std::copy(table.begin(), table.end(), cb.embeddings.mutable_values().begin());
    }
};

std::vector<Real> identity_rows(std::int64_t k, std::int64_t d) {
    std::vector<Real> t(static_cast<std::size_t>(k * d), 0);
    for (std::int64_t i = 0; i < k; ++i) t[static_cast<std::size_t>(i * d + i)] = 1;
    return t;
}

}  // namespace

TEST_CASE("a feature equal to a code row selects that code") {
    Fixture fx(8, 8, identity_rows(8, 8));
    std::vector<Real> f(8, 0);
    f[7] = 1;
    const auto q = quantize(Tensor::from({1, 1, 8}, f), fx.cb, fx.cfg);
    CHECK(q.indices == std::vector<std::int64_t>{7});
    for (int c = 0; c < 8; ++c) CHECK(q.z.values()[c] == fx.cb.embeddings.values()[7 * 8 + c]);
}

TEST_CASE("two-code softmax matches the hand computation") {
    Fixture fx(2, 2, {1, 0, 0, 1});
    const auto q = quantize(Tensor::from({1, 2}, {2, 0}), fx.cb, fx.cfg);
    const double e2 = std::exp(2.0);
    CHECK(q.probs.values()[0] == doctest::Approx(e2 / (e2 + 1)).epsilon(1e-12));
    CHECK(q.probs.values()[1] == doctest::Approx(1 / (e2 + 1)).epsilon(1e-12));
    CHECK(q.probs.values()[0] == doctest::Approx(0.881).epsilon(1e-3));
    CHECK(q.indices[0] == 0);
}

TEST_CASE("surrogate gradient of sum(z) matches its symbolic expansion") {
    Rng rng(3);
    std::vector<Real> table(6), feats(4);
    for (auto& v : table) v = static_cast<Real>(rng.normal());
    for (auto& v : feats) v = static_cast<Real>(rng.normal());
    Fixture fx(3, 2, table);
    fx.cfg.temperature = 0.8;
    fx.cb.embeddings.set_requires_grad(true);
    Tensor f = Tensor::from({2, 2}, feats, true);
    const auto q = quantize(f, fx.cb, fx.cfg);
    backward(sum(q.z));

    // L = sum_p sum_k a[p,k] s_k with a = onehot + p - sg(p), s_k = sum_d B[k,d].
    const double t = fx.cfg.temperature;
    const auto p = q.probs.values();
    double s[3];
    for (int k = 0; k < 3; ++k) s[k] = table[k * 2] + table[k * 2 + 1];
    std::vector<double> gb(6, 0), gf(4, 0);
    for (int r = 0; r < 2; ++r) {
        double sbar = 0;
        for (int k = 0; k < 3; ++k) sbar += p[r * 3 + k] * s[k];
        for (int k = 0; k < 3; ++k) {
            const double coef = p[r * 3 + k] * (s[k] - sbar) / t;
            for (int d = 0; d < 2; ++d) {
                gb[k * 2 + d] += (q.indices[r] == k ? 1.0 : 0.0) + coef * feats[r * 2 + d];
                gf[r * 2 + d] += coef * table[k * 2 + d];
            }
        }
    }
    for (int i = 0; i < 6; ++i) CHECK(fx.cb.embeddings.grad()[i] == doctest::Approx(gb[i]).epsilon(1e-10));
    for (int i = 0; i < 4; ++i) CHECK(f.grad()[i] == doctest::Approx(gf[i]).epsilon(1e-10));
}

TEST_CASE("quantization loss cases") {
    SUBCASE("zero residual") {
        Tensor f = Tensor::from({2, 2}, {1, 2, 3, 4});
        CHECK(quantization_loss(f, f, 0.25).item() == 0);
    }
    SUBCASE("single position hand value") {
        Tensor f = Tensor::from({1, 2}, {1, 0});
        Tensor z = Tensor::from({1, 2}, {0, 0});
        CHECK(quantization_loss(f, z, 0.25).item() == doctest::Approx(0.625).epsilon(1e-12));
    }
    SUBCASE("doubling the commitment weight doubles only the second term") {
        Tensor f = Tensor::from({1, 2}, {1, 0});
        Tensor z = Tensor::from({1, 2}, {0, 0});
        const double a = quantization_loss(f, z, 0.25).item();
        const double b = quantization_loss(f, z, 0.5).item();
        CHECK(b - a == doctest::Approx(0.125).epsilon(1e-12));
    }
}

TEST_CASE("entropy loss cases") {
    const std::int64_t k = 512;
    SUBCASE("all positions one-hot on the same code") {
        std::vector<Real> p(static_cast<std::size_t>(4 * k), 0);
        for (int r = 0; r < 4; ++r) p[static_cast<std::size_t>(r * k + 3)] = 1;
        CHECK(entropy_loss(Tensor::from({4, k}, p)).item() == doctest::Approx(0).epsilon(1e-12));
    }
    SUBCASE("one-hot rows covering every code uniformly") {
        std::vector<Real> p(static_cast<std::size_t>(k * k), 0);
        for (std::int64_t r = 0; r < k; ++r) p[static_cast<std::size_t>(r * k + r)] = 1;
        const double v = entropy_loss(Tensor::from({k, k}, p)).item();
        CHECK(v == doctest::Approx(-std::log(512.0)).epsilon(1e-10));
        CHECK(v == doctest::Approx(-6.2383).epsilon(1e-4));
    }
    SUBCASE("uniform rows") {
        std::vector<Real> p(static_cast<std::size_t>(3 * k), Real(1.0 / k));
        CHECK(std::abs(entropy_loss(Tensor::from({3, k}, p)).item()) < 1e-10);
    }
}

TEST_CASE("codebook utilization") {
    SUBCASE("a single code") {
        UsageTracker u(16);
        u.record(std::vector<std::int64_t>(10, 0), 0);
        CHECK(u.utilization(1) == doctest::Approx(1.0 / 16));
    }
    SUBCASE("every code") {
        UsageTracker u(16);
        std::vector<std::int64_t> all(16);
        for (int i = 0; i < 16; ++i) all[i] = i;
        u.record(all, 0);
        CHECK(u.utilization(1) == 1.0);
    }
    SUBCASE("uniform draws follow the coupon-collector expectation") {
        UsageTracker u(512);
        Rng rng(5);
        std::vector<std::int64_t> draws(10000);
        for (auto& d : draws) d = static_cast<std::int64_t>(rng.below(512));
        u.record(draws, 0);
        const double expected = 1.0 - std::pow(1.0 - 1.0 / 512, 10000);
        CHECK(std::abs(u.utilization(1) - expected) < 0.01);
    }
    SUBCASE("the window only counts recent steps") {
        UsageTracker u(4);
        u.record(std::vector<std::int64_t>{0}, 0);
        u.record(std::vector<std::int64_t>{1}, 5);
        CHECK(u.utilization(1) == 0.25);
        CHECK(u.utilization(6) == 0.5);
    }
    SUBCASE("empty window") {
        UsageTracker u(4);
        CHECK_THROWS_AS(u.utilization(10), Error);
        u.record(std::vector<std::int64_t>{0}, 0);
        CHECK_THROWS_AS(u.utilization(0), Error);
    }
}

TEST_CASE("truncated softmax agrees with the dense argmax") {
    ParamStore store(21);
    QuantizerConfig dense;
    dense.codebook_size = 2048;
    dense.code_dim = 16;
    Codebook cb = Codebook::create(store, dense);
    QuantizerConfig trunc = dense;
    trunc.dense_budget = 0;
    trunc.top_m = 64;
    Rng rng(22);
    const std::int64_t n = 2000;
    std::vector<Real> f(static_cast<std::size_t>(n * 16));
    for (auto& v : f) v = static_cast<Real>(rng.normal());
    Tensor feats = Tensor::from({n, 16}, f);
    NoGradGuard g;
    const auto a = quantize(feats, cb, dense);
    const auto b = quantize(feats, cb, trunc);
    CHECK_FALSE(a.truncated());
    CHECK(b.truncated());
    CHECK(b.probs.shape() == Shape{n, 64});
    std::int64_t agree = 0;
    for (std::int64_t i = 0; i < n; ++i) agree += a.indices[i] == b.indices[i];
    CHECK(static_cast<double>(agree) / n >= 0.999);
    for (std::int64_t i = 0; i < n * 16; ++i) CHECK(a.z.values()[i] == b.z.values()[i]);
}

TEST_CASE("non-finite inputs are rejected") {
    Fixture fx(4, 2);
    CHECK_THROWS_AS(quantize(Tensor::from({1, 2}, {std::nan(""), 0}), fx.cb, fx.cfg), NonFiniteError);
    fx.cb.embeddings.mutable_values()[3] = std::numeric_limits<Real>::infinity();
    CHECK_THROWS_AS(quantize(Tensor::from({1, 2}, {1, 1}), fx.cb, fx.cfg), NonFiniteError);
}

TEST_CASE("dimension mismatch is a shape error") {
    Fixture fx(4, 2);
    CHECK_THROWS_AS(quantize(Tensor::zeros({3, 5}), fx.cb, fx.cfg), ShapeError);
}

TEST_CASE("randomized quantizer properties hold on 100 instances") {
    const auto t = testing::check_quantizer_properties(2024, 100);
    INFO(t.first_failure);
    CHECK(t.instances == 100);
    CHECK(t.all_passed());
}
