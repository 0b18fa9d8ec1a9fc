#pragma once

// Randomized quantizer properties shared by the unit tests and the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ett/quantizer.hpp"
#include "ett/rng.hpp"

namespace ett::testing {

struct PropertyTally {
    int instances = 0;
    int entropy_bounds = 0;
    int normalization = 0;
    int hard_soft = 0;
    int full_coverage = 0;
    std::string first_failure;

    bool all_passed() const {
        return entropy_bounds == instances && normalization == instances && hard_soft == instances &&
               full_coverage == instances;
    }
};

struct QuantizerInstance {
    ParamStore store;
    QuantizerConfig cfg;
    Codebook codebook;
    Tensor features;

    explicit QuantizerInstance(std::uint64_t seed) : store(seed) {
        Rng rng(hash_combine(seed, 0x9a7));
        cfg.codebook_size = 2 + static_cast<std::int64_t>(rng.below(63));
        cfg.code_dim = 1 + static_cast<std::int64_t>(rng.below(8));
        cfg.temperature = 1.0 + 2.0 * rng.uniform();
        cfg.logits = rng.below(2) == 0 ? LogitMode::dot : LogitMode::neg_l2;
        codebook = Codebook::create(store, cfg);
        const std::int64_t n = 1 + static_cast<std::int64_t>(rng.below(12));
        std::vector<Real> f(static_cast<std::size_t>(n * cfg.code_dim));
        for (auto& v : f) v = static_cast<Real>(rng.normal());
        features = Tensor::from(Shape{n, cfg.code_dim}, std::move(f), true);
    }
};

inline PropertyTally check_quantizer_properties(std::uint64_t seed, int instances) {
    PropertyTally t;
    auto note = [&](int i, const char* what) {
        if (t.first_failure.empty()) t.first_failure = std::string(what) + " failed on instance " + std::to_string(i);
    };
    for (int i = 0; i < instances; ++i) {
        ++t.instances;
        QuantizerInstance inst(hash_combine(seed, static_cast<std::uint64_t>(i)));
        const std::int64_t k = inst.cfg.codebook_size;
        const std::int64_t d = inst.cfg.code_dim;
        const std::int64_t n = inst.features.dim(0);
        inst.codebook.embeddings.set_requires_grad(true);
        inst.codebook.embeddings.zero_grad();

        QuantizationResult q = quantize(inst.features, inst.codebook, inst.cfg);

        // Entropy bounds.
        const double le = q.l_entropy.item();
        const double ln_k = std::log(static_cast<double>(k));
        if (le >= -ln_k - 1e-6 && le <= ln_k + 1e-6) ++t.entropy_bounds;
        else note(i, "entropy bounds");

        // Row normalization.
        bool normalized = true;
        const auto p = q.probs.values();
        for (std::int64_t r = 0; r < n; ++r) {
            double s = 0;
            for (std::int64_t c = 0; c < k; ++c) s += p[static_cast<std::size_t>(r * k + c)];
            normalized = normalized && std::abs(s - 1.0) <= 1e-5;
        }
        if (normalized) ++t.normalization;
        else note(i, "normalization");

        // Forward hard, backward soft: z rows are exact codebook rows and the
        // feature gradient equals that of the explicit soft path p B.
        Rng wr(hash_combine(seed, 1000 + static_cast<std::uint64_t>(i)));
        std::vector<Real> wv(static_cast<std::size_t>(n * d));
        for (auto& v : wv) v = static_cast<Real>(wr.normal());
        const Tensor w = Tensor::from(Shape{n, d}, wv);
        bool hard = true;
        const auto table = inst.codebook.embeddings.values();
        for (std::int64_t r = 0; r < n; ++r) {
            const auto idx = q.indices[static_cast<std::size_t>(r)];
            const auto* row = p.data() + r * k;
            hard = hard && idx == std::max_element(row, row + k) - row;
            for (std::int64_t c = 0; c < d; ++c) {
                hard = hard && q.z.values()[static_cast<std::size_t>(r * d + c)] ==
                                   table[static_cast<std::size_t>(idx * d + c)];
            }
        }
        backward(sum(mul(q.z, w)));
        const std::vector<Real> g_hard(inst.features.grad().begin(), inst.features.grad().end());
        const std::vector<Real> gb_hard(inst.codebook.embeddings.grad().begin(),
                                        inst.codebook.embeddings.grad().end());
        inst.features.zero_grad();
        inst.codebook.embeddings.zero_grad();
        const QuantizationResult q2 = quantize(inst.features, inst.codebook, inst.cfg);
        backward(sum(mul(matmul(q2.probs, inst.codebook.embeddings), w)));
        const double tol = std::is_same_v<Real, double> ? 1e-12 : 1e-5;
        for (std::size_t j = 0; j < g_hard.size(); ++j) {
            const double a = g_hard[j], b = inst.features.grad()[j];
            hard = hard && std::abs(a - b) <= tol * std::max(1.0, std::abs(b));
        }
        if (hard) ++t.hard_soft;
        else note(i, "forward-hard/backward-soft");

        // Every code with probability above 1e-6 anywhere gets gradient.
        bool covered = true;
        for (std::int64_t c = 0; c < k; ++c) {
            double pmax = 0;
            for (std::int64_t r = 0; r < n; ++r) pmax = std::max(pmax, static_cast<double>(p[r * k + c]));
            if (pmax <= 1e-6) continue;
            bool nonzero = false;
            for (std::int64_t j = 0; j < d; ++j) nonzero = nonzero || gb_hard[static_cast<std::size_t>(c * d + j)] != 0;
            covered = covered && nonzero;
        }
        if (covered) ++t.full_coverage;
        else note(i, "full-codebook gradient");
    }
    return t;
}

}  // namespace ett::testing
