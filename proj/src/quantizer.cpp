#include "ett/quantizer.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

ETT_NAMESPACE_BEGIN

UsageTracker::UsageTracker(std::int64_t codes)
    : counts_(static_cast<std::size_t>(codes), 0), last_step_(static_cast<std::size_t>(codes), -1) {}

void UsageTracker::record(std::span<const std::int64_t> indices, std::int64_t step) {
    for (auto k : indices) {
        ++counts_[static_cast<std::size_t>(k)];
        last_step_[static_cast<std::size_t>(k)] = step;
    }
    latest_ = std::max(latest_, step);
}

double UsageTracker::utilization(std::int64_t window) const {
    if (window <= 0 || latest_ < 0) {
        throw Error(ErrorCode::invalid_argument, "codebook utilization requires a non-empty window of recorded steps");
    }
    const std::int64_t first = latest_ - window + 1;
    const auto used = std::count_if(last_step_.begin(), last_step_.end(), [&](std::int64_t s) { return s >= 0 && s >= first; });
    return static_cast<double>(used) / static_cast<double>(last_step_.size());
}

void UsageTracker::restore(std::vector<std::int64_t> counts, std::vector<std::int64_t> last_step, std::int64_t latest) {
    if (counts.size() != counts_.size() || last_step.size() != last_step_.size()) {
        throw Error(ErrorCode::invalid_argument, "usage telemetry size does not match the codebook");
    }
    counts_ = std::move(counts);
    last_step_ = std::move(last_step);
    latest_ = latest;
}

Codebook Codebook::create(ParamStore& store, const QuantizerConfig& cfg) {
    Codebook cb;
    cb.codes = cfg.codebook_size;
    cb.dim = cfg.code_dim;
    cb.embeddings = store.add("codebook.embeddings", Group::codebook, Shape{cfg.codebook_size, cfg.code_dim},
                              Init::normal, 1.0 / std::sqrt(static_cast<double>(cfg.code_dim)));
    cb.usage = UsageTracker(cfg.codebook_size);
    return cb;
}

namespace {

void check_finite_logits(std::span<const Real> logits, std::int64_t k) {
    std::int64_t worst = -1;
    double worst_mag = -1.0;
    bool bad = false;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double v = std::abs(static_cast<double>(logits[i]));
        if (!std::isfinite(v)) {
            bad = true;
            worst = static_cast<std::int64_t>(i);
            break;
        }
        if (v > worst_mag) {
            worst_mag = v;
            worst = static_cast<std::int64_t>(i);
        }
    }
    if (bad) {
        throw NonFiniteError("quantize: non-finite logit at position " + std::to_string(worst / k) + ", code " +
                                 std::to_string(worst % k),
                             worst / k);
    }
}

// Logits against the full codebook: [N, K]. For neg-l2 the per-row |f|^2 term
// is dropped; it does not change the softmax or the argmax.
Tensor dense_logits(const Tensor& f2, const Codebook& cb, const QuantizerConfig& cfg) {
    Tensor logits = matmul(f2, transpose(cb.embeddings));
    if (cfg.logits == LogitMode::neg_l2) {
        logits = sub(scale(logits, Real(2)), sum_axis(square(cb.embeddings), 1));
    }
    return logits;
}

}  // namespace

QuantizationResult quantize(const Tensor& features, const Codebook& cb, const QuantizerConfig& cfg) {
    if (cfg.temperature <= 0.0) {
        throw Error(ErrorCode::invalid_argument, "quantize: temperature must be positive");
    }
    if (features.rank() < 1 || features.dim(-1) != cb.dim) {
        throw ShapeError("quantize", features.shape(), cb.embeddings.shape());
    }
    for (Real v : features.values()) {
        if (!std::isfinite(static_cast<double>(v))) throw NonFiniteError("quantize: non-finite feature", -1);
    }
    const std::int64_t d = cb.dim;
    const std::int64_t k = cb.codes;
    const std::int64_t n = features.numel() / d;
    const Real inv_t = static_cast<Real>(1.0 / cfg.temperature);
    Tensor f2 = reshape(features, Shape{n, d});

    QuantizationResult res;
    res.indices.resize(static_cast<std::size_t>(n));

    if (n * k <= cfg.dense_budget || cfg.top_m >= k) {
        Tensor logits = dense_logits(f2, cb, cfg);
        check_finite_logits(logits.values(), k);
        res.probs = softmax(scale(logits, inv_t));
        const auto lv = logits.values();
        Buffer onehot(static_cast<std::size_t>(n * k), Real(0));
        for (std::int64_t r = 0; r < n; ++r) {
            const Real* row = lv.data() + r * k;
            const auto best = std::max_element(row, row + k) - row;
            res.indices[static_cast<std::size_t>(r)] = best;
            onehot[static_cast<std::size_t>(r * k + best)] = Real(1);
        }
        Tensor assign = straight_through(Tensor::from(Shape{n, k}, std::move(onehot)), res.probs);
        res.z = reshape(matmul(assign, cb.embeddings), features.shape());
        res.l_entropy = entropy_loss(res.probs);
    } else {
        const std::int64_t m = cfg.top_m;
        res.top_m = m;
        res.top_indices.resize(static_cast<std::size_t>(n * m));
        // Stream logits one position at a time; only the top-M survive.
        using Row = Eigen::Matrix<Real, 1, Eigen::Dynamic>;
        using MatRM = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        Eigen::Map<const MatRM> table(cb.embeddings.values().data(), k, d);
        Row norms;
        if (cfg.logits == LogitMode::neg_l2) norms = table.rowwise().squaredNorm().transpose();
        Row row(k);
        std::vector<std::int64_t> order(static_cast<std::size_t>(k));
        for (std::int64_t r = 0; r < n; ++r) {
            Eigen::Map<const Row> fr(features.values().data() + r * d, d);
            row.noalias() = fr * table.transpose();
            if (cfg.logits == LogitMode::neg_l2) row = Real(2) * row - norms;
            check_finite_logits(std::span<const Real>(row.data(), static_cast<std::size_t>(k)), k);
            std::iota(order.begin(), order.end(), 0);
            std::partial_sort(order.begin(), order.begin() + m, order.end(), [&](std::int64_t a, std::int64_t b) {
                return row[a] > row[b] || (row[a] == row[b] && a < b);
            });
            std::copy_n(order.begin(), m, res.top_indices.begin() + r * m);
            res.indices[static_cast<std::size_t>(r)] = order[0];
        }
        Tensor logits = gather_dot(f2, cb.embeddings, res.top_indices, m);
        if (cfg.logits == LogitMode::neg_l2) {
            Tensor sq = reshape(sum_axis(square(cb.embeddings), 1), Shape{k, 1});
            logits = sub(scale(logits, Real(2)), reshape(embedding(sq, res.top_indices), Shape{n, m}));
        }
        res.probs = softmax(scale(logits, inv_t));
        Buffer onehot(static_cast<std::size_t>(n * m), Real(0));
        for (std::int64_t r = 0; r < n; ++r) onehot[static_cast<std::size_t>(r * m)] = Real(1);
        Tensor assign = straight_through(Tensor::from(Shape{n, m}, std::move(onehot)), res.probs);
        res.z = reshape(gather_combine(assign, cb.embeddings, res.top_indices), features.shape());
        res.l_entropy = entropy_loss_truncated(res.probs, res.top_indices, k);
    }
    res.l_quant = quantization_loss(features, res.z, cfg.beta_commit);
    return res;
}

Tensor quantization_loss(const Tensor& features, const Tensor& z, double beta_commit) {
    if (features.shape() != z.shape()) throw ShapeError("quantization_loss", features.shape(), z.shape());
    Tensor codebook_term = mse(stop_gradient(features), z);
    Tensor commit_term = mse(features, stop_gradient(z));
    return add(codebook_term, scale(commit_term, static_cast<Real>(beta_commit)));
}

Tensor entropy_loss(const Tensor& probs) {
    Tensor per_sample = mean(entropy_rows(probs));
    Tensor batch = entropy_rows(mean_axis(probs, 0));
    return sub(per_sample, reshape(batch, Shape{}));
}

Tensor entropy_loss_truncated(const Tensor& probs, std::span<const std::int64_t> top_indices, std::int64_t codes) {
    const auto n = static_cast<Real>(probs.dim(0));
    Tensor per_sample = mean(entropy_rows(probs));
    Tensor avg = scale(scatter_sum(probs, top_indices, codes), Real(1) / n);
    return sub(per_sample, reshape(entropy_rows(avg), Shape{}));
}

ETT_NAMESPACE_END
