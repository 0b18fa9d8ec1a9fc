#pragma once

#include <cstdint>
#include <vector>

#include "ett/params.hpp"

ETT_NAMESPACE_BEGIN

enum class LogitMode { dot, neg_l2 };

struct QuantizerConfig {
    std::int64_t codebook_size = 512;  // K
    std::int64_t code_dim = 32;        // D
    double temperature = 1.0;
    double beta_commit = 0.25;
    LogitMode logits = LogitMode::dot;
    // Largest positions * K product evaluated densely; above it the
    // truncated top-M softmax is used.
    std::int64_t dense_budget = std::int64_t{1} << 24;
    std::int64_t top_m = 4096;
};

// Tracks when each code was last selected. Telemetry only: not learnable and
// not part of the codebook's parameter hash.
class UsageTracker {
public:
    explicit UsageTracker(std::int64_t codes = 0);

    void record(std::span<const std::int64_t> indices, std::int64_t step);
    // Fraction of codes selected at least once in the last `window` recorded steps.
    double utilization(std::int64_t window) const;
    const std::vector<std::int64_t>& counts() const { return counts_; }
    const std::vector<std::int64_t>& last_step() const { return last_step_; }
    std::int64_t latest_step() const { return latest_; }
    void restore(std::vector<std::int64_t> counts, std::vector<std::int64_t> last_step, std::int64_t latest);

private:
    std::vector<std::int64_t> counts_;
    std::vector<std::int64_t> last_step_;  // -1 when never used
    std::int64_t latest_ = -1;
};

struct Codebook {
    Tensor embeddings;  // B, [K, D]
    std::int64_t codes = 0;
    std::int64_t dim = 0;
    UsageTracker usage;

    static Codebook create(ParamStore& store, const QuantizerConfig& cfg);
    // Hard lookup of rows: [n, D].
    Tensor lookup(std::span<const std::int64_t> indices) const { return embedding(embeddings, indices); }
};

struct QuantizationResult {
    std::vector<std::int64_t> indices;  // one per position, in [0, K)
    Tensor z;                           // quantized embeddings, shape of the input features
    Tensor probs;                       // [N, K] dense, or [N, M] over `top_indices` when truncated
    std::vector<std::int64_t> top_indices;
    std::int64_t top_m = 0;  // 0 on the dense path
    Tensor l_quant;
    Tensor l_entropy;

    bool truncated() const { return top_m > 0; }
};

// Quantizes features [..., D]. Forward z is exactly the selected codebook row;
// the backward pass follows z = (onehot + probs - sg(probs)) B so that every
// code with nonzero probability receives gradient.
QuantizationResult quantize(const Tensor& features, const Codebook& codebook, const QuantizerConfig& cfg);

// mean |sg(f) - z|^2 + beta * mean |f - sg(z)|^2.
Tensor quantization_loss(const Tensor& features, const Tensor& z, double beta_commit);

// mean over rows of H(p) minus H(mean of rows). Dense [N, K] probabilities.
Tensor entropy_loss(const Tensor& probs);
// Same quantity for top-M truncated probabilities.
Tensor entropy_loss_truncated(const Tensor& probs, std::span<const std::int64_t> top_indices, std::int64_t codes);

ETT_NAMESPACE_END
