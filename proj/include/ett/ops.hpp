#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ett/tensor.hpp"

ETT_NAMESPACE_BEGIN

enum class Reduction { mean, sum };

// ---- linear algebra ----

// a [..., K] x b [K, N] -> [..., N]; leading axes of `a` are flattened into rows.
Tensor matmul(const Tensor& a, const Tensor& b);
// x [..., in] x w [in, out] + bias [out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
// Swaps the last two axes.
Tensor transpose(const Tensor& a);

// ---- elementwise ----
// Binary ops accept `b` with the same shape as `a` or with a trailing suffix of
// a's shape (including the empty shape), which is broadcast over the leading axes.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real s);
Tensor add_scalar(const Tensor& a, Real s);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor square(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, Real s) { return scale(a, s); }
inline Tensor operator*(Real s, const Tensor& a) { return scale(a, s); }

// ---- shape ----

Tensor reshape(const Tensor& a, Shape shape);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t length);
Tensor concat(std::span<const Tensor> parts, int axis);

// ---- reductions ----

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);

// ---- normalisation and probability (all over the last axis) ----

Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = Real(1e-5));
// Shannon entropy (natural log) of each row; 0 log 0 = 0.
Tensor entropy_rows(const Tensor& p);

inline constexpr std::int64_t kIgnoreIndex = -1;

// logits [N, V]; targets of length N, kIgnoreIndex entries are skipped.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets,
                     Reduction reduction = Reduction::mean);
Tensor mse(const Tensor& a, const Tensor& b);
Tensor l1(const Tensor& a, const Tensor& b);

// ---- indexing and gradient routing ----

// table [V, C] gathered by ids -> [ids.size(), C].
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids);
Tensor stop_gradient(const Tensor& a);
// Forward value of `forward`, gradient delivered unchanged to both inputs.
// Equals forward + surrogate - stop_gradient(surrogate) with an exact forward.
Tensor straight_through(const Tensor& forward, const Tensor& surrogate);

// x [B, H, W, C] -> [B, (H/s)(W/s), s*s*C], non-overlapping s x s patches in
// row-major patch order; inner layout (dy, dx, c).
Tensor im2patch(const Tensor& x, std::int64_t s);
// Inverse of im2patch.
Tensor patch2im(const Tensor& patches, std::int64_t height, std::int64_t width, std::int64_t channels,
                std::int64_t s);

// ---- attention ----

// q, k, v [B, T, C] split into `heads` heads. Query t attends to keys in
// [key_start[b], t]. Queries before key_start[b] produce zeros.
// An empty key_start means zero for every sequence.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                        std::span<const std::int64_t> key_start = {});

// ---- sparse codebook access (truncated softmax path) ----

// out[n, m] = <f[n], table[idx[n*M + m]]>, f [N, D], table [K, D].
Tensor gather_dot(const Tensor& f, const Tensor& table, std::span<const std::int64_t> idx, std::int64_t m);
// out[n] = sum_m w[n, m] table[idx[n*M + m]], w [N, M].
Tensor gather_combine(const Tensor& w, const Tensor& table, std::span<const std::int64_t> idx);
// out[k] = sum over (n, m) with idx[n*M + m] == k of w[n, m].
Tensor scatter_sum(const Tensor& w, std::span<const std::int64_t> idx, std::int64_t k);

ETT_NAMESPACE_END
