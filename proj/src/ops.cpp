#include "ett/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

ETT_NAMESPACE_BEGIN

namespace {

using MatRM = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;
using Strided = Eigen::Map<MatRM, 0, Eigen::OuterStride<>>;
using CStrided = Eigen::Map<const MatRM, 0, Eigen::OuterStride<>>;

std::int64_t last_dim(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

void check_broadcast(const char* op, const Tensor& a, const Tensor& b) {
    if (!is_suffix(b.shape(), a.shape())) throw ShapeError(op, a.shape(), b.shape());
}

Node& in(Node& self, std::size_t i) { return *self.inputs[i]; }

// grad(x) += sign * src, copying instead when x has no gradient yet.
void accumulate(Node& x, const Real* src, Real sign = Real(1)) {
    if (x.grad.empty()) {
        x.grad.assign(src, src + x.value.size());
        if (sign != Real(1))
            for (auto& v : x.grad) v *= sign;
        return;
    }
    Real* g = x.grad.data();
    const std::size_t n = x.value.size();
    for (std::size_t i = 0; i < n; ++i) g[i] += sign * src[i];
}

// grad(y)[j] += sign * sum over blocks of src[o * nb + j].
void accumulate_blocks(Node& y, const Real* src, std::size_t total, Real sign = Real(1)) {
    const std::size_t nb = y.value.size();
    auto& gy = y.ensure_grad();
    for (std::size_t o = 0; o < total; o += nb)
        for (std::size_t j = 0; j < nb; ++j) gy[j] += sign * src[o + j];
}

// Iterates outer/axis/inner decomposition of a shape around `axis`.
struct AxisSplit {
    std::int64_t outer = 1;
    std::int64_t extent = 1;
    std::int64_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
    AxisSplit s;
    for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
    s.extent = shape[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

int normalize_axis(const char* op, const Tensor& a, int axis) {
    const int r = a.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError(op, a.shape(), Shape{axis}, "axis out of range");
    return axis;
}

template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
    Buffer out(a.values().begin(), a.values().end());
    for (auto& v : out) v = fwd(v);
    return make_result(op, a.shape(), std::move(out), {a}, [deriv](Node& self) {
        Node& x = in(self, 0);
        if (!x.requires_grad) return;
        const std::size_t n = x.value.size();
        if (x.grad.empty()) {
            x.grad.resize(n);
            for (std::size_t i = 0; i < n; ++i) x.grad[i] = self.grad[i] * deriv(x.value[i], self.value[i]);
        } else {
            for (std::size_t i = 0; i < n; ++i) x.grad[i] += self.grad[i] * deriv(x.value[i], self.value[i]);
        }
    });
}

constexpr Real kGeluC = Real(0.7978845608028654);  // sqrt(2/pi)
constexpr Real kGeluA = Real(0.044715);

}  // namespace

// ---------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 1 || b.rank() != 2 || last_dim(a) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
    const std::int64_t k = b.dim(0);
    const std::int64_t n = b.dim(1);
    const std::int64_t m = a.numel() / k;
    Shape shape = a.shape();
    shape.back() = n;
    Buffer out(static_cast<std::size_t>(m * n));
    MapRM(out.data(), m, n).noalias() = CMapRM(a.values().data(), m, k) * CMapRM(b.values().data(), k, n);
    return make_result("matmul", std::move(shape), std::move(out), {a, b}, [m, k, n](Node& self) {
        Node& x = in(self, 0);
        Node& w = in(self, 1);
        CMapRM g(self.grad.data(), m, n);
        if (x.requires_grad) {
            MapRM(x.ensure_grad().data(), m, k).noalias() += g * CMapRM(w.value.data(), k, n).transpose();
        }
        if (w.requires_grad) {
            MapRM(w.ensure_grad().data(), k, n).noalias() += CMapRM(x.value.data(), m, k).transpose() * g;
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (!bias.defined()) return matmul(x, w);
    if (x.rank() < 1 || w.rank() != 2 || last_dim(x) != w.dim(0)) throw ShapeError("linear", x.shape(), w.shape());
    if (bias.rank() != 1 || bias.dim(0) != w.dim(1)) throw ShapeError("linear", w.shape(), bias.shape());
    const std::int64_t k = w.dim(0);
    const std::int64_t n = w.dim(1);
    const std::int64_t m = x.numel() / k;
    Shape shape = x.shape();
    shape.back() = n;
    Buffer out(static_cast<std::size_t>(m * n));
    MapRM o(out.data(), m, n);
    o.noalias() = CMapRM(x.values().data(), m, k) * CMapRM(w.values().data(), k, n);
    o.rowwise() += Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>(bias.values().data(), n);
    return make_result("linear", std::move(shape), std::move(out), {x, w, bias}, [m, k, n](Node& self) {
        Node& xn = in(self, 0);
        Node& wn = in(self, 1);
        Node& bn = in(self, 2);
        CMapRM g(self.grad.data(), m, n);
        if (xn.requires_grad) {
            const bool fresh = xn.grad.empty();
            MapRM gx(xn.ensure_grad().data(), m, k);
            if (fresh) {
                gx.noalias() = g * CMapRM(wn.value.data(), k, n).transpose();
            } else {
                gx.noalias() += g * CMapRM(wn.value.data(), k, n).transpose();
            }
        }
        if (wn.requires_grad) {
            MapRM(wn.ensure_grad().data(), k, n).noalias() += CMapRM(xn.value.data(), m, k).transpose() * g;
        }
        if (bn.requires_grad) {
            Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>>(bn.ensure_grad().data(), n) += g.colwise().sum();
        }
    });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() < 2) throw ShapeError("transpose", a.shape(), Shape{}, "rank < 2");
    const std::int64_t r = a.dim(-2);
    const std::int64_t c = a.dim(-1);
    const std::int64_t batch = a.numel() / (r * c);
    Shape shape = a.shape();
    std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
    Buffer out(a.values().size());
    for (std::int64_t b = 0; b < batch; ++b) {
        MapRM(out.data() + b * r * c, c, r) = CMapRM(a.values().data() + b * r * c, r, c).transpose();
    }
    return make_result("transpose", std::move(shape), std::move(out), {a}, [r, c, batch](Node& self) {
        Node& x = in(self, 0);
        auto& gx = x.ensure_grad();
        for (std::int64_t b = 0; b < batch; ++b) {
            MapRM(gx.data() + b * r * c, r, c) += CMapRM(self.grad.data() + b * r * c, c, r).transpose();
        }
    });
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    check_broadcast("add", a, b);
    const std::size_t nb = static_cast<std::size_t>(b.numel());
    Buffer out(a.values().begin(), a.values().end());
    const Real* bv = b.values().data();
    for (std::size_t o = 0; o < out.size(); o += nb)
        for (std::size_t j = 0; j < nb; ++j) out[o + j] += bv[j];
    return make_result("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
        Node& x = in(self, 0);
        Node& y = in(self, 1);
        if (x.requires_grad) accumulate(x, self.grad.data());
        if (y.requires_grad) accumulate_blocks(y, self.grad.data(), self.grad.size());
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_broadcast("sub", a, b);
    const std::size_t nb = static_cast<std::size_t>(b.numel());
    Buffer out(a.values().begin(), a.values().end());
    const Real* bv = b.values().data();
    for (std::size_t o = 0; o < out.size(); o += nb)
        for (std::size_t j = 0; j < nb; ++j) out[o + j] -= bv[j];
    return make_result("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
        Node& x = in(self, 0);
        Node& y = in(self, 1);
        if (x.requires_grad) accumulate(x, self.grad.data());
        if (y.requires_grad) accumulate_blocks(y, self.grad.data(), self.grad.size(), Real(-1));
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_broadcast("mul", a, b);
    const std::size_t nb = static_cast<std::size_t>(b.numel());
    Buffer out(a.values().begin(), a.values().end());
    const Real* bv = b.values().data();
    for (std::size_t o = 0; o < out.size(); o += nb)
        for (std::size_t j = 0; j < nb; ++j) out[o + j] *= bv[j];
    return make_result("mul", a.shape(), std::move(out), {a, b}, [nb](Node& self) {
        Node& x = in(self, 0);
        Node& y = in(self, 1);
        const std::size_t total = self.grad.size();
        if (x.requires_grad) {
            auto& gx = x.ensure_grad();
            for (std::size_t o = 0; o < total; o += nb)
                for (std::size_t j = 0; j < nb; ++j) gx[o + j] += self.grad[o + j] * y.value[j];
        }
        if (y.requires_grad) {
            auto& gy = y.ensure_grad();
            for (std::size_t o = 0; o < total; o += nb)
                for (std::size_t j = 0; j < nb; ++j) gy[j] += self.grad[o + j] * x.value[o + j];
        }
    });
}

Tensor scale(const Tensor& a, Real s) {
    return unary("scale", a, [s](Real v) { return v * s; }, [s](Real, Real) { return s; });
}

Tensor add_scalar(const Tensor& a, Real s) {
    return unary("add_scalar", a, [s](Real v) { return v + s; }, [](Real, Real) { return Real(1); });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
    if (!is_suffix(a.shape(), shape)) throw ShapeError("broadcast", a.shape(), shape);
    const std::size_t na = static_cast<std::size_t>(a.numel());
    const std::size_t n = static_cast<std::size_t>(shape_numel(shape));
    Buffer out(n);
    const auto av = a.values();
    for (std::size_t o = 0; o < n; o += na) std::copy_n(av.data(), na, out.data() + o);
    return make_result("broadcast", shape, std::move(out), {a}, [](Node& self) {
        accumulate_blocks(in(self, 0), self.grad.data(), self.grad.size());
    });
}

Tensor square(const Tensor& a) {
    return unary("square", a, [](Real v) { return v * v; }, [](Real x, Real) { return Real(2) * x; });
}

Tensor log(const Tensor& a) {
    return unary("log", a, [](Real v) { return std::log(v); }, [](Real x, Real) { return Real(1) / x; });
}

Tensor exp(const Tensor& a) {
    return unary("exp", a, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

Tensor relu(const Tensor& a) {
    return unary("relu", a, [](Real v) { return v > 0 ? v : Real(0); },
                 [](Real x, Real) { return x > 0 ? Real(1) : Real(0); });
}

Tensor gelu(const Tensor& a) {
    const auto av = a.values();
    auto th = std::make_shared<Buffer>(av.size());
    Buffer out(av.size());
    using Arr = Eigen::Array<Real, Eigen::Dynamic, 1>;
    Eigen::Map<const Arr> x(av.data(), static_cast<Eigen::Index>(av.size()));
    Eigen::Map<Arr> t(th->data(), static_cast<Eigen::Index>(av.size()));
    t = (kGeluC * (x + kGeluA * x.cube())).tanh();
    Eigen::Map<Arr>(out.data(), static_cast<Eigen::Index>(av.size())) = Real(0.5) * x * (Real(1) + t);
    return make_result("gelu", a.shape(), std::move(out), {a}, [th](Node& self) {
        Node& x = in(self, 0);
        const std::size_t n = x.value.size();
        const bool fresh = x.grad.empty();
        if (fresh) x.grad.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const Real v = x.value[i];
            const Real t = (*th)[i];
            const Real d = Real(0.5) * (Real(1) + t) +
                           Real(0.5) * v * (Real(1) - t * t) * kGeluC * (Real(1) + Real(3) * kGeluA * v * v);
            x.grad[i] = (fresh ? Real(0) : x.grad[i]) + self.grad[i] * d;
        }
    });
}

// ---------------------------------------------------------------- shape

Tensor reshape(const Tensor& a, Shape shape) {
    std::int64_t known = 1;
    int infer = -1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0 && known > 0) shape[static_cast<std::size_t>(infer)] = a.numel() / known;
    if (shape_numel(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape);
    Buffer out(a.values().begin(), a.values().end());
    return make_result("reshape", std::move(shape), std::move(out), {a}, [](Node& self) {
        Node& x = in(self, 0);
        if (x.grad.empty() && x.backward) {
            x.grad = std::move(self.grad);
        } else {
            accumulate(x, self.grad.data());
        }
    });
}

Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t length) {
    axis = normalize_axis("slice", a, axis);
    const auto sp = split_axis(a.shape(), axis);
    if (start < 0 || length < 0 || start + length > sp.extent) {
        throw ShapeError("slice", a.shape(), Shape{start, length}, "slice range out of bounds");
    }
    Shape shape = a.shape();
    shape[static_cast<std::size_t>(axis)] = length;
    Buffer out(static_cast<std::size_t>(sp.outer * length * sp.inner));
    const auto av = a.values();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        std::copy_n(av.data() + (o * sp.extent + start) * sp.inner, length * sp.inner,
                    out.data() + o * length * sp.inner);
    }
    return make_result("slice", std::move(shape), std::move(out), {a}, [sp, start, length](Node& self) {
        auto& gx = in(self, 0).ensure_grad();
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            const Real* g = self.grad.data() + o * length * sp.inner;
            Real* dst = gx.data() + (o * sp.extent + start) * sp.inner;
            for (std::int64_t i = 0; i < length * sp.inner; ++i) dst[i] += g[i];
        }
    });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
    if (parts.empty()) throw Error(ErrorCode::invalid_argument, "concat of zero tensors");
    axis = normalize_axis("concat", parts[0], axis);
    Shape shape = parts[0].shape();
    std::int64_t total = 0;
    std::vector<std::int64_t> extents;
    for (const auto& p : parts) {
        Shape probe = p.shape();
        if (probe.size() != shape.size()) throw ShapeError("concat", shape, probe);
        probe[static_cast<std::size_t>(axis)] = shape[static_cast<std::size_t>(axis)];
        if (probe != shape) throw ShapeError("concat", shape, p.shape());
        extents.push_back(p.dim(axis));
        total += p.dim(axis);
    }
    shape[static_cast<std::size_t>(axis)] = total;
    const auto sp = split_axis(shape, axis);
    Buffer out(static_cast<std::size_t>(shape_numel(shape)));
    std::int64_t offset = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const auto pv = parts[i].values();
        const std::int64_t len = extents[i];
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            std::copy_n(pv.data() + o * len * sp.inner, len * sp.inner,
                        out.data() + (o * total + offset) * sp.inner);
        }
        offset += len;
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return make_result("concat", std::move(shape), std::move(out), std::move(inputs),
                       [sp, total, extents](Node& self) {
                           std::int64_t off = 0;
                           for (std::size_t i = 0; i < extents.size(); ++i) {
                               Node& x = in(self, i);
                               const std::int64_t len = extents[i];
                               if (x.requires_grad) {
                                   auto& gx = x.ensure_grad();
                                   for (std::int64_t o = 0; o < sp.outer; ++o) {
                                       const Real* g = self.grad.data() + (o * total + off) * sp.inner;
                                       Real* dst = gx.data() + o * len * sp.inner;
                                       for (std::int64_t j = 0; j < len * sp.inner; ++j) dst[j] += g[j];
                                   }
                               }
                               off += len;
                           }
                       });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
    Real s = 0;
    for (Real v : a.values()) s += v;
    return make_result("sum", Shape{}, {s}, {a}, [](Node& self) {
        auto& gx = in(self, 0).ensure_grad();
        const Real g = self.grad[0];
        for (auto& v : gx) v += g;
    });
}

Tensor mean(const Tensor& a) {
    const auto n = static_cast<Real>(a.numel());
    Real s = 0;
    for (Real v : a.values()) s += v;
    return make_result("mean", Shape{}, {s / n}, {a}, [n](Node& self) {
        auto& gx = in(self, 0).ensure_grad();
        const Real g = self.grad[0] / n;
        for (auto& v : gx) v += g;
    });
}

Tensor sum_axis(const Tensor& a, int axis) {
    axis = normalize_axis("sum_axis", a, axis);
    const auto sp = split_axis(a.shape(), axis);
    Shape shape = a.shape();
    shape.erase(shape.begin() + axis);
    Buffer out(static_cast<std::size_t>(sp.outer * sp.inner), Real(0));
    const auto av = a.values();
    for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t e = 0; e < sp.extent; ++e)
            for (std::int64_t i = 0; i < sp.inner; ++i)
                out[o * sp.inner + i] += av[(o * sp.extent + e) * sp.inner + i];
    return make_result("sum_axis", std::move(shape), std::move(out), {a}, [sp](Node& self) {
        auto& gx = in(self, 0).ensure_grad();
        for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t e = 0; e < sp.extent; ++e)
                for (std::int64_t i = 0; i < sp.inner; ++i)
                    gx[(o * sp.extent + e) * sp.inner + i] += self.grad[o * sp.inner + i];
    });
}

Tensor mean_axis(const Tensor& a, int axis) {
    axis = normalize_axis("mean_axis", a, axis);
    return scale(sum_axis(a, axis), Real(1) / static_cast<Real>(a.dim(axis)));
}

// ---------------------------------------------------------------- probability

Tensor softmax(const Tensor& a) {
    const std::int64_t c = last_dim(a);
    const std::int64_t rows = a.numel() / c;
    Buffer out(a.values().begin(), a.values().end());
    for (std::int64_t r = 0; r < rows; ++r) {
        Real* row = out.data() + r * c;
        const Real mx = *std::max_element(row, row + c);
        Real z = 0;
        for (std::int64_t j = 0; j < c; ++j) z += (row[j] = std::exp(row[j] - mx));
        for (std::int64_t j = 0; j < c; ++j) row[j] /= z;
    }
    return make_result("softmax", a.shape(), std::move(out), {a}, [rows, c](Node& self) {
        auto& gx = in(self, 0).ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const Real* y = self.value.data() + r * c;
            const Real* g = self.grad.data() + r * c;
            Real dot = 0;
            for (std::int64_t j = 0; j < c; ++j) dot += g[j] * y[j];
            for (std::int64_t j = 0; j < c; ++j) gx[r * c + j] += y[j] * (g[j] - dot);
        }
    });
}

Tensor log_softmax(const Tensor& a) {
    const std::int64_t c = last_dim(a);
    const std::int64_t rows = a.numel() / c;
    Buffer out(a.values().begin(), a.values().end());
    for (std::int64_t r = 0; r < rows; ++r) {
        Real* row = out.data() + r * c;
        const Real mx = *std::max_element(row, row + c);
        Real z = 0;
        for (std::int64_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        const Real lse = mx + std::log(z);
        for (std::int64_t j = 0; j < c; ++j) row[j] -= lse;
    }
    return make_result("log_softmax", a.shape(), std::move(out), {a}, [rows, c](Node& self) {
        auto& gx = in(self, 0).ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const Real* y = self.value.data() + r * c;
            const Real* g = self.grad.data() + r * c;
            Real gs = 0;
            for (std::int64_t j = 0; j < c; ++j) gs += g[j];
            for (std::int64_t j = 0; j < c; ++j) gx[r * c + j] += g[j] - std::exp(y[j]) * gs;
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
    const std::int64_t c = last_dim(x);
    if (gamma.numel() != c || beta.numel() != c) throw ShapeError("layer_norm", x.shape(), gamma.shape());
    const std::int64_t rows = x.numel() / c;
    Buffer out(static_cast<std::size_t>(x.numel()));
    // Saved per-row statistics: normalised activations and inverse std.
    auto xhat = std::make_shared<Buffer>(out.size());
    auto inv_std = std::make_shared<Buffer>(static_cast<std::size_t>(rows));
    const auto xv = x.values();
    const auto gv = gamma.values();
    const auto bv = beta.values();
    for (std::int64_t r = 0; r < rows; ++r) {
        const Real* row = xv.data() + r * c;
        Real mu = 0;
        for (std::int64_t j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<Real>(c);
        Real var = 0;
        for (std::int64_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<Real>(c);
        const Real is = Real(1) / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(r)] = is;
        for (std::int64_t j = 0; j < c; ++j) {
            const Real h = (row[j] - mu) * is;
            (*xhat)[static_cast<std::size_t>(r * c + j)] = h;
            out[static_cast<std::size_t>(r * c + j)] = h * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
        }
    }
    return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                       [rows, c, xhat, inv_std](Node& self) {
                           Node& xn = in(self, 0);
                           Node& gn = in(self, 1);
                           Node& bn = in(self, 2);
                           const auto& h = *xhat;
                           if (gn.requires_grad) {
                               auto& gg = gn.ensure_grad();
                               for (std::int64_t r = 0; r < rows; ++r)
                                   for (std::int64_t j = 0; j < c; ++j) gg[j] += self.grad[r * c + j] * h[r * c + j];
                           }
                           if (bn.requires_grad) {
                               auto& gb = bn.ensure_grad();
                               for (std::int64_t r = 0; r < rows; ++r)
                                   for (std::int64_t j = 0; j < c; ++j) gb[j] += self.grad[r * c + j];
                           }
                           if (!xn.requires_grad) return;
                           auto& gx = xn.ensure_grad();
                           const Real inv_c = Real(1) / static_cast<Real>(c);
                           for (std::int64_t r = 0; r < rows; ++r) {
                               Real s1 = 0;
                               Real s2 = 0;
                               for (std::int64_t j = 0; j < c; ++j) {
                                   const Real gh = self.grad[r * c + j] * gn.value[j];
                                   s1 += gh;
                                   s2 += gh * h[r * c + j];
                               }
                               const Real is = (*inv_std)[r];
                               for (std::int64_t j = 0; j < c; ++j) {
                                   const Real gh = self.grad[r * c + j] * gn.value[j];
                                   gx[r * c + j] += is * (gh - inv_c * s1 - h[r * c + j] * inv_c * s2);
                               }
                           }
                       });
}

Tensor entropy_rows(const Tensor& p) {
    const std::int64_t c = last_dim(p);
    const std::int64_t rows = p.numel() / c;
    Shape shape = p.shape();
    if (!shape.empty()) shape.pop_back();
    Buffer out(static_cast<std::size_t>(rows), Real(0));
    const auto pv = p.values();
    for (std::int64_t r = 0; r < rows; ++r) {
        Real h = 0;
        for (std::int64_t j = 0; j < c; ++j) {
            const Real v = pv[r * c + j];
            if (v > 0) h -= v * std::log(v);
        }
        out[static_cast<std::size_t>(r)] = h;
    }
    return make_result("entropy", std::move(shape), std::move(out), {p}, [rows, c](Node& self) {
        Node& x = in(self, 0);
        auto& gx = x.ensure_grad();
        const Real tiny = std::numeric_limits<Real>::min();
        for (std::int64_t r = 0; r < rows; ++r) {
            const Real g = self.grad[r];
            for (std::int64_t j = 0; j < c; ++j) {
                const Real v = std::max(x.value[r * c + j], tiny);
                gx[r * c + j] -= g * (std::log(v) + Real(1));
            }
        }
    });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets, Reduction reduction) {
    if (logits.rank() != 2 || logits.dim(0) != static_cast<std::int64_t>(targets.size())) {
        throw ShapeError("cross_entropy", logits.shape(), Shape{static_cast<std::int64_t>(targets.size())});
    }
    const std::int64_t n = logits.dim(0);
    const std::int64_t v = logits.dim(1);
    auto probs = std::make_shared<Buffer>(static_cast<std::size_t>(n * v));
    auto tgt = std::make_shared<std::vector<std::int64_t>>(targets.begin(), targets.end());
    const auto lv = logits.values();
    Real total = 0;
    std::int64_t count = 0;
    for (std::int64_t r = 0; r < n; ++r) {
        const std::int64_t t = targets[static_cast<std::size_t>(r)];
        if (t == kIgnoreIndex) continue;
        if (t < 0 || t >= v) {
            throw Error(ErrorCode::invalid_argument,
                        "cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(v) + ")");
        }
        const Real* row = lv.data() + r * v;
        const Real mx = *std::max_element(row, row + v);
        Real z = 0;
        for (std::int64_t j = 0; j < v; ++j) z += ((*probs)[r * v + j] = std::exp(row[j] - mx));
        for (std::int64_t j = 0; j < v; ++j) (*probs)[r * v + j] /= z;
        total += -(row[t] - mx - std::log(z));
        ++count;
    }
    const Real denom = reduction == Reduction::mean ? static_cast<Real>(std::max<std::int64_t>(count, 1)) : Real(1);
    return make_result("cross_entropy", Shape{}, {total / denom}, {logits}, [n, v, probs, tgt, denom](Node& self) {
        auto& gx = in(self, 0).ensure_grad();
        const Real g = self.grad[0] / denom;
        for (std::int64_t r = 0; r < n; ++r) {
            const std::int64_t t = (*tgt)[r];
            if (t == kIgnoreIndex) continue;
            for (std::int64_t j = 0; j < v; ++j) gx[r * v + j] += g * (*probs)[r * v + j];
            gx[r * v + t] -= g;
        }
    });
}

Tensor mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("mse", a.shape(), b.shape());
    const auto n = static_cast<Real>(a.numel());
    Real s = 0;
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
    return make_result("mse", Shape{}, {s / n}, {a, b}, [n](Node& self) {
        Node& x = in(self, 0);
        Node& y = in(self, 1);
        const Real g = Real(2) * self.grad[0] / n;
        if (x.requires_grad) {
            auto& gx = x.ensure_grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * (x.value[i] - y.value[i]);
        }
        if (y.requires_grad) {
            auto& gy = y.ensure_grad();
            for (std::size_t i = 0; i < gy.size(); ++i) gy[i] -= g * (x.value[i] - y.value[i]);
        }
    });
}

Tensor l1(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("l1", a.shape(), b.shape());
    const auto n = static_cast<Real>(a.numel());
    Real s = 0;
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
    return make_result("l1", Shape{}, {s / n}, {a, b}, [n](Node& self) {
        Node& x = in(self, 0);
        Node& y = in(self, 1);
        const Real g = self.grad[0] / n;
        auto sign = [](Real d) { return d > 0 ? Real(1) : (d < 0 ? Real(-1) : Real(0)); };
        if (x.requires_grad) {
            auto& gx = x.ensure_grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * sign(x.value[i] - y.value[i]);
        }
        if (y.requires_grad) {
            auto& gy = y.ensure_grad();
            for (std::size_t i = 0; i < gy.size(); ++i) gy[i] -= g * sign(x.value[i] - y.value[i]);
        }
    });
}

// ---------------------------------------------------------------- indexing

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids) {
    if (table.rank() != 2) throw ShapeError("embedding", table.shape(), Shape{});
    const std::int64_t v = table.dim(0);
    const std::int64_t c = table.dim(1);
    const auto n = static_cast<std::int64_t>(ids.size());
    Buffer out(static_cast<std::size_t>(n * c));
    const auto tv = table.values();
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t id = ids[static_cast<std::size_t>(i)];
        if (id < 0 || id >= v) {
            throw Error(ErrorCode::invalid_argument,
                        "embedding: unknown id " + std::to_string(id) + " for table of " + std::to_string(v));
        }
        std::copy_n(tv.data() + id * c, c, out.data() + i * c);
    }
    auto saved = std::make_shared<std::vector<std::int64_t>>(ids.begin(), ids.end());
    return make_result("embedding", Shape{n, c}, std::move(out), {table}, [saved, c](Node& self) {
        auto& gt = in(self, 0).ensure_grad();
        for (std::size_t i = 0; i < saved->size(); ++i) {
            const Real* g = self.grad.data() + static_cast<std::int64_t>(i) * c;
            Real* dst = gt.data() + (*saved)[i] * c;
            for (std::int64_t j = 0; j < c; ++j) dst[j] += g[j];
        }
    });
}

Tensor stop_gradient(const Tensor& a) {
    Buffer out(a.values().begin(), a.values().end());
    return make_result("stop_gradient", a.shape(), std::move(out), {}, nullptr);
}

Tensor straight_through(const Tensor& forward, const Tensor& surrogate) {
    if (forward.shape() != surrogate.shape()) throw ShapeError("straight_through", forward.shape(), surrogate.shape());
    Buffer out(forward.values().begin(), forward.values().end());
    return make_result("straight_through", forward.shape(), std::move(out), {forward, surrogate}, [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            Node& x = in(self, k);
            if (x.requires_grad) accumulate(x, self.grad.data());
        }
    });
}

Tensor im2patch(const Tensor& x, std::int64_t s) {
    if (x.rank() != 4 || s <= 0 || x.dim(1) % s != 0 || x.dim(2) % s != 0) {
        throw ShapeError("im2patch", x.shape(), Shape{s}, "expects [B, H, W, C] with H, W divisible by s");
    }
    const std::int64_t b = x.dim(0), hh = x.dim(1), ww = x.dim(2), c = x.dim(3);
    const std::int64_t ph = hh / s, pw = ww / s, pd = s * s * c;
    // Source offset of each output element.
    auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(x.numel()));
    std::size_t o = 0;
    for (std::int64_t n = 0; n < b; ++n)
        for (std::int64_t py = 0; py < ph; ++py)
            for (std::int64_t px = 0; px < pw; ++px)
                for (std::int64_t dy = 0; dy < s; ++dy)
                    for (std::int64_t dx = 0; dx < s; ++dx)
                        for (std::int64_t ch = 0; ch < c; ++ch)
                            (*map)[o++] = ((n * hh + py * s + dy) * ww + px * s + dx) * c + ch;
    Buffer out(map->size());
    const auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[static_cast<std::size_t>((*map)[i])];
    return make_result("im2patch", Shape{b, ph * pw, pd}, std::move(out), {x}, [map](Node& self) {
        auto& gx = in(self, 0).ensure_grad();
        for (std::size_t i = 0; i < map->size(); ++i) gx[static_cast<std::size_t>((*map)[i])] += self.grad[i];
    });
}

Tensor patch2im(const Tensor& patches, std::int64_t height, std::int64_t width, std::int64_t channels,
                std::int64_t s) {
    if (s <= 0 || height % s != 0 || width % s != 0) {
        throw ShapeError("patch2im", patches.shape(), Shape{height, width, channels, s});
    }
    const std::int64_t ph = height / s, pw = width / s;
    if (patches.rank() != 3 || patches.dim(1) != ph * pw || patches.dim(2) != s * s * channels) {
        throw ShapeError("patch2im", patches.shape(), Shape{-1, ph * pw, s * s * channels});
    }
    const std::int64_t b = patches.dim(0);
    auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(patches.numel()));
    std::size_t o = 0;
    for (std::int64_t n = 0; n < b; ++n)
        for (std::int64_t py = 0; py < ph; ++py)
            for (std::int64_t px = 0; px < pw; ++px)
                for (std::int64_t dy = 0; dy < s; ++dy)
                    for (std::int64_t dx = 0; dx < s; ++dx)
                        for (std::int64_t ch = 0; ch < channels; ++ch)
                            (*map)[o++] = ((n * height + py * s + dy) * width + px * s + dx) * channels + ch;
    Buffer out(map->size());
    const auto pv = patches.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[static_cast<std::size_t>((*map)[i])] = pv[i];
    return make_result("patch2im", Shape{b, height, width, channels}, std::move(out), {patches}, [map](Node& self) {
        auto& gx = in(self, 0).ensure_grad();
        for (std::size_t i = 0; i < map->size(); ++i) gx[i] += self.grad[static_cast<std::size_t>((*map)[i])];
    });
}

// ---------------------------------------------------------------- attention

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                        std::span<const std::int64_t> key_start) {
    if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
        throw ShapeError("causal_attention", q.shape(), k.shape());
    }
    const std::int64_t nb = q.dim(0), t = q.dim(1), c = q.dim(2);
    if (heads <= 0 || c % heads != 0) throw ShapeError("causal_attention", q.shape(), Shape{heads}, "heads must divide C");
    if (!key_start.empty() && static_cast<std::int64_t>(key_start.size()) != nb) {
        throw ShapeError("causal_attention", q.shape(), Shape{static_cast<std::int64_t>(key_start.size())});
    }
    const std::int64_t dh = c / heads;
    const Real scl = Real(1) / std::sqrt(static_cast<Real>(dh));
    auto starts = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(nb), 0);
    if (!key_start.empty()) std::copy(key_start.begin(), key_start.end(), starts->begin());
    auto probs = std::make_shared<Buffer>(static_cast<std::size_t>(nb * heads * t * t), Real(0));
    Buffer out(static_cast<std::size_t>(q.numel()), Real(0));
    const Real ninf = -std::numeric_limits<Real>::infinity();
    MatRM scores(t, t);
    for (std::int64_t b = 0; b < nb; ++b) {
        const std::int64_t st = (*starts)[b];
        for (int h = 0; h < heads; ++h) {
            const std::int64_t off = b * t * c + h * dh;
            CStrided qh(q.values().data() + off, t, dh, Eigen::OuterStride<>(c));
            CStrided kh(k.values().data() + off, t, dh, Eigen::OuterStride<>(c));
            CStrided vh(v.values().data() + off, t, dh, Eigen::OuterStride<>(c));
            scores.noalias() = qh * kh.transpose();
            MapRM p(probs->data() + (b * heads + h) * t * t, t, t);
            for (std::int64_t i = st; i < t; ++i) {
                Real mx = ninf;
                for (std::int64_t j = st; j <= i; ++j) mx = std::max(mx, scores(i, j) * scl);
                Real z = 0;
                for (std::int64_t j = st; j <= i; ++j) z += (p(i, j) = std::exp(scores(i, j) * scl - mx));
                for (std::int64_t j = st; j <= i; ++j) p(i, j) /= z;
            }
            Strided(out.data() + off, t, dh, Eigen::OuterStride<>(c)).noalias() = p * vh;
        }
    }
    return make_result(
        "causal_attention", q.shape(), std::move(out), {q, k, v}, [nb, t, c, heads, dh, scl, probs](Node& self) {
            Node& qn = in(self, 0);
            Node& kn = in(self, 1);
            Node& vn = in(self, 2);
            // Scratch buffers stand in for inputs that take no gradient.
            Buffer sq, sk, sv;
            auto& gq = qn.requires_grad ? qn.ensure_grad() : (sq.assign(qn.value.size(), Real(0)), sq);
            auto& gk = kn.requires_grad ? kn.ensure_grad() : (sk.assign(kn.value.size(), Real(0)), sk);
            auto& gv = vn.requires_grad ? vn.ensure_grad() : (sv.assign(vn.value.size(), Real(0)), sv);
            MatRM dp(t, t);
            for (std::int64_t b = 0; b < nb; ++b) {
                for (int h = 0; h < heads; ++h) {
                    const std::int64_t off = b * t * c + h * dh;
                    const Eigen::OuterStride<> os(c);
                    CStrided go(self.grad.data() + off, t, dh, os);
                    CStrided qh(qn.value.data() + off, t, dh, os);
                    CStrided kh(kn.value.data() + off, t, dh, os);
                    CStrided vh(vn.value.data() + off, t, dh, os);
                    CMapRM p(probs->data() + (b * heads + h) * t * t, t, t);
                    Strided(gv.data() + off, t, dh, os).noalias() += p.transpose() * go;
                    dp.noalias() = go * vh.transpose();
                    // Softmax backward; masked entries have p == 0 and drop out.
                    for (std::int64_t i = 0; i < t; ++i) {
                        const Real dot = p.row(i).dot(dp.row(i));
                        for (std::int64_t j = 0; j < t; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * scl;
                    }
                    Strided(gq.data() + off, t, dh, os).noalias() += dp * kh;
                    Strided(gk.data() + off, t, dh, os).noalias() += dp.transpose() * qh;
                }
            }
        });
}

// ---------------------------------------------------------------- sparse codebook

Tensor gather_dot(const Tensor& f, const Tensor& table, std::span<const std::int64_t> idx, std::int64_t m) {
    if (f.rank() != 2 || table.rank() != 2 || f.dim(1) != table.dim(1)) {
        throw ShapeError("gather_dot", f.shape(), table.shape());
    }
    const std::int64_t n = f.dim(0), d = f.dim(1), kk = table.dim(0);
    if (static_cast<std::int64_t>(idx.size()) != n * m) throw ShapeError("gather_dot", f.shape(), Shape{m});
    auto saved = std::make_shared<std::vector<std::int64_t>>(idx.begin(), idx.end());
    Buffer out(static_cast<std::size_t>(n * m));
    const auto fv = f.values();
    const auto tv = table.values();
    for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t j = 0; j < m; ++j) {
            const std::int64_t code = idx[static_cast<std::size_t>(r * m + j)];
            if (code < 0 || code >= kk) throw Error(ErrorCode::invalid_argument, "gather_dot: code index out of range");
            Real s = 0;
            for (std::int64_t e = 0; e < d; ++e) s += fv[r * d + e] * tv[code * d + e];
            out[static_cast<std::size_t>(r * m + j)] = s;
        }
    return make_result("gather_dot", Shape{n, m}, std::move(out), {f, table}, [n, m, d, saved](Node& self) {
        Node& fn = in(self, 0);
        Node& tn = in(self, 1);
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t j = 0; j < m; ++j) {
                const Real g = self.grad[r * m + j];
                const std::int64_t code = (*saved)[r * m + j];
                if (fn.requires_grad) {
                    auto& gf = fn.ensure_grad();
                    for (std::int64_t e = 0; e < d; ++e) gf[r * d + e] += g * tn.value[code * d + e];
                }
                if (tn.requires_grad) {
                    auto& gt = tn.ensure_grad();
                    for (std::int64_t e = 0; e < d; ++e) gt[code * d + e] += g * fn.value[r * d + e];
                }
            }
    });
}

Tensor gather_combine(const Tensor& w, const Tensor& table, std::span<const std::int64_t> idx) {
    if (w.rank() != 2 || table.rank() != 2 || static_cast<std::int64_t>(idx.size()) != w.numel()) {
        throw ShapeError("gather_combine", w.shape(), table.shape());
    }
    const std::int64_t n = w.dim(0), m = w.dim(1), d = table.dim(1);
    auto saved = std::make_shared<std::vector<std::int64_t>>(idx.begin(), idx.end());
    Buffer out(static_cast<std::size_t>(n * d), Real(0));
    const auto wv = w.values();
    const auto tv = table.values();
    for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t j = 0; j < m; ++j) {
            const Real a = wv[r * m + j];
            const std::int64_t code = idx[static_cast<std::size_t>(r * m + j)];
            for (std::int64_t e = 0; e < d; ++e) out[r * d + e] += a * tv[code * d + e];
        }
    return make_result("gather_combine", Shape{n, d}, std::move(out), {w, table}, [n, m, d, saved](Node& self) {
        Node& wn = in(self, 0);
        Node& tn = in(self, 1);
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t j = 0; j < m; ++j) {
                const std::int64_t code = (*saved)[r * m + j];
                const Real* g = self.grad.data() + r * d;
                if (wn.requires_grad) {
                    Real s = 0;
                    for (std::int64_t e = 0; e < d; ++e) s += g[e] * tn.value[code * d + e];
                    wn.ensure_grad()[r * m + j] += s;
                }
                if (tn.requires_grad) {
                    auto& gt = tn.ensure_grad();
                    const Real a = wn.value[r * m + j];
                    for (std::int64_t e = 0; e < d; ++e) gt[code * d + e] += a * g[e];
                }
            }
    });
}

Tensor scatter_sum(const Tensor& w, std::span<const std::int64_t> idx, std::int64_t k) {
    if (static_cast<std::int64_t>(idx.size()) != w.numel()) throw ShapeError("scatter_sum", w.shape(), Shape{k});
    auto saved = std::make_shared<std::vector<std::int64_t>>(idx.begin(), idx.end());
    Buffer out(static_cast<std::size_t>(k), Real(0));
    const auto wv = w.values();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= k) throw Error(ErrorCode::invalid_argument, "scatter_sum: index out of range");
        out[static_cast<std::size_t>(idx[i])] += wv[i];
    }
    return make_result("scatter_sum", Shape{k}, std::move(out), {w}, [saved](Node& self) {
        auto& gw = in(self, 0).ensure_grad();
        for (std::size_t i = 0; i < saved->size(); ++i) gw[i] += self.grad[static_cast<std::size_t>((*saved)[i])];
    });
}

ETT_NAMESPACE_END
