#include "ett/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ett/data.hpp"
#include "ett/model.hpp"
#include "ett/rng.hpp"

ETT_NAMESPACE_BEGIN

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
    Buffer v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<Real>(rng.normal() * scale);
    return Tensor::from(std::move(shape), std::move(v));
}

// Values bounded away from zero, for ops with a kink there.
Tensor away_from_zero(Rng& rng, Shape shape) {
    Tensor t = random_tensor(rng, std::move(shape));
    for (auto& x : t.mutable_values()) x = x >= 0 ? x + Real(0.2) : x - Real(0.2);
    return t;
}

Tensor positive_tensor(Rng& rng, Shape shape) {
    Tensor t = random_tensor(rng, std::move(shape));
    for (auto& x : t.mutable_values()) x = Real(0.5) + std::abs(x);
    return t;
}

std::vector<std::int64_t> random_ids(Rng& rng, std::size_t n, std::uint64_t below) {
    std::vector<std::int64_t> ids(n);
    for (auto& i : ids) i = static_cast<std::int64_t>(rng.below(below));
    return ids;
}

struct OpCase {
    std::vector<Tensor> inputs;
    ScalarFn fn;
};

// Same-shape weights drawn once so the function is fixed across evaluations.
ScalarFn contract(std::function<Tensor(std::span<const Tensor>)> op, std::vector<Tensor> probe_inputs, Rng& rng) {
    Tensor probe;
    {
        NoGradGuard g;
        probe = op(probe_inputs);
    }
    Tensor w = random_tensor(rng, probe.shape());
    return [op = std::move(op), w](std::span<const Tensor> xs) { return sum(mul(op(xs), w)); };
}

OpCase make_case(const std::string& name, Rng& rng) {
    OpCase c;
    auto unary = [&](Shape shape, std::function<Tensor(const Tensor&)> f, int kind = 0) {
        Tensor x = kind == 1 ? away_from_zero(rng, shape) : kind == 2 ? positive_tensor(rng, shape) : random_tensor(rng, shape);
        c.inputs = {x};
        c.fn = contract([f](std::span<const Tensor> xs) { return f(xs[0]); }, c.inputs, rng);
    };
    auto binary = [&](Shape a, Shape b, std::function<Tensor(const Tensor&, const Tensor&)> f) {
        c.inputs = {random_tensor(rng, a), random_tensor(rng, b)};
        c.fn = contract([f](std::span<const Tensor> xs) { return f(xs[0], xs[1]); }, c.inputs, rng);
    };

    if (name == "matmul") binary({3, 4}, {4, 5}, [](auto& a, auto& b) { return matmul(a, b); });
    else if (name == "batched-matmul") binary({2, 3, 4}, {4, 5}, [](auto& a, auto& b) { return matmul(a, b); });
    else if (name == "linear") {
        c.inputs = {random_tensor(rng, {2, 3, 4}), random_tensor(rng, {4, 5}), random_tensor(rng, {5})};
        c.fn = contract([](std::span<const Tensor> xs) { return linear(xs[0], xs[1], xs[2]); }, c.inputs, rng);
    } else if (name == "transpose") unary({3, 4}, [](auto& a) { return transpose(a); });
    else if (name == "add") binary({2, 3, 4}, {4}, [](auto& a, auto& b) { return add(a, b); });
    else if (name == "sub") binary({2, 3, 4}, {3, 4}, [](auto& a, auto& b) { return sub(a, b); });
    else if (name == "mul") binary({2, 3, 4}, {2, 3, 4}, [](auto& a, auto& b) { return mul(a, b); });
    else if (name == "mul-broadcast") binary({2, 3, 4}, {4}, [](auto& a, auto& b) { return mul(a, b); });
    else if (name == "scale") unary({3, 4}, [](auto& a) { return scale(a, Real(-1.7)); });
    else if (name == "add-scalar") unary({3, 4}, [](auto& a) { return square(add_scalar(a, Real(0.3))); });
    else if (name == "broadcast") unary({4}, [](auto& a) { return broadcast_to(a, Shape{3, 4}); });
    else if (name == "square") unary({3, 4}, [](auto& a) { return square(a); });
    else if (name == "log") unary({3, 4}, [](auto& a) { return log(a); }, 2);
    else if (name == "exp") unary({3, 4}, [](auto& a) { return exp(a); });
    else if (name == "relu") unary({3, 4}, [](auto& a) { return relu(a); }, 1);
    else if (name == "gelu") unary({3, 4}, [](auto& a) { return gelu(a); });
    else if (name == "reshape") unary({3, 4}, [](auto& a) { return reshape(a, Shape{2, 6}); });
    else if (name == "slice") unary({3, 5, 2}, [](auto& a) { return slice(a, 1, 1, 3); });
    else if (name == "concat") {
        binary({2, 3}, {2, 2}, [](auto& a, auto& b) {
            const Tensor parts[] = {a, b};
            return concat(parts, 1);
        });
    } else if (name == "sum") unary({3, 4}, [](auto& a) { return sum(square(a)); });
    else if (name == "mean") unary({3, 4}, [](auto& a) { return mean(square(a)); });
    else if (name == "sum-axis") unary({3, 4, 2}, [](auto& a) { return sum_axis(a, 1); });
    else if (name == "mean-axis") unary({3, 4}, [](auto& a) { return mean_axis(a, 0); });
    else if (name == "softmax") unary({3, 5}, [](auto& a) { return softmax(a); });
    else if (name == "log-softmax") unary({3, 5}, [](auto& a) { return log_softmax(a); });
    else if (name == "layer-norm") {
        c.inputs = {random_tensor(rng, {3, 6}), random_tensor(rng, {6}), random_tensor(rng, {6})};
        c.fn = contract([](std::span<const Tensor> xs) { return layer_norm(xs[0], xs[1], xs[2]); }, c.inputs, rng);
    } else if (name == "entropy") unary({3, 5}, [](auto& a) { return entropy_rows(softmax(a)); });
    else if (name == "cross-entropy") {
        const std::vector<std::int64_t> targets = {1, kIgnoreIndex, 4, 0};
        c.inputs = {random_tensor(rng, {4, 5})};
        c.fn = [targets](std::span<const Tensor> xs) { return cross_entropy(xs[0], targets); };
    } else if (name == "cross-entropy-sum") {
        const std::vector<std::int64_t> targets = {2, 3, 0};
        c.inputs = {random_tensor(rng, {3, 5})};
        c.fn = [targets](std::span<const Tensor> xs) { return cross_entropy(xs[0], targets, Reduction::sum); };
    } else if (name == "mse") {
        c.inputs = {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})};
        c.fn = [](std::span<const Tensor> xs) { return mse(xs[0], xs[1]); };
    } else if (name == "l1") {
        Tensor b = random_tensor(rng, {3, 4});
        Tensor a = away_from_zero(rng, {3, 4});
        for (std::size_t i = 0; i < 12; ++i) a.mutable_values()[i] += b.values()[i];
        c.inputs = {a, b};
        c.fn = [](std::span<const Tensor> xs) { return l1(xs[0], xs[1]); };
    } else if (name == "embedding") {
        const auto ids = random_ids(rng, 7, 6);
        unary({6, 4}, [ids](auto& t) { return embedding(t, ids); });
    } else if (name == "im2patch") unary({2, 4, 4, 3}, [](auto& a) { return im2patch(a, 2); });
    else if (name == "patch2im") unary({2, 4, 12}, [](auto& a) { return patch2im(a, 4, 4, 3, 2); });
    else if (name == "attention" || name == "attention-offset") {
        std::vector<std::int64_t> starts;
        if (name == "attention-offset") starts = {0, 2};
        c.inputs = {random_tensor(rng, {2, 5, 8}), random_tensor(rng, {2, 5, 8}), random_tensor(rng, {2, 5, 8})};
        c.fn = contract(
            [starts](std::span<const Tensor> xs) { return causal_attention(xs[0], xs[1], xs[2], 2, starts); },
            c.inputs, rng);
    } else if (name == "gather-dot") {
        const auto idx = random_ids(rng, 4 * 3, 6);
        binary({4, 5}, {6, 5}, [idx](auto& f, auto& t) { return gather_dot(f, t, idx, 3); });
    } else if (name == "gather-combine") {
        const auto idx = random_ids(rng, 4 * 3, 6);
        binary({4, 3}, {6, 5}, [idx](auto& w, auto& t) { return gather_combine(w, t, idx); });
    } else if (name == "scatter-sum") {
        const auto idx = random_ids(rng, 4 * 3, 6);
        unary({4, 3}, [idx](auto& w) { return scatter_sum(w, idx, 6); });
    } else {
        throw Error(ErrorCode::invalid_argument, "unknown gradcheck op '" + name + "'");
    }
    return c;
}

const std::vector<std::string> kQuantizerOps = {"quantize-probs", "quantize-hard", "quantize-truncated",
                                                "quantization-loss", "entropy-loss", "entropy-loss-truncated"};

const std::vector<std::string> kPlainOps = {
    "matmul", "batched-matmul", "linear", "transpose", "add", "sub", "mul", "mul-broadcast", "scale", "add-scalar",
    "broadcast", "square", "log", "exp", "relu", "gelu", "reshape", "slice", "concat", "sum", "mean", "sum-axis",
    "mean-axis", "softmax", "log-softmax", "layer-norm", "entropy", "cross-entropy", "cross-entropy-sum", "mse", "l1",
    "embedding", "im2patch", "patch2im", "attention", "attention-offset", "gather-dot", "gather-combine",
    "scatter-sum"};

// Quantization whose hard selection and stop-gradient values are frozen at
// the base point: z = (onehot0 - p0 + p) B. Its derivative is the surrogate
// gradient and its value at the base point is the hard forward.
struct FrozenSurrogate {
    Buffer offset;  // onehot0 - p0
    Tensor operator()(const Tensor& features, const Codebook& cb, const QuantizerConfig& cfg) const {
        const std::int64_t d = cb.dim;
        const std::int64_t n = features.numel() / d;
        Tensor f2 = reshape(features, Shape{n, d});
        Tensor logits = matmul(f2, transpose(cb.embeddings));
        if (cfg.logits == LogitMode::neg_l2) logits = sub(scale(logits, Real(2)), sum_axis(square(cb.embeddings), 1));
        Tensor p = softmax(scale(logits, static_cast<Real>(1.0 / cfg.temperature)));
        Tensor assign = add(Tensor::from(Shape{n, cb.codes}, offset), p);
        return reshape(matmul(assign, cb.embeddings), features.shape());
    }
    static FrozenSurrogate at(const QuantizationResult& q, std::int64_t codes) {
        FrozenSurrogate s;
        const auto p = q.probs.values();
        s.offset.assign(p.begin(), p.end());
        for (auto& v : s.offset) v = -v;
        for (std::size_t r = 0; r < q.indices.size(); ++r) {
            s.offset[r * static_cast<std::size_t>(codes) + static_cast<std::size_t>(q.indices[r])] += Real(1);
        }
        return s;
    }
};

// Relative error per coordinate is |a - n| / max(floor, |a|, |n|).
GradCheckResult check_against(const ScalarFn& analytic, const ScalarFn& numeric, std::span<const Tensor> inputs,
                              double eps, double floor = 1.0) {
    std::vector<Tensor> xs(inputs.begin(), inputs.end());
    for (auto& x : xs) {
        x.set_requires_grad(true);
        x.zero_grad();
    }
    backward(analytic(xs));
    GradCheckResult result;
    result.per_input.assign(xs.size(), 0.0);
    NoGradGuard no_grad;
    for (std::size_t t = 0; t < xs.size(); ++t) {
        auto values = xs[t].mutable_values();
        const auto grad = xs[t].grad();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const Real saved = values[i];
            values[i] = static_cast<Real>(saved + eps);
            const double up = numeric(xs).item();
            values[i] = static_cast<Real>(saved - eps);
            const double down = numeric(xs).item();
            values[i] = saved;
            const double num = (up - down) / (2.0 * eps);
            const double ana = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
            double err = std::abs(ana - num) / std::max({floor, std::abs(ana), std::abs(num)});
            if (std::isnan(ana) || std::isnan(num)) err = std::numeric_limits<double>::infinity();
            result.per_input[t] = std::max(result.per_input[t], err);
        }
        result.max_rel_error = std::max(result.max_rel_error, result.per_input[t]);
    }
    return result;
}

// Gradients below this magnitude are compared in absolute terms.
constexpr double kEndToEndFloor = 1e-6;
constexpr double kEndToEndEps = 1e-5;

constexpr double kEps = 1e-6;

GradCheckReport check_quantizer_op(const std::string& name, Rng& rng) {
    GradCheckReport rep;
    rep.name = name;
    rep.threshold = kOpTolerance;
    ParamStore store(rng.next());
    QuantizerConfig qc;
    qc.codebook_size = 6;
    qc.code_dim = 3;
    qc.temperature = 0.7;
    Codebook cb = Codebook::create(store, qc);
    Tensor features = random_tensor(rng, {2, 2, 3});
    const std::vector<Tensor> inputs = {features, cb.embeddings};
    GradCheckResult r;

    if (name == "quantize-probs") {
        r = grad_check(contract([&](std::span<const Tensor>) { return quantize(features, cb, qc).probs; }, inputs, rng),
                       inputs, kEps);
    } else if (name == "quantize-truncated") {
        QuantizerConfig tc = qc;
        tc.dense_budget = 0;
        tc.top_m = 3;
        Tensor w;
        {
            NoGradGuard g;
            w = random_tensor(rng, quantize(features, cb, tc).probs.shape());
        }
        r = grad_check([&](std::span<const Tensor>) { return sum(mul(quantize(features, cb, tc).probs, w)); }, inputs,
                       kEps);
        rep.note = "probabilities over the fixed top-M set";
    } else if (name == "quantize-hard") {
        QuantizationResult base;
        {
            NoGradGuard g;
            base = quantize(features, cb, qc);
        }
        const FrozenSurrogate sur = FrozenSurrogate::at(base, qc.codebook_size);
        Tensor w = random_tensor(rng, features.shape());
        r = check_against([&](std::span<const Tensor>) { return sum(mul(quantize(features, cb, qc).z, w)); },
                          [&](std::span<const Tensor>) { return sum(mul(sur(features, cb, qc), w)); }, inputs, kEps);
        rep.note = "tested against defined surrogate";
    } else if (name == "quantization-loss") {
        Tensor z = random_tensor(rng, {2, 2, 3});
        const std::vector<Tensor> both = {features, z};
        // Stop-gradient terms make finite differences disagree by design;
        // compare with the defined derivatives d/df = 2 beta (f - z)/n and
        // d/dz = 2 (z - f)/n instead.
        rep.note = "checked against the defined stop-gradient derivative";
        std::vector<Tensor> xs = both;
        for (auto& x : xs) {
            x.set_requires_grad(true);
            x.zero_grad();
        }
        backward(quantization_loss(xs[0], xs[1], 0.25));
        double err = 0;
        const auto n = static_cast<double>(features.numel());
        for (std::int64_t i = 0; i < features.numel(); ++i) {
            const double f = features.values()[i], zz = z.values()[i];
            err = std::max(err, std::abs(xs[0].grad()[i] - 2 * 0.25 * (f - zz) / n));
            err = std::max(err, std::abs(xs[1].grad()[i] - 2 * (zz - f) / n));
        }
        r.max_rel_error = err;
    } else if (name == "entropy-loss") {
        Tensor logits = random_tensor(rng, {4, 6});
        const std::vector<Tensor> in = {logits};
        r = grad_check([](std::span<const Tensor> xs) { return entropy_loss(softmax(xs[0])); }, in, kEps);
    } else if (name == "entropy-loss-truncated") {
        Tensor logits = random_tensor(rng, {4, 3});
        const auto idx = std::vector<std::int64_t>{0, 2, 5, 1, 2, 3, 4, 0, 1, 5, 3, 2};
        const std::vector<Tensor> in = {logits};
        r = grad_check([&](std::span<const Tensor> xs) { return entropy_loss_truncated(softmax(xs[0]), idx, 6); }, in,
                       kEps);
    }
    rep.max_rel_error = r.max_rel_error;
    rep.passed = rep.max_rel_error <= rep.threshold;
    return rep;
}

struct TinySetup {
    std::unique_ptr<Vocab> vocab;
    std::unique_ptr<EttModel> model;
    Tensor images;
    std::vector<std::vector<std::int64_t>> texts;
};

TinySetup tiny_setup(std::uint64_t seed, InputMode mode) {
    TinySetup s;
    s.vocab = std::make_unique<Vocab>(Vocab::from_alphabet(caption_alphabet()));
    ModelConfig mc;
    mc.tokenizer = {8, 4, 8, 1, 4, 4};
    mc.quantizer.codebook_size = 16;
    mc.lm.width = 8;
    mc.lm.layers = 1;
    mc.lm.heads = 2;
    mc.lm.max_len = 32;
    mc.lm.projector_hidden = 8;
    mc.mode = mode;
    s.model = std::make_unique<EttModel>(mc, *s.vocab, seed);
    Rng rng(hash_combine(seed, 0xe2e));
    Buffer pix(2 * 8 * 8 * 3);
    for (auto& p : pix) p = static_cast<Real>(rng.uniform() * 2.0 - 1.0);
    s.images = Tensor::from(Shape{2, 8, 8, 3}, std::move(pix));
    for (std::uint64_t i = 0; i < 2; ++i) {
        std::string caption = generate_sample(seed, i).caption.substr(0, 10);
        s.texts.push_back(s.vocab->encode(caption));
    }
    return s;
}

}  // namespace

std::vector<std::string> gradcheck_op_names() {
    std::vector<std::string> out = kPlainOps;
    out.insert(out.end(), kQuantizerOps.begin(), kQuantizerOps.end());
    return out;
}

bool is_gradcheck_op(const std::string& name) {
    const auto all = gradcheck_op_names();
    return std::find(all.begin(), all.end(), name) != all.end();
}

GradCheckReport check_op(const std::string& name, std::uint64_t seed) {
    if (!is_gradcheck_op(name)) throw Error(ErrorCode::invalid_argument, "unknown gradcheck op '" + name + "'");
    Rng rng(hash_combine(seed, fnv1a(name)));
    if (std::find(kQuantizerOps.begin(), kQuantizerOps.end(), name) != kQuantizerOps.end()) {
        return check_quantizer_op(name, rng);
    }
    OpCase c = make_case(name, rng);
    GradCheckReport rep;
    rep.name = name;
    rep.threshold = kOpTolerance;
    rep.max_rel_error = grad_check(c.fn, c.inputs, kEps).max_rel_error;
    rep.passed = rep.max_rel_error <= rep.threshold;
    return rep;
}

GradCheckReport check_end_to_end(std::uint64_t seed) {
    TinySetup s = tiny_setup(seed, InputMode::embedding);
    EttModel& m = *s.model;
    const auto& qc = m.config().quantizer;

    QuantizationResult base;
    {
        NoGradGuard g;
        base = quantize(m.tokenizer.encode(s.images), m.codebook, qc);
    }
    const FrozenSurrogate sur = FrozenSurrogate::at(base, qc.codebook_size);
    const std::int64_t b = s.images.dim(0);
    const ScalarFn analytic = [&](std::span<const Tensor>) {
        const auto q = quantize(m.tokenizer.encode(s.images), m.codebook, qc);
        return caption_loss(m.visual_inputs(q, b), s.texts, m.lm, m.special());
    };
    const ScalarFn numeric = [&](std::span<const Tensor>) {
        const Tensor z = sur(m.tokenizer.encode(s.images), m.codebook, qc);
        return caption_loss(m.projector(z), s.texts, m.lm, m.special());
    };

    std::vector<Tensor> inputs;
    std::vector<Group> groups;
    for (const auto& p : m.params.params()) {
        if (p.group == Group::encoder || p.group == Group::codebook || p.group == Group::lm ||
            (p.group == Group::projector && p.name != "projector.index_table")) {
            inputs.push_back(p.tensor);
            groups.push_back(p.group);
        }
    }
    const GradCheckResult r = check_against(analytic, numeric, inputs, kEndToEndEps, kEndToEndFloor);

    GradCheckReport rep;
    rep.name = "end-to-end";
    rep.threshold = kEndToEndTolerance;
    rep.max_rel_error = r.max_rel_error;
    rep.note = "hard code selection checked against defined surrogate";
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        double mx = 0;
        for (Real g : inputs[i].grad()) mx = std::max(mx, std::abs(static_cast<double>(g)));
        auto& slot = rep.grad_max[std::string(group_name(groups[i]))];
        slot = std::max(slot, mx);
    }
    bool nonzero = true;
    for (const auto& [g, v] : rep.grad_max) nonzero = nonzero && v > 0;
    rep.passed = rep.max_rel_error <= rep.threshold && nonzero;
    return rep;
}

std::map<Group, double> caption_gradient_magnitudes(std::uint64_t seed, InputMode mode) {
    TinySetup s = tiny_setup(seed, mode);
    EttModel& m = *s.model;
    m.params.set_trainable({kAllGroups.begin(), kAllGroups.end()});
    m.params.zero_grad();
    const auto q = quantize(m.tokenizer.encode(s.images), m.codebook, m.config().quantizer);
    backward(caption_loss(m.visual_inputs(q, s.images.dim(0)), s.texts, m.lm, m.special()));
    std::map<Group, double> out;
    for (const auto& p : m.params.params()) {
        double mx = 0;
        for (Real g : p.tensor.grad()) mx = std::max(mx, std::abs(static_cast<double>(g)));
        out[p.group] = std::max(out[p.group], mx);
    }
    return out;
}

ETT_NAMESPACE_END
