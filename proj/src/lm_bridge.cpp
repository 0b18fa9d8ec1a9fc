#include "ett/lm_bridge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ett/rng.hpp"

ETT_NAMESPACE_BEGIN

namespace {

constexpr double kInitStd = 0.02;

void check_ids(std::span<const std::vector<std::int64_t>> texts, std::int64_t vocab) {
    for (const auto& t : texts)
        for (auto id : t)
            if (id < 0 || id >= vocab) {
                throw Error(ErrorCode::invalid_argument,
                            "unknown token id " + std::to_string(id) + " for vocabulary of " + std::to_string(vocab));
            }
}

}  // namespace

Tensor Projector::operator()(const Tensor& z) const {
    if (z.rank() < 2 || z.dim(-1) != fc1.weight.dim(0)) throw ShapeError("project", z.shape(), fc1.weight.shape());
    const std::int64_t b = z.dim(0);
    const std::int64_t d = z.dim(-1);
    Tensor flat = reshape(z, Shape{b, z.numel() / (b * d), d});
    return fc2(gelu(fc1(flat)));
}

Projector make_projector(ParamStore& store, std::int64_t in, std::int64_t hidden, std::int64_t out) {
    return Projector{make_linear(store, "projector.fc1", Group::projector, in, hidden, 1.0 / std::sqrt(double(in))),
                     make_linear(store, "projector.fc2", Group::projector, hidden, out, 1.0 / std::sqrt(double(hidden)))};
}

CausalLM::CausalLM(ParamStore& store, const LmConfig& cfg) : cfg_(cfg) {
    if (cfg.vocab_size <= 0) throw Error(ErrorCode::invalid_argument, "language model needs a non-empty vocabulary");
    if (cfg.heads <= 0 || cfg.width % cfg.heads != 0) {
        throw Error(ErrorCode::invalid_argument, "LM width must be divisible by the head count");
    }
    const std::int64_t c = cfg.width;
    const double resid_std = kInitStd / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    tok_emb_ = store.add("lm.tok_emb", Group::lm, Shape{cfg.vocab_size, c}, Init::normal, kInitStd);
    pos_emb_ = store.add("lm.pos_emb", Group::lm, Shape{cfg.max_len, c}, Init::normal, kInitStd);
    for (std::int64_t l = 0; l < cfg.layers; ++l) {
        const std::string p = "lm.layer" + std::to_string(l);
        blocks_.push_back(TransformerBlock{
            make_layer_norm(store, p + ".ln1", Group::lm, c),
            make_linear(store, p + ".qkv", Group::lm, c, 3 * c, kInitStd),
            make_linear(store, p + ".proj", Group::lm, c, c, resid_std),
            make_layer_norm(store, p + ".ln2", Group::lm, c),
            make_linear(store, p + ".fc1", Group::lm, c, 4 * c, kInitStd),
            make_linear(store, p + ".fc2", Group::lm, 4 * c, c, resid_std),
        });
    }
    ln_f_ = make_layer_norm(store, "lm.ln_f", Group::lm, c);
    text_head_ = make_linear(store, "lm.text_head", Group::lm, c, cfg.vocab_size, kInitStd);
    visual_head_ = make_linear(store, "visual_head", Group::visual_head, c, cfg.codes, kInitStd);
}

Tensor CausalLM::embed(const SequenceBatch& seq, const Tensor& visual) const {
    const std::int64_t c = cfg_.width;
    std::int64_t nv = 0;
    std::vector<Tensor> parts;
    if (visual.defined()) {
        if (visual.rank() != 3 || visual.dim(0) != seq.batch || visual.dim(2) != c) {
            throw ShapeError("embed", visual.shape(), Shape{seq.batch, -1, c});
        }
        nv = visual.dim(1);
        parts.push_back(reshape(visual, Shape{seq.batch * nv, c}));
    }
    const std::int64_t text_base = seq.batch * nv;
    const std::int64_t pad_row = text_base + cfg_.vocab_size;
    parts.push_back(tok_emb_);
    parts.push_back(Tensor::zeros(Shape{1, c}));
    Tensor table = concat(parts, 0);

    std::vector<std::int64_t> rows(seq.tokens.size());
    for (std::int64_t b = 0; b < seq.batch; ++b) {
        std::int64_t next_visual = 0;
        for (std::int64_t t = 0; t < seq.length; ++t) {
            const std::size_t i = static_cast<std::size_t>(b * seq.length + t);
            const std::int64_t tok = seq.tokens[i];
            if (tok == SequenceBatch::kVisualRow) {
                if (next_visual >= nv) throw ShapeError("embed", Shape{nv}, Shape{next_visual + 1}, "too few visual rows");
                rows[i] = b * nv + next_visual++;
            } else if (tok == SequenceBatch::kPadRow) {
                rows[i] = pad_row;
            } else {
                if (tok < 0 || tok >= cfg_.vocab_size) {
                    throw Error(ErrorCode::invalid_argument, "unknown token id " + std::to_string(tok));
                }
                rows[i] = text_base + tok;
            }
        }
    }
    return reshape(embedding(table, rows), Shape{seq.batch, seq.length, c});
}

Tensor CausalLM::forward(const Tensor& x, std::span<const std::int64_t> key_start,
                         std::span<const std::int64_t> positions) const {
    const std::int64_t c = cfg_.width;
    if (x.rank() != 3 || x.dim(2) != c) throw ShapeError("lm_forward", x.shape(), Shape{-1, -1, c});
    const std::int64_t b = x.dim(0);
    const std::int64_t t = x.dim(1);
    if (t > cfg_.max_len) {
        throw ShapeError("lm_forward", x.shape(), Shape{cfg_.max_len}, "sequence longer than max_len");
    }
    if (static_cast<std::int64_t>(positions.size()) != b * t) throw ShapeError("lm_forward", x.shape(), Shape{-1});
    Tensor h = add(x, reshape(embedding(pos_emb_, positions), Shape{b, t, c}));
    for (const auto& blk : blocks_) {
        Tensor qkv = blk.qkv(blk.ln1(h));
        Tensor att = causal_attention(slice(qkv, 2, 0, c), slice(qkv, 2, c, c), slice(qkv, 2, 2 * c, c),
                                      static_cast<int>(cfg_.heads), key_start);
        h = add(h, blk.proj(att));
        h = add(h, blk.fc2(gelu(blk.fc1(blk.ln2(h)))));
    }
    return ln_f_(h);
}

Tensor CausalLM::text_logits(const Tensor& hidden, std::span<const std::int64_t> rows) const {
    return text_head_(embedding(reshape(hidden, Shape{-1, cfg_.width}), rows));
}

Tensor CausalLM::visual_logits(const Tensor& hidden, std::span<const std::int64_t> rows) const {
    return visual_head_(embedding(reshape(hidden, Shape{-1, cfg_.width}), rows));
}

CaptionBatch make_caption_batch(std::span<const std::vector<std::int64_t>> texts, std::int64_t visual_tokens,
                                const SpecialTokens& sp, std::int64_t max_len) {
    CaptionBatch cb;
    auto& s = cb.seq;
    s.batch = static_cast<std::int64_t>(texts.size());
    for (const auto& t : texts) s.length = std::max<std::int64_t>(s.length, 2 + visual_tokens + static_cast<std::int64_t>(t.size()));
    if (s.length > max_len) {
        throw ShapeError("caption_batch", Shape{s.length}, Shape{max_len}, "caption sequence exceeds max_len");
    }
    s.tokens.assign(static_cast<std::size_t>(s.batch * s.length), SequenceBatch::kPadRow);
    s.positions.resize(s.tokens.size());
    s.key_start.assign(static_cast<std::size_t>(s.batch), 0);
    for (std::int64_t b = 0; b < s.batch; ++b) {
        const auto& text = texts[static_cast<std::size_t>(b)];
        std::int64_t* row = s.tokens.data() + b * s.length;
        row[0] = sp.boi;
        for (std::int64_t j = 0; j < visual_tokens; ++j) row[1 + j] = SequenceBatch::kVisualRow;
        const std::int64_t eoi = 1 + visual_tokens;
        row[eoi] = sp.eoi;
        for (std::size_t j = 0; j < text.size(); ++j) row[eoi + 1 + static_cast<std::int64_t>(j)] = text[j];
        for (std::int64_t t = 0; t < s.length; ++t) s.positions[static_cast<std::size_t>(b * s.length + t)] = t;
        for (std::size_t j = 0; j <= text.size(); ++j) {
            cb.rows.push_back(b * s.length + eoi + static_cast<std::int64_t>(j));
            cb.targets.push_back(j < text.size() ? text[j] : sp.eos);
        }
    }
    return cb;
}

namespace {

struct CaptionForward {
    CaptionBatch batch;
    Tensor logits;
};

CaptionForward caption_forward(const Tensor& visual, std::span<const std::vector<std::int64_t>> texts,
                               const CausalLM& lm, const SpecialTokens& sp) {
    if (visual.rank() != 3 || visual.dim(0) != static_cast<std::int64_t>(texts.size())) {
        throw ShapeError("caption_loss", visual.shape(), Shape{static_cast<std::int64_t>(texts.size()), -1, -1});
    }
    check_ids(texts, lm.config().vocab_size);
    CaptionForward out{make_caption_batch(texts, visual.dim(1), sp, lm.config().max_len), Tensor()};
    Tensor x = lm.embed(out.batch.seq, visual);
    Tensor h = lm.forward(x, out.batch.seq.key_start, out.batch.seq.positions);
    out.logits = lm.text_logits(h, out.batch.rows);
    return out;
}

}  // namespace

Tensor caption_loss(const Tensor& visual, std::span<const std::vector<std::int64_t>> texts, const CausalLM& lm,
                    const SpecialTokens& sp) {
    auto fwd = caption_forward(visual, texts, lm, sp);
    const Reduction red = lm.config().caption_reduction;
    Tensor loss = cross_entropy(fwd.logits, fwd.batch.targets, red);
    if (red == Reduction::sum) loss = scale(loss, Real(1) / static_cast<Real>(texts.size()));
    return loss;
}

CaptionScore score_captions(const Tensor& visual, std::span<const std::vector<std::int64_t>> texts,
                            const CausalLM& lm, const SpecialTokens& sp) {
    NoGradGuard guard;
    auto fwd = caption_forward(visual, texts, lm, sp);
    CaptionScore score;
    const std::int64_t v = fwd.logits.dim(1);
    const auto lv = fwd.logits.values();
    for (std::size_t r = 0; r < fwd.batch.targets.size(); ++r) {
        const Real* row = lv.data() + static_cast<std::int64_t>(r) * v;
        const std::int64_t tgt = fwd.batch.targets[r];
        const auto best = std::max_element(row, row + v) - row;
        double mx = row[best];
        double z = 0;
        for (std::int64_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
        score.nll_sum += -(static_cast<double>(row[tgt]) - mx - std::log(z));
        score.correct += best == tgt ? 1 : 0;
        ++score.tokens;
    }
    return score;
}

std::vector<std::vector<std::int64_t>> greedy_captions(const Tensor& visual, const CausalLM& lm,
                                                       const SpecialTokens& sp, std::int64_t max_tokens) {
    NoGradGuard guard;
    const std::int64_t b = visual.dim(0);
    const std::int64_t nv = visual.dim(1);
    max_tokens = std::min(max_tokens, lm.config().max_len - nv - 2);
    std::vector<std::vector<std::int64_t>> out(static_cast<std::size_t>(b));
    std::vector<bool> done(static_cast<std::size_t>(b), false);
    const std::int64_t v = lm.config().vocab_size;
    for (std::int64_t step = 0; step <= max_tokens; ++step) {
        // All sequences share one length: finished ones are padded with EOS.
        std::vector<std::vector<std::int64_t>> texts(static_cast<std::size_t>(b));
        for (std::int64_t i = 0; i < b; ++i) {
            texts[static_cast<std::size_t>(i)] = out[static_cast<std::size_t>(i)];
            texts[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(step), sp.eos);
        }
        CaptionBatch cb = make_caption_batch(texts, nv, sp, lm.config().max_len);
        std::vector<std::int64_t> rows(static_cast<std::size_t>(b));
        for (std::int64_t i = 0; i < b; ++i) rows[static_cast<std::size_t>(i)] = i * cb.seq.length + nv + 1 + step;
        Tensor h = lm.forward(lm.embed(cb.seq, visual), cb.seq.key_start, cb.seq.positions);
        Tensor logits = lm.text_logits(h, rows);
        const auto lv = logits.values();
        bool all_done = true;
        for (std::int64_t i = 0; i < b; ++i) {
            if (done[static_cast<std::size_t>(i)]) continue;
            const Real* row = lv.data() + i * v;
            const std::int64_t best = std::max_element(row, row + v) - row;
            if (best == sp.eos || step == max_tokens) {
                done[static_cast<std::size_t>(i)] = true;
            } else {
                out[static_cast<std::size_t>(i)].push_back(best);
                all_done = false;
            }
        }
        if (all_done) break;
    }
    return out;
}

GenBatch make_gen_batch(std::span<const std::vector<std::int64_t>> texts, std::int64_t visual_inputs,
                        std::int64_t visual_targets, const SpecialTokens& sp, std::int64_t max_len) {
    GenBatch gb;
    auto& s = gb.seq;
    s.batch = static_cast<std::int64_t>(texts.size());
    std::int64_t longest = 0;
    for (const auto& t : texts) longest = std::max<std::int64_t>(longest, static_cast<std::int64_t>(t.size()));
    gb.boi_pos = longest;
    s.length = longest + 1 + visual_inputs;
    if (s.length > max_len) {
        throw ShapeError("gen_batch", Shape{s.length}, Shape{max_len}, "generation sequence exceeds max_len");
    }
    s.tokens.assign(static_cast<std::size_t>(s.batch * s.length), SequenceBatch::kPadRow);
    s.positions.assign(s.tokens.size(), 0);
    s.key_start.resize(static_cast<std::size_t>(s.batch));
    for (std::int64_t b = 0; b < s.batch; ++b) {
        const auto& text = texts[static_cast<std::size_t>(b)];
        const std::int64_t pad = longest - static_cast<std::int64_t>(text.size());
        s.key_start[static_cast<std::size_t>(b)] = pad;
        std::int64_t* row = s.tokens.data() + b * s.length;
        std::copy(text.begin(), text.end(), row + pad);
        row[longest] = sp.boi;
        for (std::int64_t j = 0; j < visual_inputs; ++j) row[longest + 1 + j] = SequenceBatch::kVisualRow;
        for (std::int64_t t = pad; t < s.length; ++t) s.positions[static_cast<std::size_t>(b * s.length + t)] = t - pad;
        for (std::int64_t j = 0; j < visual_targets; ++j) gb.rows.push_back(b * s.length + longest + j);
    }
    return gb;
}

Tensor generation_loss(const Tensor& visual, std::span<const std::vector<std::int64_t>> texts,
                       std::span<const std::int64_t> indices, const CausalLM& lm, const SpecialTokens& sp) {
    const auto b = static_cast<std::int64_t>(texts.size());
    if (b == 0 || static_cast<std::int64_t>(indices.size()) % b != 0) {
        throw ShapeError("generation_loss", Shape{static_cast<std::int64_t>(indices.size())}, Shape{b});
    }
    const std::int64_t n = static_cast<std::int64_t>(indices.size()) / b;
    for (auto k : indices) {
        if (k < 0 || k >= lm.config().codes) {
            throw Error(ErrorCode::invalid_argument,
                        "visual index " + std::to_string(k) + " outside [0, " + std::to_string(lm.config().codes) + ")");
        }
    }
    check_ids(texts, lm.config().vocab_size);
    if (visual.rank() != 3 || visual.dim(0) != b || (visual.dim(1) != n && visual.dim(1) != n - 1)) {
        throw ShapeError("generation_loss", visual.shape(), Shape{b, n - 1, -1});
    }
    // The last ground-truth code is only a target.
    Tensor inputs = visual.dim(1) == n ? slice(visual, 1, 0, n - 1) : visual;
    GenBatch gb = make_gen_batch(texts, n - 1, n, sp, lm.config().max_len);
    Tensor x = lm.embed(gb.seq, n > 1 ? inputs : Tensor());
    Tensor h = lm.forward(x, gb.seq.key_start, gb.seq.positions);
    return cross_entropy(lm.visual_logits(h, gb.rows), indices);
}

double text_only_nll(std::span<const std::vector<std::int64_t>> texts, const CausalLM& lm, const SpecialTokens& sp) {
    NoGradGuard guard;
    check_ids(texts, lm.config().vocab_size);
    SequenceBatch s;
    s.batch = static_cast<std::int64_t>(texts.size());
    for (const auto& t : texts) s.length = std::max<std::int64_t>(s.length, static_cast<std::int64_t>(t.size()));
    s.tokens.assign(static_cast<std::size_t>(s.batch * s.length), SequenceBatch::kPadRow);
    s.positions.resize(s.tokens.size());
    s.key_start.assign(static_cast<std::size_t>(s.batch), 0);
    std::vector<std::int64_t> rows;
    std::vector<std::int64_t> targets;
    for (std::int64_t b = 0; b < s.batch; ++b) {
        const auto& text = texts[static_cast<std::size_t>(b)];
        for (std::int64_t t = 0; t < s.length; ++t) s.positions[static_cast<std::size_t>(b * s.length + t)] = t;
        for (std::size_t j = 0; j < text.size(); ++j) {
            s.tokens[static_cast<std::size_t>(b * s.length) + j] = text[j];
            rows.push_back(b * s.length + static_cast<std::int64_t>(j));
            targets.push_back(j + 1 < text.size() ? text[j + 1] : sp.eos);
        }
    }
    if (rows.empty()) return 0.0;
    Tensor h = lm.forward(lm.embed(s, Tensor()), s.key_start, s.positions);
    return cross_entropy(lm.text_logits(h, rows), targets).item();
}

std::int64_t sample_logits(std::span<const Real> logits, const SamplingConfig& cfg, double uniform) {
    const auto k = static_cast<std::int64_t>(logits.size());
    if (k == 0) throw Error(ErrorCode::invalid_argument, "sampling from empty logits");
    if (!(cfg.temperature > 0.0)) throw Error(ErrorCode::invalid_argument, "sampling temperature must be positive");
    if (!(cfg.top_p > 0.0) || cfg.top_p > 1.0) throw Error(ErrorCode::invalid_argument, "top_p must lie in (0, 1]");
    std::vector<std::int64_t> order(static_cast<std::size_t>(k));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) { return logits[a] > logits[b]; });
    const std::int64_t keep = (cfg.top_k <= 0 || cfg.top_k >= k) ? k : cfg.top_k;
    if (keep == 1) return order[0];

    const double mx = static_cast<double>(logits[order[0]]);
    std::vector<double> p(static_cast<std::size_t>(keep));
    double z = 0;
    for (std::int64_t i = 0; i < keep; ++i) {
        p[static_cast<std::size_t>(i)] = std::exp((static_cast<double>(logits[order[i]]) - mx) / cfg.temperature);
        z += p[static_cast<std::size_t>(i)];
    }
    // Nucleus: smallest prefix whose mass reaches top_p.
    std::int64_t nucleus = keep;
    if (cfg.top_p < 1.0) {
        double cum = 0;
        for (std::int64_t i = 0; i < keep; ++i) {
            cum += p[static_cast<std::size_t>(i)] / z;
            if (cum >= cfg.top_p) {
                nucleus = i + 1;
                break;
            }
        }
    }
    double mass = 0;
    for (std::int64_t i = 0; i < nucleus; ++i) mass += p[static_cast<std::size_t>(i)];
    const double target = uniform * mass;
    double cum = 0;
    for (std::int64_t i = 0; i < nucleus; ++i) {
        cum += p[static_cast<std::size_t>(i)];
        if (target < cum) return order[i];
    }
    return order[nucleus - 1];
}

std::vector<std::vector<std::int64_t>> sample_visual_tokens(std::span<const std::vector<std::int64_t>> texts,
                                                            std::int64_t count, const CausalLM& lm,
                                                            const SpecialTokens& sp, const VisualEmbedder& embed,
                                                            const SamplingConfig& cfg,
                                                            std::uint64_t first_prompt_index) {
    NoGradGuard guard;
    check_ids(texts, lm.config().vocab_size);
    const auto b = static_cast<std::int64_t>(texts.size());
    std::vector<std::vector<std::int64_t>> out(static_cast<std::size_t>(b));
    std::vector<Rng> rngs;
    for (std::int64_t i = 0; i < b; ++i) rngs.emplace_back(hash_combine(cfg.seed, first_prompt_index + static_cast<std::uint64_t>(i)));
    const std::int64_t k = lm.config().codes;
    std::vector<std::int64_t> flat;
    for (std::int64_t step = 0; step < count; ++step) {
        GenBatch gb = make_gen_batch(texts, step, 0, sp, lm.config().max_len);
        flat.clear();
        for (const auto& seq : out) flat.insert(flat.end(), seq.begin(), seq.end());
        Tensor visual = step > 0 ? embed(flat, b) : Tensor();
        Tensor h = lm.forward(lm.embed(gb.seq, visual), gb.seq.key_start, gb.seq.positions);
        std::vector<std::int64_t> rows(static_cast<std::size_t>(b));
        for (std::int64_t i = 0; i < b; ++i) rows[static_cast<std::size_t>(i)] = i * gb.seq.length + gb.boi_pos + step;
        Tensor logits = lm.visual_logits(h, rows);
        const auto lv = logits.values();
        for (std::int64_t i = 0; i < b; ++i) {
            std::span<const Real> row(lv.data() + i * k, static_cast<std::size_t>(k));
            out[static_cast<std::size_t>(i)].push_back(sample_logits(row, cfg, rngs[static_cast<std::size_t>(i)].uniform()));
        }
    }
    return out;
}

ETT_NAMESPACE_END
