#include "ett/model.hpp"

#include "ett/rng.hpp"

ETT_NAMESPACE_BEGIN

namespace {

constexpr double kIndexTableStd = 0.02;

std::uint64_t mix(std::uint64_t h, std::int64_t v) { return fnv1a(&v, sizeof v, h); }

}  // namespace

ModelConfig finalize_model_config(ModelConfig cfg, const Vocab& vocab) {
    cfg.quantizer.code_dim = cfg.tokenizer.code_dim;
    cfg.lm.vocab_size = vocab.size();
    cfg.lm.codes = cfg.quantizer.codebook_size;
    cfg.lm.code_dim = cfg.tokenizer.code_dim;
    return cfg;
}

EttModel::EttModel(const ModelConfig& cfg, const Vocab& vocab, std::uint64_t seed)
    : params(seed),
      tokenizer(params, cfg.tokenizer),
      codebook(Codebook::create(params, finalize_model_config(cfg, vocab).quantizer)),
      projector(make_projector(params, cfg.tokenizer.code_dim, cfg.lm.projector_hidden, cfg.lm.width)),
      index_table(params.add("projector.index_table", Group::projector,
                             Shape{cfg.quantizer.codebook_size, cfg.lm.width}, Init::normal, kIndexTableStd)),
      lm(params, finalize_model_config(cfg, vocab).lm),
      cfg_(finalize_model_config(cfg, vocab)),
      special_{vocab.boi(), vocab.eoi(), vocab.eos()} {
    const auto& t = cfg_.tokenizer;
    const auto& q = cfg_.quantizer;
    const auto& l = cfg_.lm;
    std::uint64_t h = fnv1a("ett-model");
    for (std::int64_t v : {t.image_size, t.patch, t.hidden, t.blocks, t.code_dim, t.disc_hidden, q.codebook_size,
                           l.width, l.layers, l.heads, l.max_len, l.projector_hidden}) {
        h = mix(h, v);
    }
    arch_hash_ = fnv1a(vocab.text(), h);
}

Tensor EttModel::visual_inputs(const QuantizationResult& q, std::int64_t batch) const {
    if (cfg_.mode == InputMode::embedding) return projector(q.z);
    return visual_from_indices(q.indices, batch);
}

Tensor EttModel::visual_from_indices(std::span<const std::int64_t> indices, std::int64_t batch) const {
    const auto n = static_cast<std::int64_t>(indices.size());
    if (batch <= 0 || n % batch != 0) throw ShapeError("visual_from_indices", Shape{n}, Shape{batch});
    if (cfg_.mode == InputMode::index) {
        return reshape(embedding(index_table, indices), Shape{batch, n / batch, cfg_.lm.width});
    }
    return projector(reshape(codebook.lookup(indices), Shape{batch, n / batch, codebook.dim}));
}

Tensor decode_indices(const EttModel& model, std::span<const std::int64_t> indices, std::int64_t batch) {
    const std::int64_t g = model.tokenizer.grid();
    if (static_cast<std::int64_t>(indices.size()) != batch * g * g) {
        throw ShapeError("decode_indices", Shape{static_cast<std::int64_t>(indices.size())}, Shape{batch, g * g});
    }
    return model.tokenizer.decode(reshape(model.codebook.lookup(indices), Shape{batch, g, g, model.codebook.dim}));
}

ETT_NAMESPACE_END
