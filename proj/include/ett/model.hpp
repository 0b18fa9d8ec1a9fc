#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ett/lm_bridge.hpp"
#include "ett/tokenizer.hpp"
#include "ett/vocab.hpp"

ETT_NAMESPACE_BEGIN

struct ModelConfig {
    TokenizerConfig tokenizer;
    QuantizerConfig quantizer;
    LmConfig lm;  // vocab_size, codes and code_dim are filled from the rest
    InputMode mode = InputMode::embedding;
};

// Tokenizer, codebook, projector, index-mode table and LM sharing one
// parameter store. Every parameter exists in both input modes, so the
// checkpoint layout does not depend on the mode.
class EttModel {
public:
    EttModel(const ModelConfig& cfg, const Vocab& vocab, std::uint64_t seed);
    EttModel(const EttModel&) = delete;
    EttModel& operator=(const EttModel&) = delete;

    const ModelConfig& config() const { return cfg_; }
    InputMode mode() const { return cfg_.mode; }
    void set_input_mode(InputMode mode) { cfg_.mode = mode; }
    const SpecialTokens& special() const { return special_; }
    std::int64_t visual_tokens() const { return tokenizer.grid() * tokenizer.grid(); }

    // LM inputs [B, h*w, C] for a quantization result: projected z in
    // embedding mode, rows of the separate random table in index mode.
    Tensor visual_inputs(const QuantizationResult& q, std::int64_t batch) const;
    // Same for known code indices (teacher forcing, sampling).
    Tensor visual_from_indices(std::span<const std::int64_t> indices, std::int64_t batch) const;

    // Hash of everything that fixes parameter shapes: architecture and vocabulary.
    std::uint64_t architecture_hash() const { return arch_hash_; }

    ParamStore params;
    TokenizerModel tokenizer;
    Codebook codebook;
    Projector projector;
    Tensor index_table;  // [K, C], projector group
    CausalLM lm;

private:
    ModelConfig cfg_;
    SpecialTokens special_;
    std::uint64_t arch_hash_ = 0;
};

ModelConfig finalize_model_config(ModelConfig cfg, const Vocab& vocab);

// Pixels of decoded images for known indices [B, h*w] -> [B, H, W, 3].
Tensor decode_indices(const EttModel& model, std::span<const std::int64_t> indices, std::int64_t batch);

ETT_NAMESPACE_END
