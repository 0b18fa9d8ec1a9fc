#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ett/params.hpp"

ETT_NAMESPACE_BEGIN

enum class InputMode { embedding, index };

struct LmConfig {
    std::int64_t vocab_size = 0;  // text vocabulary including special tokens
    std::int64_t codes = 512;     // K, visual head width
    std::int64_t code_dim = 32;   // D, projector input
    std::int64_t width = 128;     // C
    std::int64_t layers = 4;
    std::int64_t heads = 4;
    std::int64_t max_len = 256;
    std::int64_t projector_hidden = 128;
    Reduction caption_reduction = Reduction::mean;
};

// GeLU MLP from codebook space into the LM width.
struct Projector {
    Linear fc1;
    Linear fc2;

    // [..., D] -> [B, n, C] where the leading extent is kept and the rest is flattened.
    Tensor operator()(const Tensor& z) const;
};

Projector make_projector(ParamStore& store, std::int64_t in, std::int64_t hidden, std::int64_t out);

struct TransformerBlock {
    LayerNorm ln1;
    Linear qkv;
    Linear proj;
    LayerNorm ln2;
    Linear fc1;
    Linear fc2;
};

// Special-token ids used to lay out multimodal sequences.
struct SpecialTokens {
    std::int64_t boi = -1;
    std::int64_t eoi = -1;
    std::int64_t eos = -1;
};

// A batch of sequences in which some rows come from visual embeddings and
// the rest from the text table. `pad` rows are zeros.
struct SequenceBatch {
    std::int64_t batch = 0;
    std::int64_t length = 0;
    // One entry per position (batch-major): >= 0 is a text id; kVisualRow
    // entries take the next visual row for that sequence; kPadRow is zero.
    std::vector<std::int64_t> tokens;
    std::vector<std::int64_t> key_start;  // first valid position per sequence
    std::vector<std::int64_t> positions;  // position id per entry
    static constexpr std::int64_t kVisualRow = -2;
    static constexpr std::int64_t kPadRow = -3;
};

class CausalLM {
public:
    CausalLM(ParamStore& store, const LmConfig& cfg);

    const LmConfig& config() const { return cfg_; }

    // Assembles input rows for `seq`. `visual` is [B, n_vis, C] (or undefined
    // when no sequence has visual rows).
    Tensor embed(const SequenceBatch& seq, const Tensor& visual) const;
    // Runs the transformer on [B, T, C] inputs -> final hidden states [B, T, C].
    Tensor forward(const Tensor& x, std::span<const std::int64_t> key_start,
                   std::span<const std::int64_t> positions) const;

    // Rows of `hidden` ([B, T, C]) at flat indices b * T + t, through a head.
    Tensor text_logits(const Tensor& hidden, std::span<const std::int64_t> rows) const;
    Tensor visual_logits(const Tensor& hidden, std::span<const std::int64_t> rows) const;

    const Tensor& token_embeddings() const { return tok_emb_; }

private:
    LmConfig cfg_;
    Tensor tok_emb_;
    Tensor pos_emb_;
    std::vector<TransformerBlock> blocks_;
    LayerNorm ln_f_;
    Linear text_head_;
    Linear visual_head_;
};

// Caption layout: [BOI] visual [EOI] text, right-padded; targets are the text
// characters followed by EOS, predicted from EOI onwards.
struct CaptionBatch {
    SequenceBatch seq;
    std::vector<std::int64_t> rows;     // flat hidden rows carrying a prediction
    std::vector<std::int64_t> targets;  // matching target ids
};

CaptionBatch make_caption_batch(std::span<const std::vector<std::int64_t>> texts, std::int64_t visual_tokens,
                                const SpecialTokens& sp, std::int64_t max_len);

// Mean (or per-sequence summed) NLL of text tokens given the image prefix.
Tensor caption_loss(const Tensor& visual, std::span<const std::vector<std::int64_t>> texts, const CausalLM& lm,
                    const SpecialTokens& sp);

struct CaptionScore {
    double nll_sum = 0;
    std::int64_t tokens = 0;
    std::int64_t correct = 0;
};
// Teacher-forced argmax accuracy and summed NLL over caption targets.
CaptionScore score_captions(const Tensor& visual, std::span<const std::vector<std::int64_t>> texts,
                            const CausalLM& lm, const SpecialTokens& sp);

// Generation layout: text [BOI] visual, left-padded so the image block sits at
// the same positions in every sequence. Visual-head rows start at BOI.
struct GenBatch {
    SequenceBatch seq;
    std::vector<std::int64_t> rows;
    std::int64_t boi_pos = 0;
};

GenBatch make_gen_batch(std::span<const std::vector<std::int64_t>> texts, std::int64_t visual_inputs,
                        std::int64_t visual_targets, const SpecialTokens& sp, std::int64_t max_len);

// Cross-entropy over visual indices [B * n] through the visual head. `visual`
// holds the teacher-forced inputs for the ground-truth codes, [B, n, C].
Tensor generation_loss(const Tensor& visual, std::span<const std::vector<std::int64_t>> texts,
                       std::span<const std::int64_t> indices, const CausalLM& lm, const SpecialTokens& sp);

// Text-only NLL (each text followed by EOS), mean per token.
double text_only_nll(std::span<const std::vector<std::int64_t>> texts, const CausalLM& lm, const SpecialTokens& sp);

// Greedy caption decoding after the image prefix; stops at EOS or `max_tokens`.
// Returned ids exclude EOS.
std::vector<std::vector<std::int64_t>> greedy_captions(const Tensor& visual, const CausalLM& lm,
                                                       const SpecialTokens& sp, std::int64_t max_tokens);

struct SamplingConfig {
    std::int64_t top_k = 0;  // 0 or >= K means the whole vocabulary
    double top_p = 1.0;
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

// Picks an index from one row of logits. `uniform` is a draw in [0, 1).
std::int64_t sample_logits(std::span<const Real> logits, const SamplingConfig& cfg, double uniform);

// Maps batch-major visual indices (batch * n of them) to LM inputs
// [batch, n, C]. Supplied by the caller so generation stays mode-aware.
using VisualEmbedder = std::function<Tensor(std::span<const std::int64_t> indices, std::int64_t batch)>;

// Autoregressively samples `count` visual indices per prompt. Prompt i uses
// the random stream hash(seed, i) so results do not depend on batching.
std::vector<std::vector<std::int64_t>> sample_visual_tokens(std::span<const std::vector<std::int64_t>> texts,
                                                            std::int64_t count, const CausalLM& lm,
                                                            const SpecialTokens& sp, const VisualEmbedder& embed,
                                                            const SamplingConfig& cfg,
                                                            std::uint64_t first_prompt_index = 0);

ETT_NAMESPACE_END
