#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ett/model.hpp"
#include "ett/verifier.hpp"

ETT_NAMESPACE_BEGIN

// 10 log10(4 / mse) for pixel values in [-1, 1]; +inf when mse == 0.
double psnr_from_mse(double mse);

struct ReconMetrics {
    double mse = 0;
    double psnr = 0;
    std::int64_t images = 0;
    double glyph_mse = 0;  // over the glyph cell of images that carry a glyph
    std::int64_t glyph_images = 0;
    double codebook_utilization = 0;  // fraction of codes selected on these images
};

// Reconstructions clamped to [-1, 1].
std::vector<Image> reconstruct_images(const EttModel& model, std::span<const Image> images, std::int64_t batch = 32);

ReconMetrics recon_metrics(const EttModel& model, const Corpus& corpus, std::span<const std::uint64_t> indices,
                           std::int64_t batch = 32);

struct CaptionMetrics {
    double token_accuracy = 0;  // teacher-forced argmax
    double nll = 0;             // mean per target token
    std::int64_t tokens = 0;
    std::int64_t captions = 0;
    double exact_match = 0;  // greedy decodes on the first `exact_captions` items
    std::int64_t exact_captions = 0;
    double glyph_readout = 0;  // greedy decodes that carry the right glyph code
    std::int64_t glyph_captions = 0;
};

CaptionMetrics caption_eval(const EttModel& model, const Corpus& corpus, const Vocab& vocab,
                            std::span<const std::uint64_t> indices, std::int64_t exact_limit,
                            std::int64_t batch = 32);

// Sampled images for caption-template prompts. Prompt i uses the stream
// hash(seed, i), so the output does not depend on batching.
std::vector<Image> generate_images(const EttModel& model, const Vocab& vocab, std::span<const std::string> prompts,
                                   const SamplingConfig& sampling, std::int64_t batch = 16);

GenevalScores geneval_lite(const EttModel& model, const Vocab& vocab, std::span<const SceneSpec> prompts,
                           const SamplingConfig& sampling, std::int64_t batch = 16);

struct EvalReport {
    std::optional<ReconMetrics> recon;
    std::optional<CaptionMetrics> caption;
    std::optional<GenevalScores> geneval;
    double codebook_utilization = 0;  // training telemetry stored in the checkpoint
};

// JSON text; an infinite psnr is written as the string "inf".
std::string report_json(const EvalReport& report);
// Human-readable table.
std::string report_table(const EvalReport& report);

ETT_NAMESPACE_END
