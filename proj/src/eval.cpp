#include "ett/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include "ett/image_io.hpp"
#include "ett/rng.hpp"

ETT_NAMESPACE_BEGIN

double psnr_from_mse(double mse) {
    if (mse < 0 || std::isnan(mse)) throw Error(ErrorCode::invalid_argument, "psnr of a negative or NaN mse");
    if (mse == 0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(4.0 / mse);
}

namespace {

template <class F>
void for_batches(std::size_t n, std::int64_t batch, F&& f) {
    const auto b = static_cast<std::size_t>(std::max<std::int64_t>(1, batch));
    for (std::size_t start = 0; start < n; start += b) f(start, std::min(n, start + b));
}

double glyph_region_mse(const Image& a, const Image& b, int cell) {
    const int y0 = kCellOrigin + kCellPixels * (cell / 3);
    const int x0 = kCellPixels * (cell % 3);
    double s = 0;
    int n = 0;
    for (int y = y0; y < std::min(kImageSize, y0 + kCellPixels); ++y)
        for (int x = x0; x < std::min(kImageSize, x0 + kCellPixels + 2); ++x)
            for (int c = 0; c < 3; ++c) {
                const double d = static_cast<double>(a.at(y, x, c)) - b.at(y, x, c);
                s += d * d;
                ++n;
            }
    return s / n;
}

}  // namespace

std::vector<Image> reconstruct_images(const EttModel& model, std::span<const Image> images, std::int64_t batch) {
    NoGradGuard guard;
    std::vector<Image> out;
    out.reserve(images.size());
    for_batches(images.size(), batch, [&](std::size_t a, std::size_t b) {
        const Tensor x = images_to_tensor(images.subspan(a, b - a));
        const auto q = quantize(model.tokenizer.encode(x), model.codebook, model.config().quantizer);
        for (auto& img : tensor_to_images(model.tokenizer.decode(q.z))) out.push_back(clamp_image(std::move(img)));
    });
    return out;
}

ReconMetrics recon_metrics(const EttModel& model, const Corpus& corpus, std::span<const std::uint64_t> indices,
                           std::int64_t batch) {
    if (indices.empty()) throw Error(ErrorCode::invalid_argument, "recon_metrics: empty evaluation split");
    NoGradGuard guard;
    ReconMetrics m;
    double sum = 0;
    double glyph_sum = 0;
    std::set<std::int64_t> used;
    for_batches(indices.size(), batch, [&](std::size_t a, std::size_t b) {
        std::vector<Image> images;
        for (std::size_t i = a; i < b; ++i) images.push_back(corpus.image(indices[i]));
        const Tensor x = images_to_tensor(images);
        const auto q = quantize(model.tokenizer.encode(x), model.codebook, model.config().quantizer);
        used.insert(q.indices.begin(), q.indices.end());
        const auto recon = tensor_to_images(model.tokenizer.decode(q.z));
        for (std::size_t i = 0; i < recon.size(); ++i) {
            const Image r = clamp_image(recon[i]);
            sum += image_mse(images[i], r);
            const auto& scene = corpus.scene(indices[a + i]);
            if (scene.glyph) {
                glyph_sum += glyph_region_mse(images[i], r, scene.glyph->cell);
                ++m.glyph_images;
            }
        }
    });
    m.images = static_cast<std::int64_t>(indices.size());
    m.mse = sum / static_cast<double>(m.images);
    m.psnr = psnr_from_mse(m.mse);
    m.glyph_mse = m.glyph_images ? glyph_sum / static_cast<double>(m.glyph_images) : 0.0;
    m.codebook_utilization = static_cast<double>(used.size()) / static_cast<double>(model.codebook.codes);
    return m;
}

CaptionMetrics caption_eval(const EttModel& model, const Corpus& corpus, const Vocab& vocab,
                            std::span<const std::uint64_t> indices, std::int64_t exact_limit, std::int64_t batch) {
    if (indices.empty()) throw Error(ErrorCode::invalid_argument, "caption_eval: empty evaluation split");
    NoGradGuard guard;
    CaptionMetrics m;
    double nll = 0;
    std::int64_t correct = 0;
    std::int64_t exact = 0;
    std::int64_t glyph_hits = 0;
    const auto limit = static_cast<std::size_t>(std::max<std::int64_t>(0, exact_limit));
    for_batches(indices.size(), batch, [&](std::size_t a, std::size_t b) {
        std::vector<Image> images;
        std::vector<std::vector<std::int64_t>> texts;
        for (std::size_t i = a; i < b; ++i) {
            images.push_back(corpus.image(indices[i]));
            texts.push_back(vocab.encode(corpus.caption(indices[i])));
        }
        const auto n = static_cast<std::int64_t>(images.size());
        const auto q = quantize(model.tokenizer.encode(images_to_tensor(images)), model.codebook,
                                model.config().quantizer);
        const Tensor visual = model.visual_inputs(q, n);
        const CaptionScore s = score_captions(visual, texts, model.lm, model.special());
        nll += s.nll_sum;
        correct += s.correct;
        m.tokens += s.tokens;
        if (a >= limit) return;
        const std::size_t keep = std::min(b, limit) - a;
        std::size_t longest = 0;
        for (std::size_t i = 0; i < keep; ++i) longest = std::max(longest, texts[i].size());
        const Tensor sub = keep == images.size() ? visual : slice(visual, 0, 0, static_cast<std::int64_t>(keep));
        const auto decoded = greedy_captions(sub, model.lm, model.special(), static_cast<std::int64_t>(longest) + 1);
        for (std::size_t i = 0; i < keep; ++i) {
            exact += decoded[i] == texts[i];
            const auto& scene = corpus.scene(indices[a + i]);
            if (scene.glyph) {
                ++m.glyph_captions;
                const std::string text = vocab.decode(decoded[i]);
                glyph_hits += text.find("with text " + scene.glyph->code) != std::string::npos;
            }
        }
        m.exact_captions += static_cast<std::int64_t>(keep);
    });
    m.captions = static_cast<std::int64_t>(indices.size());
    m.token_accuracy = static_cast<double>(correct) / static_cast<double>(m.tokens);
    m.nll = nll / static_cast<double>(m.tokens);
    m.exact_match = m.exact_captions ? static_cast<double>(exact) / static_cast<double>(m.exact_captions) : 0.0;
    m.glyph_readout = m.glyph_captions ? static_cast<double>(glyph_hits) / static_cast<double>(m.glyph_captions) : 0.0;
    return m;
}

std::vector<Image> generate_images(const EttModel& model, const Vocab& vocab, std::span<const std::string> prompts,
                                   const SamplingConfig& sampling, std::int64_t batch) {
    NoGradGuard guard;
    const VisualEmbedder embed = [&model](std::span<const std::int64_t> idx, std::int64_t b) {
        return model.visual_from_indices(idx, b);
    };
    std::vector<Image> out;
    out.reserve(prompts.size());
    for_batches(prompts.size(), batch, [&](std::size_t a, std::size_t b) {
        std::vector<std::vector<std::int64_t>> texts;
        for (std::size_t i = a; i < b; ++i) texts.push_back(vocab.encode(prompts[i]));
        const auto codes = sample_visual_tokens(texts, model.visual_tokens(), model.lm, model.special(), embed,
                                                sampling, static_cast<std::uint64_t>(a));
        std::vector<std::int64_t> flat;
        for (const auto& c : codes) flat.insert(flat.end(), c.begin(), c.end());
        const auto n = static_cast<std::int64_t>(codes.size());
        for (auto& img : tensor_to_images(decode_indices(model, flat, n))) out.push_back(clamp_image(std::move(img)));
    });
    return out;
}

GenevalScores geneval_lite(const EttModel& model, const Vocab& vocab, std::span<const SceneSpec> prompts,
                           const SamplingConfig& sampling, std::int64_t batch) {
    std::vector<std::string> texts;
    texts.reserve(prompts.size());
    for (const auto& p : prompts) texts.push_back(caption_of(p));
    const auto images = generate_images(model, vocab, texts, sampling, batch);
    return score_images(prompts, images);
}

namespace {

nlohmann::json number_or_inf(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

}  // namespace

std::string report_json(const EvalReport& r) {
    nlohmann::json j = nlohmann::json::object();
    if (r.recon) {
        j["recon_mse"] = r.recon->mse;
        j["recon_psnr"] = number_or_inf(r.recon->psnr);
        j["recon_images"] = r.recon->images;
        j["glyph_recon_mse"] = r.recon->glyph_mse;
        j["glyph_images"] = r.recon->glyph_images;
        j["eval_codebook_utilization"] = r.recon->codebook_utilization;
    }
    if (r.caption) {
        j["caption_token_accuracy"] = r.caption->token_accuracy;
        j["caption_nll"] = r.caption->nll;
        j["caption_tokens"] = r.caption->tokens;
        j["caption_exact_match"] = r.caption->exact_match;
        j["caption_exact_count"] = r.caption->exact_captions;
        j["glyph_readout_accuracy"] = r.caption->glyph_readout;
        j["glyph_captions"] = r.caption->glyph_captions;
    }
    if (r.geneval) {
        j["geneval_lite_overall"] = r.geneval->overall;
        nlohmann::json cats = nlohmann::json::object();
        nlohmann::json counts = nlohmann::json::object();
        for (std::size_t c = 0; c < kGenevalCategories.size(); ++c) {
            const std::string name(category_name(kGenevalCategories[c]));
            cats[name] = r.geneval->accuracy[c];
            counts[name] = r.geneval->prompts[c];
        }
        j["geneval_lite"] = cats;
        j["geneval_lite_prompts"] = counts;
    }
    j["codebook_utilization"] = r.codebook_utilization;
    return j.dump(2) + "\n";
}

std::string report_table(const EvalReport& r) {
    std::ostringstream out;
    char buf[160];
    auto row = [&](const char* name, double v) {
        std::snprintf(buf, sizeof buf, "  %-28s %12.6f\n", name, v);
        out << buf;
    };
    if (r.recon) {
        out << "reconstruction (" << r.recon->images << " images)\n";
        row("mse", r.recon->mse);
        if (std::isinf(r.recon->psnr)) out << "  psnr                                  inf\n";
        else row("psnr_db", r.recon->psnr);
        row("glyph_mse", r.recon->glyph_mse);
        row("codebook_utilization", r.recon->codebook_utilization);
    }
    if (r.caption) {
        out << "captioning (" << r.caption->captions << " captions)\n";
        row("token_accuracy", r.caption->token_accuracy);
        row("nll_per_token", r.caption->nll);
        row("exact_match", r.caption->exact_match);
        row("glyph_readout", r.caption->glyph_readout);
    }
    if (r.geneval) {
        out << "geneval-lite (" << r.geneval->images << " prompts)\n";
        for (std::size_t c = 0; c < kGenevalCategories.size(); ++c) {
            row(std::string(category_name(kGenevalCategories[c])).c_str(), r.geneval->accuracy[c]);
        }
        row("overall", r.geneval->overall);
    }
    row("train_codebook_utilization", r.codebook_utilization);
    return out.str();
}

ETT_NAMESPACE_END
