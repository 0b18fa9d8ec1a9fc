#include "ett/verifier.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "ett/error.hpp"

namespace ett {

namespace {

constexpr std::array<ShapeKind, 3> kShapes = {ShapeKind::circle, ShapeKind::square, ShapeKind::triangle};
constexpr std::array<SizeKind, 2> kSizes = {SizeKind::small, SizeKind::large};
constexpr std::array<Color, 5> kColors = {Color::red, Color::green, Color::blue, Color::yellow, Color::white};

float median(std::vector<float> v) {
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
}

}  // namespace

std::vector<DetectedObject> detect_objects(const Image& image, const VerifierConfig& cfg) {
    if (image.height != kImageSize || image.width != kImageSize) {
        throw Error(ErrorCode::invalid_argument, "verifier expects " + std::to_string(kImageSize) + "x" +
                                                     std::to_string(kImageSize) + " images");
    }
    const int n = kImageSize * kImageSize;
    std::array<float, 3> bg{};
    for (int c = 0; c < 3; ++c) {
        std::vector<float> channel(static_cast<std::size_t>(n));
        for (int p = 0; p < n; ++p) channel[static_cast<std::size_t>(p)] = image.pixels[static_cast<std::size_t>(p * 3 + c)];
        bg[static_cast<std::size_t>(c)] = median(std::move(channel));
    }
    std::vector<std::uint8_t> fg(static_cast<std::size_t>(n), 0);
    for (int p = 0; p < n; ++p) {
        float d = 0;
        for (int c = 0; c < 3; ++c) {
            d = std::max(d, std::fabs(image.pixels[static_cast<std::size_t>(p * 3 + c)] - bg[static_cast<std::size_t>(c)]));
        }
        fg[static_cast<std::size_t>(p)] = d > cfg.foreground_threshold;
    }

    std::vector<DetectedObject> out;
    for (int cell = 0; cell < kGridCells; ++cell) {
        const int y0 = kCellOrigin + kCellPixels * (cell / 3);
        const int x0 = kCellOrigin + kCellPixels * (cell % 3);
        int count = 0;
        std::array<double, 3> sum{};
        for (int y = y0; y < y0 + kCellPixels; ++y) {
            for (int x = x0; x < x0 + kCellPixels; ++x) {
                if (!fg[static_cast<std::size_t>(y * kImageSize + x)]) continue;
                ++count;
                for (int c = 0; c < 3; ++c) sum[static_cast<std::size_t>(c)] += image.at(y, x, c);
            }
        }
        if (count < cfg.min_pixels) continue;

        DetectedObject best;
        best.cell = cell;
        best.iou = -1;
        for (ShapeKind shape : kShapes) {
            for (SizeKind size : kSizes) {
                const auto mask = object_mask(shape, size, cell);
                int inter = 0, uni = 0;
                for (int y = y0; y < y0 + kCellPixels; ++y) {
                    for (int x = x0; x < x0 + kCellPixels; ++x) {
                        const auto i = static_cast<std::size_t>(y * kImageSize + x);
                        inter += fg[i] && mask[i];
                        uni += fg[i] || mask[i];
                    }
                }
                const double iou = uni > 0 ? static_cast<double>(inter) / uni : 0.0;
                if (iou > best.iou) {
                    best.iou = iou;
                    best.shape = shape;
                    best.size = size;
                }
            }
        }
        if (best.iou < cfg.min_iou) continue;

        double best_dist = 1e30;
        for (Color color : kColors) {
            const auto rgb = color_rgb(color);
            double d = 0;
            for (int c = 0; c < 3; ++c) {
                const double diff = sum[static_cast<std::size_t>(c)] / count - rgb[static_cast<std::size_t>(c)];
                d += diff * diff;
            }
            if (d < best_dist) {
                best_dist = d;
                best.color = color;
            }
        }
        out.push_back(best);
    }
    return out;
}

std::string_view category_name(GenevalCategory c) {
    switch (c) {
        case GenevalCategory::single_object: return "single_object";
        case GenevalCategory::two_object: return "two_object";
        case GenevalCategory::color: return "color";
        case GenevalCategory::position: return "position";
    }
    return "?";
}

PromptVerdict verify_prompt(const SceneSpec& prompt, std::span<const DetectedObject> detected) {
    PromptVerdict v;
    std::map<ShapeKind, int> want_shape, got_shape;
    std::map<std::pair<ShapeKind, Color>, int> want_pair, got_pair;
    for (const auto& o : prompt.objects) {
        ++want_shape[o.shape];
        ++want_pair[{o.shape, o.color}];
    }
    for (const auto& d : detected) {
        ++got_shape[d.shape];
        ++got_pair[{d.shape, d.color}];
    }
    if (prompt.objects.size() == 1) {
        v.passed[0] = got_shape[prompt.objects[0].shape] > 0;
    } else if (prompt.objects.size() > 1) {
        bool ok = true;
        for (ShapeKind s : kShapes) ok = ok && want_shape[s] == got_shape[s];
        v.passed[1] = ok;
    }
    bool color_ok = true;
    for (const auto& [key, n] : want_pair) color_ok = color_ok && got_pair[key] >= n;
    v.passed[2] = color_ok;
    bool position_ok = true;
    for (const auto& o : prompt.objects) {
        const bool found = std::any_of(detected.begin(), detected.end(), [&](const DetectedObject& d) {
            return d.cell == o.cell && d.shape == o.shape && d.color == o.color;
        });
        position_ok = position_ok && found;
    }
    v.passed[3] = position_ok;
    return v;
}

GenevalScores score_images(std::span<const SceneSpec> prompts, std::span<const Image> images,
                           const VerifierConfig& cfg) {
    if (prompts.size() != images.size()) {
        throw Error(ErrorCode::invalid_argument, "score_images: prompt and image counts differ");
    }
    GenevalScores s;
    std::array<std::int64_t, 4> hits{};
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto detected = detect_objects(images[i], cfg);
        const PromptVerdict v = verify_prompt(prompts[i], detected);
        for (std::size_t c = 0; c < 4; ++c) {
            if (!v.passed[c]) continue;
            ++s.prompts[c];
            hits[c] += *v.passed[c];
        }
    }
    int used = 0;
    for (std::size_t c = 0; c < 4; ++c) {
        if (s.prompts[c] == 0) continue;
        s.accuracy[c] = static_cast<double>(hits[c]) / static_cast<double>(s.prompts[c]);
        s.overall += s.accuracy[c];
        ++used;
    }
    if (used > 0) s.overall /= used;
    s.images = static_cast<std::int64_t>(images.size());
    return s;
}

std::vector<SceneSpec> geneval_prompts(const Corpus& corpus, std::size_t limit) {
    std::vector<SceneSpec> out;
    for (auto i : corpus.eval_indices()) {
        if (out.size() >= limit) break;
        const SceneSpec& s = corpus.scene(i);
        if (!s.glyph) out.push_back(s);
    }
    return out;
}

}  // namespace ett
