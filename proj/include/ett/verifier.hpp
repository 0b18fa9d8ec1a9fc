#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "ett/data.hpp"

namespace ett {

struct DetectedObject {
    ShapeKind shape = ShapeKind::square;
    Color color = Color::white;
    SizeKind size = SizeKind::small;
    int cell = 0;
    double iou = 0;  // overlap with the best-matching shape mask
};

struct VerifierConfig {
    float foreground_threshold = 0.5f;  // max-channel distance from the background
    int min_pixels = 3;                 // fewer foreground pixels: empty cell
    double min_iou = 0.4;               // weaker template matches are not objects
};

// Background is the per-channel median. In every grid cell, foreground pixels
// are matched against the rasterized masks of each shape and size; color is
// the palette entry nearest to their mean.
std::vector<DetectedObject> detect_objects(const Image& image, const VerifierConfig& cfg = {});

enum class GenevalCategory { single_object, two_object, color, position };
inline constexpr std::array<GenevalCategory, 4> kGenevalCategories = {
    GenevalCategory::single_object, GenevalCategory::two_object, GenevalCategory::color, GenevalCategory::position};
std::string_view category_name(GenevalCategory c);

// Per-prompt verdicts; a category that does not apply to the prompt is empty.
struct PromptVerdict {
    std::array<std::optional<bool>, 4> passed;
};

// single-object: one-object prompts, the shape is present.
// two-object: prompts with several objects, detected shape counts equal the prompted ones.
// color: every prompted (shape, color) pair is present.
// position: every prompted object is found with its shape and color in its cell.
PromptVerdict verify_prompt(const SceneSpec& prompt, std::span<const DetectedObject> detected);

struct GenevalScores {
    std::array<double, 4> accuracy{};  // per category, 0 when no prompt applies
    std::array<std::int64_t, 4> prompts{};
    double overall = 0;  // mean over categories with at least one prompt
    std::int64_t images = 0;
};

GenevalScores score_images(std::span<const SceneSpec> prompts, std::span<const Image> images,
                           const VerifierConfig& cfg = {});

// Eval-split scenes without a glyph, in index order, at most `limit`.
std::vector<SceneSpec> geneval_prompts(const Corpus& corpus, std::size_t limit);

}  // namespace ett
