#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ett {

// H x W x 3, row-major, values in [-1, 1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;

    static Image filled(int height, int width, float value);
    float& at(int y, int x, int c) { return pixels[static_cast<std::size_t>((y * width + x) * 3 + c)]; }
    float at(int y, int x, int c) const { return pixels[static_cast<std::size_t>((y * width + x) * 3 + c)]; }
    bool operator==(const Image&) const = default;
};

enum class ShapeKind { circle, square, triangle };
enum class Color { red, green, blue, yellow, white };
enum class SizeKind { small, large };

inline constexpr int kGridCells = 9;
inline constexpr int kImageSize = 32;
inline constexpr int kCellPixels = 10;
inline constexpr int kCellOrigin = 1;
inline constexpr int kNumBackgrounds = 3;

std::string_view shape_name(ShapeKind s);
std::string_view color_name(Color c);
std::string_view size_name(SizeKind s);
std::string_view cell_name(int cell);
std::string_view background_name(int background);
std::array<float, 3> color_rgb(Color c);
float background_level(int background);
int size_pixels(SizeKind s);

struct SceneObject {
    ShapeKind shape = ShapeKind::square;
    Color color = Color::white;
    int cell = 0;
    SizeKind size = SizeKind::small;
    bool operator==(const SceneObject&) const = default;
};

struct Glyph {
    std::string code;  // three characters from kGlyphAlphabet
    int cell = 0;      // lowest grid cell not taken by an object
    bool operator==(const Glyph&) const = default;
};

inline constexpr std::string_view kGlyphAlphabet = "ACEHKLOTUX";

// Objects are sorted by cell and never share one.
struct SceneSpec {
    std::vector<SceneObject> objects;
    int background = 0;
    std::optional<Glyph> glyph;
    bool operator==(const SceneSpec&) const = default;
};

struct Sample {
    Image image;
    std::string caption;
    SceneSpec scene;
};

SceneSpec sample_scene(std::uint64_t corpus_seed, std::uint64_t index);
Image render_scene(const SceneSpec& scene);
// Pixel mask of one object shape of a given size, placed in its grid cell.
std::vector<std::uint8_t> object_mask(ShapeKind shape, SizeKind size, int cell);
std::string caption_of(const SceneSpec& scene);
std::optional<SceneSpec> parse_caption(std::string_view caption);

Sample generate_sample(std::uint64_t corpus_seed, std::uint64_t index);

// Every character the caption grammar can emit, sorted.
std::string caption_alphabet();

// Held-out assignment is a function of the scene itself, so identical scenes
// always land in the same split.
bool is_eval_scene(const SceneSpec& scene);

class Corpus {
public:
    Corpus(std::uint64_t seed, std::uint64_t count);

    std::uint64_t seed() const { return seed_; }
    std::uint64_t size() const { return count_; }
    const std::vector<std::uint64_t>& train_indices() const { return train_; }
    const std::vector<std::uint64_t>& eval_indices() const { return eval_; }
    const SceneSpec& scene(std::uint64_t index) const { return scenes_.at(index); }
    const std::string& caption(std::uint64_t index) const { return captions_.at(index); }
    Image image(std::uint64_t index) const { return render_scene(scenes_.at(index)); }

    // Writes corpus.json, manifest.jsonl and vocab.txt into `dir`.
    void write(const std::string& dir) const;
    static Corpus load(const std::string& dir);

private:
    std::uint64_t seed_;
    std::uint64_t count_;
    std::vector<SceneSpec> scenes_;
    std::vector<std::string> captions_;
    std::vector<std::uint64_t> train_;
    std::vector<std::uint64_t> eval_;
};

}  // namespace ett
