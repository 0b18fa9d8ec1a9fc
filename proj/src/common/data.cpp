#include "ett/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "ett/error.hpp"
#include "ett/rng.hpp"
#include "ett/vocab.hpp"
#include "json.hpp"

namespace ett {

namespace {

constexpr std::array<std::string_view, 3> kShapeNames = {"circle", "square", "triangle"};
constexpr std::array<std::string_view, 5> kColorNames = {"red", "green", "blue", "yellow", "white"};
constexpr std::array<std::string_view, 2> kSizeNames = {"small", "large"};
constexpr std::array<std::string_view, kGridCells> kCellNames = {
    "top left", "top", "top right", "left", "center", "right", "bottom left", "bottom", "bottom right"};
constexpr std::array<std::string_view, kNumBackgrounds> kBackgroundNames = {"black", "dark gray", "gray"};
constexpr std::array<float, kNumBackgrounds> kBackgroundLevels = {-1.0f, -0.5f, 0.0f};

// 3 x 5 bitmap font, one row per entry, bit 2 is the leftmost column.
constexpr std::array<std::array<std::uint8_t, 5>, 10> kFont = {{
    {2, 5, 7, 5, 5},  // A
    {7, 4, 4, 4, 7},  // C
    {7, 4, 6, 4, 7},  // E
    {5, 5, 7, 5, 5},  // H
    {5, 6, 4, 6, 5},  // K
    {4, 4, 4, 4, 7},  // L
    {7, 5, 5, 5, 7},  // O
    {7, 2, 2, 2, 2},  // T
    {5, 5, 5, 5, 7},  // U
    {5, 5, 2, 5, 5},  // X
}};

template <std::size_t N>
int find_name(const std::array<std::string_view, N>& names, std::string_view s) {
    for (std::size_t i = 0; i < N; ++i)
        if (names[i] == s) return static_cast<int>(i);
    return -1;
}

int cell_row(int cell) { return cell / 3; }
int cell_col(int cell) { return cell % 3; }

bool in_shape(ShapeKind shape, int side, int i, int j) {
    const double half = side / 2.0;
    const double y = i + 0.5 - half;
    const double x = j + 0.5 - half;
    switch (shape) {
        case ShapeKind::square: return true;
        case ShapeKind::circle: return x * x + y * y <= half * half;
        case ShapeKind::triangle: return std::abs(x) <= (i + 1) * 0.5;
    }
    return false;
}

std::vector<std::string_view> split(std::string_view s, std::string_view sep) {
    std::vector<std::string_view> out;
    std::size_t pos = 0;
    while (true) {
        const auto next = s.find(sep, pos);
        if (next == std::string_view::npos) {
            out.push_back(s.substr(pos));
            return out;
        }
        out.push_back(s.substr(pos, next - pos));
        pos = next + sep.size();
    }
}

int first_free_cell(const std::vector<SceneObject>& objects) {
    for (int c = 0; c < kGridCells; ++c) {
        if (std::none_of(objects.begin(), objects.end(), [c](const SceneObject& o) { return o.cell == c; })) return c;
    }
    return -1;
}

nlohmann::json scene_json(const SceneSpec& scene) {
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : scene.objects) {
        objs.push_back({{"shape", shape_name(o.shape)},
                        {"color", color_name(o.color)},
                        {"size", size_name(o.size)},
                        {"cell", o.cell}});
    }
    nlohmann::json j = {{"objects", objs}, {"background", background_name(scene.background)}};
    if (scene.glyph) {
        j["glyph"] = {{"code", scene.glyph->code}, {"cell", scene.glyph->cell}};
    } else {
        j["glyph"] = nullptr;
    }
    return j;
}

}  // namespace

Image Image::filled(int height, int width, float value) {
    Image img;
    img.height = height;
    img.width = width;
    img.pixels.assign(static_cast<std::size_t>(height * width * 3), value);
    return img;
}

std::string_view shape_name(ShapeKind s) { return kShapeNames[static_cast<std::size_t>(s)]; }
std::string_view color_name(Color c) { return kColorNames[static_cast<std::size_t>(c)]; }
std::string_view size_name(SizeKind s) { return kSizeNames[static_cast<std::size_t>(s)]; }
std::string_view cell_name(int cell) { return kCellNames.at(static_cast<std::size_t>(cell)); }
std::string_view background_name(int background) { return kBackgroundNames.at(static_cast<std::size_t>(background)); }
float background_level(int background) { return kBackgroundLevels.at(static_cast<std::size_t>(background)); }
int size_pixels(SizeKind s) { return s == SizeKind::small ? 4 : 8; }

std::array<float, 3> color_rgb(Color c) {
    switch (c) {
        case Color::red: return {1.0f, -1.0f, -1.0f};
        case Color::green: return {-1.0f, 1.0f, -1.0f};
        case Color::blue: return {-1.0f, -1.0f, 1.0f};
        case Color::yellow: return {1.0f, 1.0f, -1.0f};
        case Color::white: return {1.0f, 1.0f, 1.0f};
    }
    return {0.0f, 0.0f, 0.0f};
}

SceneSpec sample_scene(std::uint64_t corpus_seed, std::uint64_t index) {
    Rng rng(hash_combine(corpus_seed, index));
    SceneSpec scene;
    const int count = 1 + static_cast<int>(rng.below(3));
    std::array<int, kGridCells> cells{};
    for (int i = 0; i < kGridCells; ++i) cells[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < count; ++i) {
        const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(kGridCells - i)));
        std::swap(cells[static_cast<std::size_t>(i)], cells[static_cast<std::size_t>(j)]);
    }
    for (int i = 0; i < count; ++i) {
        SceneObject o;
        o.shape = static_cast<ShapeKind>(rng.below(kShapeNames.size()));
        o.color = static_cast<Color>(rng.below(kColorNames.size()));
        o.size = static_cast<SizeKind>(rng.below(kSizeNames.size()));
        o.cell = cells[static_cast<std::size_t>(i)];
        scene.objects.push_back(o);
    }
    std::sort(scene.objects.begin(), scene.objects.end(),
              [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });
    scene.background = static_cast<int>(rng.below(kNumBackgrounds));
    if (rng.uniform() < 0.3) {
        Glyph g;
        for (int i = 0; i < 3; ++i) g.code.push_back(kGlyphAlphabet[rng.below(kGlyphAlphabet.size())]);
        g.cell = first_free_cell(scene.objects);
        scene.glyph = g;
    }
    return scene;
}

std::vector<std::uint8_t> object_mask(ShapeKind shape, SizeKind size, int cell) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(kImageSize * kImageSize), 0);
    const int side = size_pixels(size);
    const int y0 = kCellOrigin + kCellPixels * cell_row(cell) + (kCellPixels - side) / 2;
    const int x0 = kCellOrigin + kCellPixels * cell_col(cell) + (kCellPixels - side) / 2;
    for (int i = 0; i < side; ++i)
        for (int j = 0; j < side; ++j)
            if (in_shape(shape, side, i, j)) mask[static_cast<std::size_t>((y0 + i) * kImageSize + x0 + j)] = 1;
    return mask;
}

Image render_scene(const SceneSpec& scene) {
    Image img = Image::filled(kImageSize, kImageSize, background_level(scene.background));
    for (const auto& o : scene.objects) {
        const auto mask = object_mask(o.shape, o.size, o.cell);
        const auto rgb = color_rgb(o.color);
        for (int p = 0; p < kImageSize * kImageSize; ++p) {
            if (!mask[static_cast<std::size_t>(p)]) continue;
            for (int c = 0; c < 3; ++c) img.pixels[static_cast<std::size_t>(p * 3 + c)] = rgb[static_cast<std::size_t>(c)];
        }
    }
    if (scene.glyph) {
        const int y0 = kCellOrigin + kCellPixels * cell_row(scene.glyph->cell) + 2;
        const int x0 = kCellPixels * cell_col(scene.glyph->cell);
        for (std::size_t ch = 0; ch < scene.glyph->code.size(); ++ch) {
            const auto glyph_index = kGlyphAlphabet.find(scene.glyph->code[ch]);
            if (glyph_index == std::string_view::npos) continue;
            const auto& rows = kFont[glyph_index];
            for (int r = 0; r < 5; ++r)
                for (int col = 0; col < 3; ++col)
                    if (rows[static_cast<std::size_t>(r)] & (4 >> col))
                        for (int c = 0; c < 3; ++c) img.at(y0 + r, x0 + static_cast<int>(ch) * 4 + col, c) = 1.0f;
        }
    }
    return img;
}

std::string caption_of(const SceneSpec& scene) {
    std::string out;
    for (const auto& o : scene.objects) {
        if (!out.empty()) out += " and ";
        out += std::string(size_name(o.size)) + " " + std::string(color_name(o.color)) + " " +
               std::string(shape_name(o.shape)) + " at " + std::string(cell_name(o.cell));
    }
    out += " on " + std::string(background_name(scene.background));
    if (scene.glyph) out += " with text " + scene.glyph->code;
    return out;
}

std::optional<SceneSpec> parse_caption(std::string_view caption) {
    SceneSpec scene;
    const auto text_pos = caption.rfind(" with text ");
    if (text_pos != std::string_view::npos) {
        Glyph g;
        g.code = std::string(caption.substr(text_pos + 11));
        if (g.code.size() != 3 ||
            std::any_of(g.code.begin(), g.code.end(), [](char c) { return kGlyphAlphabet.find(c) == std::string_view::npos; })) {
            return std::nullopt;
        }
        scene.glyph = g;
        caption = caption.substr(0, text_pos);
    }
    const auto on_pos = caption.rfind(" on ");
    if (on_pos == std::string_view::npos) return std::nullopt;
    scene.background = find_name(kBackgroundNames, caption.substr(on_pos + 4));
    if (scene.background < 0) return std::nullopt;
    for (auto phrase : split(caption.substr(0, on_pos), " and ")) {
        const auto words = split(phrase, " ");
        if (words.size() < 5 || words[3] != "at") return std::nullopt;
        SceneObject o;
        const int sz = find_name(kSizeNames, words[0]);
        const int col = find_name(kColorNames, words[1]);
        const int shp = find_name(kShapeNames, words[2]);
        const int cell = find_name(kCellNames, phrase.substr(words[0].size() + words[1].size() + words[2].size() + 6));
        if (sz < 0 || col < 0 || shp < 0 || cell < 0) return std::nullopt;
        o.size = static_cast<SizeKind>(sz);
        o.color = static_cast<Color>(col);
        o.shape = static_cast<ShapeKind>(shp);
        o.cell = cell;
        if (!scene.objects.empty() && scene.objects.back().cell >= cell) return std::nullopt;
        scene.objects.push_back(o);
    }
    if (scene.objects.empty() || scene.objects.size() > 3) return std::nullopt;
    if (scene.glyph) scene.glyph->cell = first_free_cell(scene.objects);
    return scene;
}

Sample generate_sample(std::uint64_t corpus_seed, std::uint64_t index) {
    Sample s;
    s.scene = sample_scene(corpus_seed, index);
    s.image = render_scene(s.scene);
    s.caption = caption_of(s.scene);
    return s;
}

std::string caption_alphabet() {
    std::set<char> chars(kGlyphAlphabet.begin(), kGlyphAlphabet.end());
    auto add = [&](std::string_view w) { chars.insert(w.begin(), w.end()); };
    for (auto w : kShapeNames) add(w);
    for (auto w : kColorNames) add(w);
    for (auto w : kSizeNames) add(w);
    for (auto w : kCellNames) add(w);
    for (auto w : kBackgroundNames) add(w);
    add(" and at on with text ");
    return std::string(chars.begin(), chars.end());
}

bool is_eval_scene(const SceneSpec& scene) { return fnv1a(caption_of(scene)) % 10 == 0; }

Corpus::Corpus(std::uint64_t seed, std::uint64_t count) : seed_(seed), count_(count) {
    scenes_.reserve(count);
    captions_.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        scenes_.push_back(sample_scene(seed, i));
        captions_.push_back(caption_of(scenes_.back()));
        (is_eval_scene(scenes_.back()) ? eval_ : train_).push_back(i);
    }
}

void Corpus::write(const std::string& dir) const {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorCode::io, "cannot create corpus directory " + dir + ": " + ec.message());
    const fs::path root(dir);
    {
        std::ofstream meta(root / "corpus.json", std::ios::binary);
        nlohmann::json j = {{"format", "ett-corpus"}, {"version", 1},           {"seed", seed_},
                            {"count", count_},        {"image_size", kImageSize}, {"train", train_.size()},
                            {"eval", eval_.size()}};
        meta << j.dump(2) << '\n';
        if (!meta) throw Error(ErrorCode::io, "cannot write corpus.json in " + dir);
    }
    {
        std::ofstream manifest(root / "manifest.jsonl", std::ios::binary);
        for (std::uint64_t i = 0; i < count_; ++i) {
            nlohmann::json line = {{"index", i},
                                   {"scene", scene_json(scenes_[i])},
                                   {"caption", captions_[i]},
                                   {"split", is_eval_scene(scenes_[i]) ? "eval" : "train"}};
            manifest << line.dump() << '\n';
        }
        if (!manifest) throw Error(ErrorCode::io, "cannot write manifest.jsonl in " + dir);
    }
    Vocab::from_alphabet(caption_alphabet()).save((root / "vocab.txt").string());
}

Corpus Corpus::load(const std::string& dir) {
    std::ifstream meta(std::filesystem::path(dir) / "corpus.json");
    if (!meta) throw Error(ErrorCode::io, "cannot read corpus.json in " + dir);
    nlohmann::json j;
    try {
        meta >> j;
        return Corpus(j.at("seed").get<std::uint64_t>(), j.at("count").get<std::uint64_t>());
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::io, "malformed corpus.json in " + dir + ": " + e.what());
    }
}

}  // namespace ett
