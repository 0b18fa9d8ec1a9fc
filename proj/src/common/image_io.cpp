#include "ett/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include <png.h>

#include "ett/error.hpp"

namespace ett {

namespace {

constexpr char kStackMagic[8] = {'E', 'T', 'T', 'I', 'M', 'G', '1', '\0'};

std::uint8_t to_byte(float v) {
    const float c = std::clamp(v, -1.0f, 1.0f);
    return static_cast<std::uint8_t>(std::lround((c + 1.0f) * 127.5f));
}

float from_byte(std::uint8_t b) { return static_cast<float>(b) / 127.5f - 1.0f; }

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::string& path, const Image& image) {
    File f(std::fopen(path.c_str(), "wb"));
    if (!f) throw Error(ErrorCode::io, "cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw Error(ErrorCode::io, "libpng initialization failed");
    }
    std::vector<std::uint8_t> bytes(image.pixels.size());
    std::transform(image.pixels.begin(), image.pixels.end(), bytes.begin(), to_byte);
    std::vector<png_bytep> rows(static_cast<std::size_t>(image.height));
    for (int y = 0; y < image.height; ++y) rows[static_cast<std::size_t>(y)] = bytes.data() + y * image.width * 3;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error(ErrorCode::io, "failed to encode PNG " + path);
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    if (std::fflush(f.get()) != 0) throw Error(ErrorCode::io, "write failed for " + path);
}

Image read_png(const std::string& path) {
    File f(std::fopen(path.c_str(), "rb"));
    if (!f) throw Error(ErrorCode::io, "cannot read " + path);
    png_byte sig[8];
    if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw Error(ErrorCode::io, path + " is not a PNG file");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error(ErrorCode::io, "libpng initialization failed");
    }
    Image out;
    std::vector<std::uint8_t> bytes;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error(ErrorCode::io, "failed to decode PNG " + path);
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    // Normalize every PNG flavour to 8-bit RGB.
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    bytes.resize(static_cast<std::size_t>(out.width * out.height * 3));
    rows.resize(static_cast<std::size_t>(out.height));
    for (int y = 0; y < out.height; ++y) rows[static_cast<std::size_t>(y)] = bytes.data() + y * out.width * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    out.pixels.resize(bytes.size());
    std::transform(bytes.begin(), bytes.end(), out.pixels.begin(), from_byte);
    return out;
}

void write_image_stack(const std::string& path, const std::vector<Image>& images) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorCode::io, "cannot write " + path);
    const std::uint32_t h = images.empty() ? 0 : static_cast<std::uint32_t>(images[0].height);
    const std::uint32_t w = images.empty() ? 0 : static_cast<std::uint32_t>(images[0].width);
    const auto count = static_cast<std::uint32_t>(images.size());
    f.write(kStackMagic, sizeof kStackMagic);
    f.write(reinterpret_cast<const char*>(&count), 4);
    f.write(reinterpret_cast<const char*>(&h), 4);
    f.write(reinterpret_cast<const char*>(&w), 4);
    for (const auto& img : images) {
        if (static_cast<std::uint32_t>(img.height) != h || static_cast<std::uint32_t>(img.width) != w) {
            throw Error(ErrorCode::invalid_argument, "image stack entries must share one size");
        }
        f.write(reinterpret_cast<const char*>(img.pixels.data()),
                static_cast<std::streamsize>(img.pixels.size() * sizeof(float)));
    }
    if (!f) throw Error(ErrorCode::io, "write failed for " + path);
}

std::vector<Image> read_image_stack(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorCode::io, "cannot read " + path);
    char magic[8];
    std::uint32_t count = 0, h = 0, w = 0;
    f.read(magic, 8);
    f.read(reinterpret_cast<char*>(&count), 4);
    f.read(reinterpret_cast<char*>(&h), 4);
    f.read(reinterpret_cast<char*>(&w), 4);
    if (!f || std::memcmp(magic, kStackMagic, 8) != 0) throw Error(ErrorCode::io, path + " is not an image stack");
    std::vector<Image> out(count);
    for (auto& img : out) {
        img.height = static_cast<int>(h);
        img.width = static_cast<int>(w);
        img.pixels.resize(static_cast<std::size_t>(h) * w * 3);
        f.read(reinterpret_cast<char*>(img.pixels.data()),
               static_cast<std::streamsize>(img.pixels.size() * sizeof(float)));
    }
    if (!f) throw Error(ErrorCode::io, path + " is truncated");
    return out;
}

std::vector<Image> read_images(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorCode::io, "cannot read " + path);
    char head[8] = {};
    f.read(head, 8);
    if (f.gcount() == 8 && std::memcmp(head, kStackMagic, 8) == 0) return read_image_stack(path);
    return {read_png(path)};
}

Image tile_images(const std::vector<std::vector<Image>>& rows, int gap, float fill) {
    int cell_h = 0, cell_w = 0;
    std::size_t cols = 0;
    for (const auto& row : rows) {
        cols = std::max(cols, row.size());
        for (const auto& img : row) {
            cell_h = std::max(cell_h, img.height);
            cell_w = std::max(cell_w, img.width);
        }
    }
    const int n_rows = static_cast<int>(rows.size());
    const int n_cols = static_cast<int>(cols);
    Image out = Image::filled(std::max(0, n_rows * cell_h + (n_rows - 1) * gap),
                              std::max(0, n_cols * cell_w + (n_cols - 1) * gap), fill);
    for (int r = 0; r < n_rows; ++r) {
        for (std::size_t c = 0; c < rows[static_cast<std::size_t>(r)].size(); ++c) {
            const Image& img = rows[static_cast<std::size_t>(r)][c];
            const int y0 = r * (cell_h + gap);
            const int x0 = static_cast<int>(c) * (cell_w + gap);
            for (int y = 0; y < img.height; ++y)
                for (int x = 0; x < img.width; ++x)
                    for (int ch = 0; ch < 3; ++ch) out.at(y0 + y, x0 + x, ch) = img.at(y, x, ch);
        }
    }
    return out;
}

Image clamp_image(Image image) {
    for (auto& v : image.pixels) v = std::clamp(v, -1.0f, 1.0f);
    return image;
}

double image_mse(const Image& a, const Image& b) {
    if (a.pixels.size() != b.pixels.size() || a.pixels.empty()) {
        throw Error(ErrorCode::invalid_argument, "image_mse: images differ in size");
    }
    double s = 0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
        s += d * d;
    }
    return s / static_cast<double>(a.pixels.size());
}

}  // namespace ett
