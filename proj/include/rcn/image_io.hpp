#pragma once

// PNG load/store through libpng. Images in memory are channel-first float
// planes in [0,1]; files are 8-bit RGB.

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace rcn {

struct Image {
    std::size_t channels = 3, height = 0, width = 0;
    std::vector<float> pixels;  // channels x height x width

    float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
    float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
};

class ImageError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

namespace detail {
struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_error_fn(png_structp, png_const_charp msg) { throw ImageError(msg); }
inline void png_warning_fn(png_structp, png_const_charp) {}
}  // namespace detail

inline std::uint8_t to_byte(float v) {
    const float c = v < 0 ? 0.f : (v > 1 ? 1.f : v);
    return static_cast<std::uint8_t>(c * 255.f + 0.5f);
}

inline Image read_png(const std::filesystem::path& path) {
    detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw ImageError("cannot open " + path.string());
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8)) throw ImageError(path.string() + ": not a PNG");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_fn, detail::png_warning_fn);
    if (!png) throw ImageError("libpng: cannot create read struct");
    png_infop info = png_create_info_struct(png);
    struct Cleanup {
        png_structp* p;
        png_infop* i;
        ~Cleanup() { png_destroy_read_struct(p, i, nullptr); }
    } cleanup{&png, &info};
    if (!info) throw ImageError("libpng: cannot create info struct");

    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    Image img;
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    if (rowbytes != img.width * 3) throw ImageError(path.string() + ": unsupported PNG layout");
    std::vector<unsigned char> buf(rowbytes * img.height);
    std::vector<png_bytep> rows(img.height);
    for (std::size_t y = 0; y < img.height; ++y) rows[y] = buf.data() + y * rowbytes;
    png_read_image(png, rows.data());
    img.pixels.resize(3 * img.width * img.height);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = buf[y * rowbytes + x * 3 + c] / 255.f;
    return img;
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 3 || img.pixels.size() != 3 * img.height * img.width)
        throw ImageError("write_png: expected a 3-channel image");
    detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw ImageError("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_fn, detail::png_warning_fn);
    if (!png) throw ImageError("libpng: cannot create write struct");
    png_infop info = png_create_info_struct(png);
    struct Cleanup {
        png_structp* p;
        png_infop* i;
        ~Cleanup() { png_destroy_write_struct(p, i); }
    } cleanup{&png, &info};
    if (!info) throw ImageError("libpng: cannot create info struct");

    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    std::vector<unsigned char> buf(img.width * img.height * 3);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) buf[(y * img.width + x) * 3 + c] = to_byte(img.at(c, y, x));
    std::vector<png_bytep> rows(img.height);
    for (std::size_t y = 0; y < img.height; ++y) rows[y] = buf.data() + y * img.width * 3;
    png_set_rows(png, info, rows.data());
    png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
}

}  // namespace rcn
