#pragma once

#include <array>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

namespace trendmatch {

/// Raised for unreadable/unwritable files and malformed image data.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// 8-bit raster. `channels` is 1 (gray or palette indices) or 3 (RGB),
/// interleaved row-major.
struct Raster {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;
    bool indexed = false;  // pixels are palette indices
    std::vector<std::uint8_t> pixels;
    std::vector<std::array<std::uint8_t, 3>> palette;
};

namespace io {

/// Called with every path the image reader opens. Tests use it to verify
/// which files a code path touches.
inline std::function<void(const std::filesystem::path&)>& read_observer() {
    static std::function<void(const std::filesystem::path&)> observer;
    return observer;
}

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// libpng reports errors via longjmp; only trivially destructible state lives
// between setjmp and the libpng calls below.
inline void png_error_handler(png_structp png, png_const_charp msg) {
    auto* buf = static_cast<char*>(png_get_error_ptr(png));
    std::snprintf(buf, 256, "%s", msg);
    png_longjmp(png, 1);
}
inline void png_warning_handler(png_structp, png_const_charp) {}

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const Raster& r) {
    if (r.pixels.size() != r.width * r.height * r.channels || (r.channels != 1 && r.channels != 3)) {
        throw DataError("write_png: malformed raster for " + path.string());
    }
    detail::FilePtr file(std::fopen(path.string().c_str(), "wb"));
    if (!file) throw DataError("cannot open " + path.string() + " for writing");

    char err[256] = "";
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, err, detail::png_error_handler,
                                              detail::png_warning_handler);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw DataError("write_png: out of memory");
    }
    std::vector<png_bytep> rows(r.height);
    for (std::size_t y = 0; y < r.height; ++y) {
        rows[y] = const_cast<png_bytep>(r.pixels.data() + y * r.width * r.channels);
    }
    std::vector<png_color> palette;
    for (const auto& c : r.palette) palette.push_back(png_color{c[0], c[1], c[2]});

    bool failed = false;
    if (setjmp(png_jmpbuf(png))) {
        failed = true;
    } else {
        png_init_io(png, file.get());
        const int color = r.indexed ? PNG_COLOR_TYPE_PALETTE : (r.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY);
        png_set_IHDR(png, info, static_cast<png_uint_32>(r.width), static_cast<png_uint_32>(r.height), 8, color,
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        if (r.indexed) png_set_PLTE(png, info, palette.data(), static_cast<int>(palette.size()));
        png_write_info(png, info);
        png_write_image(png, rows.data());
        png_write_end(png, nullptr);
    }
    png_destroy_write_struct(&png, &info);
    if (failed) throw DataError("write_png " + path.string() + ": " + err);
}

/// Reads 8-bit gray, RGB or palette PNGs. Palette images keep their indices
/// (channels = 1, indexed = true); alpha is dropped.
inline Raster read_png(const std::filesystem::path& path) {
    if (read_observer()) read_observer()(path);
    detail::FilePtr file(std::fopen(path.string().c_str(), "rb"));
    if (!file) throw DataError("cannot open " + path.string());

    char err[256] = "";
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, err, detail::png_error_handler,
                                             detail::png_warning_handler);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("read_png: out of memory");
    }
    Raster r;
    std::vector<png_bytep> rows;
    bool failed = false;
    if (setjmp(png_jmpbuf(png))) {
        failed = true;
    } else {
        png_init_io(png, file.get());
        png_read_info(png, info);
        const int color = png_get_color_type(png, info);
        const int depth = png_get_bit_depth(png, info);
        if (depth == 16) png_set_strip_16(png);
        if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
        if (color == PNG_COLOR_TYPE_PALETTE) {
            if (depth < 8) png_set_packing(png);
            png_colorp plte = nullptr;
            int count = 0;
            if (png_get_PLTE(png, info, &plte, &count) & PNG_INFO_PLTE) {
                for (int i = 0; i < count; ++i) r.palette.push_back({plte[i].red, plte[i].green, plte[i].blue});
            }
            r.indexed = true;
        } else if ((color & PNG_COLOR_MASK_COLOR) == 0 && depth < 8) {
            png_set_expand_gray_1_2_4_to_8(png);
        }
        png_read_update_info(png, info);
        r.width = png_get_image_width(png, info);
        r.height = png_get_image_height(png, info);
        r.channels = png_get_channels(png, info);
        r.pixels.resize(r.width * r.height * r.channels);
        rows.resize(r.height);
        for (std::size_t y = 0; y < r.height; ++y) rows[y] = r.pixels.data() + y * r.width * r.channels;
        png_read_image(png, rows.data());
        png_read_end(png, nullptr);
    }
    png_destroy_read_struct(&png, &info, nullptr);
    if (failed) throw DataError("read_png " + path.string() + ": " + err);
    if (r.channels != 1 && r.channels != 3) {
        throw DataError("read_png " + path.string() + ": unsupported channel count " + std::to_string(r.channels));
    }
    return r;
}

}  // namespace io
}  // namespace trendmatch
