#include "ssmg/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "ssmg/errors.hpp"

namespace ssmg {

namespace {

struct FileCloser {
    FILE* f;
    ~FileCloser() {
        if (f) std::fclose(f);
    }
};

}  // namespace

void write_png(const std::string& path, const ImageU8& img) {
    if (img.h <= 0 || img.w <= 0 || img.rgb.size() != static_cast<size_t>(img.h) * img.w * 3)
        throw IoError("write_png: malformed image buffer");
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("write_png: cannot open " + path);
    FileCloser closer{f};

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("write_png: png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("write_png: png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("write_png: libpng error writing " + path);
    }
    png_init_io(png, f);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(img.h));
    for (int i = 0; i < img.h; ++i)
        rows[static_cast<size_t>(i)] =
            const_cast<png_bytep>(img.rgb.data() + static_cast<size_t>(i) * img.w * 3);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

ImageU8 read_png(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw IoError("read_png: cannot open " + path);
    FileCloser closer{f};

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("read_png: png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("read_png: png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("read_png: libpng error reading " + path);
    }
    png_init_io(png, f);
    png_read_info(png, info);

    png_uint_32 w = 0, h = 0;
    int bit_depth = 0, color_type = 0;
    png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);

    // Normalize everything to 8-bit RGB.
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    ImageU8 img(static_cast<int>(h), static_cast<int>(w));
    std::vector<png_bytep> rows(h);
    for (png_uint_32 i = 0; i < h; ++i)
        rows[i] = img.rgb.data() + static_cast<size_t>(i) * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

Tensor image_to_tensor(const ImageU8& img) {
    Tensor t({3, img.h, img.w});
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < img.h; ++i)
            for (int j = 0; j < img.w; ++j)
                t.at3(c, i, j) = static_cast<float>(img.px(i, j)[c]) / 127.5f - 1.0f;
    return t;
}

ImageU8 tensor_to_image(const Tensor& t) {
    if (t.rank() != 3 || t.dim(0) != 3) throw ShapeError("tensor_to_image: want [3,H,W]");
    ImageU8 img(static_cast<int>(t.dim(1)), static_cast<int>(t.dim(2)));
    for (int i = 0; i < img.h; ++i)
        for (int j = 0; j < img.w; ++j)
            for (int c = 0; c < 3; ++c) {
                float v = (t.at3(c, i, j) + 1.0f) * 127.5f;
                img.px(i, j)[c] = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
    return img;
}

}  // namespace ssmg
