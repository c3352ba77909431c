#include "rigsplat/image.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <memory>

namespace rigsplat {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_u8(double v) {
    double c = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

std::uint16_t to_u16(double v) {
    double c = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint16_t>(std::lround(c * 65535.0));
}

void write_png_impl(const std::filesystem::path& path, const Image& img, int bit_depth) {
    if (img.channels != 1 && img.channels != 3)
        throw IoError("png write: unsupported channel count " + std::to_string(img.channels));
    FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png write failed: " + path.string());
    }
    png_init_io(png, fp.get());
    int color_type = img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
    png_set_IHDR(png, info, img.width, img.height, bit_depth, color_type, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::size_t row_bytes = static_cast<std::size_t>(img.width) * img.channels * (bit_depth / 8);
    std::vector<std::uint8_t> row(row_bytes);
    for (int y = 0; y < img.height; ++y) {
        if (bit_depth == 8) {
            for (int x = 0; x < img.width; ++x)
                for (int c = 0; c < img.channels; ++c)
                    row[static_cast<std::size_t>(x) * img.channels + c] = to_u8(img.at(y, x, c));
        } else {
            for (int x = 0; x < img.width; ++x)
                for (int c = 0; c < img.channels; ++c) {
                    std::uint16_t v = to_u16(img.at(y, x, c));
                    std::size_t i = (static_cast<std::size_t>(x) * img.channels + c) * 2;
                    row[i] = static_cast<std::uint8_t>(v >> 8);  // PNG is big-endian
                    row[i + 1] = static_cast<std::uint8_t>(v & 0xff);
                }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& img) {
    write_png_impl(path, img, 8);
}

void write_png_gray16(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 1) throw IoError("png gray16 write expects a single channel");
    write_png_impl(path, img, 16);
}

Image read_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw IoError("cannot open file: " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("png read failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int bit_depth = png_get_bit_depth(png, info);
    int color_type = png_get_color_type(png, info);

    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    bit_depth = png_get_bit_depth(png, info);
    int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3)
        throw IoError("png read: unsupported channel count " + std::to_string(channels));

    Image img(static_cast<int>(h), static_cast<int>(w), channels);
    std::size_t row_bytes = png_get_rowbytes(png, info);
    std::vector<std::uint8_t> row(row_bytes);
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x) {
            for (int c = 0; c < channels; ++c) {
                double v;
                if (bit_depth == 16) {
                    std::size_t i = (static_cast<std::size_t>(x) * channels + c) * 2;
                    v = ((row[i] << 8) | row[i + 1]) / 65535.0;
                } else {
                    v = row[static_cast<std::size_t>(x) * channels + c] / 255.0;
                }
                img.at(static_cast<int>(y), static_cast<int>(x), c) = v;
            }
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_raw_f32(const std::filesystem::path& path, const Image& img) {
    FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path.string());
    std::vector<float> buf(img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) buf[i] = static_cast<float>(img.data[i]);
    if (std::fwrite(buf.data(), sizeof(float), buf.size(), fp.get()) != buf.size())
        throw IoError("write failed: " + path.string());
}

Image read_raw_f32(const std::filesystem::path& path, int height, int width, int channels) {
    FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw IoError("cannot open file: " + path.string());
    Image img(height, width, channels);
    std::vector<float> buf(img.data.size());
    if (std::fread(buf.data(), sizeof(float), buf.size(), fp.get()) != buf.size())
        throw IoError("short read: " + path.string());
    for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i];
    return img;
}

}  // namespace rigsplat
