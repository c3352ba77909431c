#pragma once

#include "rigsplat/common.hpp"

#include <filesystem>
#include <vector>

namespace rigsplat {

// Dense H x W x C image, double precision, values nominally in [0,1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> data;  // row-major, channel-interleaved

    Image() = default;
    Image(int h, int w, int c, double fill = 0.0)
        : height(h), width(w), channels(c),
          data(static_cast<std::size_t>(h) * w * c, fill) {}

    double& at(int y, int x, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    double at(int y, int x, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }

    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
    std::size_t size() const { return data.size(); }
};

// 8-bit PNG, RGB (3 channels) or grayscale (1 channel). Values clamped to [0,1].
void write_png(const std::filesystem::path& path, const Image& img);
// 16-bit single-channel PNG (used for optional alpha dumps).
void write_png_gray16(const std::filesystem::path& path, const Image& img);
// Reads 8/16-bit PNG into [0,1] doubles; gray -> 1 channel, RGB/RGBA -> 3 (alpha dropped).
Image read_png(const std::filesystem::path& path);

// Raw float32 dump (little-endian, row-major), for bit-level test comparisons.
void write_raw_f32(const std::filesystem::path& path, const Image& img);
Image read_raw_f32(const std::filesystem::path& path, int height, int width, int channels);

}  // namespace rigsplat
