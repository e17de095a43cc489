#pragma once
// Mid-slice montage export for generated sequences.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <vector>

#include "ddm/grid.hpp"

namespace ddm::png {

/// 8-bit grayscale image, row-major.
struct Gray {
    int width = 0, height = 0;
    std::vector<std::uint8_t> pixels;
};

inline void write(const std::filesystem::path& path, const Gray& img) {
    require(img.width > 0 && img.height > 0, "png: empty image");
    require(img.pixels.size() == static_cast<std::size_t>(img.width) * img.height, "png: pixel buffer size");
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
    if (!fp) throw std::runtime_error("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("png: allocation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("png: write failed for " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int r = 0; r < img.height; ++r)
        png_write_row(png, const_cast<png_bytep>(img.pixels.data() + static_cast<std::size_t>(r) * img.width));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

/// Horizontal strip of the middle slice (last axis) of each volume, intensities
/// in [-1, 1] mapped to [0, 255].
inline Gray montage(const std::vector<const Volume*>& frames, int gap = 2) {
    require(!frames.empty(), "montage: no frames");
    const Shape3 s = frames.front()->shape();
    for (auto* f : frames) require_same_shape(f->shape(), s, "montage");
    Gray img;
    img.height = s.d;
    img.width = static_cast<int>(frames.size()) * (s.h + gap) - gap;
    img.pixels.assign(static_cast<std::size_t>(img.width) * img.height, 0);
    const int k = s.w / 2;
    for (std::size_t f = 0; f < frames.size(); ++f)
        for (int i = 0; i < s.d; ++i)
            for (int j = 0; j < s.h; ++j) {
                const double v = std::clamp(((*frames[f])(i, j, k) + 1.0) * 127.5, 0.0, 255.0);
                img.pixels[static_cast<std::size_t>(i) * img.width + f * (s.h + gap) + j] =
                    static_cast<std::uint8_t>(std::lround(v));
            }
    return img;
}

}  // namespace ddm::png
