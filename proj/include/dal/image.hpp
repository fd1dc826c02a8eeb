/*
 * Copyright 2026 dalnet contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <png.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "dal/tensor.hpp"

namespace dal {

/// Interleaved 8-bit RGB image.
struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;  // 3 * width * height

    ImageU8() = default;
    ImageU8(int w, int h) : width(w), height(h), rgb(std::size_t(3) * w * h, 0) {}

    std::uint8_t& at(int x, int y, int c) {
        return rgb[(std::size_t(y) * width + x) * 3 + c];
    }
    std::uint8_t at(int x, int y, int c) const {
        return rgb[(std::size_t(y) * width + x) * 3 + c];
    }
    bool inside(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }

    void set_px(int x, int y, std::array<std::uint8_t, 3> color) {
        if (!inside(x, y)) return;
        at(x, y, 0) = color[0];
        at(x, y, 1) = color[1];
        at(x, y, 2) = color[2];
    }
};

// ---- PNG I/O -------------------------------------------------------------

inline void write_png(const std::string& path, const ImageU8& img) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw std::runtime_error("cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw std::runtime_error("png write failed: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y)
        rows[y] = const_cast<png_bytep>(img.rgb.data() + std::size_t(y) * img.width * 3);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline ImageU8 read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw std::runtime_error("cannot open image: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        std::fclose(fp);
        throw std::runtime_error("png read failed: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    // normalize any color type / depth to 8-bit RGB
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    ImageU8 img(w, h);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = img.rgb.data() + std::size_t(y) * w * 3;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

// ---- conversions ----------------------------------------------------------

/// Network input layout: CHW float in [-0.5, 0.5].
template <typename T>
Tensor<T> image_to_tensor(const ImageU8& img) {
    Tensor<T> t(3, img.height, img.width);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                t.at(c, y, x) = static_cast<T>(img.at(x, y, c) / 255.0 - 0.5);
    return t;
}

// ---- resampling ------------------------------------------------------------

inline std::uint8_t sample_bilinear_u8(const ImageU8& img, double x, double y, int c) {
    x = std::min(std::max(x, 0.0), double(img.width - 1));
    y = std::min(std::max(y, 0.0), double(img.height - 1));
    const int x0 = static_cast<int>(x);
    const int y0 = static_cast<int>(y);
    const int x1 = std::min(x0 + 1, img.width - 1);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wx = x - x0;
    const double wy = y - y0;
    const double v = (1 - wy) * ((1 - wx) * img.at(x0, y0, c) + wx * img.at(x1, y0, c)) +
                     wy * ((1 - wx) * img.at(x0, y1, c) + wx * img.at(x1, y1, c));
    return static_cast<std::uint8_t>(std::lround(std::min(255.0, std::max(0.0, v))));
}

inline ImageU8 resize_bilinear(const ImageU8& img, int out_w, int out_h) {
    ImageU8 out(out_w, out_h);
    const double sx = static_cast<double>(img.width) / out_w;
    const double sy = static_cast<double>(img.height) / out_h;
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(x, y, c) =
                    sample_bilinear_u8(img, (x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5, c);
    return out;
}

/// 2x3 row-major affine matrix mapping source -> destination coordinates.
struct Affine2D {
    std::array<double, 6> m{1, 0, 0, 0, 1, 0};

    std::pair<double, double> apply(double x, double y) const {
        return {m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5]};
    }

    Affine2D inverse() const {
        const double det = m[0] * m[4] - m[1] * m[3];
        if (std::abs(det) < 1e-12) throw std::runtime_error("singular affine transform");
        Affine2D inv;
        inv.m = {m[4] / det,  -m[1] / det, (m[1] * m[5] - m[4] * m[2]) / det,
                 -m[3] / det, m[0] / det,  (m[3] * m[2] - m[0] * m[5]) / det};
        return inv;
    }

    static Affine2D compose(const Affine2D& a, const Affine2D& b) {  // a after b
        Affine2D r;
        r.m = {a.m[0] * b.m[0] + a.m[1] * b.m[3],
               a.m[0] * b.m[1] + a.m[1] * b.m[4],
               a.m[0] * b.m[2] + a.m[1] * b.m[5] + a.m[2],
               a.m[3] * b.m[0] + a.m[4] * b.m[3],
               a.m[3] * b.m[1] + a.m[4] * b.m[4],
               a.m[3] * b.m[2] + a.m[4] * b.m[5] + a.m[5]};
        return r;
    }

    /// rotation (radians) + isotropic scale about a center, then translation
    static Affine2D similarity(double cx, double cy, double angle, double scale, double tx,
                               double ty) {
        const double c = std::cos(angle) * scale;
        const double s = std::sin(angle) * scale;
        Affine2D r;
        r.m = {c, -s, cx - c * cx + s * cy + tx, s, c, cy - s * cx - c * cy + ty};
        return r;
    }
};

/// Inverse-map warp with bilinear sampling; destination pixels that map
/// outside the source read black.
inline ImageU8 warp_affine(const ImageU8& img, const Affine2D& fwd) {
    ImageU8 out(img.width, img.height);
    const Affine2D inv = fwd.inverse();
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            auto [sx, sy] = inv.apply(x, y);
            if (sx < -0.5 || sx > img.width - 0.5 || sy < -0.5 || sy > img.height - 0.5)
                continue;
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = sample_bilinear_u8(img, sx, sy, c);
        }
    }
    return out;
}

// ---- drawing ---------------------------------------------------------------

inline void draw_disc(ImageU8& img, double cx, double cy, double radius,
                      std::array<std::uint8_t, 3> color) {
    const int x0 = static_cast<int>(std::floor(cx - radius));
    const int x1 = static_cast<int>(std::ceil(cx + radius));
    const int y0 = static_cast<int>(std::floor(cy - radius));
    const int y1 = static_cast<int>(std::ceil(cy + radius));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= radius * radius)
                img.set_px(x, y, color);
}

inline void draw_segment(ImageU8& img, double x0, double y0, double x1, double y1,
                         double thickness, std::array<std::uint8_t, 3> color) {
    const double len = std::hypot(x1 - x0, y1 - y0);
    const int steps = std::max(1, static_cast<int>(std::ceil(len)));
    for (int i = 0; i <= steps; ++i) {
        const double t = static_cast<double>(i) / steps;
        draw_disc(img, x0 + t * (x1 - x0), y0 + t * (y1 - y0), thickness / 2, color);
    }
}

inline void fill_rect(ImageU8& img, int x0, int y0, int w, int h,
                      std::array<std::uint8_t, 3> color) {
    for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) img.set_px(x, y, color);
}

}  // namespace dal
