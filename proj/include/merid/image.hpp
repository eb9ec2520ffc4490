// Copyright Contributors to the MERID Project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "merid/common.hpp"
#include "merid/tensor.hpp"

namespace merid {

// Planar floating-point RGB image, channels in [0,1], stored (3,H,W).
struct RgbImage {
    Tensor t;

    RgbImage() = default;
    RgbImage(int h, int w) : t({3, h, w}) {}
    explicit RgbImage(Tensor tt) : t(std::move(tt)) {
        require(t.rank() == 3 && t.dim(0) == 3, "RgbImage expects (3,H,W)");
    }

    int height() const { return t.dim(1); }
    int width() const { return t.dim(2); }
    double& at(int c, int y, int x) { return t.at3(c, y, x); }
    double at(int c, int y, int x) const { return t.at3(c, y, x); }

    void clamp01() {
        for (double& x : t.v) x = std::clamp(x, 0.0, 1.0);
    }

    static RgbImage constant(int h, int w, double r, double g, double b) {
        RgbImage img(h, w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                img.at(0, y, x) = r;
                img.at(1, y, x) = g;
                img.at(2, y, x) = b;
            }
        return img;
    }
};

namespace io_detail {

inline RgbImage from_rgb8(const std::vector<unsigned char>& buf, int h, int w) {
    RgbImage img(h, w);
    const double inv = 1.0 / 255.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            std::size_t o = (static_cast<std::size_t>(y) * w + x) * 3;
            img.at(0, y, x) = buf[o] * inv;
            img.at(1, y, x) = buf[o + 1] * inv;
            img.at(2, y, x) = buf[o + 2] * inv;
        }
    return img;
}

inline RgbImage load_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp)
        fail("cannot open image %s", path.c_str());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        fail("failed to decode PNG %s", path.c_str());
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);
    if (depth == 16)
        png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE)
        png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8)
        png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS))
        png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    std::vector<unsigned char> buf(static_cast<std::size_t>(h) * w * 3);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = buf.data() + static_cast<std::size_t>(y) * w * 3;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return from_rgb8(buf, static_cast<int>(h), static_cast<int>(w));
}

inline RgbImage load_jpeg(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp)
        fail("cannot open image %s", path.c_str());
    jpeg_decompress_struct cinfo;
    jpeg_error_mgr jerr;
    cinfo.err = jpeg_std_error(&jerr);
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, fp);
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    int w = static_cast<int>(cinfo.output_width);
    int h = static_cast<int>(cinfo.output_height);
    std::vector<unsigned char> buf(static_cast<std::size_t>(h) * w * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        unsigned char* row = buf.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    std::fclose(fp);
    return from_rgb8(buf, h, w);
}

} // namespace io_detail

// 8-bit PNG/JPEG in; channels normalized to [0,1].
inline RgbImage load_image(const std::string& path) {
    std::string ext = std::filesystem::path(path).extension().string();
    for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (ext == ".png")
        return io_detail::load_png(path);
    if (ext == ".jpg" || ext == ".jpeg")
        return io_detail::load_jpeg(path);
    fail("unsupported image extension '%s' for %s", ext.c_str(), path.c_str());
}

inline void save_png(const std::string& path, const RgbImage& img) {
    int h = img.height(), w = img.width();
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp)
        fail("cannot write image %s", path.c_str());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        fail("failed to encode PNG %s", path.c_str());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
                row[static_cast<std::size_t>(x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

// Area-average resampling; target must not exceed the source in either axis.
// Each output pixel integrates the exact (fractional) source box it covers,
// so constants are preserved and integer factors reduce to plain box means.
inline RgbImage downsample(const RgbImage& src, int target_w, int target_h) {
    int sw = src.width(), sh = src.height();
    if (target_w > sw || target_h > sh)
        fail("downsample: target %dx%d exceeds source %dx%d", target_w, target_h, sw, sh);
    require(target_w >= 1 && target_h >= 1, "downsample: empty target");
    RgbImage out(target_h, target_w);
    double ry = static_cast<double>(sh) / target_h;
    double rx = static_cast<double>(sw) / target_w;
    for (int y = 0; y < target_h; ++y) {
        double y0 = y * ry, y1 = (y + 1) * ry;
        int iy0 = static_cast<int>(std::floor(y0)), iy1 = std::min(sh, static_cast<int>(std::ceil(y1)));
        for (int x = 0; x < target_w; ++x) {
            double x0 = x * rx, x1 = (x + 1) * rx;
            int ix0 = static_cast<int>(std::floor(x0)), ix1 = std::min(sw, static_cast<int>(std::ceil(x1)));
            double acc[3] = {0, 0, 0};
            double area = 0.0;
            for (int yy = iy0; yy < iy1; ++yy) {
                double wy = std::min<double>(yy + 1, y1) - std::max<double>(yy, y0);
                for (int xx = ix0; xx < ix1; ++xx) {
                    double wx = std::min<double>(xx + 1, x1) - std::max<double>(xx, x0);
                    double wgt = wx * wy;
                    area += wgt;
                    for (int c = 0; c < 3; ++c) acc[c] += wgt * src.at(c, yy, xx);
                }
            }
            for (int c = 0; c < 3; ++c) out.at(c, y, x) = std::clamp(acc[c] / area, 0.0, 1.0);
        }
    }
    return out;
}

// Separable Gaussian blur of a single plane (H,W) with sigma = radius/2,
// kernel size 2*radius+1 and edge-replicate padding.
inline Tensor gaussian_blur_plane(const Tensor& plane, int radius) {
    require(plane.rank() == 2, "gaussian_blur_plane: expects (H,W)");
    require(radius >= 1, "gaussian_blur_plane: radius must be >= 1");
    int H = plane.dim(0), W = plane.dim(1);
    require(radius < std::min(H, W), "gaussian_blur_plane: radius too large for plane");
    double sigma = radius / 2.0;
    int k = 2 * radius + 1;
    std::vector<double> kern(k);
    double s = 0.0;
    for (int i = 0; i < k; ++i) {
        double d = i - radius;
        kern[i] = std::exp(-0.5 * d * d / (sigma * sigma));
        s += kern[i];
    }
    for (double& x : kern) x /= s;
    auto clampi = [](int i, int n) { return std::clamp(i, 0, n - 1); };
    Tensor tmp({H, W}), out({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int i = 0; i < k; ++i) acc += kern[i] * plane.v[static_cast<std::size_t>(y) * W + clampi(x + i - radius, W)];
            tmp.v[static_cast<std::size_t>(y) * W + x] = acc;
        }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int i = 0; i < k; ++i) acc += kern[i] * tmp.v[static_cast<std::size_t>(clampi(y + i - radius, H)) * W + x];
            out.v[static_cast<std::size_t>(y) * W + x] = acc;
        }
    return out;
}

} // namespace merid
