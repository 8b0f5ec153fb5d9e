// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "ultrabm/common.hpp"
#include "ultrabm/tensor.hpp"

namespace ultrabm::image {

// Rank-4 (B,C,H,W) image carrier in a declared value range.
struct ImageTensor {
    Tensor data;
    Scalar range_lo = 0.0;
    Scalar range_hi = 1.0;
    int bit_depth = 8;  // source/target bit depth metadata

    std::int64_t batch() const { return data.dim(0); }
    std::int64_t channels() const { return data.dim(1); }
    std::int64_t height() const { return data.dim(2); }
    std::int64_t width() const { return data.dim(3); }

    void validate(const char* who = "ImageTensor") const {
        require_rank(data, 4, who);
        if (!data.all_finite()) throw ValidationError(std::string(who) + ": non-finite entries");
        if (range_lo == 0.0 && range_hi == 1.0) {
            if (data.min() < 0.0 || data.max() > 1.0)
                throw ValidationError(std::string(who) + ": entries outside [0,1]");
        }
    }
};

namespace detail {

struct PngReadCtx {
    png_structp png = nullptr;
    png_infop info = nullptr;
    std::FILE* fp = nullptr;
    ~PngReadCtx() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (fp) std::fclose(fp);
    }
};

struct PngWriteCtx {
    png_structp png = nullptr;
    png_infop info = nullptr;
    std::FILE* fp = nullptr;
    ~PngWriteCtx() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (fp) std::fclose(fp);
    }
};

}  // namespace detail

// Loads an 8- or 16-bit RGB PNG into a (1,3,H,W) tensor scaled to [0,1].
inline ImageTensor load_image(const std::string& path) {
    detail::PngReadCtx ctx;
    ctx.fp = std::fopen(path.c_str(), "rb");
    if (!ctx.fp) throw IoError("load_image: cannot open file: " + path);
    png_byte header[8];
    if (std::fread(header, 1, 8, ctx.fp) != 8 || png_sig_cmp(header, 0, 8))
        throw FormatError("load_image: not a PNG file: " + path);
    ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.png || !ctx.info) throw IoError("load_image: libpng init failed");
    if (setjmp(png_jmpbuf(ctx.png))) throw FormatError("load_image: corrupt PNG: " + path);
    png_init_io(ctx.png, ctx.fp);
    png_set_sig_bytes(ctx.png, 8);
    png_read_info(ctx.png, ctx.info);

    const png_uint_32 w = png_get_image_width(ctx.png, ctx.info);
    const png_uint_32 h = png_get_image_height(ctx.png, ctx.info);
    const int depth = png_get_bit_depth(ctx.png, ctx.info);
    const int color = png_get_color_type(ctx.png, ctx.info);
    if (color != PNG_COLOR_TYPE_RGB)
        throw FormatError("load_image: only RGB PNG supported (got color type " + std::to_string(color) +
                          "): " + path);
    if (depth != 8 && depth != 16)
        throw FormatError("load_image: only 8/16-bit PNG supported (got " + std::to_string(depth) +
                          "): " + path);
    png_set_interlace_handling(ctx.png);
    png_read_update_info(ctx.png, ctx.info);

    const std::size_t rowbytes = png_get_rowbytes(ctx.png, ctx.info);
    std::vector<png_byte> raw(rowbytes * h);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = raw.data() + y * rowbytes;
    png_read_image(ctx.png, rows.data());
    png_read_end(ctx.png, nullptr);

    ImageTensor img;
    img.bit_depth = depth;
    img.data = Tensor({1, 3, static_cast<std::int64_t>(h), static_cast<std::int64_t>(w)});
    // Divide (not multiply by reciprocal) so v == k/255.0 bit-exactly.
    const Scalar denom = depth == 8 ? 255.0 : 65535.0;
    for (png_uint_32 y = 0; y < h; ++y) {
        const png_byte* row = rows[y];
        for (png_uint_32 x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                std::uint32_t v;
                if (depth == 8) {
                    v = row[x * 3 + static_cast<png_uint_32>(c)];
                } else {
                    const png_byte* p = row + (x * 3 + static_cast<png_uint_32>(c)) * 2;
                    v = (static_cast<std::uint32_t>(p[0]) << 8) | p[1];  // PNG is big-endian
                }
                img.data.at(0, c, y, x) = static_cast<Scalar>(v) / denom;
            }
    }
    return img;
}

// Writes batch element 0 of a (B,3,H,W) [0,1] tensor as an RGB PNG.
inline void save_image(const std::string& path, const ImageTensor& img) {
    require_rank(img.data, 4, "save_image");
    if (img.channels() != 3) throw ShapeError("save_image: need 3 channels, got " + img.data.shape_str());
    if (img.bit_depth != 8 && img.bit_depth != 16)
        throw FormatError("save_image: bit depth must be 8 or 16");
    detail::PngWriteCtx ctx;
    ctx.fp = std::fopen(path.c_str(), "wb");
    if (!ctx.fp) throw IoError("save_image: cannot open for writing: " + path);
    ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.png || !ctx.info) throw IoError("save_image: libpng init failed");
    if (setjmp(png_jmpbuf(ctx.png))) throw IoError("save_image: libpng write failed: " + path);
    png_init_io(ctx.png, ctx.fp);
    const std::int64_t h = img.height(), w = img.width();
    png_set_IHDR(ctx.png, ctx.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h),
                 img.bit_depth, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(ctx.png, ctx.info);

    const Scalar maxv = img.bit_depth == 8 ? 255.0 : 65535.0;
    const std::size_t rowbytes = static_cast<std::size_t>(w) * 3 * (img.bit_depth == 8 ? 1 : 2);
    std::vector<png_byte> row(rowbytes);
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                Scalar v = img.data.at(0, c, y, x);
                v = std::min(std::max(v, Scalar(0)), Scalar(1));
                const auto q = static_cast<std::uint32_t>(std::lround(v * maxv));
                if (img.bit_depth == 8) {
                    row[static_cast<std::size_t>(x * 3 + c)] = static_cast<png_byte>(q);
                } else {
                    row[static_cast<std::size_t>((x * 3 + c) * 2)] = static_cast<png_byte>(q >> 8);
                    row[static_cast<std::size_t>((x * 3 + c) * 2 + 1)] = static_cast<png_byte>(q & 0xff);
                }
            }
        png_write_row(ctx.png, row.data());
    }
    png_write_end(ctx.png, nullptr);
}

// BT.601 luma: 0.299 R + 0.587 G + 0.114 B. (B,3,H,W) -> (B,1,H,W).
inline Tensor rgb_to_gray(const Tensor& x) {
    require_rank(x, 4, "rgb_to_gray");
    if (x.dim(1) != 3) throw ShapeError("rgb_to_gray: need 3 channels, got " + x.shape_str());
    const std::int64_t B = x.dim(0), H = x.dim(2), W = x.dim(3);
    Tensor y({B, 1, H, W});
    for (std::int64_t b = 0; b < B; ++b) {
        const Scalar* r = x.data() + x.idx4(b, 0, 0, 0);
        const Scalar* g = x.data() + x.idx4(b, 1, 0, 0);
        const Scalar* bl = x.data() + x.idx4(b, 2, 0, 0);
        Scalar* out = y.data() + y.idx4(b, 0, 0, 0);
        for (std::int64_t i = 0; i < H * W; ++i) out[i] = 0.299 * r[i] + 0.587 * g[i] + 0.114 * bl[i];
    }
    return y;
}

inline ImageTensor rgb_to_gray(const ImageTensor& x) {
    ImageTensor out;
    out.data = rgb_to_gray(x.data);
    out.bit_depth = x.bit_depth;
    return out;
}

}  // namespace ultrabm::image
