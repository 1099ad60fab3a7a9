#pragma once

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "advpatch/core.hpp"
#include "json.hpp"

namespace advpatch {

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FileHandle = std::unique_ptr<std::FILE, FileCloser>;

inline std::uint8_t quantize(double v) {
    double s = clamp01(v) * 255.0;
    int q = static_cast<int>(s + 0.5);
    if (q > 255) q = 255;
    return static_cast<std::uint8_t>(q);
}

}  // namespace detail

// Writes an 8-bit RGB PNG. Values are clamped to [0,1] then quantized.
inline void write_png(const std::string& path, const double* pixels, int height,
                      int width) {
    detail::FileHandle fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path);

    png_structp png =
        png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng write error: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width),
                 static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<std::uint8_t> row(static_cast<size_t>(width) * 3);
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c)
            for (int ch = 0; ch < 3; ++ch)
                row[static_cast<size_t>(c) * 3 + ch] = detail::quantize(
                    pixels[(static_cast<size_t>(r) * width + c) * 3 + ch]);
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline void write_png(const std::string& path, const Image& img) {
    write_png(path, img.pixels.data(), img.height, img.width);
}

// Reads any 8/16-bit PNG into interleaved RGB doubles in [0,1].
inline Image read_png(const std::string& path) {
    detail::FileHandle fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open for reading: " + path);

    std::uint8_t sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw FormatError("not a PNG file: " + path);

    png_structp png =
        png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("corrupt or truncated PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    // Normalize everything to 8-bit RGB.
    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    int width = static_cast<int>(png_get_image_width(png, info));
    int height = static_cast<int>(png_get_image_height(png, info));

    Image img(height, width, 0.0, path);
    std::vector<std::uint8_t> row(static_cast<size_t>(width) * 3);
    for (int r = 0; r < height; ++r) {
        png_read_row(png, row.data(), nullptr);
        for (int c = 0; c < width; ++c)
            for (int ch = 0; ch < 3; ++ch)
                img.at(r, c, ch) =
                    row[static_cast<size_t>(c) * 3 + ch] / 255.0;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

inline nlohmann::json meta_to_json(const PatchMeta& m) {
    return nlohmann::json{{"seed", m.seed},
                          {"lambda_tv", m.lambda_tv},
                          {"surrogate_ids", m.surrogate_ids},
                          {"epochs_trained", m.epochs_trained},
                          {"config_digest", m.config_digest}};
}

inline PatchMeta meta_from_json(const nlohmann::json& j) {
    PatchMeta m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.lambda_tv = j.at("lambda_tv").get<double>();
    m.surrogate_ids = j.at("surrogate_ids").get<std::vector<std::string>>();
    m.epochs_trained = j.at("epochs_trained").get<int>();
    m.config_digest = j.at("config_digest").get<std::string>();
    return m;
}

inline std::string meta_path_for(const std::string& patch_path) {
    std::string p = patch_path;
    const std::string ext = ".png";
    if (p.size() >= ext.size() &&
        p.compare(p.size() - ext.size(), ext.size(), ext) == 0)
        p.resize(p.size() - ext.size());
    return p + ".meta.json";
}

// Persists patch pixels as lossless 8-bit RGB PNG plus a JSON metadata
// sidecar. Round-trip pixel error is bounded by 8-bit quantization (1/510).
inline void save_patch(const Patch& p, const std::string& path) {
    write_png(path, p.pixels.data(), p.height, p.width);
    std::ofstream out(meta_path_for(path));
    if (!out) throw IoError("cannot write meta sidecar for: " + path);
    out << meta_to_json(p.meta).dump(2) << "\n";
}

inline Patch load_patch(const std::string& path) {
    Image img = read_png(path);
    if (img.height != img.width)
        throw FormatError("patch must be square: " + path);
    Patch p(img.height);
    p.pixels = img.pixels;

    std::ifstream in(meta_path_for(path));
    if (!in) throw IoError("missing meta sidecar for: " + path);
    nlohmann::json j;
    try {
        in >> j;
        p.meta = meta_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad meta sidecar for " + path + ": " + e.what());
    }
    return p;
}

}  // namespace advpatch
