#pragma once

#include "parasol/common.hpp"

#include <nlohmann/json.hpp>
#include <png.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace parasol::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "raw array files assume a little-endian host");

inline void write_bytes(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ArtifactError("cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ArtifactError("write failed: " + path.string());
}

inline std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("cannot open: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Pretty-printed JSON with a trailing newline; key order is sorted, so output is stable.
inline void write_json(const fs::path& path, const json& j) { write_bytes(path, j.dump(2) + "\n"); }

inline json read_json(const fs::path& path) {
    try {
        return json::parse(read_bytes(path));
    } catch (const json::parse_error& e) {
        throw ArtifactError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

template <typename Scalar>
std::string pack(const std::vector<double>& values) {
    std::string out(values.size() * sizeof(Scalar), '\0');
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto v = static_cast<Scalar>(values[i]);
        std::memcpy(out.data() + i * sizeof(Scalar), &v, sizeof(Scalar));
    }
    return out;
}

template <typename Scalar>
std::vector<double> unpack(const std::string& bytes) {
    if (bytes.size() % sizeof(Scalar) != 0) throw ArtifactError("raw array size is not a multiple of the scalar size");
    std::vector<double> out(bytes.size() / sizeof(Scalar));
    for (std::size_t i = 0; i < out.size(); ++i) {
        Scalar v;
        std::memcpy(&v, bytes.data() + i * sizeof(Scalar), sizeof(Scalar));
        out[i] = static_cast<double>(v);
    }
    return out;
}

/// Sequential reader over a flat array of doubles.
class ArrayCursor {
public:
    explicit ArrayCursor(std::vector<double> data) : data_(std::move(data)) {}

    Matrix take(Eigen::Index rows, Eigen::Index cols) {
        const auto n = static_cast<std::size_t>(rows * cols);
        if (pos_ + n > data_.size()) throw ArtifactError("raw array file is shorter than its manifest declares");
        Matrix m(rows, cols);
        std::memcpy(m.data(), data_.data() + pos_, n * sizeof(double));
        pos_ += n;
        return m;
    }
    bool exhausted() const { return pos_ == data_.size(); }

private:
    std::vector<double> data_;
    std::size_t pos_ = 0;
};

inline std::string base64_encode(std::string_view in) {
    static constexpr char table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((in.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < in.size(); i += 3) {
        const auto v = (std::uint32_t(std::uint8_t(in[i])) << 16) | (std::uint32_t(std::uint8_t(in[i + 1])) << 8) |
                       std::uint32_t(std::uint8_t(in[i + 2]));
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += table[(v >> 6) & 63];
        out += table[v & 63];
    }
    if (i < in.size()) {
        std::uint32_t v = std::uint32_t(std::uint8_t(in[i])) << 16;
        if (i + 1 < in.size()) v |= std::uint32_t(std::uint8_t(in[i + 1])) << 8;
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += (i + 1 < in.size()) ? table[(v >> 6) & 63] : '=';
        out += '=';
    }
    return out;
}

/// Encodes an H x W x C image (C = 1 or 3, values in [0,1], row-major HWC) as an
/// 8-bit PNG, upscaled by nearest neighbour.
inline std::string encode_png(std::span<const double> pixels, int height, int width, int channels, int scale = 16) {
    if (channels != 1 && channels != 3) throw InvalidArgument("encode_png: channels must be 1 or 3");
    if (static_cast<std::size_t>(height * width * channels) != pixels.size())
        throw InvalidArgument("encode_png: pixel count does not match the grid");
    const int out_h = height * scale, out_w = width * scale;
    std::vector<png_byte> raster(static_cast<std::size_t>(out_h) * out_w * channels);
    for (int r = 0; r < out_h; ++r)
        for (int c = 0; c < out_w; ++c)
            for (int ch = 0; ch < channels; ++ch) {
                const double v = std::clamp(pixels[static_cast<std::size_t>(((r / scale) * width + c / scale) * channels + ch)], 0.0, 1.0);
                raster[(static_cast<std::size_t>(r) * out_w + c) * channels + ch] = static_cast<png_byte>(std::lround(v * 255.0));
            }

    std::vector<png_bytep> rows(static_cast<std::size_t>(out_h));
    for (int r = 0; r < out_h; ++r) rows[static_cast<std::size_t>(r)] = raster.data() + static_cast<std::size_t>(r) * out_w * channels;
    std::string out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw Error("encode_png: libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("encode_png: libpng write failed");
    }
    png_set_write_fn(
        png, &out,
        [](png_structp p, png_bytep data, png_size_t length) {
            static_cast<std::string*>(png_get_io_ptr(p))->append(reinterpret_cast<const char*>(data), length);
        },
        nullptr);
    png_set_IHDR(png, info, static_cast<png_uint_32>(out_w), static_cast<png_uint_32>(out_h), 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_rows(png, info, rows.data());
    png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

}  // namespace parasol::io
