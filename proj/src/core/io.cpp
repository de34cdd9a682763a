#include "physnet/io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace physnet::io {

namespace {

std::uint64_t to_little(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        std::uint64_t r = 0;
        for (int k = 0; k < 8; ++k) r |= ((v >> (8 * k)) & 0xffu) << (8 * (7 - k));
        return r;
    }
}

struct PngReadCursor {
    const std::string* bytes;
    std::size_t pos;
};

}  // namespace

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string() + " for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw std::runtime_error("cannot move " + tmp.string() + " to " + path.string());
    }
}

std::string encode_le_doubles(std::span<const double> values) {
    std::string out(values.size() * sizeof(double), '\0');
    for (std::size_t k = 0; k < values.size(); ++k) {
        const std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(values[k]));
        std::memcpy(out.data() + k * sizeof(double), &bits, sizeof(bits));
    }
    return out;
}

std::vector<double> decode_le_doubles(std::string_view bytes) {
    if (bytes.size() % sizeof(double) != 0) throw std::runtime_error("decode_le_doubles: truncated data");
    std::vector<double> out(bytes.size() / sizeof(double));
    for (std::size_t k = 0; k < out.size(); ++k) {
        std::uint64_t bits;
        std::memcpy(&bits, bytes.data() + k * sizeof(double), sizeof(bits));
        out[k] = std::bit_cast<double>(to_little(bits));
    }
    return out;
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("sha256 failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int k = 0; k < len; ++k) {
        out.push_back(hex[digest[k] >> 4]);
        out.push_back(hex[digest[k] & 0xf]);
    }
    return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

GrayImage quantize(std::span<const double> intensities, std::size_t rows, std::size_t cols) {
    if (intensities.size() != rows * cols) throw std::invalid_argument("quantize: size mismatch");
    GrayImage img{rows, cols, std::vector<std::uint8_t>(rows * cols)};
    for (std::size_t k = 0; k < intensities.size(); ++k) {
        const double v = std::clamp(intensities[k], 0.0, 1.0);
        img.pixels[k] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return img;
}

std::string encode_png(const GrayImage& image) {
    if (image.pixels.size() != image.rows * image.cols || image.rows == 0 || image.cols == 0) {
        throw std::invalid_argument("encode_png: bad image dimensions");
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("encode_png: png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    std::string out;
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, info ? &info : nullptr);
        throw std::runtime_error("encode_png: libpng error");
    }
    png_set_write_fn(
        png, &out,
        [](png_structp p, png_bytep data, png_size_t len) {
            static_cast<std::string*>(png_get_io_ptr(p))->append(reinterpret_cast<const char*>(data), len);
        },
        nullptr);
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.cols), static_cast<png_uint_32>(image.rows), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 6);
    png_set_filter(png, PNG_FILTER_TYPE_BASE, PNG_FILTER_NONE);
    png_write_info(png, info);
    for (std::size_t r = 0; r < image.rows; ++r) {
        png_write_row(png, const_cast<png_bytep>(image.pixels.data() + r * image.cols));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

void write_png(const std::filesystem::path& path, const GrayImage& image) { write_file(path, encode_png(image)); }

GrayImage read_png(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
        throw std::runtime_error(path.string() + " is not a PNG file");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("read_png: png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    GrayImage img;
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        throw std::runtime_error("read_png: libpng error in " + path.string());
    }
    PngReadCursor cursor{&bytes, 0};
    png_set_read_fn(png, &cursor, [](png_structp p, png_bytep data, png_size_t len) {
        auto* c = static_cast<PngReadCursor*>(png_get_io_ptr(p));
        if (c->pos + len > c->bytes->size()) png_error(p, "truncated PNG");
        std::memcpy(data, c->bytes->data() + c->pos, len);
        c->pos += len;
    });
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (color != PNG_COLOR_TYPE_GRAY || depth != 8) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error(path.string() + ": expected 8-bit grayscale PNG");
    }
    img.cols = png_get_image_width(png, info);
    img.rows = png_get_image_height(png, info);
    img.pixels.resize(img.rows * img.cols);
    for (std::size_t r = 0; r < img.rows; ++r) png_read_row(png, img.pixels.data() + r * img.cols, nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

}  // namespace physnet::io
