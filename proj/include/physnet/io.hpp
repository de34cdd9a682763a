#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace physnet::io {

std::string read_file(const std::filesystem::path& path);
/// Writes through a temporary file in the same directory, then renames.
void write_file(const std::filesystem::path& path, std::string_view bytes);

std::string encode_le_doubles(std::span<const double> values);
std::vector<double> decode_le_doubles(std::string_view bytes);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

struct GrayImage {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> pixels;
};

/// 8-bit grayscale PNG, no interlacing, fixed compression settings so that
/// identical pixels give identical bytes.
std::string encode_png(const GrayImage& image);
void write_png(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_png(const std::filesystem::path& path);

/// Rounds intensities in [0, 1] to 8 bits.
GrayImage quantize(std::span<const double> intensities, std::size_t rows, std::size_t cols);

}  // namespace physnet::io
