#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dgan {

using Rgb = std::array<std::uint8_t, 3>;

struct RgbImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels; // (y, x, rgb) row-major

    RgbImage() = default;
    RgbImage(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w * 3, 0) {}

    bool empty() const noexcept { return pixels.empty(); }
    std::uint8_t* at(std::size_t x, std::size_t y) { return &pixels[(y * width + x) * 3]; }
    const std::uint8_t* at(std::size_t x, std::size_t y) const { return &pixels[(y * width + x) * 3]; }

    friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

// Label-index raster; index 0 is background.
struct LabelMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> labels;

    LabelMask() = default;
    LabelMask(std::size_t h, std::size_t w, std::uint8_t fill = 0)
        : height(h), width(w), labels(h * w, fill) {}

    std::uint8_t& at(std::size_t x, std::size_t y) { return labels[y * width + x]; }
    std::uint8_t at(std::size_t x, std::size_t y) const { return labels[y * width + x]; }

    friend bool operator==(const LabelMask&, const LabelMask&) = default;
};

struct Keypoint {
    std::string name;
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

// PNG encode/decode. Output bytes depend only on the pixel content.
std::vector<std::uint8_t> encode_png_rgb(const RgbImage& image);
// 8-bit palette PNG carrying a full 256-entry palette: the first entries are
// `palette`, the rest black, so any index value is representable.
std::vector<std::uint8_t> encode_png_indexed(const LabelMask& mask, std::span<const Rgb> palette);

RgbImage decode_png_rgb(std::span<const std::uint8_t> bytes);
// Returns raw palette indices; rejects non-palette PNGs.
LabelMask decode_png_indexed(std::span<const std::uint8_t> bytes);

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
std::string read_text_file(const std::filesystem::path& path);

} // namespace dgan
