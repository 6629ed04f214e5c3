#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace illusign {

struct Rgb {
    std::uint8_t r = 0;
    std::uint8_t g = 0;
    std::uint8_t b = 0;

    friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// 8-bit interleaved RGB image, row-major.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;

    static Image filled(int width, int height, Rgb color);

    bool empty() const { return width == 0 || height == 0; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

    Rgb pixel(int x, int y) const {
        const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
        return {rgb[i], rgb[i + 1], rgb[i + 2]};
    }
    void set_pixel(int x, int y, Rgb color) {
        const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
        rgb[i] = color.r;
        rgb[i + 1] = color.g;
        rgb[i + 2] = color.b;
    }

    friend bool operator==(const Image&, const Image&) = default;
};

/// 8-bit single channel image.
struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    static GrayImage filled(int width, int height, std::uint8_t value);

    std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }

    friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

Image read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

GrayImage read_gray(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const GrayImage& image);

std::vector<std::uint8_t> encode_png(const Image& image);
std::vector<std::uint8_t> encode_png(const GrayImage& image);
Image decode_image(std::span<const std::uint8_t> bytes);
GrayImage decode_gray(std::span<const std::uint8_t> bytes);

/// Area-averaging resize (nearest when enlarging by an integer factor is not needed).
Image resize(const Image& image, int width, int height);

GrayImage to_gray(const Image& image);
Image to_rgb(const GrayImage& image);

/// SHA-256 over the dimensions and pixel bytes; independent of file encoding.
std::string content_hash(const Image& image);
std::string content_hash(const GrayImage& image);

double psnr(const Image& a, const Image& b);

} // namespace illusign
