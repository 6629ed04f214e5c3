#pragma once

#include "illusign/image.hpp"

#include <filesystem>
#include <string_view>
#include <vector>

namespace illusign {

enum class MaskKind {
    Similarity,
    Dissimilarity,
    HandsStart,
    HandsEnd,
    ArmsStart,
    ArmsEnd,
    CombinedStart,
    CombinedEnd,
    Hands,
    Arms,
};

const char* to_string(MaskKind kind);

/// H x W map. Binary kinds hold only 0 and 1; similarity maps lie in [-1, 1].
struct SpatialMask {
    int height = 0;
    int width = 0;
    std::vector<float> values;
    MaskKind kind = MaskKind::Hands;

    static SpatialMask zeros(int height, int width, MaskKind kind);
    static SpatialMask ones(int height, int width, MaskKind kind);

    float at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
    float& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }

    std::size_t size() const { return values.size(); }
    bool same_shape(const SpatialMask& other) const { return height == other.height && width == other.width; }

    bool is_binary() const;
    std::size_t count_ones() const;
    bool empty() const { return count_ones() == 0; }
};

/// Elementwise maximum of equally sized binary masks.
SpatialMask union_masks(const std::vector<SpatialMask>& masks, MaskKind kind);

/// Pixels >= 128 become ones.
SpatialMask mask_from_gray(const GrayImage& image, MaskKind kind);
GrayImage mask_to_gray(const SpatialMask& mask);

/// Masks are stored as 1-bit PNG.
void write_mask_png(const std::filesystem::path& path, const SpatialMask& mask);
SpatialMask read_mask_png(const std::filesystem::path& path, MaskKind kind);

std::vector<std::uint8_t> encode_mask_png(const SpatialMask& mask);
SpatialMask decode_mask_png(std::span<const std::uint8_t> bytes, MaskKind kind);

} // namespace illusign
