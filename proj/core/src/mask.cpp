#include "illusign/mask.hpp"

#include "illusign/errors.hpp"

#include <algorithm>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace illusign {

const char* to_string(MaskKind kind) {
    switch (kind) {
    case MaskKind::Similarity: return "similarity";
    case MaskKind::Dissimilarity: return "dissimilarity";
    case MaskKind::HandsStart: return "hands_start";
    case MaskKind::HandsEnd: return "hands_end";
    case MaskKind::ArmsStart: return "arms_start";
    case MaskKind::ArmsEnd: return "arms_end";
    case MaskKind::CombinedStart: return "combined_start";
    case MaskKind::CombinedEnd: return "combined_end";
    case MaskKind::Hands: return "hands";
    case MaskKind::Arms: return "arms";
    }
    return "unknown";
}

SpatialMask SpatialMask::zeros(int height, int width, MaskKind kind) {
    SpatialMask mask;
    mask.height = height;
    mask.width = width;
    mask.kind = kind;
    mask.values.assign(static_cast<std::size_t>(height) * width, 0.0f);
    return mask;
}

SpatialMask SpatialMask::ones(int height, int width, MaskKind kind) {
    SpatialMask mask = zeros(height, width, kind);
    std::fill(mask.values.begin(), mask.values.end(), 1.0f);
    return mask;
}

bool SpatialMask::is_binary() const {
    return std::all_of(values.begin(), values.end(), [](float v) { return v == 0.0f || v == 1.0f; });
}

std::size_t SpatialMask::count_ones() const {
    return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](float v) { return v > 0.5f; }));
}

SpatialMask union_masks(const std::vector<SpatialMask>& masks, MaskKind kind) {
    if (masks.empty()) {
        throw ContractError("union of zero masks has no shape");
    }
    SpatialMask out = SpatialMask::zeros(masks.front().height, masks.front().width, kind);
    for (const auto& mask : masks) {
        if (!mask.same_shape(out)) {
            throw ContractError("cannot union masks of different sizes");
        }
        for (std::size_t i = 0; i < out.values.size(); ++i) {
            out.values[i] = std::max(out.values[i], mask.values[i] > 0.5f ? 1.0f : 0.0f);
        }
    }
    return out;
}

SpatialMask mask_from_gray(const GrayImage& image, MaskKind kind) {
    SpatialMask mask = SpatialMask::zeros(image.height, image.width, kind);
    for (std::size_t i = 0; i < mask.values.size(); ++i) {
        mask.values[i] = image.pixels[i] >= 128 ? 1.0f : 0.0f;
    }
    return mask;
}

GrayImage mask_to_gray(const SpatialMask& mask) {
    GrayImage image = GrayImage::filled(mask.width, mask.height, 0);
    for (std::size_t i = 0; i < mask.values.size(); ++i) {
        image.pixels[i] = mask.values[i] > 0.5f ? 255 : 0;
    }
    return image;
}

namespace {

const std::vector<int> kBilevel = {cv::IMWRITE_PNG_BILEVEL, 1};

cv::Mat to_mat(const GrayImage& gray) {
    return cv::Mat(gray.height, gray.width, CV_8UC1, const_cast<std::uint8_t*>(gray.pixels.data()));
}

} // namespace

void write_mask_png(const std::filesystem::path& path, const SpatialMask& mask) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    const GrayImage gray = mask_to_gray(mask);
    if (!cv::imwrite(path.string(), to_mat(gray), kBilevel)) {
        throw IoError("cannot write mask " + path.string());
    }
}

SpatialMask read_mask_png(const std::filesystem::path& path, MaskKind kind) {
    return mask_from_gray(read_gray(path), kind);
}

std::vector<std::uint8_t> encode_mask_png(const SpatialMask& mask) {
    const GrayImage gray = mask_to_gray(mask);
    std::vector<std::uint8_t> bytes;
    cv::imencode(".png", to_mat(gray), bytes, kBilevel);
    return bytes;
}

SpatialMask decode_mask_png(std::span<const std::uint8_t> bytes, MaskKind kind) {
    return mask_from_gray(decode_gray(bytes), kind);
}

} // namespace illusign
