#pragma once

#include "illusign/backbone.hpp"
#include "illusign/image.hpp"
#include "illusign/inversion.hpp"
#include "illusign/mask.hpp"
#include "illusign/tensor.hpp"

#include <map>
#include <span>
#include <string>

namespace illusign {

enum class DownsampleRule { MaxPool, Nearest };

const char* to_string(DownsampleRule rule);
DownsampleRule parse_downsample_rule(std::string_view text);

struct OverlayConfig {
    double quantile = 0.1;
    TimestepWindow window{0, 50};
    DownsampleRule downsample = DownsampleRule::MaxPool;
    int dilation_radius = 1;
    /// Extra hook-free denoising steps after the composed pass.
    int polish_steps = 5;
    double guidance_scale = 3.5;
    std::string prompt = "a woman";

    void validate(int steps) const;
};

/// Per-pixel cosine similarity of q1 and q2 along channels, averaged over heads.
/// A pixel where either vector has zero norm contributes 0 for that head.
SpatialMask query_similarity(const FeatureTensor& q1, const FeatureTensor& q2);

/// Linear-interpolated empirical quantile (the usual "linear" definition) of the values.
double empirical_quantile(std::span<const double> values, double quantile);

/// 1 where the similarity is strictly below its `quantile` quantile.
SpatialMask dissimilarity_mask(const SpatialMask& similarity, double quantile);

/// Reduces a binary mask to height x width cells. MaxPool marks a cell when any covered
/// pixel is set; Nearest samples the pixel under the cell centre.
SpatialMask downsample_mask(const SpatialMask& mask, int height, int width, DownsampleRule rule);

/// Square (Chebyshev) dilation by `radius` cells.
SpatialMask dilate(const SpatialMask& mask, int radius);

/// Union of pixel-resolution hand and arm masks, downsampled to size x size and dilated.
SpatialMask combine_masks(const SpatialMask& hands, const SpatialMask& arms, int size, const OverlayConfig& config,
                          MaskKind kind = MaskKind::CombinedStart);

/// Precedence: dissimilar pixels take q2, then m1 pixels take q1, then m2 pixels take q2.
FeatureTensor compose_queries(const FeatureTensor& q1, const FeatureTensor& q2, const SpatialMask& m_dis,
                              const SpatialMask& m1, const SpatialMask& m2);

bool hands_overlap(const SpatialMask& m1, const SpatialMask& m2);

struct OverlayMasks {
    SpatialMask m1;  ///< combined start mask at latent resolution
    SpatialMask m2;  ///< combined end mask at latent resolution
};

struct PreparedMasks {
    OverlayMasks masks;
    /// Hand-only masks intersect at latent resolution; the overlay should be skipped.
    bool hands_overlap = false;
    /// Cells claimed by both combined masks that were reassigned or cleared.
    std::size_t shared_cells = 0;
};

/// Builds the latent-resolution masks for one start/end pair. Overlap is judged on the hands
/// alone. When the hands are apart, a cell covered by both combined masks stays with the side
/// whose hand covers it and is cleared from the other (or from both when neither hand does).
PreparedMasks prepare_masks(const SpatialMask& hands_1, const SpatialMask& arms_1, const SpatialMask& hands_2,
                            const SpatialMask& arms_2, int size, const OverlayConfig& config);

struct OverlayResult {
    Image image;
    Latent latent;
    std::size_t compositions = 0;
    /// Dissimilarity masks from the last composed step, keyed by layer id.
    std::map<std::string, SpatialMask> last_dissimilarity;
};

/// Fuses the two illustrations. Throws OverlapSkip when the combined hand masks intersect.
OverlayResult run_overlay(Denoiser& denoiser, const LatentTrajectory& traj_1, const LatentTrajectory& traj_2,
                          const OverlayMasks& masks, const OverlayConfig& config);

} // namespace illusign
