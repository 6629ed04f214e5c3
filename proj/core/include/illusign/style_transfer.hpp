#pragma once

#include "illusign/backbone.hpp"
#include "illusign/image.hpp"
#include "illusign/inversion.hpp"
#include "illusign/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace illusign {

struct StyleTransferConfig {
    double gamma = 1.0;
    double delta = 0.5;
    double beta_contrast = 1.67;
    double guidance_scale = 3.5;
    TimestepWindow injection_window{0, 70};
    bool adain_enabled = true;
    std::string prompt = "a woman";

    /// Throws ConfigError on negative weights, non-positive beta or a window outside [0, steps].
    void validate(int steps) const;
};

/// q_geo = gamma * q_img + delta * q_edges.
FeatureTensor fuse_queries(const FeatureTensor& q_img, const FeatureTensor& q_edges, double gamma, double delta);

/// Sharpens each probability row around its mean: beta * (a - mean) + mean, clipped at zero
/// and renormalised. Rows that clip to all zeros keep their original values.
void contrast_adjust(std::span<double> map, std::size_t row_length, double beta);
std::vector<double> contrast_adjusted(std::span<const double> map, std::size_t row_length, double beta);

/// softmax(q k^T / sqrt(d)) with contrast adjustment, applied to v; heads independent.
/// d is the per-head channel count of q.
FeatureTensor styled_attention(const FeatureTensor& q_geo, const FeatureTensor& k_style,
                               const FeatureTensor& v_style, double beta);

/// Channelwise AdaIN over channel-major planes: (c - mu_c) / sigma_c * sigma_s + mu_s.
/// A constant content channel maps to mu_s.
std::vector<float> adain(std::span<const float> content, std::span<const float> style, int channels);
Latent adain(const Latent& content, const Latent& style);

struct StylizeOptions {
    /// Invert the decoded illustration so it can feed the overlay stage.
    bool invert_result = true;
    std::uint64_t seed = 0;
    SourceTag result_tag = SourceTag::Illustration1;
};

struct StylizeResult {
    Image image;
    Latent latent;
    LatentTrajectory trajectory;
    /// Number of attention blocks replaced during the run.
    std::size_t injections = 0;
};

/// Generates the illustration: replays the edge trajectory from z[T] and, inside the
/// injection window, swaps in style keys/values and fused image/edge queries at the flagged
/// layers, with latent AdaIN toward the style trajectory.
StylizeResult stylize_frame(Denoiser& denoiser, const LatentTrajectory& traj_img, const LatentTrajectory& traj_edges,
                            const LatentTrajectory& traj_style, const StyleTransferConfig& config,
                            const StylizeOptions& options = {});

} // namespace illusign
