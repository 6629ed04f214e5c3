#pragma once

#include "illusign/backbone.hpp"
#include "illusign/scheduler.hpp"
#include "illusign/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace illusign {

enum class SourceTag { Img, Edges, Style, Illustration1, Illustration2 };

const char* to_string(SourceTag tag);
SourceTag parse_source_tag(std::string_view text);

/// Per-step latents z[0..T] and injected noises of an edit-friendly inversion.
/// Replaying step t from z[t] with noise_at(t) reproduces z[t-1] bit for bit.
struct LatentTrajectory {
    std::vector<Latent> z;
    /// noise[t - 1] is the standard-normal noise injected by step t.
    std::vector<Latent> noise;
    SourceTag source_tag = SourceTag::Img;
    std::uint64_t seed = 0;
    double guidance_scale = 3.5;
    std::string prompt;

    int steps() const { return static_cast<int>(z.size()) - 1; }
    const Latent& noise_at(int t) const { return noise.at(static_cast<std::size_t>(t - 1)); }
    const Latent& clean() const { return z.front(); }
    const Latent& noisiest() const { return z.back(); }

    std::string checksum() const;
};

struct InversionOptions {
    double guidance_scale = 3.5;
    std::uint64_t seed = 0;
    SourceTag tag = SourceTag::Img;
};

/// Edit-friendly DDPM inversion: noisy latents are drawn independently per step from
/// q(z_t | z_0), then each step's noise is solved so the sampler maps z[t] onto z[t-1].
/// z[0] is the source latent except where float rounding makes a value unreachable by
/// one step: a tiny value reached by cancelling a large mean can miss by one float32 rounding
/// of that mean (see unreachable_elements).
LatentTrajectory invert(Denoiser& denoiser, const Latent& source, int steps, const PromptEmbedding& prompt,
                        const InversionOptions& options = {});

/// Number of source elements not reproduced bit-exactly by the last step.
std::size_t unreachable_elements(const LatentTrajectory& trajectory, const Latent& source);

struct ReplayOptions {
    std::span<const HookSpec> hooks;
    double guidance_scale = 3.5;
    int start_t = -1;  ///< -1 starts at z[T]
    /// Prompt text for the replay; empty uses the trajectory's own prompt.
    std::string prompt;
    /// Called with z_t before step t predicts noise; may modify the latent.
    std::function<void(int t, Latent& z_t)> before_step;
    /// Called with z_{t-1} after step t.
    std::function<void(int t, const Latent& z_prev)> after_step;
};

/// Denoises from z[start_t] with the stored noises and returns the final latent.
Latent replay(Denoiser& denoiser, const LatentTrajectory& trajectory, const ReplayOptions& options);
Latent replay(Denoiser& denoiser, const LatentTrajectory& trajectory, std::span<const HookSpec> hooks,
              double guidance_scale, int start_t);

/// Directory layout: manifest.json plus little-endian float32 arrays z_ttt.bin / n_ttt.bin.
void save_trajectory(const LatentTrajectory& trajectory, const std::filesystem::path& dir);
LatentTrajectory load_trajectory(const std::filesystem::path& dir);

/// Throws ContractError unless both trajectories have equal step counts and latent shapes.
void check_compatible(const LatentTrajectory& a, const LatentTrajectory& b);

} // namespace illusign
