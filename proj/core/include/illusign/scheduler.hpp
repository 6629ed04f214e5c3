#pragma once

#include "illusign/backbone.hpp"
#include "illusign/tensor.hpp"

#include <span>
#include <vector>

namespace illusign {

/// Scaled-linear beta schedule sampled at `steps` evenly spaced training timesteps
/// (leading spacing, offset 1). alpha_bar(0) is the first training alpha, so every
/// step including t = 1 has positive posterior variance.
class NoiseSchedule {
public:
    explicit NoiseSchedule(int steps, int train_steps = 1000, double beta_start = 0.00085,
                           double beta_end = 0.012);

    int steps() const { return m_steps; }
    int train_steps() const { return m_train_steps; }

    /// Training timestep the network is conditioned on at step t in [1, steps].
    int train_timestep(int t) const;

    double alpha_bar(int t) const;
    /// Variance of the stochastic term of step t -> t - 1 (DDPM posterior, eta = 1).
    double variance(int t) const;
    double sigma(int t) const;

private:
    int m_steps;
    int m_train_steps;
    std::vector<double> m_alphas_cumprod;
};

/// Deterministic part of step t: sqrt(ab_prev) * x0_pred + sqrt(1 - ab_prev - var) * eps.
std::vector<double> step_mean(const NoiseSchedule& schedule, const Latent& z_t, const Latent& eps, int t);

/// The single formula every replayed step uses: fl32(mu + sigma * n).
inline float apply_noise(double mu, double sigma, float n) {
    return static_cast<float>(mu + sigma * static_cast<double>(n));
}

/// z_{t-1} from the mean and an injected standard-normal noise (none => mean only).
Latent finish_step(const Latent& like, const std::vector<double>& mean, double sigma, const Latent* noise);

/// One guided denoising step z_t -> z_{t-1} for t in [1, steps].
Latent denoise_step(Denoiser& denoiser, const NoiseSchedule& schedule, const Latent& z_t, int t,
                    const PromptEmbedding& prompt, double guidance_scale,
                    std::span<const HookSpec> hooks = {}, const Latent* noise = nullptr);

/// Forward-noised latent sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.
Latent add_noise(const NoiseSchedule& schedule, const Latent& x0, const Latent& eps, int t);

} // namespace illusign
