#include "illusign/scheduler.hpp"

#include "illusign/errors.hpp"

#include <cmath>

#include <fmt/format.h>

namespace illusign {

NoiseSchedule::NoiseSchedule(int steps, int train_steps, double beta_start, double beta_end)
    : m_steps(steps), m_train_steps(train_steps) {
    if (steps < 1 || train_steps < 2 || steps > train_steps) {
        throw ConfigError(fmt::format("invalid schedule: {} steps over {} training steps", steps, train_steps));
    }
    m_alphas_cumprod.resize(static_cast<std::size_t>(train_steps));
    const double lo = std::sqrt(beta_start);
    const double hi = std::sqrt(beta_end);
    double cumprod = 1.0;
    for (int i = 0; i < train_steps; ++i) {
        const double root = lo + (hi - lo) * static_cast<double>(i) / (train_steps - 1);
        cumprod *= 1.0 - root * root;
        m_alphas_cumprod[static_cast<std::size_t>(i)] = cumprod;
    }
}

int NoiseSchedule::train_timestep(int t) const {
    if (t < 1 || t > m_steps) {
        throw ContractError(fmt::format("timestep {} outside [1, {}]", t, m_steps));
    }
    const int ratio = m_train_steps / m_steps;
    return (t - 1) * ratio + 1;
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t == 0) {
        return m_alphas_cumprod.front();
    }
    return m_alphas_cumprod[static_cast<std::size_t>(train_timestep(t))];
}

double NoiseSchedule::variance(int t) const {
    const double ab_t = alpha_bar(t);
    const double ab_prev = alpha_bar(t - 1);
    return (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev);
}

double NoiseSchedule::sigma(int t) const {
    return std::sqrt(variance(t));
}

std::vector<double> step_mean(const NoiseSchedule& schedule, const Latent& z_t, const Latent& eps, int t) {
    if (!z_t.same_shape(eps)) {
        throw ContractError(fmt::format("noise prediction {} does not match latent {}", shape_string(eps),
                                        shape_string(z_t)));
    }
    const double ab_t = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t - 1);
    const double var = schedule.variance(t);
    const double sqrt_ab_t = std::sqrt(ab_t);
    const double sqrt_one_minus = std::sqrt(1.0 - ab_t);
    const double sqrt_ab_prev = std::sqrt(ab_prev);
    const double direction = std::sqrt(std::max(0.0, 1.0 - ab_prev - var));

    std::vector<double> mean(z_t.size());
    for (std::size_t i = 0; i < mean.size(); ++i) {
        const double e = eps.data[i];
        const double x0 = (static_cast<double>(z_t.data[i]) - sqrt_one_minus * e) / sqrt_ab_t;
        mean[i] = sqrt_ab_prev * x0 + direction * e;
    }
    return mean;
}

Latent finish_step(const Latent& like, const std::vector<double>& mean, double sigma, const Latent* noise) {
    Latent out = Latent::zeros(like.channels, like.height, like.width);
    if (noise != nullptr && !noise->same_shape(like)) {
        throw ContractError(fmt::format("noise {} does not match latent {}", shape_string(*noise), shape_string(like)));
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data[i] = noise != nullptr ? apply_noise(mean[i], sigma, noise->data[i]) : static_cast<float>(mean[i]);
    }
    return out;
}

Latent denoise_step(Denoiser& denoiser, const NoiseSchedule& schedule, const Latent& z_t, int t,
                    const PromptEmbedding& prompt, double guidance_scale, std::span<const HookSpec> hooks,
                    const Latent* noise) {
    const Latent eps = denoiser.predict_noise(z_t, t, schedule.steps(), prompt, guidance_scale, hooks);
    return finish_step(z_t, step_mean(schedule, z_t, eps, t), schedule.sigma(t), noise);
}

Latent add_noise(const NoiseSchedule& schedule, const Latent& x0, const Latent& eps, int t) {
    if (!x0.same_shape(eps)) {
        throw ContractError("add_noise shape mismatch");
    }
    const double ab = schedule.alpha_bar(t);
    const double a = std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    Latent out = x0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data[i] = static_cast<float>(a * x0.data[i] + b * eps.data[i]);
    }
    return out;
}

} // namespace illusign
