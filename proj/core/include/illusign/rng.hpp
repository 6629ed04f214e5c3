#pragma once

#include "illusign/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace illusign {

/// Seeded standard-normal generator. Box-Muller over mt19937_64 so streams are
/// identical across standard library implementations.
class GaussianRng {
public:
    explicit GaussianRng(std::uint64_t seed) : m_engine(seed) {}

    double uniform() {
        // 53 random bits in (0, 1].
        return (static_cast<double>(m_engine() >> 11) + 1.0) * 0x1.0p-53;
    }

    double normal() {
        if (m_has_spare) {
            m_has_spare = false;
            return m_spare;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        m_spare = radius * std::sin(angle);
        m_has_spare = true;
        return radius * std::cos(angle);
    }

    std::uint64_t next_u64() { return m_engine(); }

    Latent normal_latent(int channels, int height, int width) {
        Latent latent = Latent::zeros(channels, height, width);
        for (auto& v : latent.data) {
            v = static_cast<float>(normal());
        }
        return latent;
    }

private:
    std::mt19937_64 m_engine;
    double m_spare = 0.0;
    bool m_has_spare = false;
};

/// Derives an independent stream seed from a base seed and a label.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

} // namespace illusign
