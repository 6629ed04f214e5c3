#include "illusign/overlay.hpp"

#include "illusign/errors.hpp"
#include "illusign/scheduler.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace illusign {

const char* to_string(DownsampleRule rule) {
    return rule == DownsampleRule::MaxPool ? "max_pool" : "nearest";
}

DownsampleRule parse_downsample_rule(std::string_view text) {
    if (text == "max_pool") {
        return DownsampleRule::MaxPool;
    }
    if (text == "nearest") {
        return DownsampleRule::Nearest;
    }
    throw ConfigError(fmt::format("unknown mask downsample rule '{}'", text));
}

void OverlayConfig::validate(int steps) const {
    if (!(quantile > 0.0 && quantile < 1.0)) {
        throw ConfigError(fmt::format("overlay quantile must lie in (0, 1), got {}", quantile));
    }
    if (!window.empty() && (window.first < 0 || window.last > steps)) {
        throw ConfigError(fmt::format("overlay window {} is outside [0, {}]", format_window(window), steps));
    }
    if (dilation_radius < 0) {
        throw ConfigError("dilation radius must be non-negative");
    }
    if (polish_steps < 0 || polish_steps > steps) {
        throw ConfigError(fmt::format("polish steps must lie in [0, {}], got {}", steps, polish_steps));
    }
}

SpatialMask query_similarity(const FeatureTensor& q1, const FeatureTensor& q2) {
    if (!q1.same_shape(q2)) {
        throw ContractError(fmt::format("query shapes differ: {} vs {}", shape_string(q1), shape_string(q2)));
    }
    SpatialMask sim = SpatialMask::zeros(q1.height, q1.width, MaskKind::Similarity);
    for (int y = 0; y < q1.height; ++y) {
        for (int x = 0; x < q1.width; ++x) {
            double total = 0.0;
            for (int h = 0; h < q1.heads; ++h) {
                const auto a = q1.vec(h, y, x);
                const auto b = q2.vec(h, y, x);
                double dot = 0.0;
                double na = 0.0;
                double nb = 0.0;
                for (std::size_t c = 0; c < a.size(); ++c) {
                    dot += static_cast<double>(a[c]) * b[c];
                    na += static_cast<double>(a[c]) * a[c];
                    nb += static_cast<double>(b[c]) * b[c];
                }
                if (na > 0.0 && nb > 0.0) {
                    total += std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
                }
            }
            sim.at(y, x) = static_cast<float>(total / q1.heads);
        }
    }
    return sim;
}

double empirical_quantile(std::span<const double> values, double quantile) {
    if (values.empty()) {
        throw ContractError("quantile of an empty set");
    }
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double pos = quantile * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

SpatialMask dissimilarity_mask(const SpatialMask& similarity, double quantile) {
    std::vector<double> values(similarity.values.begin(), similarity.values.end());
    const double threshold = empirical_quantile(values, quantile);
    SpatialMask mask = SpatialMask::zeros(similarity.height, similarity.width, MaskKind::Dissimilarity);
    for (std::size_t i = 0; i < values.size(); ++i) {
        mask.values[i] = values[i] < threshold ? 1.0f : 0.0f;
    }
    return mask;
}

SpatialMask downsample_mask(const SpatialMask& mask, int height, int width, DownsampleRule rule) {
    if (height < 1 || width < 1 || mask.height < height || mask.width < width) {
        throw ContractError(fmt::format("cannot downsample a {}x{} mask to {}x{}", mask.height, mask.width, height, width));
    }
    SpatialMask out = SpatialMask::zeros(height, width, mask.kind);
    for (int y = 0; y < height; ++y) {
        const int y0 = y * mask.height / height;
        const int y1 = ((y + 1) * mask.height + height - 1) / height;
        for (int x = 0; x < width; ++x) {
            const int x0 = x * mask.width / width;
            const int x1 = ((x + 1) * mask.width + width - 1) / width;
            if (rule == DownsampleRule::Nearest) {
                const int sy = std::min(mask.height - 1, static_cast<int>((y + 0.5) * mask.height / height));
                const int sx = std::min(mask.width - 1, static_cast<int>((x + 0.5) * mask.width / width));
                out.at(y, x) = mask.at(sy, sx) > 0.5f ? 1.0f : 0.0f;
                continue;
            }
            bool any = false;
            for (int py = y0; py < y1 && !any; ++py) {
                for (int px = x0; px < x1; ++px) {
                    if (mask.at(py, px) > 0.5f) {
                        any = true;
                        break;
                    }
                }
            }
            out.at(y, x) = any ? 1.0f : 0.0f;
        }
    }
    return out;
}

SpatialMask dilate(const SpatialMask& mask, int radius) {
    if (radius <= 0) {
        return mask;
    }
    SpatialMask out = SpatialMask::zeros(mask.height, mask.width, mask.kind);
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            if (mask.at(y, x) <= 0.5f) {
                continue;
            }
            for (int dy = std::max(0, y - radius); dy <= std::min(mask.height - 1, y + radius); ++dy) {
                for (int dx = std::max(0, x - radius); dx <= std::min(mask.width - 1, x + radius); ++dx) {
                    out.at(dy, dx) = 1.0f;
                }
            }
        }
    }
    return out;
}

SpatialMask combine_masks(const SpatialMask& hands, const SpatialMask& arms, int size, const OverlayConfig& config,
                          MaskKind kind) {
    if (!hands.same_shape(arms)) {
        throw ContractError(fmt::format("hand mask {}x{} and arm mask {}x{} differ", hands.height, hands.width,
                                        arms.height, arms.width));
    }
    SpatialMask merged = union_masks({hands, arms}, kind);
    if (merged.empty()) {
        spdlog::warn("hand and arm masks are both empty; the combined mask is empty");
    }
    SpatialMask pooled = downsample_mask(merged, size, size, config.downsample);
    SpatialMask out = dilate(pooled, config.dilation_radius);
    out.kind = kind;
    return out;
}

FeatureTensor compose_queries(const FeatureTensor& q1, const FeatureTensor& q2, const SpatialMask& m_dis,
                              const SpatialMask& m1, const SpatialMask& m2) {
    if (!q1.same_shape(q2)) {
        throw ContractError(fmt::format("query shapes differ: {} vs {}", shape_string(q1), shape_string(q2)));
    }
    for (const SpatialMask* m : {&m_dis, &m1, &m2}) {
        if (m->height != q1.height || m->width != q1.width) {
            throw ContractError(fmt::format("mask {}x{} does not match query resolution {}x{}", m->height, m->width,
                                            q1.height, q1.width));
        }
    }
    FeatureTensor out = q1;
    for (int h = 0; h < q1.heads; ++h) {
        for (int y = 0; y < q1.height; ++y) {
            for (int x = 0; x < q1.width; ++x) {
                const float md = m_dis.at(y, x);
                const float a = m1.at(y, x);
                const float b = m2.at(y, x);
                const std::size_t base = q1.offset(h, y, x);
                for (int c = 0; c < q1.channels; ++c) {
                    const float v1 = q1.data[base + c];
                    const float v2 = q2.data[base + c];
                    float v = v1 * (1.0f - md) + v2 * md;
                    v = v * (1.0f - a) + v1 * a;
                    v = v * (1.0f - b) + v2 * b;
                    out.data[base + c] = v;
                }
            }
        }
    }
    return out;
}

bool hands_overlap(const SpatialMask& m1, const SpatialMask& m2) {
    if (!m1.same_shape(m2)) {
        throw ContractError("combined masks differ in shape");
    }
    for (std::size_t i = 0; i < m1.size(); ++i) {
        if (m1.values[i] > 0.5f && m2.values[i] > 0.5f) {
            return true;
        }
    }
    return false;
}

PreparedMasks prepare_masks(const SpatialMask& hands_1, const SpatialMask& arms_1, const SpatialMask& hands_2,
                            const SpatialMask& arms_2, int size, const OverlayConfig& config) {
    PreparedMasks out;
    out.masks.m1 = combine_masks(hands_1, arms_1, size, config, MaskKind::CombinedStart);
    out.masks.m2 = combine_masks(hands_2, arms_2, size, config, MaskKind::CombinedEnd);
    const SpatialMask only_1 = combine_masks(hands_1, SpatialMask::zeros(hands_1.height, hands_1.width, MaskKind::Arms),
                                             size, config, MaskKind::CombinedStart);
    const SpatialMask only_2 = combine_masks(hands_2, SpatialMask::zeros(hands_2.height, hands_2.width, MaskKind::Arms),
                                             size, config, MaskKind::CombinedEnd);
    out.hands_overlap = hands_overlap(only_1, only_2);
    if (out.hands_overlap) {
        return out;
    }
    auto& v1 = out.masks.m1.values;
    auto& v2 = out.masks.m2.values;
    for (std::size_t i = 0; i < v1.size(); ++i) {
        if (v1[i] > 0.5f && v2[i] > 0.5f) {
            ++out.shared_cells;
            v1[i] = only_1.values[i] > 0.5f ? 1.0f : 0.0f;
            v2[i] = only_2.values[i] > 0.5f ? 1.0f : 0.0f;
        }
    }
    return out;
}

namespace {

SpatialMask at_resolution(const SpatialMask& mask, int height, int width) {
    if (mask.height == height && mask.width == width) {
        return mask;
    }
    return downsample_mask(mask, height, width, DownsampleRule::MaxPool);
}

} // namespace

OverlayResult run_overlay(Denoiser& denoiser, const LatentTrajectory& traj_1, const LatentTrajectory& traj_2,
                          const OverlayMasks& masks, const OverlayConfig& config) {
    check_compatible(traj_1, traj_2);
    const int steps = traj_1.steps();
    config.validate(steps);
    if (hands_overlap(masks.m1, masks.m2)) {
        throw OverlapSkip("start and end hand masks intersect");
    }

    const std::string prompt_text = config.prompt.empty() ? traj_1.prompt : config.prompt;
    const PromptEmbedding prompt = denoiser.embed_prompt(prompt_text);
    const LayerPredicate flagged = flagged_layers();

    OverlayResult result;
    AttentionCapture first;
    AttentionCapture second;

    HookSpec compose;
    compose.layer_predicate = flagged;
    compose.window = config.window;
    compose.callback = [&](AttentionTensor tensor) {
        const auto& q1 = first.at(tensor.layer_id).q;
        const auto& q2 = second.at(tensor.layer_id).q;
        const SpatialMask m_dis = dissimilarity_mask(query_similarity(q1, q2), config.quantile);
        tensor.q = compose_queries(q1, q2, m_dis, at_resolution(masks.m1, q1.height, q1.width),
                                   at_resolution(masks.m2, q1.height, q1.width));
        result.last_dissimilarity[tensor.layer_id] = m_dis;
        ++result.compositions;
        return tensor;
    };

    ReplayOptions options;
    options.hooks = std::span(&compose, 1);
    options.guidance_scale = config.guidance_scale;
    options.prompt = prompt_text;
    options.before_step = [&](int t, Latent&) {
        if (!config.window.contains_step(t)) {
            return;
        }
        const auto index = static_cast<std::size_t>(t);
        first = capture_attention(denoiser, traj_1.z[index], t, steps, prompt, config.guidance_scale, flagged);
        second = capture_attention(denoiser, traj_2.z[index], t, steps, prompt, config.guidance_scale, flagged);
    };
    Latent z = replay(denoiser, traj_1, options);

    // Polish: re-noise to step p along the start trajectory's offset, then denoise without composition.
    if (config.polish_steps > 0) {
        const int p = config.polish_steps;
        const Latent& zp = traj_1.z[static_cast<std::size_t>(p)];
        const Latent& z0 = traj_1.clean();
        for (std::size_t i = 0; i < z.size(); ++i) {
            z.data[i] = z.data[i] + (zp.data[i] - z0.data[i]);
        }
        const NoiseSchedule schedule(steps, denoiser.info().train_timesteps);
        for (int t = p; t >= 1; --t) {
            z = denoise_step(denoiser, schedule, z, t, prompt, config.guidance_scale, {}, &traj_1.noise_at(t));
        }
    }

    result.latent = std::move(z);
    result.image = denoiser.decode(result.latent);
    return result;
}

} // namespace illusign
