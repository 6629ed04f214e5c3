#include "illusign/style_transfer.hpp"

#include "illusign/attention.hpp"
#include "illusign/errors.hpp"

#include <cmath>

#include <fmt/format.h>

namespace illusign {

void StyleTransferConfig::validate(int steps) const {
    if (!(gamma >= 0.0) || !(delta >= 0.0)) {
        throw ConfigError(fmt::format("gamma and delta must be non-negative (got {}, {})", gamma, delta));
    }
    if (!(beta_contrast > 0.0)) {
        throw ConfigError(fmt::format("contrast factor must be positive (got {})", beta_contrast));
    }
    if (!std::isfinite(guidance_scale)) {
        throw ConfigError("guidance scale must be finite");
    }
    if (!injection_window.empty() && (injection_window.first < 0 || injection_window.last > steps)) {
        throw ConfigError(fmt::format("injection window {} is outside [0, {}]", format_window(injection_window), steps));
    }
}

FeatureTensor fuse_queries(const FeatureTensor& q_img, const FeatureTensor& q_edges, double gamma, double delta) {
    if (!q_img.same_shape(q_edges)) {
        throw ContractError(fmt::format("cannot fuse queries {} and {}", shape_string(q_img), shape_string(q_edges)));
    }
    FeatureTensor out = q_img;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = static_cast<float>(gamma * q_img.data[i] + delta * q_edges.data[i]);
    }
    return out;
}

void contrast_adjust(std::span<double> map, std::size_t row_length, double beta) {
    if (row_length == 0 || map.size() % row_length != 0) {
        throw ContractError(fmt::format("attention map of {} entries is not made of rows of {}", map.size(), row_length));
    }
    if (!(beta > 0.0)) {
        throw ConfigError("contrast factor must be positive");
    }
    if (beta == 1.0) {
        return;
    }
    std::vector<double> adjusted(row_length);
    for (std::size_t start = 0; start < map.size(); start += row_length) {
        const auto row = map.subspan(start, row_length);
        double mean = 0.0;
        for (double a : row) {
            mean += a;
        }
        mean /= static_cast<double>(row_length);
        double sum = 0.0;
        for (std::size_t j = 0; j < row_length; ++j) {
            adjusted[j] = std::max(0.0, beta * (row[j] - mean) + mean);
            sum += adjusted[j];
        }
        if (sum <= 0.0) {
            continue;
        }
        for (std::size_t j = 0; j < row_length; ++j) {
            row[j] = adjusted[j] / sum;
        }
    }
}

std::vector<double> contrast_adjusted(std::span<const double> map, std::size_t row_length, double beta) {
    std::vector<double> out(map.begin(), map.end());
    contrast_adjust(out, row_length, beta);
    return out;
}

FeatureTensor styled_attention(const FeatureTensor& q_geo, const FeatureTensor& k_style,
                               const FeatureTensor& v_style, double beta) {
    if (!k_style.same_shape(v_style)) {
        throw ContractError(fmt::format("style key {} and value {} disagree", shape_string(k_style),
                                        shape_string(v_style)));
    }
    FeatureTensor out = FeatureTensor::zeros(q_geo.heads, q_geo.height, q_geo.width, v_style.channels);
    for (int h = 0; h < q_geo.heads; ++h) {
        auto map = attention_scores(q_geo, k_style, h);
        contrast_adjust(map, k_style.tokens(), beta);
        apply_attention(map, v_style, h, out);
    }
    return out;
}

std::vector<float> adain(std::span<const float> content, std::span<const float> style, int channels) {
    if (channels < 1 || content.size() % static_cast<std::size_t>(channels) != 0 ||
        style.size() % static_cast<std::size_t>(channels) != 0) {
        throw ContractError(fmt::format("AdaIN inputs of {} and {} values do not split into {} channels",
                                        content.size(), style.size(), channels));
    }
    const std::size_t plane_c = content.size() / static_cast<std::size_t>(channels);
    const std::size_t plane_s = style.size() / static_cast<std::size_t>(channels);
    if (plane_c == 0 || plane_s == 0) {
        throw ContractError("AdaIN needs at least one value per channel");
    }
    auto stats = [](std::span<const float> values) {
        double mean = 0.0;
        for (float v : values) {
            mean += v;
        }
        mean /= static_cast<double>(values.size());
        double var = 0.0;
        for (float v : values) {
            var += (v - mean) * (v - mean);
        }
        return std::pair{mean, std::sqrt(var / static_cast<double>(values.size()))};
    };

    std::vector<float> out(content.size());
    for (int c = 0; c < channels; ++c) {
        const auto cc = content.subspan(static_cast<std::size_t>(c) * plane_c, plane_c);
        const auto sc = style.subspan(static_cast<std::size_t>(c) * plane_s, plane_s);
        const auto [mu_c, sigma_c] = stats(cc);
        const auto [mu_s, sigma_s] = stats(sc);
        float* dst = out.data() + static_cast<std::size_t>(c) * plane_c;
        for (std::size_t i = 0; i < plane_c; ++i) {
            dst[i] = sigma_c > 0.0 ? static_cast<float>((cc[i] - mu_c) / sigma_c * sigma_s + mu_s)
                                   : static_cast<float>(mu_s);
        }
    }
    return out;
}

Latent adain(const Latent& content, const Latent& style) {
    if (content.channels != style.channels) {
        throw ContractError(fmt::format("AdaIN channel mismatch: {} vs {}", shape_string(content), shape_string(style)));
    }
    Latent out = content;
    out.data = adain(content.data, style.data, content.channels);
    return out;
}

StylizeResult stylize_frame(Denoiser& denoiser, const LatentTrajectory& traj_img, const LatentTrajectory& traj_edges,
                            const LatentTrajectory& traj_style, const StyleTransferConfig& config,
                            const StylizeOptions& options) {
    check_compatible(traj_img, traj_edges);
    check_compatible(traj_img, traj_style);
    const int steps = traj_edges.steps();
    config.validate(steps);
    const auto& meta = denoiser.info();
    if (!traj_edges.clean().same_shape(Latent::zeros(meta.latent_channels, meta.latent_size, meta.latent_size))) {
        throw ContractError("trajectories do not match the backbone latent shape");
    }

    const std::string prompt_text = config.prompt.empty() ? traj_edges.prompt : config.prompt;
    const PromptEmbedding prompt = denoiser.embed_prompt(prompt_text);
    const LayerPredicate flagged = flagged_layers();

    AttentionCapture img;
    AttentionCapture edges;
    AttentionCapture style;
    std::size_t injections = 0;

    HookSpec inject;
    inject.layer_predicate = flagged;
    inject.window = config.injection_window;
    inject.callback = [&](AttentionTensor tensor) {
        const auto& qi = img.at(tensor.layer_id).q;
        const auto& qe = edges.at(tensor.layer_id).q;
        const auto& s = style.at(tensor.layer_id);
        tensor.q = fuse_queries(qi, qe, config.gamma, config.delta);
        tensor.k = s.k;
        tensor.v = s.v;
        tensor.out = styled_attention(tensor.q, tensor.k, tensor.v, config.beta_contrast);
        ++injections;
        return tensor;
    };

    ReplayOptions replay_options;
    replay_options.hooks = std::span(&inject, 1);
    replay_options.guidance_scale = config.guidance_scale;
    replay_options.prompt = prompt_text;
    replay_options.before_step = [&](int t, Latent& z_t) {
        if (!config.injection_window.contains_step(t)) {
            return;
        }
        if (config.adain_enabled) {
            z_t = adain(z_t, traj_style.z[static_cast<std::size_t>(t)]);
        }
        const auto index = static_cast<std::size_t>(t);
        img = capture_attention(denoiser, traj_img.z[index], t, steps, prompt, config.guidance_scale, flagged);
        edges = capture_attention(denoiser, traj_edges.z[index], t, steps, prompt, config.guidance_scale, flagged);
        style = capture_attention(denoiser, traj_style.z[index], t, steps, prompt, config.guidance_scale, flagged);
    };

    StylizeResult result;
    result.latent = replay(denoiser, traj_edges, replay_options);
    result.image = denoiser.decode(result.latent);
    result.injections = injections;
    if (options.invert_result) {
        InversionOptions inversion;
        inversion.guidance_scale = config.guidance_scale;
        inversion.seed = options.seed;
        inversion.tag = options.result_tag;
        result.trajectory = invert(denoiser, denoiser.encode(result.image), steps, prompt, inversion);
    }
    return result;
}

} // namespace illusign
