#include "illusign/backbone.hpp"

#include "illusign/errors.hpp"

#include <algorithm>
#include <charconv>

#include <fmt/format.h>

namespace illusign {

void validate(const BackboneInfo& info) {
    if (info.image_size < 1 || info.latent_size < 1 || info.latent_channels < 1 || info.heads < 1 ||
        info.head_channels < 1 || info.timestep_count < 1) {
        throw ConfigError("backbone dimensions must all be >= 1");
    }
    if (info.image_size % info.latent_size != 0) {
        throw ConfigError(fmt::format("latent size {} does not divide image size {}", info.latent_size,
                                      info.image_size));
    }
    for (const auto& layer : info.layers) {
        if (layer.resolution < 1 || layer.resolution > info.latent_size) {
            throw ConfigError(fmt::format("layer '{}' reports resolution {} outside [1, {}]", layer.id,
                                          layer.resolution, info.latent_size));
        }
    }
}

namespace {

int parse_int(std::string_view text) {
    int value = 0;
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end) {
        throw ConfigError(fmt::format("'{}' is not an integer", text));
    }
    return value;
}

} // namespace

TimestepWindow parse_window(std::string_view text) {
    if (text == "none" || text.empty()) {
        return TimestepWindow::none();
    }
    const auto colon = text.find(':');
    if (colon == std::string_view::npos) {
        throw ConfigError(fmt::format("window '{}' must look like first:last", text));
    }
    TimestepWindow window{parse_int(text.substr(0, colon)), parse_int(text.substr(colon + 1))};
    if (window.first < 0) {
        throw ConfigError("window start must be >= 0");
    }
    return window;
}

std::string format_window(const TimestepWindow& window) {
    return window.empty() ? "none" : fmt::format("{}:{}", window.first, window.last);
}

LayerPredicate flagged_layers() {
    return [](const LayerInfo& layer) { return layer.flagged; };
}

LayerPredicate layers_with_ids(std::vector<std::string> ids) {
    return [ids = std::move(ids)](const LayerInfo& layer) {
        return std::find(ids.begin(), ids.end(), layer.id) != ids.end();
    };
}

LayerPredicate no_layers() {
    return [](const LayerInfo&) { return false; };
}

HookDispatcher::HookDispatcher(std::span<const HookSpec> hooks, int t) : m_hooks(hooks), m_t(t) {}

bool HookDispatcher::wants(const LayerInfo& layer) const {
    return std::any_of(m_hooks.begin(), m_hooks.end(), [&](const HookSpec& hook) {
        return hook.window.contains_step(m_t) && hook.layer_predicate && hook.layer_predicate(layer);
    });
}

void HookDispatcher::dispatch(const LayerInfo& layer, AttentionTensor& tensor) const {
    for (const auto& hook : m_hooks) {
        if (!hook.window.contains_step(m_t) || !hook.layer_predicate || !hook.layer_predicate(layer)) {
            continue;
        }
        if (!hook.callback) {
            throw HookError(layer.id, m_t, "hook has no callback");
        }
        const FeatureTensor reference = tensor.q;
        try {
            tensor = hook.callback(std::move(tensor));
        } catch (const HookError&) {
            throw;
        } catch (const std::exception& e) {
            throw HookError(layer.id, m_t, e.what());
        }
        try {
            validate(tensor);
        } catch (const ContractError& e) {
            throw HookError(layer.id, m_t, e.what());
        }
        if (!tensor.q.same_shape(reference)) {
            throw HookError(layer.id, m_t,
                            fmt::format("hook changed tensor shape from {} to {}", shape_string(reference),
                                        shape_string(tensor.q)));
        }
        tensor.layer_id = layer.id;
        tensor.timestep = m_t;
    }
}

const BackboneInfo& Denoiser::info() const {
    if (!m_info) {
        throw ConfigError("backbone is not initialised");
    }
    return *m_info;
}

void Denoiser::set_info(BackboneInfo info) {
    validate(info);
    for (auto& layer : info.layers) {
        layer.flagged = layer.decoder && layer.self_attention && layer.resolution == info.latent_size;
    }
    m_info = std::move(info);
}

std::vector<LayerInfo> Denoiser::list_hookable_layers() const {
    return info().layers;
}

Latent Denoiser::encode(const Image& image) const {
    const auto& meta = info();
    if (image.width != meta.image_size || image.height != meta.image_size) {
        if (!m_options.resize_inputs) {
            throw ContractError(fmt::format("image is {}x{}, backbone expects {}x{}", image.width, image.height,
                                            meta.image_size, meta.image_size));
        }
        return do_encode(resize(image, meta.image_size, meta.image_size));
    }
    return do_encode(image);
}

Image Denoiser::decode(const Latent& latent) const {
    const auto& meta = info();
    if (latent.channels != meta.latent_channels || latent.height != meta.latent_size ||
        latent.width != meta.latent_size) {
        throw ContractError(fmt::format("latent {} does not match backbone [{}x{}x{}]", shape_string(latent),
                                        meta.latent_channels, meta.latent_size, meta.latent_size));
    }
    return do_decode(latent);
}

PromptEmbedding Denoiser::embed_prompt(std::string_view text) const {
    std::lock_guard lock(m_embed_mutex);
    auto it = m_embed_cache.find(text);
    if (it == m_embed_cache.end()) {
        it = m_embed_cache.emplace(std::string(text), do_embed(text)).first;
    }
    return {std::string(text), it->second};
}

Latent Denoiser::predict_noise(const Latent& z_t, int t, int steps, const PromptEmbedding& prompt,
                               double guidance_scale, std::span<const HookSpec> hooks) {
    const auto& meta = info();
    if (z_t.channels != meta.latent_channels || z_t.height != meta.latent_size || z_t.width != meta.latent_size ||
        z_t.size() != static_cast<std::size_t>(z_t.channels) * z_t.plane()) {
        throw ContractError(fmt::format("latent {} does not match backbone [{}x{}x{}]", shape_string(z_t),
                                        meta.latent_channels, meta.latent_size, meta.latent_size));
    }
    if (steps < 1 || t < 1 || t > steps) {
        throw ContractError(fmt::format("timestep {} outside [1, {}]", t, steps));
    }
    const PromptEmbedding unconditional = embed_prompt("");
    ++m_evaluations;
    return do_predict_noise(z_t, t, steps, prompt, unconditional, guidance_scale, HookDispatcher(hooks, t));
}

AttentionCapture capture_attention(Denoiser& denoiser, const Latent& z_t, int t, int steps,
                                   const PromptEmbedding& prompt, double guidance_scale,
                                   const LayerPredicate& predicate) {
    AttentionCapture captured;
    HookSpec hook;
    hook.layer_predicate = predicate;
    hook.window = {t - 1, t - 1};
    hook.callback = [&captured](AttentionTensor tensor) {
        captured[tensor.layer_id] = tensor;
        return tensor;
    };
    denoiser.predict_noise(z_t, t, steps, prompt, guidance_scale, std::span(&hook, 1));
    return captured;
}

} // namespace illusign
