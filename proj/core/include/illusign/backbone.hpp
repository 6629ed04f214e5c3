#pragma once

#include "illusign/image.hpp"
#include "illusign/tensor.hpp"

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace illusign {

/// One attention layer of the denoiser that accepts hooks.
struct LayerInfo {
    std::string id;
    int resolution = 0;
    bool decoder = false;
    bool self_attention = true;
    /// Set by list_hookable_layers: decoder self-attention at the final (latent) resolution.
    bool flagged = false;

    friend bool operator==(const LayerInfo&, const LayerInfo&) = default;
};

/// Static description of a backbone (the "handle" every stage works against).
struct BackboneInfo {
    int image_size = 512;
    int latent_size = 64;
    int latent_channels = 4;
    int heads = 8;
    int head_channels = 40;
    int timestep_count = 100;
    int train_timesteps = 1000;
    std::vector<LayerInfo> layers;
};

/// Throws ConfigError when the description is inconsistent.
void validate(const BackboneInfo& info);

/// Inclusive range of step indices. Step t maps z_t to z_{t-1} and carries index t - 1,
/// so [0, 70] selects the final 71 denoising steps (closest to the clean latent).
struct TimestepWindow {
    int first = 0;
    int last = -1;

    static TimestepWindow none() { return {0, -1}; }
    static TimestepWindow all(int steps) { return {0, steps - 1}; }

    bool empty() const { return last < first; }
    bool contains_step(int t) const { return !empty() && t - 1 >= first && t - 1 <= last; }
    int step_count() const { return empty() ? 0 : last - first + 1; }

    friend bool operator==(const TimestepWindow&, const TimestepWindow&) = default;
};

/// Parses "a:b" (inclusive) or "none".
TimestepWindow parse_window(std::string_view text);
std::string format_window(const TimestepWindow& window);

using LayerPredicate = std::function<bool(const LayerInfo&)>;
using AttentionCallback = std::function<AttentionTensor(AttentionTensor)>;

struct HookSpec {
    LayerPredicate layer_predicate;
    TimestepWindow window;
    AttentionCallback callback;
};

LayerPredicate flagged_layers();
LayerPredicate layers_with_ids(std::vector<std::string> ids);
LayerPredicate no_layers();

struct PromptEmbedding {
    std::string text;
    std::vector<float> values;
};

/// Invokes the hooks that apply to one layer at one step. Handed to backbone
/// implementations so every backbone validates and reports hook failures the same way.
class HookDispatcher {
public:
    HookDispatcher(std::span<const HookSpec> hooks, int t);

    bool wants(const LayerInfo& layer) const;
    /// Runs every matching hook in order on `tensor`; wraps failures in HookError.
    void dispatch(const LayerInfo& layer, AttentionTensor& tensor) const;

    int timestep() const { return m_t; }

private:
    std::span<const HookSpec> m_hooks;
    int m_t;
};

struct BackboneOptions {
    /// Resize inputs that are not image_size x image_size instead of rejecting them.
    bool resize_inputs = false;
};

/// Pretrained latent-diffusion denoiser with attention hooks.
///
/// A Denoiser is confined to one worker at a time. Hook callbacks must not
/// touch shared state.
class Denoiser {
public:
    virtual ~Denoiser() = default;

    /// Throws ConfigError when the backbone has not been initialised.
    const BackboneInfo& info() const;
    bool initialized() const { return m_info.has_value(); }

    /// Ordered layer list with `flagged` set on decoder self-attention at latent resolution.
    std::vector<LayerInfo> list_hookable_layers() const;

    Latent encode(const Image& image) const;
    Image decode(const Latent& latent) const;

    /// Embeddings are computed once per text and cached.
    PromptEmbedding embed_prompt(std::string_view text) const;

    /// Classifier-free guided noise prediction eps_u + scale * (eps_c - eps_u) at step t of
    /// `steps`. Hooks fire once per matching layer.
    Latent predict_noise(const Latent& z_t, int t, int steps, const PromptEmbedding& prompt,
                         double guidance_scale, std::span<const HookSpec> hooks = {});

    /// Number of noise predictions executed so far.
    std::size_t evaluations() const { return m_evaluations.load(); }

    const BackboneOptions& options() const { return m_options; }

protected:
    explicit Denoiser(BackboneOptions options = {}) : m_options(options) {}

    void set_info(BackboneInfo info);

    virtual Latent do_encode(const Image& image) const = 0;
    virtual Image do_decode(const Latent& latent) const = 0;
    virtual std::vector<float> do_embed(std::string_view text) const = 0;
    virtual Latent do_predict_noise(const Latent& z_t, int t, int steps, const PromptEmbedding& prompt,
                                    const PromptEmbedding& unconditional, double guidance_scale,
                                    const HookDispatcher& hooks) = 0;

private:
    BackboneOptions m_options;
    std::optional<BackboneInfo> m_info;
    std::atomic<std::size_t> m_evaluations{0};
    mutable std::mutex m_embed_mutex;
    mutable std::map<std::string, std::vector<float>, std::less<>> m_embed_cache;
};

/// Attention block captured at each selected layer, keyed by layer id.
using AttentionCapture = std::map<std::string, AttentionTensor>;

/// Runs one noise prediction on `z_t` and records q/k/v at the layers matching `predicate`.
AttentionCapture capture_attention(Denoiser& denoiser, const Latent& z_t, int t, int steps,
                                   const PromptEmbedding& prompt, double guidance_scale,
                                   const LayerPredicate& predicate);

} // namespace illusign
