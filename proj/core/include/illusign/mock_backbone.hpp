#pragma once

#include "illusign/backbone.hpp"

#include <cstdint>
#include <memory>
#include <vector>

namespace illusign {

struct MockOptions {
    std::uint64_t seed = 7;
    int heads = 2;
    int latent_size = 8;
    int head_channels = 4;
    int latent_channels = 3;
    /// Image pixels per latent cell along each axis (average-pool encode, nearest decode).
    int pixel_scale = 4;
    int timestep_count = 100;
    int decoder_layers = 2;
    /// Adds one unflagged encoder layer at half resolution.
    bool encoder_layer = true;
    double attention_gain = 0.5;
    int embedding_dim = 8;
};

/// Seeded weights of the miniature denoiser. Matrices are row-major [rows x cols].
struct MockWeights {
    struct Layer {
        std::vector<float> wq;
        std::vector<float> wk;
        std::vector<float> wv;
        std::vector<float> wo;

        friend bool operator==(const Layer&, const Layer&) = default;
    };

    std::vector<float> input;      // latent_channels x model_dim
    std::vector<float> mix;        // latent_channels x latent_channels
    std::vector<float> output;     // model_dim x latent_channels
    std::vector<float> condition;  // embedding_dim x latent_channels
    std::vector<Layer> layers;

    friend bool operator==(const MockWeights&, const MockWeights&) = default;
};

/// Deterministic miniature latent denoiser implementing the full Denoiser contract.
///
/// eps(z) = z * mix + h(z) * output + condition bias, where h runs the token
/// features through the hookable self-attention layers. Self-attention does not
/// see the prompt, so both guidance branches share one attention pass and each
/// hook fires once per layer per step. Immutable after construction.
class MockBackbone final : public Denoiser {
public:
    explicit MockBackbone(MockOptions options = {}, BackboneOptions backbone_options = {});

    const MockOptions& mock_options() const { return m_options; }
    const MockWeights& weights() const { return m_weights; }

    /// Single-branch prediction for one prompt without guidance or hooks.
    Latent branch_noise(const Latent& z_t, int t, int steps, const PromptEmbedding& prompt) const;

protected:
    Latent do_encode(const Image& image) const override;
    Image do_decode(const Latent& latent) const override;
    std::vector<float> do_embed(std::string_view text) const override;
    Latent do_predict_noise(const Latent& z_t, int t, int steps, const PromptEmbedding& prompt,
                            const PromptEmbedding& unconditional, double guidance_scale,
                            const HookDispatcher& hooks) override;

private:
    Latent shared_noise(const Latent& z_t, int t, int steps, const HookDispatcher* hooks) const;
    std::vector<double> condition_bias(const PromptEmbedding& prompt) const;

    MockOptions m_options;
    MockWeights m_weights;
    int m_model_dim;
};

std::unique_ptr<MockBackbone> build_mock(std::uint64_t seed, int heads, int latent_size, int head_channels);

} // namespace illusign
