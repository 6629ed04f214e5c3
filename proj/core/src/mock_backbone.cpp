#include "illusign/mock_backbone.hpp"

#include "illusign/attention.hpp"
#include "illusign/errors.hpp"
#include "illusign/hashing.hpp"
#include "illusign/rng.hpp"
#include "illusign/scheduler.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace illusign {

namespace {

std::vector<float> random_matrix(GaussianRng& rng, int rows, int cols, double scale) {
    std::vector<float> m(static_cast<std::size_t>(rows) * cols);
    for (auto& v : m) {
        v = static_cast<float>(rng.normal() * scale);
    }
    return m;
}

int layer_count(const MockOptions& o) {
    return o.decoder_layers + (o.encoder_layer ? 1 : 0);
}

int encoder_resolution(int latent_size) {
    return std::max(1, (latent_size + 1) / 2);
}

MockWeights make_weights(const MockOptions& o) {
    const int dim = o.heads * o.head_channels;
    const int c = o.latent_channels;
    GaussianRng rng(o.seed);
    MockWeights w;
    w.input = random_matrix(rng, c, dim, 1.0 / std::sqrt(static_cast<double>(c)));
    w.mix = random_matrix(rng, c, c, 0.1 / std::sqrt(static_cast<double>(c)));
    for (int i = 0; i < c; ++i) {
        w.mix[static_cast<std::size_t>(i) * c + i] += 0.8f;
    }
    w.output = random_matrix(rng, dim, c, 0.2 / std::sqrt(static_cast<double>(dim)));
    w.condition = random_matrix(rng, o.embedding_dim, c, 0.2 / std::sqrt(static_cast<double>(o.embedding_dim)));
    const double proj = 1.0 / std::sqrt(static_cast<double>(dim));
    for (int l = 0; l < layer_count(o); ++l) {
        MockWeights::Layer layer;
        layer.wq = random_matrix(rng, dim, dim, proj);
        layer.wk = random_matrix(rng, dim, dim, proj);
        layer.wv = random_matrix(rng, dim, dim, proj);
        layer.wo = random_matrix(rng, dim, dim, proj);
        w.layers.push_back(std::move(layer));
    }
    return w;
}

BackboneInfo make_info(const MockOptions& o) {
    BackboneInfo info;
    info.latent_size = o.latent_size;
    info.image_size = o.latent_size * o.pixel_scale;
    info.latent_channels = o.latent_channels;
    info.heads = o.heads;
    info.head_channels = o.head_channels;
    info.timestep_count = o.timestep_count;
    if (o.encoder_layer) {
        info.layers.push_back({"down.0.attn1", encoder_resolution(o.latent_size), false, true, false});
    }
    for (int i = 0; i < o.decoder_layers; ++i) {
        info.layers.push_back({fmt::format("up.{}.attn1", i), o.latent_size, true, true, false});
    }
    return info;
}

// tokens x dim  ->  heads x res x res x head_channels
FeatureTensor project(const std::vector<double>& x, const std::vector<float>& w, int res, int heads, int hc) {
    const int dim = heads * hc;
    const std::size_t tokens = static_cast<std::size_t>(res) * res;
    FeatureTensor out = FeatureTensor::zeros(heads, res, res, hc);
    for (std::size_t n = 0; n < tokens; ++n) {
        for (int j = 0; j < dim; ++j) {
            double acc = 0.0;
            for (int i = 0; i < dim; ++i) {
                acc += x[n * dim + i] * w[static_cast<std::size_t>(i) * dim + j];
            }
            const int h = j / hc;
            out.data[(static_cast<std::size_t>(h) * tokens + n) * hc + (j % hc)] = static_cast<float>(acc);
        }
    }
    return out;
}

void validate_options(const MockOptions& o) {
    if (o.heads < 1 || o.latent_size < 1 || o.head_channels < 1 || o.latent_channels < 1 || o.pixel_scale < 1 ||
        o.timestep_count < 1 || o.decoder_layers < 0 || o.embedding_dim < 1) {
        throw ConfigError("mock backbone dimensions must all be >= 1");
    }
}

} // namespace

MockBackbone::MockBackbone(MockOptions options, BackboneOptions backbone_options)
    : Denoiser(backbone_options),
      m_options((validate_options(options), options)),
      m_weights(make_weights(m_options)),
      m_model_dim(options.heads * options.head_channels) {
    set_info(make_info(m_options));
}

Latent MockBackbone::do_encode(const Image& image) const {
    const int size = m_options.latent_size;
    const int s = m_options.pixel_scale;
    Latent latent = Latent::zeros(m_options.latent_channels, size, size);
    const double norm = 1.0 / (255.0 * s * s);
    for (int c = 0; c < m_options.latent_channels; ++c) {
        const int source = c % 3;
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                double sum = 0.0;
                for (int dy = 0; dy < s; ++dy) {
                    for (int dx = 0; dx < s; ++dx) {
                        sum += image.rgb[(static_cast<std::size_t>(y * s + dy) * image.width + (x * s + dx)) * 3 + source];
                    }
                }
                latent.at(c, y, x) = static_cast<float>(sum * norm);
            }
        }
    }
    return latent;
}

Image MockBackbone::do_decode(const Latent& latent) const {
    const int s = m_options.pixel_scale;
    const int size = latent.height * s;
    Image image = Image::filled(size, size, {0, 0, 0});
    for (int py = 0; py < size; ++py) {
        for (int px = 0; px < size; ++px) {
            for (int ch = 0; ch < 3; ++ch) {
                const int c = std::min(ch, latent.channels - 1);
                const double value = std::round(static_cast<double>(latent.at(c, py / s, px / s)) * 255.0);
                image.rgb[(static_cast<std::size_t>(py) * size + px) * 3 + ch] =
                    static_cast<std::uint8_t>(std::clamp(value, 0.0, 255.0));
            }
        }
    }
    return image;
}

std::vector<float> MockBackbone::do_embed(std::string_view text) const {
    std::vector<float> values(static_cast<std::size_t>(m_options.embedding_dim), 0.0f);
    if (text.empty()) {
        return values;
    }
    const std::string digest = sha256_hex(text);
    GaussianRng rng(derive_seed(m_options.seed, std::stoull(digest.substr(0, 15), nullptr, 16)));
    double norm = 0.0;
    for (auto& v : values) {
        v = static_cast<float>(rng.normal());
        norm += static_cast<double>(v) * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : values) {
        v = static_cast<float>(v / norm);
    }
    return values;
}

std::vector<double> MockBackbone::condition_bias(const PromptEmbedding& prompt) const {
    const int c = m_options.latent_channels;
    if (prompt.values.size() != static_cast<std::size_t>(m_options.embedding_dim)) {
        throw ContractError(fmt::format("prompt embedding has {} values, mock expects {}", prompt.values.size(),
                                        m_options.embedding_dim));
    }
    std::vector<double> bias(static_cast<std::size_t>(c), 0.0);
    for (int e = 0; e < m_options.embedding_dim; ++e) {
        for (int ch = 0; ch < c; ++ch) {
            bias[static_cast<std::size_t>(ch)] +=
                static_cast<double>(prompt.values[static_cast<std::size_t>(e)]) *
                m_weights.condition[static_cast<std::size_t>(e) * c + ch];
        }
    }
    return bias;
}

Latent MockBackbone::shared_noise(const Latent& z_t, int t, int steps, const HookDispatcher* hooks) const {
    const auto& meta = info();
    const int size = m_options.latent_size;
    const int c = m_options.latent_channels;
    const int dim = m_model_dim;
    const std::size_t tokens = static_cast<std::size_t>(size) * size;

    const int train_t = NoiseSchedule(steps, meta.train_timesteps).train_timestep(t);
    std::vector<double> temb(static_cast<std::size_t>(dim));
    for (int j = 0; j < dim; ++j) {
        const double freq = std::pow(10000.0, -static_cast<double>(j / 2) * 2.0 / dim);
        temb[static_cast<std::size_t>(j)] = 0.1 * ((j % 2 == 0) ? std::sin(train_t * freq) : std::cos(train_t * freq));
    }

    std::vector<double> h(tokens * dim);
    for (std::size_t n = 0; n < tokens; ++n) {
        for (int j = 0; j < dim; ++j) {
            double acc = temb[static_cast<std::size_t>(j)];
            for (int ch = 0; ch < c; ++ch) {
                acc += static_cast<double>(z_t.data[static_cast<std::size_t>(ch) * tokens + n]) *
                       m_weights.input[static_cast<std::size_t>(ch) * dim + j];
            }
            h[n * dim + j] = acc;
        }
    }

    for (std::size_t l = 0; l < meta.layers.size(); ++l) {
        const LayerInfo& layer = meta.layers[l];
        const MockWeights::Layer& w = m_weights.layers[l];
        const int res = layer.resolution;
        const std::size_t res_tokens = static_cast<std::size_t>(res) * res;

        // Pool token features down to the layer resolution.
        std::vector<int> cell(tokens);
        std::vector<double> x(res_tokens * dim, 0.0);
        std::vector<int> counts(res_tokens, 0);
        for (int y = 0; y < size; ++y) {
            for (int xx = 0; xx < size; ++xx) {
                const std::size_t n = static_cast<std::size_t>(y) * size + xx;
                const int m = (y * res / size) * res + (xx * res / size);
                cell[n] = m;
                ++counts[static_cast<std::size_t>(m)];
                for (int j = 0; j < dim; ++j) {
                    x[static_cast<std::size_t>(m) * dim + j] += h[n * dim + j];
                }
            }
        }
        for (std::size_t m = 0; m < res_tokens; ++m) {
            for (int j = 0; j < dim; ++j) {
                x[m * dim + j] /= counts[m];
            }
        }

        AttentionTensor tensor;
        tensor.q = project(x, w.wq, res, m_options.heads, m_options.head_channels);
        tensor.k = project(x, w.wk, res, m_options.heads, m_options.head_channels);
        tensor.v = project(x, w.wv, res, m_options.heads, m_options.head_channels);
        tensor.layer_id = layer.id;
        tensor.timestep = t;
        if (hooks != nullptr && hooks->wants(layer)) {
            hooks->dispatch(layer, tensor);
        }
        const FeatureTensor attended = tensor.out ? *tensor.out : softmax_attention(tensor.q, tensor.k, tensor.v);

        // Back to token-major rows, output projection, residual add.
        std::vector<double> o(res_tokens * dim);
        for (int hd = 0; hd < m_options.heads; ++hd) {
            for (std::size_t m = 0; m < res_tokens; ++m) {
                for (int k = 0; k < m_options.head_channels; ++k) {
                    o[m * dim + hd * m_options.head_channels + k] =
                        attended.data[(static_cast<std::size_t>(hd) * res_tokens + m) * m_options.head_channels + k];
                }
            }
        }
        std::vector<double> proj(res_tokens * dim, 0.0);
        for (std::size_t m = 0; m < res_tokens; ++m) {
            for (int j = 0; j < dim; ++j) {
                double acc = 0.0;
                for (int i = 0; i < dim; ++i) {
                    acc += o[m * dim + i] * w.wo[static_cast<std::size_t>(i) * dim + j];
                }
                proj[m * dim + j] = acc;
            }
        }
        for (std::size_t n = 0; n < tokens; ++n) {
            const std::size_t m = static_cast<std::size_t>(cell[n]);
            for (int j = 0; j < dim; ++j) {
                h[n * dim + j] += m_options.attention_gain * proj[m * dim + j];
            }
        }
    }

    Latent eps = Latent::zeros(c, size, size);
    for (std::size_t n = 0; n < tokens; ++n) {
        for (int ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (int i = 0; i < c; ++i) {
                acc += static_cast<double>(z_t.data[static_cast<std::size_t>(i) * tokens + n]) *
                       m_weights.mix[static_cast<std::size_t>(i) * c + ch];
            }
            for (int j = 0; j < dim; ++j) {
                acc += h[n * dim + j] * m_weights.output[static_cast<std::size_t>(j) * c + ch];
            }
            eps.data[static_cast<std::size_t>(ch) * tokens + n] = static_cast<float>(acc);
        }
    }
    return eps;
}

Latent MockBackbone::branch_noise(const Latent& z_t, int t, int steps, const PromptEmbedding& prompt) const {
    Latent eps = shared_noise(z_t, t, steps, nullptr);
    const auto bias = condition_bias(prompt);
    const std::size_t plane = eps.plane();
    for (int ch = 0; ch < eps.channels; ++ch) {
        for (std::size_t n = 0; n < plane; ++n) {
            auto& v = eps.data[static_cast<std::size_t>(ch) * plane + n];
            v = static_cast<float>(static_cast<double>(v) + bias[static_cast<std::size_t>(ch)]);
        }
    }
    return eps;
}

Latent MockBackbone::do_predict_noise(const Latent& z_t, int t, int steps, const PromptEmbedding& prompt,
                                      const PromptEmbedding& unconditional, double guidance_scale,
                                      const HookDispatcher& hooks) {
    Latent eps = shared_noise(z_t, t, steps, &hooks);
    const auto cond = condition_bias(prompt);
    const auto uncond = condition_bias(unconditional);
    const std::size_t plane = eps.plane();
    for (int ch = 0; ch < eps.channels; ++ch) {
        const auto idx = static_cast<std::size_t>(ch);
        const double guided = uncond[idx] + guidance_scale * (cond[idx] - uncond[idx]);
        for (std::size_t n = 0; n < plane; ++n) {
            auto& v = eps.data[idx * plane + n];
            v = static_cast<float>(static_cast<double>(v) + guided);
        }
    }
    return eps;
}

std::unique_ptr<MockBackbone> build_mock(std::uint64_t seed, int heads, int latent_size, int head_channels) {
    MockOptions options;
    options.seed = seed;
    options.heads = heads;
    options.latent_size = latent_size;
    options.head_channels = head_channels;
    return std::make_unique<MockBackbone>(options);
}

} // namespace illusign
