#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace illusign {

/// Latent code laid out channel-major: data[(c * height + y) * width + x].
struct Latent {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> data;

    static Latent zeros(int channels, int height, int width);

    std::size_t size() const { return data.size(); }
    std::size_t plane() const { return static_cast<std::size_t>(height) * width; }

    float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }

    bool same_shape(const Latent& other) const {
        return channels == other.channels && height == other.height && width == other.width;
    }

    friend bool operator==(const Latent&, const Latent&) = default;
};

/// Per-head spatial feature block [heads x height x width x channels], row-major.
struct FeatureTensor {
    int heads = 0;
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;

    static FeatureTensor zeros(int heads, int height, int width, int channels);

    std::size_t size() const { return data.size(); }
    std::size_t tokens() const { return static_cast<std::size_t>(height) * width; }

    std::size_t offset(int h, int y, int x) const {
        return ((static_cast<std::size_t>(h) * height + y) * width + x) * channels;
    }
    float& at(int h, int y, int x, int c) { return data[offset(h, y, x) + c]; }
    float at(int h, int y, int x, int c) const { return data[offset(h, y, x) + c]; }

    std::span<const float> vec(int h, int y, int x) const {
        return {data.data() + offset(h, y, x), static_cast<std::size_t>(channels)};
    }

    bool same_shape(const FeatureTensor& other) const {
        return heads == other.heads && height == other.height && width == other.width &&
               channels == other.channels;
    }

    friend bool operator==(const FeatureTensor&, const FeatureTensor&) = default;
};

/// Query/key/value block captured at one attention layer for one denoising step.
/// A hook may fill `out` to supply the attention output directly; otherwise the
/// backbone computes softmax(q k^T / sqrt(d)) v from the (possibly replaced) q, k, v.
struct AttentionTensor {
    FeatureTensor q;
    FeatureTensor k;
    FeatureTensor v;
    std::optional<FeatureTensor> out;
    std::string layer_id;
    int timestep = 0;
};

bool all_finite(std::span<const float> values);

std::string shape_string(const Latent& latent);
std::string shape_string(const FeatureTensor& tensor);

/// Throws ContractError unless q, k, v share one shape and every value is finite.
void validate(const AttentionTensor& tensor);

double max_abs_diff(std::span<const float> a, std::span<const float> b);

} // namespace illusign
