#include "illusign/tensor.hpp"

#include "illusign/errors.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace illusign {

Latent Latent::zeros(int channels, int height, int width) {
    Latent latent;
    latent.channels = channels;
    latent.height = height;
    latent.width = width;
    latent.data.assign(static_cast<std::size_t>(channels) * height * width, 0.0f);
    return latent;
}

FeatureTensor FeatureTensor::zeros(int heads, int height, int width, int channels) {
    FeatureTensor tensor;
    tensor.heads = heads;
    tensor.height = height;
    tensor.width = width;
    tensor.channels = channels;
    tensor.data.assign(static_cast<std::size_t>(heads) * height * width * channels, 0.0f);
    return tensor;
}

bool all_finite(std::span<const float> values) {
    return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

std::string shape_string(const Latent& latent) {
    return fmt::format("[{}x{}x{}]", latent.channels, latent.height, latent.width);
}

std::string shape_string(const FeatureTensor& tensor) {
    return fmt::format("[{}x{}x{}x{}]", tensor.heads, tensor.height, tensor.width, tensor.channels);
}

void validate(const AttentionTensor& tensor) {
    if (!tensor.q.same_shape(tensor.k) || !tensor.q.same_shape(tensor.v)) {
        throw ContractError(fmt::format("attention tensors disagree in shape: q{} k{} v{}",
                                        shape_string(tensor.q), shape_string(tensor.k),
                                        shape_string(tensor.v)));
    }
    if (tensor.q.size() != static_cast<std::size_t>(tensor.q.heads) * tensor.q.tokens() * tensor.q.channels) {
        throw ContractError("attention tensor storage does not match its shape");
    }
    if (!all_finite(tensor.q.data) || !all_finite(tensor.k.data) || !all_finite(tensor.v.data)) {
        throw ContractError("attention tensor contains non-finite values");
    }
    if (tensor.out) {
        if (!tensor.out->same_shape(tensor.v)) {
            throw ContractError(fmt::format("attention output shape {} does not match values {}",
                                            shape_string(*tensor.out), shape_string(tensor.v)));
        }
        if (!all_finite(tensor.out->data)) {
            throw ContractError("attention output contains non-finite values");
        }
    }
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) {
        throw ContractError(fmt::format("size mismatch: {} vs {}", a.size(), b.size()));
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(static_cast<double>(a[i]) - b[i]));
    }
    return worst;
}

} // namespace illusign
