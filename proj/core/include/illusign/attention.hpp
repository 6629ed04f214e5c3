#pragma once

#include "illusign/tensor.hpp"

#include <vector>

namespace illusign {

/// Row-stochastic map softmax(q k^T / sqrt(d)) for one head, row-major [q tokens x k tokens].
/// Throws ContractError on non-finite logits.
std::vector<double> attention_scores(const FeatureTensor& q, const FeatureTensor& k, int head);

/// out[head] = map * v[head].
void apply_attention(const std::vector<double>& map, const FeatureTensor& v, int head, FeatureTensor& out);

/// Plain multi-head scaled dot-product attention, heads independent.
FeatureTensor softmax_attention(const FeatureTensor& q, const FeatureTensor& k, const FeatureTensor& v);

} // namespace illusign
