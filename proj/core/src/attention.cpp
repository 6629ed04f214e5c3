#include <Eigen/Dense>

#include "illusign/attention.hpp"

#include "illusign/errors.hpp"

#include <cmath>

#include <fmt/format.h>

namespace illusign {

namespace {

using RowMatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMapD = Eigen::Map<RowMatrixD>;
using RowMapF = Eigen::Map<RowMatrixF>;
using ConstRowMapF = Eigen::Map<const RowMatrixF>;

void check_pair(const FeatureTensor& q, const FeatureTensor& k) {
    if (q.heads != k.heads || q.channels != k.channels) {
        throw ContractError(fmt::format("query {} and key {} disagree in heads or channels", shape_string(q),
                                        shape_string(k)));
    }
}

} // namespace

std::vector<double> attention_scores(const FeatureTensor& q, const FeatureTensor& k, int head) {
    check_pair(q, k);
    const auto nq = static_cast<Eigen::Index>(q.tokens());
    const auto nk = static_cast<Eigen::Index>(k.tokens());
    const int d = q.channels;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    const RowMatrixD qh = ConstRowMapF(q.data.data() + q.offset(head, 0, 0), nq, d).cast<double>();
    const RowMatrixD kh = ConstRowMapF(k.data.data() + k.offset(head, 0, 0), nk, d).cast<double>();

    std::vector<double> map(static_cast<std::size_t>(nq * nk));
    RowMapD logits(map.data(), nq, nk);
    logits.noalias() = (qh * kh.transpose()) * scale;
    for (Eigen::Index i = 0; i < nq; ++i) {
        auto row = logits.row(i);
        if (!row.allFinite()) {
            throw ContractError(fmt::format("non-finite attention logit at head {}, query {}", head, i));
        }
        row = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
    }
    return map;
}

void apply_attention(const std::vector<double>& map, const FeatureTensor& v, int head, FeatureTensor& out) {
    const auto nq = static_cast<Eigen::Index>(out.tokens());
    const auto nk = static_cast<Eigen::Index>(v.tokens());
    const int d = v.channels;
    if (map.size() != static_cast<std::size_t>(nq * nk) || out.channels != d) {
        throw ContractError("attention map does not match value/output shapes");
    }
    const RowMatrixD vh = ConstRowMapF(v.data.data() + v.offset(head, 0, 0), nk, d).cast<double>();
    const RowMatrixD result = Eigen::Map<const RowMatrixD>(map.data(), nq, nk) * vh;
    RowMapF(out.data.data() + out.offset(head, 0, 0), nq, d) = result.cast<float>();
}

FeatureTensor softmax_attention(const FeatureTensor& q, const FeatureTensor& k, const FeatureTensor& v) {
    if (!k.same_shape(v)) {
        throw ContractError(fmt::format("key {} and value {} disagree", shape_string(k), shape_string(v)));
    }
    FeatureTensor out = FeatureTensor::zeros(q.heads, q.height, q.width, v.channels);
    for (int h = 0; h < q.heads; ++h) {
        apply_attention(attention_scores(q, k, h), v, h, out);
    }
    return out;
}

} // namespace illusign
