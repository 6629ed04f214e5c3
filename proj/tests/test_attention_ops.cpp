#include "properties/attention_properties.hpp"

#include "illusign/attention.hpp"
#include "illusign/errors.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace illusign;

namespace {

constexpr int kCases = 250;

void expect_ok(const properties::Report& r) {
    EXPECT_GE(r.cases, 200);
    EXPECT_EQ(r.failures, 0) << r.op << ": " << r.first_failure << " (worst error " << r.worst << ")";
}

FeatureTensor filled(int heads, int h, int w, int c, std::initializer_list<float> values) {
    auto t = FeatureTensor::zeros(heads, h, w, c);
    std::copy(values.begin(), values.end(), t.data.begin());
    return t;
}

} // namespace

TEST(AttentionProperties, FuseQueries) { expect_ok(properties::fuse_queries_cases(11, kCases)); }
TEST(AttentionProperties, ContrastAdjust) { expect_ok(properties::contrast_adjust_cases(12, kCases)); }
TEST(AttentionProperties, StyledAttention) { expect_ok(properties::styled_attention_cases(13, kCases)); }
TEST(AttentionProperties, Adain) { expect_ok(properties::adain_cases(14, kCases)); }
TEST(AttentionProperties, QuerySimilarity) { expect_ok(properties::query_similarity_cases(15, kCases)); }
TEST(AttentionProperties, DissimilarityMask) { expect_ok(properties::dissimilarity_mask_cases(16, kCases)); }
TEST(AttentionProperties, ComposeQueries) { expect_ok(properties::compose_queries_cases(17, kCases)); }

TEST(FuseQueries, IdentityWeightsSelectOneInput) {
    const auto a = filled(2, 2, 1, 2, {1, 2, 3, 4, 5, 6, 7, 8});
    const auto b = filled(2, 2, 1, 2, {-1, 0.5f, 9, 0, 2, 2, -3, 1});
    EXPECT_EQ(fuse_queries(a, b, 1.0, 0.0), a);
    EXPECT_EQ(fuse_queries(a, b, 0.0, 1.0), b);
    const auto fused = fuse_queries(a, b, 1.0, 0.5);
    const float expected[] = {0.5f, 2.25f, 7.5f, 4.0f, 6.0f, 7.0f, 5.5f, 8.5f};
    for (std::size_t i = 0; i < 8; ++i) {
        EXPECT_FLOAT_EQ(fused.data[i], expected[i]);
    }
}

TEST(FuseQueries, ScalesWithBothInputs) {
    const auto a = filled(1, 1, 2, 1, {1.5f, -2});
    const auto b = filled(1, 1, 2, 1, {0.25f, 4});
    auto a3 = a;
    auto b3 = b;
    for (auto& v : a3.data) v *= 3;
    for (auto& v : b3.data) v *= 3;
    const auto base = fuse_queries(a, b, 0.7, 1.3);
    const auto scaled = fuse_queries(a3, b3, 0.7, 1.3);
    for (std::size_t i = 0; i < base.size(); ++i) {
        EXPECT_NEAR(scaled.data[i], 3 * base.data[i], 1e-5);
    }
    EXPECT_THROW(fuse_queries(a, filled(1, 2, 1, 1, {1, 2}), 1, 1), ContractError);
}

TEST(ContrastAdjust, WorkedRow) {
    // mean 1/3; 1.67 * (a - 1/3) + 1/3 = {0.9123.., 0.0828.., -0.0841..}; clip, renormalise.
    const double mean = 1.0 / 3.0;
    const double a = 1.67 * (0.7 - mean) + mean;
    const double b = 1.67 * (0.2 - mean) + mean;
    const auto out = contrast_adjusted(std::vector<double>{0.7, 0.2, 0.1}, 3, 1.67);
    EXPECT_NEAR(out[0], a / (a + b), 1e-12);
    EXPECT_NEAR(out[1], b / (a + b), 1e-12);
    EXPECT_EQ(out[2], 0.0);
}

TEST(ContrastAdjust, IdentityCases) {
    const std::vector<double> row{0.5, 0.3, 0.2};
    EXPECT_EQ(contrast_adjusted(row, 3, 1.0), row);
    const std::vector<double> uniform(4, 0.25);
    for (double v : contrast_adjusted(uniform, 4, 1.67)) {
        EXPECT_NEAR(v, 0.25, 1e-15);
    }
    EXPECT_THROW(contrast_adjusted(row, 2, 1.5), ContractError);
}

TEST(StyledAttention, SingleKeyReturnsItsValue) {
    const auto q = filled(1, 2, 2, 2, {1, 0, -3, 2, 0.5f, 0.5f, 9, -9});
    const auto k = filled(1, 1, 1, 2, {0.3f, -0.7f});
    const auto v = filled(1, 1, 1, 2, {4, -5});
    const auto out = styled_attention(q, k, v, 1.67);
    for (int y = 0; y < 2; ++y) {
        for (int x = 0; x < 2; ++x) {
            EXPECT_FLOAT_EQ(out.at(0, y, x, 0), 4.0f);
            EXPECT_FLOAT_EQ(out.at(0, y, x, 1), -5.0f);
        }
    }
}

TEST(StyledAttention, OrthogonalQueryAveragesValues) {
    const auto q = filled(1, 1, 1, 3, {0, 0, 1});
    const auto k = filled(1, 1, 2, 3, {1, 0, 0, 0, 1, 0});
    const auto v = filled(1, 1, 2, 3, {2, 4, 6, 0, 0, 10});
    const auto out = styled_attention(q, k, v, 1.67);
    EXPECT_FLOAT_EQ(out.at(0, 0, 0, 0), 1.0f);
    EXPECT_FLOAT_EQ(out.at(0, 0, 0, 1), 2.0f);
    EXPECT_FLOAT_EQ(out.at(0, 0, 0, 2), 8.0f);
}

TEST(StyledAttention, BetaOneMatchesPlainAttentionBitExactly) {
    std::mt19937_64 gen(5);
    const auto q = oracle::to_feature(oracle::random_tensor(gen, 2, 3, 3, 4));
    const auto k = oracle::to_feature(oracle::random_tensor(gen, 2, 3, 3, 4));
    const auto v = oracle::to_feature(oracle::random_tensor(gen, 2, 3, 3, 4));
    EXPECT_EQ(styled_attention(q, k, v, 1.0), softmax_attention(q, k, v));
}

TEST(StyledAttention, RowsStayStochasticAfterContrast) {
    std::mt19937_64 gen(6);
    const auto q = oracle::to_feature(oracle::random_tensor(gen, 2, 2, 2, 3, 3.0));
    const auto k = oracle::to_feature(oracle::random_tensor(gen, 2, 2, 2, 3, 3.0));
    for (int h = 0; h < 2; ++h) {
        auto map = attention_scores(q, k, h);
        contrast_adjust(map, k.tokens(), 1.67);
        for (std::size_t i = 0; i < q.tokens(); ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < k.tokens(); ++j) {
                EXPECT_GE(map[i * k.tokens() + j], 0.0);
                sum += map[i * k.tokens() + j];
            }
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    }
}

TEST(StyledAttention, NonFiniteLogitsAreRejected) {
    auto q = filled(1, 1, 1, 1, {std::numeric_limits<float>::infinity()});
    const auto k = filled(1, 1, 1, 1, {1});
    EXPECT_THROW(styled_attention(q, k, k, 1.0), ContractError);
}

TEST(Adain, StatisticsMatchStyle) {
    std::mt19937_64 gen(7);
    std::normal_distribution<double> n(0, 1);
    Latent content = Latent::zeros(4, 5, 5);
    Latent style = Latent::zeros(4, 5, 5);
    for (auto& v : content.data) v = static_cast<float>(n(gen) * 2 + 1);
    for (auto& v : style.data) v = static_cast<float>(n(gen) * 0.5 - 3);
    const Latent out = adain(content, style);
    for (int c = 0; c < 4; ++c) {
        auto moments = [&](const Latent& l) {
            double m = 0, s = 0;
            for (std::size_t i = 0; i < l.plane(); ++i) m += l.data[c * l.plane() + i];
            m /= static_cast<double>(l.plane());
            for (std::size_t i = 0; i < l.plane(); ++i) {
                const double d = l.data[c * l.plane() + i] - m;
                s += d * d;
            }
            return std::pair{m, std::sqrt(s / static_cast<double>(l.plane()))};
        };
        const auto [mo, so] = moments(out);
        const auto [ms, ss] = moments(style);
        EXPECT_NEAR(mo, ms, 1e-5);
        EXPECT_NEAR(so, ss, 1e-5);
    }
}

TEST(Adain, IdentityAndConstantChannel) {
    Latent content = Latent::zeros(2, 2, 2);
    content.data = {1, 2, 3, 4, 5, 5, 5, 5};
    const Latent self = adain(content, content);
    for (int i = 0; i < 4; ++i) {
        EXPECT_NEAR(self.data[i], content.data[i], 1e-6);
    }
    Latent style = Latent::zeros(2, 2, 2);
    style.data = {0, 0, 0, 0, -1, 1, -1, 3};
    const Latent out = adain(content, style);
    for (int i = 4; i < 8; ++i) {
        EXPECT_FLOAT_EQ(out.data[i], 0.5f);
    }
    EXPECT_THROW(adain(content, Latent::zeros(3, 2, 2)), ContractError);
}
