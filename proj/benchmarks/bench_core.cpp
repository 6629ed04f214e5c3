#include "illusign/evaluation.hpp"
#include "illusign/inversion.hpp"
#include "illusign/mock_backbone.hpp"
#include "illusign/overlay.hpp"
#include "illusign/rng.hpp"
#include "illusign/style_transfer.hpp"
#include "illusign/trajectory.hpp"

#include <benchmark/benchmark.h>

#include <cmath>
#include <random>

using namespace illusign;

namespace {

FeatureTensor random_features(int heads, int size, int channels, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<float> n(0.0f, 1.0f);
    auto t = FeatureTensor::zeros(heads, size, size, channels);
    for (auto& v : t.data) {
        v = n(gen);
    }
    return t;
}

// Arguments: latent side length. Heads 8 x 40 channels as in the SD-1.5 decoder.
void BM_StyledAttention(benchmark::State& state) {
    const int size = static_cast<int>(state.range(0));
    const auto q = random_features(8, size, 40, 1);
    const auto k = random_features(8, size, 40, 2);
    const auto v = random_features(8, size, 40, 3);
    for (auto _ : state) {
        benchmark::DoNotOptimize(styled_attention(q, k, v, 1.67));
    }
    state.SetItemsProcessed(state.iterations() * size * size);
}
BENCHMARK(BM_StyledAttention)->Arg(8)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_FuseQueries(benchmark::State& state) {
    const int size = static_cast<int>(state.range(0));
    const auto a = random_features(8, size, 40, 1);
    const auto b = random_features(8, size, 40, 2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(fuse_queries(a, b, 1.0, 0.5));
    }
}
BENCHMARK(BM_FuseQueries)->Arg(32)->Arg(64);

void BM_DissimilarityAndCompose(benchmark::State& state) {
    const int size = static_cast<int>(state.range(0));
    const auto q1 = random_features(8, size, 40, 1);
    const auto q2 = random_features(8, size, 40, 2);
    auto m1 = SpatialMask::zeros(size, size, MaskKind::CombinedStart);
    auto m2 = SpatialMask::zeros(size, size, MaskKind::CombinedEnd);
    m1.at(size / 4, size / 4) = 1;
    m2.at(3 * size / 4, 3 * size / 4) = 1;
    for (auto _ : state) {
        const auto m_dis = dissimilarity_mask(query_similarity(q1, q2), 0.1);
        benchmark::DoNotOptimize(compose_queries(q1, q2, m_dis, m1, m2));
    }
}
BENCHMARK(BM_DissimilarityAndCompose)->Arg(32)->Arg(64);

void BM_Adain(benchmark::State& state) {
    GaussianRng rng(4);
    const Latent content = rng.normal_latent(4, 64, 64);
    const Latent style = rng.normal_latent(4, 64, 64);
    for (auto _ : state) {
        benchmark::DoNotOptimize(adain(content, style));
    }
}
BENCHMARK(BM_Adain);

void BM_FitBspline(benchmark::State& state) {
    std::vector<Point2> pts;
    for (int i = 0; i < state.range(0); ++i) {
        const double t = i / static_cast<double>(state.range(0) - 1);
        pts.push_back({0.2 + 0.6 * t, 0.5 + 0.2 * std::sin(3.0 * t)});
    }
    for (auto _ : state) {
        benchmark::DoNotOptimize(fit_bspline(pts));
    }
}
BENCHMARK(BM_FitBspline)->Arg(6)->Arg(12)->Arg(50);

void BM_MockDenoiseStep(benchmark::State& state) {
    MockOptions options;
    options.latent_size = static_cast<int>(state.range(0));
    MockBackbone mock(options);
    const auto prompt = mock.embed_prompt("a woman");
    GaussianRng rng(5);
    const Latent z = rng.normal_latent(mock.info().latent_channels, options.latent_size, options.latent_size);
    for (auto _ : state) {
        benchmark::DoNotOptimize(mock.predict_noise(z, 50, 100, prompt, 3.5));
    }
}
BENCHMARK(BM_MockDenoiseStep)->Arg(8)->Arg(16)->Arg(32);

void BM_MockInversion(benchmark::State& state) {
    MockBackbone mock;
    const auto prompt = mock.embed_prompt("a woman");
    GaussianRng rng(6);
    const Latent z = rng.normal_latent(mock.info().latent_channels, 8, 8);
    for (auto _ : state) {
        benchmark::DoNotOptimize(invert(mock, z, static_cast<int>(state.range(0)), prompt, {3.5, 1}));
    }
}
BENCHMARK(BM_MockInversion)->Arg(20)->Arg(100)->Unit(benchmark::kMillisecond);

void BM_GramDistance(benchmark::State& state) {
    const int size = static_cast<int>(state.range(0));
    Image a = Image::filled(size, size, {255, 255, 255});
    Image b = Image::filled(size, size, {240, 240, 240});
    for (int i = 0; i < size; ++i) {
        a.set_pixel(i, i, {0, 0, 0});
        b.set_pixel(size - 1 - i, i, {10, 10, 10});
    }
    const RandomConvExtractor extractor;
    for (auto _ : state) {
        benchmark::DoNotOptimize(gram_distance(a, b, extractor));
    }
}
BENCHMARK(BM_GramDistance)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
