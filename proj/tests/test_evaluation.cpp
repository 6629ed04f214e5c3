#include "illusign/errors.hpp"
#include "illusign/evaluation.hpp"
#include "illusign/trajectory.hpp"

#include "support/temp_dir.hpp"

#include <gtest/gtest.h>
#include <fmt/format.h>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <random>

using namespace illusign;

namespace {

Image noise_image(std::uint64_t seed, int w = 32, int h = 32) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> d(0, 255);
    Image img = Image::filled(w, h, {0, 0, 0});
    for (auto& v : img.rgb) {
        v = static_cast<std::uint8_t>(d(rng));
    }
    return img;
}

SpatialMask rect(int h, int w, int x0, int y0, int x1, int y1) {
    SpatialMask m = SpatialMask::zeros(h, w, MaskKind::Hands);
    for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
            m.at(y, x) = 1.0f;
        }
    }
    return m;
}

// Two fixed feature maps selected by the first pixel.
class TableExtractor final : public FeatureExtractor {
public:
    std::vector<FeatureMap> extract(const Image& image) const override {
        if (image.pixel(0, 0).r == 0) {
            return {{2, 1, 2, {1, 2, 3, 4}}};
        }
        return {{2, 1, 2, {0, 1, 1, 0}}};
    }
};

// Plain-loop Gram and Frobenius reference.
double gram_oracle(const FeatureMap& a, const FeatureMap& b) {
    const int c = a.channels;
    const int n = a.height * a.width;
    double sq = 0.0;
    for (int i = 0; i < c; ++i) {
        for (int j = 0; j < c; ++j) {
            double ga = 0.0;
            double gb = 0.0;
            for (int k = 0; k < n; ++k) {
                ga += static_cast<double>(a.data[i * n + k]) * a.data[j * n + k];
                gb += static_cast<double>(b.data[i * n + k]) * b.data[j * n + k];
            }
            const double d = (ga - gb) / (c * n);
            sq += d * d;
        }
    }
    return std::sqrt(sq);
}

class ConstLpips final : public LpipsScorer {
public:
    explicit ConstLpips(double v) : m_v(v) {}
    double distance(const Image&, const Image&) override { return m_v; }

private:
    double m_v;
};

class ConstClip final : public ClipScorer {
public:
    explicit ConstClip(double v) : m_v(v) {}
    double similarity(const Image&, const Image&) override { return m_v; }

private:
    double m_v;
};

Image sketch(int size) {
    Image img = Image::filled(size, size, {255, 255, 255});
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            if ((x + 2 * y) % 23 < 3) {
                img.set_pixel(x, y, {50, 50, 50});
            } else if ((3 * x - y + 400) % 31 < 2) {
                img.set_pixel(x, y, {205, 185, 165});
            } else if (x > size / 2 && y > size / 2 && (x * y) % 7 == 0) {
                img.set_pixel(x, y, {140, 140, 140});
            }
        }
    }
    return img;
}

} // namespace

TEST(Gram, MatchesHandComputedValue) {
    // F = [[1,2],[3,4]] -> G = [[5,11],[11,25]]/4; F' = I-swap -> G' = I/4.
    TableExtractor ex;
    const Image a = Image::filled(4, 4, {0, 0, 0});
    const Image b = Image::filled(4, 4, {9, 0, 0});
    const auto g = gram_matrix(ex.extract(a)[0]);
    ASSERT_EQ(g.size(), 4u);
    EXPECT_DOUBLE_EQ(g[0], 1.25);
    EXPECT_DOUBLE_EQ(g[1], 2.75);
    EXPECT_DOUBLE_EQ(g[2], 2.75);
    EXPECT_DOUBLE_EQ(g[3], 6.25);
    EXPECT_DOUBLE_EQ(gram_distance(a, b, ex), std::sqrt(834.0) / 4.0);
    EXPECT_DOUBLE_EQ(gram_distance(a, b, ex), gram_oracle(ex.extract(a)[0], ex.extract(b)[0]));
}

TEST(Gram, RandomMapsMatchLoopOracle) {
    std::mt19937_64 rng(5);
    std::normal_distribution<float> n;
    std::uniform_int_distribution<int> dim(1, 6);
    for (int trial = 0; trial < 200; ++trial) {
        const int c = dim(rng);
        const int h = dim(rng);
        const int w = dim(rng);
        FeatureMap a{c, h, w, std::vector<float>(static_cast<std::size_t>(c * h * w))};
        FeatureMap b = a;
        for (auto& v : a.data) {
            v = n(rng);
        }
        for (auto& v : b.data) {
            v = n(rng);
        }
        EXPECT_NEAR(gram_distance(std::vector{a}, std::vector{b}), gram_oracle(a, b), 1e-9);
    }
}

TEST(Gram, IdentityAndSymmetryWithDefaultExtractor) {
    const RandomConvExtractor ex;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const Image a = noise_image(s);
        const Image b = noise_image(s + 100);
        EXPECT_EQ(gram_distance(a, a, ex), 0.0);
        const double ab = gram_distance(a, b, ex);
        EXPECT_GT(ab, 0.0);
        EXPECT_DOUBLE_EQ(ab, gram_distance(b, a, ex));
    }
}

TEST(Gram, ExtractorIsSeedDeterministic) {
    const Image img = noise_image(3, 40, 24);
    const auto a = RandomConvExtractor(9).extract(img);
    const auto b = RandomConvExtractor(9).extract(img);
    const auto c = RandomConvExtractor(10).extract(img);
    ASSERT_EQ(a.size(), 3u);
    EXPECT_EQ(a[0].channels, 16);
    EXPECT_EQ(a[0].height, 24);
    EXPECT_EQ(a[0].width, 40);
    EXPECT_EQ(a[1].height, 12);
    EXPECT_EQ(a[2].width, 10);
    EXPECT_EQ(a[2].data, b[2].data);
    EXPECT_NE(a[2].data, c[2].data);
    EXPECT_THROW(RandomConvExtractor(1, {}), ConfigError);
}

TEST(Gram, MismatchedExtractorOutputIsRejected) {
    FeatureMap a{2, 1, 1, {1, 2}};
    FeatureMap b{3, 1, 1, {1, 2, 3}};
    EXPECT_THROW(gram_distance(std::vector<FeatureMap>{}, std::vector<FeatureMap>{}), AdapterError);
    EXPECT_THROW(gram_distance(std::vector{a}, std::vector{b}), ContractError);
    EXPECT_THROW(gram_matrix({2, 2, 2, {1, 2}}), ContractError);
}

TEST(Miou, IdentityDisjointAndHalfOverlap) {
    const auto a = rect(16, 16, 2, 2, 8, 8);
    EXPECT_EQ(iou(a, a), 1.0);
    EXPECT_EQ(iou(a, rect(16, 16, 9, 9, 14, 14)), 0.0);
    // Two 4x4 squares shifted by half a side: 8 / (16 + 16 - 8).
    EXPECT_DOUBLE_EQ(*iou(rect(16, 16, 0, 0, 4, 4), rect(16, 16, 2, 0, 6, 4)), 1.0 / 3.0);
    EXPECT_FALSE(iou(SpatialMask::zeros(4, 4, MaskKind::Hands), SpatialMask::zeros(4, 4, MaskKind::Hands)));
    EXPECT_THROW(iou(a, rect(8, 8, 0, 0, 1, 1)), ContractError);
}

TEST(Miou, OverallAveragesPresentHands) {
    const auto left = rect(16, 16, 0, 0, 4, 4);
    const auto r = miou(left, rect(16, 16, 8, 8, 12, 12), rect(16, 16, 2, 0, 6, 4), rect(16, 16, 8, 8, 12, 12));
    EXPECT_DOUBLE_EQ(*r.left, 1.0 / 3.0);
    EXPECT_EQ(*r.right, 1.0);
    EXPECT_DOUBLE_EQ(*r.overall, 2.0 / 3.0);
    EXPECT_TRUE(r.notes.empty());

    const auto empty = SpatialMask::zeros(16, 16, MaskKind::Hands);
    const auto one = miou(left, empty, left, empty);
    EXPECT_EQ(*one.left, 1.0);
    EXPECT_FALSE(one.right);
    EXPECT_EQ(*one.overall, 1.0);
    ASSERT_EQ(one.notes.size(), 1u);
    EXPECT_NE(one.notes[0].find("right"), std::string::npos);

    const auto none = miou(empty, empty, empty, empty);
    EXPECT_FALSE(none.overall);
    EXPECT_EQ(none.notes.size(), 2u);
}

TEST(Miou, InvariantToSharedCropsKeepingForeground) {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<int> coin(0, 1);
    std::uniform_int_distribution<int> margin(0, 6);
    for (int trial = 0; trial < 200; ++trial) {
        // Foreground confined to the central 12x12 of a 24x24 canvas.
        SpatialMask p = SpatialMask::zeros(24, 24, MaskKind::Hands);
        SpatialMask g = p;
        for (int y = 6; y < 18; ++y) {
            for (int x = 6; x < 18; ++x) {
                p.at(y, x) = static_cast<float>(coin(rng));
                g.at(y, x) = static_cast<float>(coin(rng));
            }
        }
        const int x0 = margin(rng);
        const int y0 = margin(rng);
        const int x1 = 24 - margin(rng);
        const int y1 = 24 - margin(rng);
        auto crop = [&](const SpatialMask& m) {
            SpatialMask c = SpatialMask::zeros(y1 - y0, x1 - x0, MaskKind::Hands);
            for (int y = y0; y < y1; ++y) {
                for (int x = x0; x < x1; ++x) {
                    c.at(y - y0, x - x0) = m.at(y, x);
                }
            }
            return c;
        };
        EXPECT_EQ(iou(p, g), iou(crop(p), crop(g)));
    }
}

TEST(RemoveArrows, GrayscaleIsUnchanged) {
    Image img = Image::filled(64, 64, {0, 0, 0});
    for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 64; ++x) {
            const auto v = static_cast<std::uint8_t>((x * 4 + y) % 256);
            img.set_pixel(x, y, {v, v, v});
        }
    }
    EXPECT_EQ(remove_arrows(img), img);
}

TEST(RemoveArrows, PureOrangeBecomesWhite) {
    EXPECT_EQ(remove_arrows(Image::filled(8, 8, {255, 140, 0})), Image::filled(8, 8, {255, 255, 255}));
}

TEST(RemoveArrows, HueBandBoundaries) {
    EXPECT_TRUE(is_arrow_orange({255, 140, 0}));
    EXPECT_TRUE(is_arrow_orange({255, 64, 0}));    // 15 degrees
    EXPECT_TRUE(is_arrow_orange({255, 191, 0}));   // 45 degrees
    EXPECT_FALSE(is_arrow_orange({255, 60, 0}));   // 14.1 degrees
    EXPECT_FALSE(is_arrow_orange({255, 196, 0}));  // 46.1 degrees
    EXPECT_TRUE(is_arrow_orange({255, 200, 150}));  // saturation 0.41
    EXPECT_FALSE(is_arrow_orange({255, 210, 160})); // saturation 0.37
    EXPECT_FALSE(is_arrow_orange({60, 40, 0}));     // value 0.235
    EXPECT_FALSE(is_arrow_orange({200, 180, 160})); // saturation 0.2
}

TEST(RemoveArrows, ClearsRenderedArrowAndSparesSketch) {
    const int size = 256;
    const Image base = sketch(size);
    const std::vector<Point2> curve{{0.1, 0.8}, {0.3, 0.5}, {0.55, 0.35}, {0.85, 0.3}};
    ArrowStyle style;
    style.stroke_width = 6.0;
    const auto doc = render_arrow(curve, style, size, size);
    const auto coverage = arrow_coverage(doc);
    const Image cleaned = remove_arrows(composite(base, doc));

    std::size_t arrow = 0;
    std::size_t whitened = 0;
    std::size_t sketch_px = 0;
    std::size_t affected = 0;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const float c = coverage[static_cast<std::size_t>(y) * size + x];
            const Rgb out = cleaned.pixel(x, y);
            if (c >= 0.5f) {
                ++arrow;
                whitened += out == Rgb{255, 255, 255} ? 1 : 0;
            } else if (c == 0.0f && base.pixel(x, y) != Rgb{255, 255, 255}) {
                ++sketch_px;
                affected += out != base.pixel(x, y) ? 1 : 0;
            }
        }
    }
    ASSERT_GT(arrow, 500u);
    ASSERT_GT(sketch_px, 5000u);
    EXPECT_GE(static_cast<double>(whitened) / arrow, 0.99);
    EXPECT_LE(static_cast<double>(affected) / sketch_px, 0.001);
}

TEST(RemoveArrows, Idempotent) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const Image once = remove_arrows(noise_image(s, 48, 48));
        EXPECT_EQ(remove_arrows(once), once);
    }
}

TEST(Scorers, IdenticalImagesShortCircuit) {
    ConstLpips lp(0.7);
    ConstClip cl(0.2);
    const Image a = noise_image(1);
    EXPECT_EQ(lpips_distance(a, a, lp), 0.0);
    EXPECT_EQ(clip_similarity(a, a, cl), 1.0);
    EXPECT_EQ(lpips_distance(a, noise_image(2), lp), 0.7);
}

TEST(Scorers, FixtureKeyIsSymmetric) {
    support::TempDir dir("scores");
    FixtureScores store(dir.path());
    const Image a = noise_image(1);
    const Image b = noise_image(2);
    store.put("lpips", a, b, 0.25);
    store.put("clip", b, a, 0.875);
    FixtureLpips lp(store);
    FixtureClip cl(store);
    EXPECT_EQ(lp.distance(b, a), 0.25);
    EXPECT_EQ(cl.similarity(a, b), 0.875);
    EXPECT_THROW(lp.distance(a, noise_image(3)), AdapterError);
}

TEST(Scorers, RemoteScorersMatchFixtures) {
    support::TempDir dir("remote_scores");
    FixtureScores store(dir.path());
    const Image a = noise_image(1);
    const Image b = noise_image(2);
    store.put("lpips", a, b, 0.125);
    store.put("clip", a, b, 0.5);

    httplib::Server server;
    auto handler = [&](const char* metric) {
        return [&, metric](const httplib::Request& req, httplib::Response& res) {
            const auto pa = req.get_file_value("a").content;
            const auto pb = req.get_file_value("b").content;
            const Image ia = decode_image(std::span(reinterpret_cast<const std::uint8_t*>(pa.data()), pa.size()));
            const Image ib = decode_image(std::span(reinterpret_cast<const std::uint8_t*>(pb.data()), pb.size()));
            try {
                res.set_content(nlohmann::json{{"score", store.get(metric, ia, ib)}}.dump(), "application/json");
            } catch (const AdapterError& e) {
                res.status = 404;
                res.set_content(e.what(), "text/plain");
            }
        };
    };
    server.Post("/v1/lpips", handler("lpips"));
    server.Post("/v1/clip", handler("clip"));
    server.set_keep_alive_timeout(1);
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread thread([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    {
        RemoteScorers remote(RemoteEndpoint{fmt::format("http://127.0.0.1:{}", port), 1});
        auto lp = remote.lpips();
        auto cl = remote.clip();
        EXPECT_EQ(lp->distance(a, b), 0.125);
        EXPECT_EQ(cl->similarity(b, a), 0.5);
        EXPECT_THROW(lp->distance(a, noise_image(4)), AdapterError);
    }
    server.stop();
    thread.join();
}

TEST(EvaluateSample, StartMatchingGroundTruthPicksStartBranch) {
    const Image gt = sketch(32);
    ConstLpips lp(0.4);
    ConstClip cl(0.6);
    EvalContext ctx;
    ctx.lpips = &lp;
    ctx.clip = &cl;
    const EvalSample s{"s1", remove_arrows(gt), noise_image(8), gt, noise_image(9), noise_image(10)};
    const EvalRecord r = evaluate_sample(s, ctx);
    EXPECT_EQ(r.sample_id, "s1");
    EXPECT_EQ(*r.lpips, 0.0);
    EXPECT_EQ(r.gram_distance, 0.0);
    EXPECT_EQ(*r.clip_score, 1.0);
    EXPECT_EQ(r.lpips_branch, "start");
    EXPECT_EQ(r.gram_branch, "start");
    EXPECT_EQ(r.clip_branch, "start");
    EXPECT_FALSE(r.miou_overall);
}

TEST(EvaluateSample, EndBranchAndGroundTruthResize) {
    // Ground truth at twice the generated size, with an orange arrow to strip.
    Image gt = Image::filled(64, 64, {255, 255, 255});
    for (int x = 10; x < 50; ++x) {
        gt.set_pixel(x, 30, {255, 140, 0});
    }
    const EvalSample s{"s2", noise_image(8), Image::filled(32, 32, {255, 255, 255}), gt, noise_image(9),
                       noise_image(10)};
    const EvalRecord r = evaluate_sample(s, {});
    EXPECT_EQ(r.gram_branch, "end");
    EXPECT_EQ(r.gram_distance, 0.0);
    EXPECT_FALSE(r.lpips);
    EXPECT_FALSE(r.clip_score);
    EXPECT_EQ(r.notes.size(), 3u);
    EXPECT_THROW(evaluate_sample({"bad", noise_image(1), noise_image(2, 16, 16), gt, gt, gt}, {}), ContractError);
}

TEST(EvaluateSample, HalfOverlapHandsGiveOneThird) {
    support::TempDir dir("eval_hands");
    FixtureStore store(dir.path());
    const Image gs = noise_image(1);
    const Image ge = noise_image(2);
    const Image fs = noise_image(3, 64, 64);
    const Image fe = noise_image(4, 64, 64);
    // Left hands: generated 8x8 square vs frame square shifted by half a side (at frame scale).
    store.put_hand_masks(gs, "left hand", {rect(32, 32, 0, 0, 8, 8)});
    store.put_hand_masks(fs, "left hand", {rect(64, 64, 8, 0, 24, 16)});
    store.put_hand_masks(ge, "left hand", {rect(32, 32, 0, 0, 8, 8)});
    store.put_hand_masks(fe, "left hand", {rect(64, 64, 8, 0, 24, 16)});
    for (const Image* img : {&gs, &ge, &fs, &fe}) {
        store.put_hand_masks(*img, "right hand", {});
    }
    FixtureHands hands(store);
    EvalContext ctx;
    ctx.hands = &hands;
    const EvalRecord r = evaluate_sample({"h", gs, ge, gs, fs, fe}, ctx);
    ASSERT_TRUE(r.miou_overall);
    EXPECT_DOUBLE_EQ(*r.miou_left, 1.0 / 3.0);
    EXPECT_FALSE(r.miou_right);
    EXPECT_DOUBLE_EQ(*r.miou_overall, 1.0 / 3.0);

    // Without fixtures for the images the failure is recorded, not thrown.
    const EvalRecord missing = evaluate_sample({"m", noise_image(20), noise_image(21), gs, fs, fe}, ctx);
    EXPECT_FALSE(missing.miou_overall);
    EXPECT_NE(missing.notes.back().find("hand segmentation failed"), std::string::npos);
}

TEST(EvaluateSample, RegressionPinnedRecord) {
    const RandomConvExtractor ex;
    EvalContext ctx;
    ctx.extractor = &ex;
    const EvalRecord r = evaluate_sample({"pin", noise_image(11), noise_image(12), sketch(48), noise_image(13),
                                          noise_image(14)},
                                         ctx);
    EXPECT_EQ(r.gram_branch, "end");
    EXPECT_NEAR(r.gram_distance, 0.10620485848996553, 1e-6);
}

TEST(EvaluateSample, ParallelMatchesSequential) {
    std::vector<EvalSample> samples;
    for (int i = 0; i < 6; ++i) {
        samples.push_back({fmt::format("s{}", i), noise_image(static_cast<std::uint64_t>(i)),
                           noise_image(static_cast<std::uint64_t>(i + 50)), sketch(32), noise_image(1),
                           noise_image(2)});
    }
    const auto seq = evaluate_samples(samples, {}, 1);
    const auto par = evaluate_samples(samples, {}, 4);
    ASSERT_EQ(seq.size(), 6u);
    for (std::size_t i = 0; i < seq.size(); ++i) {
        EXPECT_EQ(seq[i].sample_id, par[i].sample_id);
        EXPECT_EQ(seq[i].gram_distance, par[i].gram_distance);
    }
    EXPECT_TRUE(evaluate_samples({}, {}).empty());
}

TEST(Report, CsvAndMarkdown) {
    EvalRecord a;
    a.sample_id = "a";
    a.lpips = 0.5;
    a.gram_distance = 2.0;
    a.clip_score = 0.75;
    a.miou_left = 0.5;
    a.miou_right = 1.0;
    a.miou_overall = 0.75;
    a.gram_branch = "end";
    EvalRecord b;
    b.sample_id = "b,c";
    b.gram_distance = 4.0;
    b.notes = {"no LPIPS scorer configured", "say \"hi\""};
    const std::string csv = records_to_csv({a, b});
    EXPECT_NE(csv.find("sample_id,lpips,gram_distance,clip_score,miou_left,miou_right,miou_overall"), std::string::npos);
    EXPECT_NE(csv.find("a,0.5,2,0.75,0.5,1,0.75,,end,,\n"), std::string::npos);
    EXPECT_NE(csv.find("\"b,c\",,4,,,,,,,,\"no LPIPS scorer configured; say \"\"hi\"\"\"\n"), std::string::npos);
    const std::string md = records_to_markdown({a, b});
    EXPECT_NE(md.find("| illusign | 0.5000 | 3.0000 | 0.7500 |"), std::string::npos);
    EXPECT_NE(md.find("| illusign | 0.5000 | 1.0000 | 0.7500 |"), std::string::npos);
    EXPECT_NE(md.find("| b,c | n/a | 4.0000 |"), std::string::npos);

    support::TempDir dir("report");
    write_report({a, b}, dir / "out");
    EXPECT_TRUE(std::filesystem::exists(dir / "out/report.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir / "out/report.md"));
}

TEST(Loading, DirectoryAndManifestLayouts) {
    support::TempDir dir("load");
    const auto root = dir.path();
    for (const char* id : {"b", "a"}) {
        std::filesystem::create_directories(root / "pred" / id);
        std::filesystem::create_directories(root / "frames" / id);
        std::filesystem::create_directories(root / "gt");
        write_png(root / "pred" / id / "start.png", noise_image(1, 8, 8));
        write_png(root / "pred" / id / "end.png", noise_image(2, 8, 8));
        write_png(root / "frames" / id / "start.png", noise_image(3, 8, 8));
        write_png(root / "frames" / id / "end.png", noise_image(4, 8, 8));
        write_png(root / "gt" / (std::string(id) + ".png"), noise_image(5, 8, 8));
    }
    const auto samples = load_eval_directory(root / "pred", root / "gt", root / "frames");
    ASSERT_EQ(samples.size(), 2u);
    EXPECT_EQ(samples[0].id, "a");
    EXPECT_EQ(samples[1].gen_end, noise_image(2, 8, 8));

    std::ofstream(root / "manifest.json") << R"([{"id": "x", "pred_start": "pred/a/start.png",
        "pred_end": "pred/a/end.png", "gt": "gt/a.png", "frame_start": "frames/a/start.png",
        "frame_end": "frames/a/end.png"}])";
    const auto m = load_eval_manifest(root / "manifest.json");
    ASSERT_EQ(m.size(), 1u);
    EXPECT_EQ(m[0].gt_illustration, noise_image(5, 8, 8));

    std::ofstream(root / "bad.json") << R"([{"id": "x"}])";
    EXPECT_THROW(load_eval_manifest(root / "bad.json"), ConfigError);
    std::filesystem::remove(root / "pred/b/end.png");
    EXPECT_THROW(load_eval_directory(root / "pred", root / "gt", root / "frames"), IoError);
}
