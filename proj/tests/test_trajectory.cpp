#include "oracles/bspline_oracle.hpp"
#include "properties/spline_properties.hpp"

#include "illusign/errors.hpp"
#include "illusign/trajectory.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <regex>

using namespace illusign;

namespace {

std::vector<oracle::P2> to_oracle(const std::vector<Point2>& pts) {
    std::vector<oracle::P2> out;
    for (const auto& p : pts) {
        out.push_back({p.x, p.y});
    }
    return out;
}

int count_orange(const Image& image) {
    int n = 0;
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            const Rgb p = image.pixel(x, y);
            // Coverage above one half over white: red stays 255, blue drops below 128.
            n += p.r == 255 && p.b < 128 ? 1 : 0;
        }
    }
    return n;
}

} // namespace

TEST(BSpline, PartitionOfUnity) {
    const auto r = properties::partition_of_unity_cases(21, 50);
    EXPECT_TRUE(r.ok()) << r.first_failure << " worst " << r.worst;
}

TEST(BSpline, EndpointsInterpolatedExactly) {
    const auto r = properties::endpoint_cases(22, 50);
    EXPECT_TRUE(r.ok()) << r.first_failure;
}

TEST(BSpline, FitMatchesNormalEquationsOracle) {
    const auto r = properties::fit_mse_cases(23, 50);
    EXPECT_TRUE(r.ok()) << r.first_failure << " excess " << r.worst;
}

TEST(BSpline, KnotVectorShape) {
    std::mt19937_64 gen(1);
    for (int i = 0; i < 20; ++i) {
        const auto pts = properties::random_track(gen);
        const auto curve = fit_bspline(pts);
        EXPECT_EQ(curve.knots.size(), curve.control.size() + curve.degree + 1);
        EXPECT_EQ(static_cast<int>(curve.control.size()), default_control_count(static_cast<int>(pts.size())));
        EXPECT_TRUE(std::is_sorted(curve.knots.begin(), curve.knots.end()));
        for (int k = 0; k <= curve.degree; ++k) {
            EXPECT_EQ(curve.knots[static_cast<std::size_t>(k)], 0.0);
            EXPECT_EQ(curve.knots[curve.knots.size() - 1 - static_cast<std::size_t>(k)], 1.0);
        }
    }
}

TEST(BSpline, BasisMatchesCoxDeBoorRecursion) {
    const std::vector<double> knots{0, 0, 0, 0, 0.2, 0.45, 0.7, 1, 1, 1, 1};
    for (int s = 0; s <= 100; ++s) {
        const double u = s / 100.0;
        const auto basis = basis_functions(knots, 3, 7, u);
        for (int i = 0; i < 7; ++i) {
            EXPECT_NEAR(basis[static_cast<std::size_t>(i)], oracle::cox_de_boor(knots, i, 3, u), 1e-12) << u;
        }
    }
}

TEST(BSpline, CollinearSamplesStayOnTheLine) {
    std::vector<Point2> pts;
    for (int i = 0; i < 9; ++i) {
        const double s = i * i / 64.0;
        pts.push_back({0.1 + 0.6 * s, 0.2 + 0.3 * s});
    }
    const auto curve = fit_bspline(pts);
    for (const auto& p : sample_curve(curve, 200)) {
        // Distance to the line through (0.1, 0.2) with direction (0.6, 0.3).
        const double d = std::abs((p.x - 0.1) * 0.3 - (p.y - 0.2) * 0.6) / std::hypot(0.6, 0.3);
        EXPECT_LT(d, 1e-9);
    }
}

TEST(BSpline, TwoSamplesGiveStraightSegment) {
    const std::vector<Point2> pts{{0.1, 0.1}, {0.5, 0.9}};
    const auto curve = fit_bspline(pts);
    EXPECT_EQ(curve.degree, 1);
    const auto poly = sample_curve(curve, 3);
    EXPECT_EQ(poly.front(), pts.front());
    EXPECT_EQ(poly.back(), pts.back());
    EXPECT_NEAR(poly[1].x, 0.3, 1e-15);
    EXPECT_NEAR(poly[1].y, 0.5, 1e-15);
    EXPECT_EQ(curve.fit_mse, 0.0);
    EXPECT_THROW(fit_bspline(std::vector<Point2>{{0, 0}}), ContractError);
}

TEST(BSpline, ThreeSamplesDegradeToLinear) {
    const std::vector<Point2> pts{{0, 0}, {0.5, 0.5}, {1, 0}};
    const auto curve = fit_bspline(pts);
    EXPECT_EQ(curve.degree, 1);
    EXPECT_EQ(curve.control.size(), 2u);
}

TEST(BSpline, ControlCountOutOfRangeIsRejected) {
    std::mt19937_64 gen(3);
    const auto pts = properties::random_track(gen, 8, 8);
    EXPECT_THROW(fit_bspline(pts, 3, 9), ContractError);
    EXPECT_THROW(fit_bspline(pts, 3, 3), ContractError);
    EXPECT_NO_THROW(fit_bspline(pts, 3, 8));
    EXPECT_NEAR(fit_bspline(pts, 3, 8).fit_mse, 0.0, 1e-20);
}

TEST(BSpline, QuarterCircleFitNoWorseThanOracle) {
    std::mt19937_64 gen(4);
    std::normal_distribution<double> noise(0.0, 0.01);
    std::vector<Point2> pts;
    for (int i = 0; i < 10; ++i) {
        const double a = 1.5707963267948966 * i / 9.0;
        pts.push_back({0.5 + 0.3 * std::cos(a) + noise(gen), 0.5 + 0.3 * std::sin(a) + noise(gen)});
    }
    const auto curve = fit_bspline(pts);
    const double reference = oracle::normal_equations_mse(to_oracle(pts), chord_length_parameters(pts), curve.knots,
                                                          curve.degree, static_cast<int>(curve.control.size()));
    EXPECT_LE(curve.fit_mse, reference + 1e-9);
}

TEST(BSpline, SampleCurveMatchesDeBoor) {
    const SplineCurve curve{3, {0, 0, 0, 0, 0.3, 0.6, 1, 1, 1, 1},
                            {{0.1, 0.1}, {0.2, 0.5}, {0.4, 0.6}, {0.6, 0.2}, {0.8, 0.4}, {0.9, 0.9}}, 0.0};
    std::vector<oracle::P2> ctrl;
    for (const auto& c : curve.control) {
        ctrl.push_back({c.x, c.y});
    }
    const auto poly = sample_curve(curve, 50);
    ASSERT_EQ(poly.size(), 50u);
    for (int i = 0; i < 50; ++i) {
        const auto want = oracle::de_boor(curve.knots, ctrl, 3, i / 49.0);
        EXPECT_NEAR(poly[static_cast<std::size_t>(i)].x, want.x, 1e-9);
        EXPECT_NEAR(poly[static_cast<std::size_t>(i)].y, want.y, 1e-9);
    }
    const auto two = sample_curve(curve, 2);
    EXPECT_EQ(two.front(), curve.control.front());
    EXPECT_EQ(two.back(), curve.control.back());
}

TEST(BSpline, SimilarityTransformsCommuteWithFitting) {
    std::mt19937_64 gen(5);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        const auto pts = properties::random_track(gen);
        const double angle = u(gen) * 3.0;
        const double scale = 0.5 + std::abs(u(gen));
        const double tx = u(gen);
        const double ty = u(gen);
        auto transform = [&](Point2 p) {
            return Point2{scale * (std::cos(angle) * p.x - std::sin(angle) * p.y) + tx,
                          scale * (std::sin(angle) * p.x + std::cos(angle) * p.y) + ty};
        };
        std::vector<Point2> moved;
        for (const auto& p : pts) {
            moved.push_back(transform(p));
        }
        const auto a = sample_curve(fit_bspline(pts), 40);
        const auto b = sample_curve(fit_bspline(moved), 40);
        for (std::size_t i = 0; i < a.size(); ++i) {
            const Point2 ta = transform(a[i]);
            EXPECT_NEAR(ta.x, b[i].x, 1e-6);
            EXPECT_NEAR(ta.y, b[i].y, 1e-6);
        }
    }
}

TEST(Arrows, HorizontalLineStructure) {
    const auto doc = render_arrow({{0.1, 0.5}, {0.9, 0.5}}, {}, 100, 80);
    EXPECT_EQ(doc.arrow_count, 1);
    EXPECT_NE(doc.svg.find("version=\"1.1\""), std::string::npos);
    std::smatch m;
    ASSERT_TRUE(std::regex_search(doc.svg, m, std::regex("<path d=\"(M [^\"]*)\" fill=\"none\"")));
    EXPECT_EQ(m[1].str(), "M 10 40 L 90 40");
    EXPECT_NE(doc.svg.find("marker-end=\"url(#arrowhead-0)\""), std::string::npos);
    EXPECT_NE(doc.svg.find("rgb(255,140,0)"), std::string::npos);
    const auto parsed = parse_arrows(doc);
    ASSERT_EQ(parsed.size(), 1u);
    EXPECT_TRUE(parsed[0].has_marker);
    EXPECT_EQ(parsed[0].points.back().x, 90.0);
    EXPECT_EQ(parsed[0].head_length, 12.0);
}

TEST(Arrows, DoubledCanvasDoublesCoordinates) {
    std::mt19937_64 gen(6);
    const auto line = sample_curve(fit_bspline(properties::random_track(gen)), 30);
    const auto small = parse_arrows(render_arrow(line, {}, 320, 240));
    const auto big = parse_arrows(render_arrow(line, {}, 640, 480));
    ASSERT_EQ(small[0].points.size(), big[0].points.size());
    for (std::size_t i = 0; i < small[0].points.size(); ++i) {
        EXPECT_EQ(2.0 * small[0].points[i].x, big[0].points[i].x);
        EXPECT_EQ(2.0 * small[0].points[i].y, big[0].points[i].y);
    }
}

TEST(Arrows, FiftyPointCurveParsesBackToFiftyPoints) {
    std::mt19937_64 gen(7);
    const auto line = sample_curve(fit_bspline(properties::random_track(gen)), 50);
    const auto parsed = parse_arrows(render_arrow(line, {}, 512, 512));
    ASSERT_EQ(parsed.size(), 1u);
    EXPECT_EQ(parsed[0].points.size(), 50u);
}

TEST(Arrows, ZeroLengthPolylineIsSkipped) {
    const auto doc = render_arrow({{0.4, 0.4}, {0.4, 0.4}}, {}, 64, 64);
    EXPECT_EQ(doc.arrow_count, 0);
    EXPECT_TRUE(parse_arrows(doc).empty());
    const Image canvas = Image::filled(64, 64, {12, 34, 56});
    EXPECT_EQ(composite(canvas, doc), canvas);
}

TEST(Arrows, CompositeOrangeCountMatchesRasterOracle) {
    const std::vector<Point2> line{{0.1, 0.2}, {0.4, 0.35}, {0.7, 0.3}, {0.85, 0.7}};
    const int w = 256;
    const int h = 192;
    const ArrowStyle style;
    const Image out = composite(Image::filled(w, h, {255, 255, 255}), render_arrow(line, style, w, h));
    std::vector<oracle::P2> pixels;
    for (const auto& p : line) {
        pixels.push_back({p.x * w, p.y * h});
    }
    const long expected = oracle::rasterized_arrow_pixels(pixels, style.stroke_width, style.head_length,
                                                          style.head_width, w, h);
    const int got = count_orange(out);
    EXPECT_NEAR(got, expected, 0.1 * expected) << got << " vs " << expected;
}

TEST(Arrows, TwoTracksGiveTwoMarkers) {
    const std::vector<std::vector<Point2>> lines{{{0.1, 0.1}, {0.3, 0.4}}, {{0.9, 0.1}, {0.6, 0.5}}};
    const auto doc = render_arrows(lines, {}, 128, 128);
    EXPECT_EQ(doc.arrow_count, 2);
    std::size_t markers = 0;
    for (std::size_t pos = 0; (pos = doc.svg.find("<marker ", pos)) != std::string::npos; ++pos) {
        ++markers;
    }
    EXPECT_EQ(markers, 2u);
    int with_marker = 0;
    for (const auto& a : parse_arrows(doc)) {
        with_marker += a.has_marker ? 1 : 0;
    }
    EXPECT_EQ(with_marker, 2);
}

TEST(Arrows, CanvasMismatchIsRejected) {
    const auto doc = render_arrow({{0.1, 0.1}, {0.9, 0.9}}, {}, 64, 64);
    EXPECT_THROW(composite(Image::filled(32, 32, {0, 0, 0}), doc), ContractError);
}

TEST(Arrows, CoverageIsBoundedAndNonEmpty) {
    const auto doc = render_arrow({{0.1, 0.5}, {0.9, 0.5}}, {}, 64, 64);
    const auto cov = arrow_coverage(doc);
    float peak = 0.0f;
    for (float v : cov) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
        peak = std::max(peak, v);
    }
    EXPECT_EQ(peak, 1.0f);
}

TEST(Motion, ThresholdOnDiagonalFraction) {
    KeypointTrack still{"left", {{0, 0.5, 0.5}, {5, 0.51, 0.5}}};
    KeypointTrack moving{"right", {{0, 0.2, 0.5}, {5, 0.6, 0.5}}};
    EXPECT_FALSE(has_motion(still, 512, 512));
    EXPECT_TRUE(has_motion(moving, 512, 512));
}

TEST(Keypoints, JsonRoundTrip) {
    const KeypointTrack track{"left", {{3, 0.25, 0.5}, {4, 0.3, 0.55}}};
    EXPECT_EQ(track_from_json(track_to_json(track)), track);
    EXPECT_EQ(track_to_json(track), R"({"hand":"left","samples":[[3,0.25,0.5],[4,0.3,0.55]]})");
    const auto path = std::filesystem::temp_directory_path() / "illusign_tracks.json";
    write_tracks(path, {track, KeypointTrack{"right", {}}});
    const auto back = read_tracks(path);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0], track);
    std::filesystem::remove(path);
    EXPECT_THROW(track_from_json(R"({"hand":"left","samples":[[1,2]]})"), IoError);
}
