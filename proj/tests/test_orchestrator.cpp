#include "illusign/errors.hpp"
#include "illusign/hashing.hpp"
#include "illusign/orchestrator.hpp"

#include "support/pipeline_scenario.hpp"

#include <gtest/gtest.h>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <fstream>

using namespace illusign;
using support::MockService;
using support::Scenario;
using support::test_config;
namespace fs = std::filesystem;

namespace {

nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    return nlohmann::json::parse(in);
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST(PipelineConfig, DefaultsMatchTheMethod) {
    const PipelineConfig c;
    EXPECT_EQ(c.steps, 100);
    EXPECT_EQ(c.style.gamma, 1.0);
    EXPECT_EQ(c.style.delta, 0.5);
    EXPECT_EQ(c.style.beta_contrast, 1.67);
    EXPECT_EQ(c.style.guidance_scale, 3.5);
    EXPECT_EQ(c.style.injection_window, (TimestepWindow{0, 70}));
    EXPECT_EQ(c.overlay.window, (TimestepWindow{0, 50}));
    EXPECT_EQ(c.overlay.quantile, 0.1);
    EXPECT_NO_THROW(c.validate());
}

TEST(PipelineConfig, JsonRoundTripIsLossless) {
    const std::string defaults = config_to_json(PipelineConfig{});
    EXPECT_EQ(config_to_json(config_from_json(defaults)), defaults);

    PipelineConfig c = test_config();
    c.seed = 0xFFFFFFFFFFFFFFF1ull;
    c.style.gamma = 0.1 + 0.2;
    c.style.prompt = "a man";
    c.style.adain_enabled = false;
    c.overlay.downsample = DownsampleRule::Nearest;
    c.overlay.quantile = 1.0 / 3.0;
    c.perception.mode = PerceptionMode::Remote;
    c.perception.remote.url = "http://10.0.0.2:9000";
    c.boundaries.start = 3;
    c.arrows.style.color = {1, 2, 3};
    c.arrows.style.opacity = 0.7;
    c.skip_overlay = true;
    c.draw_arrows = false;
    const std::string text = config_to_json(c);
    const PipelineConfig back = config_from_json(text);
    EXPECT_EQ(config_to_json(back), text);
    EXPECT_EQ(back.seed, c.seed);
    EXPECT_EQ(back.style.gamma, c.style.gamma);
    EXPECT_EQ(back.overlay.quantile, c.overlay.quantile);
    EXPECT_EQ(back.boundaries.start, 3);
    EXPECT_FALSE(back.boundaries.end);
    EXPECT_EQ(back.arrows.style.color, (Rgb{1, 2, 3}));
    EXPECT_EQ(back.backbone.mock.latent_size, 16);

    // Partial documents keep defaults.
    const PipelineConfig partial = config_from_json(R"({"steps": 50, "style": {"prompt": "x"}})");
    EXPECT_EQ(partial.steps, 50);
    EXPECT_EQ(partial.style.prompt, "x");
    EXPECT_EQ(partial.style.delta, 0.5);
}

TEST(PipelineConfig, RejectsBadDocuments) {
    EXPECT_THROW(config_from_json("{"), ConfigError);
    EXPECT_THROW(config_from_json(R"({"stpes": 3})"), ConfigError);
    EXPECT_THROW(config_from_json(R"({"style": {"gama": 1}})"), ConfigError);
    EXPECT_THROW(config_from_json(R"({"steps": "many"})"), ConfigError);
    EXPECT_THROW(config_from_json(R"({"overlay": {"window": "a:b"}})"), ConfigError);
    EXPECT_THROW(config_from_json(R"({"backbone": {"kind": "gpu"}})"), ConfigError);
    EXPECT_THROW(config_from_json(R"({"arrows": {"color": [0, 0, 300]}})"), ConfigError);
    PipelineConfig c;
    c.steps = 50;  // default style window [0, 70] no longer fits
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.boundaries = {9, 3};
    EXPECT_THROW(c.validate(), ConfigError);

    support::TempDir dir("config");
    save_config(test_config(), dir / "c.json");
    EXPECT_EQ(config_to_json(load_config(dir / "c.json")), config_to_json(test_config()));
    EXPECT_THROW(load_config(dir / "missing.json"), ConfigError);
}

TEST(Pipeline, MockEndToEndEmitsAllArtifacts) {
    Scenario s;
    MockService m(s.config);
    Pipeline p(s.config, s.inputs(), s.options("a"), m.services());
    const RunManifest man = p.run();
    EXPECT_TRUE(man.complete());
    EXPECT_FALSE(man.overlap_skipped);
    EXPECT_EQ(man.run_id, p.run_id());
    EXPECT_EQ(man.run_id.size(), 12u);
    EXPECT_GT(p.denoising_steps(), 0u);
    EXPECT_TRUE(verify_manifest(man, p.run_dir()).empty());
    for (const char* f : {"boundaries.json", "frames/start.png", "edges/start.png", "edges/end.png",
                          "trajectories/tracks.json", "trajectories/curves.json", "illustrations/start.png",
                          "illustrations/end.png", "illustrations/start_latents/manifest.json",
                          "masks/combined_start.png", "masks/hands_end.png", "overlay/overlay.png",
                          "overlay/result.json", "arrows/arrows.svg", "final.png", "manifest.json"}) {
        EXPECT_TRUE(fs::exists(p.run_dir() / f)) << f;
    }
    EXPECT_FALSE(fs::exists(p.run_dir() / ".work"));
    EXPECT_EQ(read_boundaries(p.run_dir() / "boundaries.json").start_frame, 1);
    EXPECT_EQ(read_json(p.run_dir() / "arrows/arrows.json").at("base"), "overlay");
    EXPECT_EQ(read_json(p.run_dir() / "arrows/arrows.json").at("arrow_count"), 2);
    const Image final_image = read_image(p.run_dir() / "final.png");
    EXPECT_EQ(final_image.width, 32);
    EXPECT_NE(final_image, read_image(p.run_dir() / "overlay/overlay.png"));

    const RunManifest disk = read_manifest(p.run_dir() / "manifest.json");
    EXPECT_EQ(disk.artifact_hashes(), man.artifact_hashes());
    EXPECT_EQ(config_to_json(config_from_json(disk.config_json)), config_to_json(s.config));
    EXPECT_EQ(disk.stage(StageId::Stylize)->status, StageStatus::Completed);
    EXPECT_GT(disk.stage(StageId::Stylize)->denoiser_evaluations, 0u);
    EXPECT_EQ(disk.stage(StageId::Segment)->denoiser_evaluations, 0u);
}

TEST(Pipeline, RerunHitsCacheWithoutDenoising) {
    Scenario s;
    MockService first(s.config);
    Pipeline a(s.config, s.inputs(), s.options("a"), first.services());
    const RunManifest ma = a.run();

    MockService second(s.config);
    Pipeline b(s.config, s.inputs(), s.options("b"), second.services());
    const RunManifest mb = b.run();
    for (const auto& st : mb.stages) {
        EXPECT_EQ(st.status, StageStatus::Cached) << to_string(st.id);
    }
    EXPECT_EQ(second.mock->evaluations(), 0u);
    EXPECT_EQ(b.denoising_steps(), 0u);
    EXPECT_EQ(ma.artifact_hashes(), mb.artifact_hashes());
    EXPECT_TRUE(verify_manifest(mb, b.run_dir()).empty());

    // Same run directory again: stages are reused in place.
    Pipeline c(s.config, s.inputs(), s.options("b"), second.services());
    for (const auto& st : c.run().stages) {
        EXPECT_EQ(st.status, StageStatus::Reused);
    }
    EXPECT_EQ(second.mock->evaluations(), 0u);
}

TEST(Pipeline, ConfigChangeInvalidatesOnlyDownstreamStages) {
    Scenario s;
    MockService m(s.config);
    Pipeline(s.config, s.inputs(), s.options("a"), m.services()).run();
    PipelineConfig changed = s.config;
    changed.arrows.style.stroke_width = 2.0;
    const RunManifest man = Pipeline(changed, s.inputs(), s.options("b"), m.services()).run();
    for (StageId id : {StageId::Segment, StageId::Edges, StageId::Masks, StageId::Stylize, StageId::Overlay}) {
        EXPECT_EQ(man.stage(id)->status, StageStatus::Cached) << to_string(id);
    }
    EXPECT_EQ(man.stage(StageId::Arrows)->status, StageStatus::Completed);
}

TEST(Pipeline, IdenticalSeedsGiveIdenticalArtifacts) {
    Scenario s;
    MockService m1(s.config);
    MockService m2(s.config);
    const RunManifest a = Pipeline(s.config, s.inputs(), s.options("a", false), m1.services()).run();
    const RunManifest b = Pipeline(s.config, s.inputs(), s.options("b", false), m2.services()).run();
    EXPECT_EQ(a.artifact_hashes(), b.artifact_hashes());
    EXPECT_EQ(a.artifact_hashes().size(), 24u);
    EXPECT_FALSE(fs::exists(s.dir / "cache"));

    PipelineConfig other = s.config;
    other.seed = 99;
    MockService m3(other);
    const RunManifest c = Pipeline(other, s.inputs(), s.options("c", false), m3.services()).run();
    EXPECT_NE(c.artifact_hashes().at("illustrations/start.png"), a.artifact_hashes().at("illustrations/start.png"));
    EXPECT_EQ(c.artifact_hashes().at("boundaries.json"), a.artifact_hashes().at("boundaries.json"));
}

TEST(Pipeline, OverlappingHandsSkipOverlayAndAnnotateStart) {
    Scenario s(synthetic::overlapping_scene());
    MockService m(s.config);
    Pipeline p(s.config, s.inputs(), s.options("a"), m.services());
    const RunManifest man = p.run();
    EXPECT_TRUE(man.complete());
    EXPECT_TRUE(man.overlap_skipped);
    EXPECT_TRUE(read_json(p.run_dir() / "masks/overlap.json").at("hands_overlap").get<bool>());
    EXPECT_FALSE(fs::exists(p.run_dir() / "overlay/overlay.png"));
    EXPECT_EQ(read_json(p.run_dir() / "overlay/result.json").at("reason"), "overlap");
    EXPECT_EQ(read_json(p.run_dir() / "arrows/arrows.json").at("base"), "start");
    EXPECT_EQ(man.stage(StageId::Overlay)->denoiser_evaluations, 0u);

    const Image start = read_image(p.run_dir() / "illustrations/start.png");
    ArrowDocument doc{start.width, start.height, read_text(p.run_dir() / "arrows/arrows.svg"), 0};
    doc.arrow_count = static_cast<int>(parse_arrows(doc).size());
    EXPECT_GT(doc.arrow_count, 0);
    EXPECT_EQ(read_image(p.run_dir() / "final.png"), composite(start, doc));
}

TEST(Pipeline, SkipOverlayAndNoArrowsToggles) {
    Scenario s;
    s.config.skip_overlay = true;
    s.config.draw_arrows = false;
    MockService m(s.config);
    Pipeline p(s.config, s.inputs(), s.options("a"), m.services());
    const RunManifest man = p.run();
    EXPECT_FALSE(man.overlap_skipped);
    EXPECT_EQ(read_json(p.run_dir() / "overlay/result.json").at("reason"), "disabled");
    EXPECT_FALSE(fs::exists(p.run_dir() / "arrows/arrows.svg"));
    EXPECT_EQ(read_image(p.run_dir() / "final.png"), read_image(p.run_dir() / "illustrations/start.png"));
    EXPECT_TRUE(verify_manifest(man, p.run_dir()).empty());
}

TEST(Pipeline, ManualBoundariesAreRecorded) {
    Scenario s;
    s.config.boundaries = {2, 7};
    MockService m(s.config);
    Pipeline p(s.config, s.inputs(), s.options("a"), m.services());
    const StageId seg[] = {StageId::Segment};
    p.run_stages(seg);
    const SignBoundaries b = read_boundaries(p.run_dir() / "boundaries.json");
    EXPECT_EQ(b.start_frame, 2);
    EXPECT_EQ(b.end_frame, 7);
    EXPECT_EQ(b.source, BoundarySource::ManualOverride);
    EXPECT_EQ(read_image(p.run_dir() / "frames/end.png"), s.scene.render(7));
}

TEST(Pipeline, ChainedSubcommandsMatchFullRun) {
    Scenario s;
    MockService m1(s.config);
    const RunManifest full = Pipeline(s.config, s.inputs(), s.options("full", false), m1.services()).run();

    // Each "subcommand" is a separate pipeline object over the same run directory.
    const std::vector<std::vector<StageId>> steps{{StageId::Segment},
                                                  {StageId::Edges, StageId::Stylize},
                                                  {StageId::Masks, StageId::Overlay},
                                                  {StageId::Keypoints, StageId::Arrows}};
    RunManifest last;
    for (const auto& group : steps) {
        MockService m(s.config);
        Pipeline p(s.config, s.inputs(), s.options("chain", false), m.services());
        last = p.run_stages(group);
    }
    EXPECT_TRUE(last.complete());
    EXPECT_EQ(last.artifact_hashes(), full.artifact_hashes());
    for (const auto& [path, hash] : full.artifact_hashes()) {
        EXPECT_EQ(sha256_tree(s.dir / "out/chain" / path), hash) << path;
    }
}

TEST(Pipeline, StageNeedsItsUpstreamStages) {
    Scenario s;
    MockService m(s.config);
    Pipeline p(s.config, s.inputs(), s.options("a"), m.services());
    const StageId stylize[] = {StageId::Stylize};
    try {
        p.run_stages(stylize);
        FAIL() << "expected StageError";
    } catch (const StageError& e) {
        EXPECT_EQ(exit_code_for(e.kind()), 4);
        EXPECT_NE(std::string(e.what()).find("segment"), std::string::npos);
    }
}

TEST(Pipeline, FailedStageIsRecordedAndResumeContinues) {
    Scenario s(synthetic::wide_motion_scene(), false);
    // Only boundaries and detections: edges fall back, but masks have no fixtures.
    const InMemoryFrames src(s.scene.video());
    FixtureStore store(s.dir / "fixtures");
    store.put_boundaries(src, {1, 8, BoundarySource::Model});
    store.put_detections(src, s.scene.detections());

    MockService m(s.config);
    Pipeline p(s.config, s.inputs(), s.options("a"), m.services());
    try {
        p.run();
        FAIL() << "expected AdapterError";
    } catch (const AdapterError& e) {
        EXPECT_EQ(exit_code_for(e.kind()), 3);
    }
    const RunManifest failed = read_manifest(p.run_dir() / "manifest.json");
    EXPECT_EQ(failed.stage(StageId::Segment)->status, StageStatus::Completed);
    EXPECT_EQ(failed.stage(StageId::Masks)->status, StageStatus::Failed);
    EXPECT_FALSE(failed.stage(StageId::Masks)->error.empty());
    EXPECT_EQ(failed.stage(StageId::Stylize), nullptr);
    EXPECT_FALSE(failed.complete());

    s.record_fixtures();
    Pipeline resumed(s.config, s.inputs(), s.options("a"), m.services());
    const RunManifest man = resumed.run();
    EXPECT_TRUE(man.complete());
    EXPECT_EQ(man.stage(StageId::Segment)->status, StageStatus::Reused);
    EXPECT_EQ(man.stage(StageId::Masks)->status, StageStatus::Completed);
}

TEST(Pipeline, CorruptCacheEntryIsRecomputed) {
    Scenario s;
    MockService m(s.config);
    const RunManifest a = Pipeline(s.config, s.inputs(), s.options("a"), m.services()).run();
    const std::string key = a.stage(StageId::Edges)->cache_key;
    write_png(s.dir / "cache/edges" / key / "edges/start.png", GrayImage::filled(32, 32, 0));
    const RunManifest b = Pipeline(s.config, s.inputs(), s.options("b"), m.services()).run();
    EXPECT_EQ(b.stage(StageId::Edges)->status, StageStatus::Completed);
    EXPECT_EQ(b.stage(StageId::Stylize)->status, StageStatus::Cached);
    EXPECT_EQ(a.artifact_hashes(), b.artifact_hashes());
}

TEST(Pipeline, TamperedArtifactIsNotReused) {
    Scenario s;
    MockService m(s.config);
    Pipeline(s.config, s.inputs(), s.options("a", false), m.services()).run();
    write_png(s.dir / "out/a/final.png", Image::filled(32, 32, {0, 0, 0}));
    const RunManifest again = Pipeline(s.config, s.inputs(), s.options("a", false), m.services()).run();
    EXPECT_EQ(again.stage(StageId::Arrows)->status, StageStatus::Completed);
    EXPECT_EQ(again.stage(StageId::Stylize)->status, StageStatus::Reused);
    EXPECT_TRUE(verify_manifest(again, s.dir / "out/a").empty());
}

TEST(Pipeline, DefaultRunDirectoryAndCacheRoot) {
    Scenario s;
    MockService m(s.config);
    ::setenv("ILLUSIGN_CACHE", (s.dir / "envcache").c_str(), 1);
    EXPECT_EQ(default_cache_root(), s.dir / "envcache");
    Pipeline p(s.config, s.inputs(), {}, m.services());
    EXPECT_EQ(p.run_dir(), s.dir / "out" / p.run_id());
    const StageId seg[] = {StageId::Segment};
    p.run_stages(seg);
    EXPECT_TRUE(fs::exists(s.dir / "envcache/segment"));
    ::unsetenv("ILLUSIGN_CACHE");

    PipelineConfig other = s.config;
    other.seed = 5;
    EXPECT_NE(Pipeline(other, s.inputs(), s.options("x"), m.services()).run_id(), p.run_id());
    EXPECT_THROW(Pipeline(s.config, {s.dir / "nope", s.dir / "style.png"}, s.options("y")), IoError);
}

TEST(Manifest, JsonRoundTrip) {
    RunManifest m;
    m.run_id = "abc";
    m.config_json = config_to_json(test_config());
    m.video_hash = "v";
    m.style_hash = "s";
    StageRecord r;
    r.id = StageId::Overlay;
    r.status = StageStatus::Failed;
    r.cache_key = "k";
    r.wall_seconds = 1.5;
    r.error = "boom";
    r.artifacts = {{"overlay/result.json", "h"}};
    m.stages.push_back(r);
    m.overlap_skipped = true;
    m.relabeled_frames = {4, 5};
    m.warnings = {"w"};
    const RunManifest back = manifest_from_json(manifest_to_json(m));
    EXPECT_EQ(manifest_to_json(back), manifest_to_json(m));
    EXPECT_EQ(back.stage(StageId::Overlay)->error, "boom");
    EXPECT_EQ(back.relabeled_frames, (std::vector<int>{4, 5}));
    EXPECT_THROW(manifest_from_json("{}"), ContractError);
    EXPECT_EQ(parse_stage("arrows"), StageId::Arrows);
    EXPECT_THROW(parse_stage("paint"), ConfigError);
}
