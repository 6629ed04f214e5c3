#include "cli.hpp"

#include "illusign/errors.hpp"
#include "illusign/evaluation.hpp"
#include "illusign/hashing.hpp"
#include "illusign/inversion.hpp"
#include "illusign/mock_backbone.hpp"
#include "illusign/orchestrator.hpp"
#include "illusign/overlay.hpp"
#include "illusign/perception.hpp"
#include "illusign/remote.hpp"
#include "illusign/rng.hpp"
#include "illusign/style_transfer.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace illusign::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kInputsFile = "inputs.json";

/// Options every pipeline-facing subcommand understands.
struct Shared {
    std::string config;
    std::string video;
    std::string style;
    std::string run_dir;
    std::string output_root;
    std::string cache;
    bool no_cache = false;
    std::string backbone;
    std::string backbone_url;
    std::string perception;
    std::string fixtures;
    std::optional<int> steps;
    std::optional<std::uint64_t> seed;
};

void add_config_options(CLI::App* cmd, Shared& s) {
    cmd->add_option("-c,--config", s.config, "JSON configuration file")->check(CLI::ExistingFile);
    cmd->add_option("--backbone", s.backbone, "Denoiser backbone")->check(CLI::IsMember({"mock", "remote"}));
    cmd->add_option("--backbone-url", s.backbone_url, "URL of a remote backbone server");
    cmd->add_option("--perception", s.perception, "Perception adapters")
        ->check(CLI::IsMember({"fixture", "remote", "offline"}));
    cmd->add_option("--fixtures", s.fixtures, "Fixture directory for the perception adapters");
    cmd->add_option("--steps", s.steps, "Denoising steps T");
    cmd->add_option("--seed", s.seed, "Base seed");
}

void add_run_options(CLI::App* cmd, Shared& s) {
    add_config_options(cmd, s);
    cmd->add_option("--video", s.video, "Video file or directory of frames")->check(CLI::ExistingPath);
    cmd->add_option("--style", s.style, "Style reference image")->check(CLI::ExistingFile);
    cmd->add_option("--run-dir", s.run_dir, "Run directory (default <out>/<run id>)");
    cmd->add_option("-o,--out", s.output_root, "Output root for run directories (standalone modes: output directory)");
    cmd->add_option("--cache", s.cache, "Cache root (default $ILLUSIGN_CACHE or the user cache dir)");
    cmd->add_flag("--no-cache", s.no_cache, "Neither read nor write the stage cache");
}

PipelineConfig resolve_config(const Shared& s) {
    PipelineConfig c;
    if (!s.config.empty()) {
        c = load_config(s.config);
    } else if (!s.run_dir.empty() && fs::exists(fs::path(s.run_dir) / "manifest.json")) {
        c = config_from_json(read_manifest(fs::path(s.run_dir) / "manifest.json").config_json);
    }
    if (!s.backbone.empty()) {
        c.backbone.kind = parse_backbone_kind(s.backbone);
    }
    if (!s.backbone_url.empty()) {
        c.backbone.remote.url = s.backbone_url;
    }
    if (!s.perception.empty()) {
        c.perception.mode = parse_perception_mode(s.perception);
    }
    if (!s.fixtures.empty()) {
        c.perception.fixtures = s.fixtures;
    }
    if (s.steps) {
        c.steps = *s.steps;
    }
    if (s.seed) {
        c.seed = *s.seed;
    }
    if (!s.output_root.empty()) {
        c.output_root = s.output_root;
    }
    return c;
}

PipelineInputs resolve_inputs(const Shared& s) {
    PipelineInputs in{s.video, s.style};
    const fs::path saved = fs::path(s.run_dir) / kInputsFile;
    if ((in.video.empty() || in.style.empty()) && !s.run_dir.empty() && fs::exists(saved)) {
        std::ifstream file(saved);
        const json j = json::parse(file, nullptr, false);
        if (j.is_discarded()) {
            throw ConfigError(fmt::format("{} is not valid JSON", saved.string()));
        }
        if (in.video.empty()) {
            in.video = j.value("video", "");
        }
        if (in.style.empty()) {
            in.style = j.value("style", "");
        }
    }
    if (in.video.empty() || in.style.empty()) {
        throw ConfigError("--video and --style are required unless --run-dir points at an earlier run");
    }
    return in;
}

void report(const RunManifest& m, const fs::path& run_dir, std::ostream& out) {
    for (const StageRecord& r : m.stages) {
        fmt::print(out, "{:<10} {:<10} {:7.2f}s  {} denoiser calls\n", to_string(r.id), to_string(r.status),
                   r.wall_seconds, r.denoiser_evaluations);
    }
    if (m.overlap_skipped) {
        fmt::print(out, "overlay skipped: start and end hands overlap\n");
    }
    for (const std::string& w : m.warnings) {
        fmt::print(out, "warning: {}\n", w);
    }
    fmt::print(out, "run {} in {}\n", m.run_id, run_dir.string());
}

int run_stages(const Shared& s, const PipelineConfig& config, const std::vector<StageId>& stages, std::ostream& out) {
    const PipelineInputs inputs = resolve_inputs(s);
    RunOptions options;
    if (!s.run_dir.empty()) {
        options.run_dir = fs::path(s.run_dir);
    }
    if (!s.cache.empty()) {
        options.cache_root = fs::path(s.cache);
    }
    options.use_cache = !s.no_cache;
    Pipeline pipeline(config, inputs, options);
    {
        std::ofstream file(pipeline.run_dir() / kInputsFile);
        file << json{{"video", fs::absolute(inputs.video).string()}, {"style", fs::absolute(inputs.style).string()}}
                    .dump(2)
             << '\n';
    }
    const RunManifest manifest = pipeline.run_stages(stages);
    report(manifest, pipeline.run_dir(), out);
    return 0;
}

struct StylizeArgs {
    std::string image;
    std::string edges;
    std::string style;
    std::string out;  ///< --out in standalone mode
    std::string side = "start";
    std::optional<double> gamma;
    std::optional<double> delta;
    std::optional<double> beta;
    std::optional<double> guidance;
    std::optional<std::string> window;
    std::optional<std::string> prompt;
};

void apply(const StylizeArgs& a, StyleTransferConfig& c) {
    if (a.gamma) c.gamma = *a.gamma;
    if (a.delta) c.delta = *a.delta;
    if (a.beta) c.beta_contrast = *a.beta;
    if (a.guidance) c.guidance_scale = *a.guidance;
    if (a.window) c.injection_window = parse_window(*a.window);
    if (a.prompt) c.prompt = *a.prompt;
}

/// Stylizes one frame outside a run directory, with the same seeds the pipeline uses.
int stylize_files(const Shared& s, const StylizeArgs& a, std::ostream& out) {
    if (a.edges.empty() || a.style.empty() || a.out.empty()) {
        throw ConfigError("--image needs --edges, --style and --out");
    }
    PipelineConfig config = resolve_config(s);
    apply(a, config.style);
    config.style.validate(config.steps);
    const std::uint64_t k = a.side == "end" ? 1 : 0;

    const auto denoiser = make_backbone(config.backbone);
    Denoiser& d = *denoiser;
    const PromptEmbedding prompt = d.embed_prompt(config.style.prompt);
    const double g = config.style.guidance_scale;
    const LatentTrajectory style = invert(d, d.encode(read_image(a.style)), config.steps, prompt,
                                          {g, derive_seed(config.seed, 1), SourceTag::Style});
    const LatentTrajectory img = invert(d, d.encode(read_image(a.image)), config.steps, prompt,
                                        {g, derive_seed(config.seed, 10 + 2 * k), SourceTag::Img});
    const LatentTrajectory edges = invert(d, d.encode(to_rgb(read_gray(a.edges))), config.steps, prompt,
                                          {g, derive_seed(config.seed, 11 + 2 * k), SourceTag::Edges});
    const StylizeResult r = stylize_frame(d, img, edges, style, config.style,
                                          {true, derive_seed(config.seed, 20 + k),
                                           k == 0 ? SourceTag::Illustration1 : SourceTag::Illustration2});
    const fs::path dir(a.out);
    fs::create_directories(dir);
    write_png(dir / "illustration.png", r.image);
    save_trajectory(r.trajectory, dir / "latents");
    fmt::print(out, "{} attention blocks replaced\nwrote {}\n", r.injections, (dir / "illustration.png").string());
    return 0;
}

struct OverlayArgs {
    std::string ill1;
    std::string ill2;
    std::string hands1;
    std::string hands2;
    std::string arms1;
    std::string arms2;
    std::string out;  ///< --out in standalone mode
    std::optional<double> quantile;
    std::optional<std::string> window;
    std::optional<int> polish;
};

/// Accepts the latent directory itself or a `stylize --image` output directory.
fs::path latents_dir(const fs::path& dir) {
    return fs::exists(dir / "latents") ? dir / "latents" : dir;
}

int overlay_files(const Shared& s, const OverlayArgs& a, std::ostream& out) {
    if (a.ill2.empty() || a.hands1.empty() || a.hands2.empty() || a.arms1.empty() || a.arms2.empty() ||
        a.out.empty()) {
        throw ConfigError("--ill1 needs --ill2, --hands1, --hands2, --arms1, --arms2 and --out");
    }
    PipelineConfig config = resolve_config(s);
    if (a.quantile) config.overlay.quantile = *a.quantile;
    if (a.window) config.overlay.window = parse_window(*a.window);
    if (a.polish) config.overlay.polish_steps = *a.polish;
    config.overlay.validate(config.steps);

    const LatentTrajectory t1 = load_trajectory(latents_dir(a.ill1));
    const LatentTrajectory t2 = load_trajectory(latents_dir(a.ill2));
    const auto denoiser = make_backbone(config.backbone);
    const PreparedMasks prepared =
        prepare_masks(read_mask_png(a.hands1, MaskKind::Hands), read_mask_png(a.arms1, MaskKind::Arms),
                      read_mask_png(a.hands2, MaskKind::Hands), read_mask_png(a.arms2, MaskKind::Arms),
                      denoiser->info().latent_size, config.overlay);

    const fs::path dir(a.out);
    fs::create_directories(dir);
    write_mask_png(dir / "combined_1.png", prepared.masks.m1);
    write_mask_png(dir / "combined_2.png", prepared.masks.m2);
    json result{{"skipped", prepared.hands_overlap},
                {"reason", prepared.hands_overlap ? "overlap" : ""},
                {"compositions", 0},
                {"shared_arm_cells", prepared.shared_cells}};
    if (!prepared.hands_overlap) {
        try {
            const OverlayResult r = run_overlay(*denoiser, t1, t2, prepared.masks, config.overlay);
            write_png(dir / "overlay.png", r.image);
            result["compositions"] = r.compositions;
        } catch (const OverlapSkip&) {
            result["skipped"] = true;
            result["reason"] = "overlap";
        }
    }
    std::ofstream(dir / "result.json") << result.dump(2) << '\n';
    if (result["skipped"].get<bool>()) {
        fmt::print(out, "overlay skipped: start and end hands overlap\n");
    } else {
        fmt::print(out, "{} composed steps\nwrote {}\n", result["compositions"].get<std::size_t>(),
                   (dir / "overlay.png").string());
    }
    return 0;
}

struct EvalArgs {
    std::string pred;
    std::string gt;
    std::string frames;
    std::string manifest;
    std::string out = "report";
    std::string scorer_url;
    std::string scores;
    int threads = 0;
};

int evaluate(const Shared& s, const EvalArgs& a, std::ostream& out) {
    std::vector<EvalSample> samples;
    if (!a.manifest.empty()) {
        samples = load_eval_manifest(a.manifest);
    } else if (!a.pred.empty() && !a.gt.empty() && !a.frames.empty()) {
        samples = load_eval_directory(a.pred, a.gt, a.frames);
    } else {
        throw ConfigError("eval needs --manifest or all of --pred, --gt and --frames");
    }

    EvalContext context;
    std::unique_ptr<RemoteScorers> remote;
    std::unique_ptr<LpipsScorer> lpips;
    std::unique_ptr<ClipScorer> clip;
    if (!a.scorer_url.empty()) {
        remote = std::make_unique<RemoteScorers>(RemoteEndpoint{a.scorer_url});
        lpips = remote->lpips();
        clip = remote->clip();
    } else if (!a.scores.empty()) {
        lpips = std::make_unique<FixtureLpips>(FixtureScores(a.scores));
        clip = std::make_unique<FixtureClip>(FixtureScores(a.scores));
    }
    context.lpips = lpips.get();
    context.clip = clip.get();
    const PipelineConfig config = resolve_config(s);
    PerceptionAdapters perception = make_perception(config.perception);
    context.hands = perception.hands.get();

    const std::vector<EvalRecord> records = evaluate_samples(samples, context, a.threads);
    write_report(records, a.out);
    out << records_to_markdown(records);
    fmt::print(out, "\nwrote {} samples to {}\n", records.size(), a.out);
    return 0;
}

int status(const std::string& run_dir, std::ostream& out) {
    const RunManifest m = read_manifest(fs::path(run_dir) / "manifest.json");
    report(m, run_dir, out);
    const auto problems = verify_manifest(m, run_dir);
    for (const std::string& p : problems) {
        fmt::print(out, "stale: {}\n", p);
    }
    return problems.empty() ? 0 : 4;
}

} // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Sign-language video to sketch illustration pipeline", "illusign"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "illusign 0.1.0");
    bool verbose = false;
    bool quiet = false;
    app.add_flag("-v,--verbose", verbose, "Debug logging");
    app.add_flag("-q,--quiet", quiet, "Only log errors");

    Shared s;

    auto* run_cmd = app.add_subcommand("run", "Run every stage");
    add_run_options(run_cmd, s);
    std::optional<int> start;
    std::optional<int> end;
    bool skip_overlay = false;
    bool no_arrows = false;
    run_cmd->add_option("--start", start, "Manual start frame");
    run_cmd->add_option("--end", end, "Manual end frame");
    run_cmd->add_flag("--skip-overlay", skip_overlay, "Annotate the start illustration instead of an overlay");
    run_cmd->add_flag("--no-arrows", no_arrows, "Leave out the motion arrows");

    auto* segment_cmd = app.add_subcommand("segment", "Pick the start and end frames");
    add_run_options(segment_cmd, s);
    segment_cmd->add_option("--start", start, "Manual start frame");
    segment_cmd->add_option("--end", end, "Manual end frame");

    auto* stylize_cmd = app.add_subcommand("stylize", "Stylize the start and end frames of a run, or one image");
    add_run_options(stylize_cmd, s);
    StylizeArgs sa;
    stylize_cmd->add_option("--image", sa.image, "Frame to stylize (standalone mode)")->check(CLI::ExistingFile);
    stylize_cmd->add_option("--edges", sa.edges, "Edge map of the frame")->check(CLI::ExistingFile);
    stylize_cmd->add_option("--side", sa.side, "Seeds of the start or end frame")
        ->check(CLI::IsMember({"start", "end"}));
    stylize_cmd->add_option("--gamma", sa.gamma, "Image query weight");
    stylize_cmd->add_option("--delta", sa.delta, "Edge query weight");
    stylize_cmd->add_option("--beta", sa.beta, "Attention contrast");
    stylize_cmd->add_option("--guidance", sa.guidance, "Classifier-free guidance scale");
    stylize_cmd->add_option("--window", sa.window, "Injection window a:b");
    stylize_cmd->add_option("--prompt", sa.prompt, "Text prompt");

    auto* overlay_cmd = app.add_subcommand("overlay", "Fuse the two illustrations of a run, or two latent sets");
    add_run_options(overlay_cmd, s);
    OverlayArgs oa;
    overlay_cmd->add_flag("--skip-overlay", skip_overlay, "Record the overlay as skipped");
    overlay_cmd->add_option("--ill1", oa.ill1, "Start illustration latents")->check(CLI::ExistingDirectory);
    overlay_cmd->add_option("--ill2", oa.ill2, "End illustration latents")->check(CLI::ExistingDirectory);
    overlay_cmd->add_option("--hands1", oa.hands1, "Start hand mask")->check(CLI::ExistingFile);
    overlay_cmd->add_option("--hands2", oa.hands2, "End hand mask")->check(CLI::ExistingFile);
    overlay_cmd->add_option("--arms1", oa.arms1, "Start arm mask")->check(CLI::ExistingFile);
    overlay_cmd->add_option("--arms2", oa.arms2, "End arm mask")->check(CLI::ExistingFile);
    overlay_cmd->add_option("--quantile", oa.quantile, "Dissimilarity quantile");
    overlay_cmd->add_option("--window", oa.window, "Composition window a:b");
    overlay_cmd->add_option("--polish", oa.polish, "Extra steps after the window");

    auto* arrows_cmd = app.add_subcommand("arrows", "Track the hands and draw motion arrows");
    add_run_options(arrows_cmd, s);
    arrows_cmd->add_flag("--no-arrows", no_arrows, "Write final.png without arrows");

    auto* eval_cmd = app.add_subcommand("eval", "Score illustrations against ground truth");
    add_config_options(eval_cmd, s);
    EvalArgs ea;
    eval_cmd->add_option("--pred", ea.pred, "pred/<id>/{start,end}.png")->check(CLI::ExistingDirectory);
    eval_cmd->add_option("--gt", ea.gt, "gt/<id>.png")->check(CLI::ExistingDirectory);
    eval_cmd->add_option("--frames", ea.frames, "frames/<id>/{start,end}.png")->check(CLI::ExistingDirectory);
    eval_cmd->add_option("--manifest", ea.manifest, "JSON sample list")->check(CLI::ExistingFile);
    eval_cmd->add_option("-o,--out", ea.out, "Report directory")->capture_default_str();
    eval_cmd->add_option("--scorer-url", ea.scorer_url, "LPIPS / CLIP scoring server");
    eval_cmd->add_option("--scores", ea.scores, "Recorded LPIPS / CLIP scores")->check(CLI::ExistingDirectory);
    eval_cmd->add_option("-j,--threads", ea.threads, "Worker threads (0 = hardware)");

    auto* status_cmd = app.add_subcommand("status", "Show and verify a run directory");
    std::string status_dir;
    status_cmd->add_option("run_dir", status_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

    auto* config_cmd = app.add_subcommand("config", "Print the effective configuration");
    add_config_options(config_cmd, s);
    std::string config_out;
    config_cmd->add_option("-o,--out", config_out, "Write to this file instead of stdout");

    std::string host = "127.0.0.1";
    int port = 8600;
    auto* serve_backbone = app.add_subcommand("serve-backbone", "Serve the mock backbone over HTTP");
    add_config_options(serve_backbone, s);
    serve_backbone->add_option("--host", host, "Bind address")->capture_default_str();
    serve_backbone->add_option("--port", port, "Port")->capture_default_str();

    auto* serve_perception = app.add_subcommand("serve-perception", "Serve recorded perception fixtures over HTTP");
    add_config_options(serve_perception, s);
    serve_perception->add_option("--host", host, "Bind address")->capture_default_str();
    int perception_port = 8700;
    serve_perception->add_option("--port", perception_port, "Port")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }
    spdlog::set_level(verbose ? spdlog::level::debug : quiet ? spdlog::level::err : spdlog::level::info);

    try {
        if (*run_cmd || *segment_cmd) {
            PipelineConfig config = resolve_config(s);
            if (start) config.boundaries.start = *start;
            if (end) config.boundaries.end = *end;
            if (*segment_cmd) {
                return run_stages(s, config, {StageId::Segment}, out);
            }
            config.skip_overlay = config.skip_overlay || skip_overlay;
            config.draw_arrows = config.draw_arrows && !no_arrows;
            return run_stages(s, config, all_stages(), out);
        }
        if (*stylize_cmd) {
            if (!sa.image.empty()) {
                sa.style = s.style;
                sa.out = s.output_root;
                return stylize_files(s, sa, out);
            }
            PipelineConfig config = resolve_config(s);
            apply(sa, config.style);
            return run_stages(s, config, {StageId::Edges, StageId::Stylize}, out);
        }
        if (*overlay_cmd) {
            if (!oa.ill1.empty()) {
                oa.out = s.output_root;
                return overlay_files(s, oa, out);
            }
            PipelineConfig config = resolve_config(s);
            if (oa.quantile) config.overlay.quantile = *oa.quantile;
            if (oa.window) config.overlay.window = parse_window(*oa.window);
            if (oa.polish) config.overlay.polish_steps = *oa.polish;
            config.skip_overlay = config.skip_overlay || skip_overlay;
            return run_stages(s, config, {StageId::Masks, StageId::Overlay}, out);
        }
        if (*arrows_cmd) {
            PipelineConfig config = resolve_config(s);
            config.draw_arrows = config.draw_arrows && !no_arrows;
            return run_stages(s, config, {StageId::Keypoints, StageId::Arrows}, out);
        }
        if (*eval_cmd) {
            return evaluate(s, ea, out);
        }
        if (*status_cmd) {
            return status(status_dir, out);
        }
        if (*config_cmd) {
            const PipelineConfig config = resolve_config(s);
            config.validate();
            if (config_out.empty()) {
                out << config_to_json(config) << '\n';
            } else {
                save_config(config, config_out);
            }
            return 0;
        }
        if (*serve_backbone) {
            PipelineConfig config = resolve_config(s);
            config.backbone.kind = BackboneKind::Mock;
            const auto denoiser = make_backbone(config.backbone);
            BackboneServer server(*denoiser);
            fmt::print(out, "mock backbone on http://{}:{}\n", host, port);
            out.flush();
            server.listen(host, port);
            return 0;
        }
        if (*serve_perception) {
            PipelineConfig config = resolve_config(s);
            config.perception.mode = PerceptionMode::Fixture;
            PerceptionAdapters a = make_perception(config.perception);
            PerceptionServer server(a.segmenter.get(), a.edges.get(), a.hands.get(), a.arms.get(),
                                    a.keypoints.get());
            fmt::print(out, "perception fixtures from {} on http://{}:{}\n", config.perception.fixtures.string(),
                       host, perception_port);
            out.flush();
            server.listen(host, perception_port);
            return 0;
        }
    } catch (const Error& e) {
        fmt::print(err, "illusign: {} error: {}\n", to_string(e.kind()), e.what());
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        fmt::print(err, "illusign: {}\n", e.what());
        return 4;
    }
    return 0;
}

} // namespace illusign::cli
