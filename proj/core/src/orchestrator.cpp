#include "illusign/orchestrator.hpp"

#include "illusign/errors.hpp"
#include "illusign/hashing.hpp"
#include "illusign/inversion.hpp"
#include "illusign/rng.hpp"

#include <boost/interprocess/sync/file_lock.hpp>
#include <boost/interprocess/sync/scoped_lock.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <unistd.h>
#include <utility>

namespace illusign {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(BackboneKind kind) { return kind == BackboneKind::Mock ? "mock" : "remote"; }

BackboneKind parse_backbone_kind(std::string_view text) {
    if (text == "mock") {
        return BackboneKind::Mock;
    }
    if (text == "remote") {
        return BackboneKind::Remote;
    }
    throw ConfigError(fmt::format("unknown backbone kind '{}' (expected mock or remote)", text));
}

void PipelineConfig::validate() const {
    if (steps < 1 || steps > 1000) {
        throw ConfigError(fmt::format("steps must lie in [1, 1000], got {}", steps));
    }
    style.validate(steps);
    overlay.validate(steps);
    if (backbone.kind == BackboneKind::Remote && backbone.remote.url.empty()) {
        throw ConfigError("remote backbone needs a url");
    }
    if (boundaries.start && boundaries.end && *boundaries.start > *boundaries.end) {
        throw ConfigError("boundary override start is after end");
    }
    if (!(tracking.min_confidence >= 0.0 && tracking.min_confidence <= 1.0)) {
        throw ConfigError("tracking min_confidence must lie in [0, 1]");
    }
    if (tracking.max_interpolated_gap < 0) {
        throw ConfigError("tracking max_interpolated_gap must be non-negative");
    }
    if (!(tracking.max_missing_fraction >= 0.0 && tracking.max_missing_fraction <= 1.0)) {
        throw ConfigError("tracking max_missing_fraction must lie in [0, 1]");
    }
    if (arrows.samples < 2) {
        throw ConfigError("arrows need at least 2 samples per curve");
    }
    if (!(arrows.style.stroke_width > 0.0) || !(arrows.style.opacity >= 0.0 && arrows.style.opacity <= 1.0)) {
        throw ConfigError("arrow stroke width must be positive and opacity in [0, 1]");
    }
    if (!(arrows.motion_fraction >= 0.0)) {
        throw ConfigError("arrow motion fraction must be non-negative");
    }
    if (hand_prompt.empty()) {
        throw ConfigError("hand prompt is empty");
    }
}

// Config serialisation

namespace {

json endpoint_json(const RemoteEndpoint& e) {
    return {{"url", e.url}, {"pool_size", e.pool_size}, {"timeout_s", e.timeout.count()}};
}

json mock_json(const MockOptions& m) {
    return {{"seed", m.seed},
            {"heads", m.heads},
            {"latent_size", m.latent_size},
            {"head_channels", m.head_channels},
            {"latent_channels", m.latent_channels},
            {"pixel_scale", m.pixel_scale},
            {"timestep_count", m.timestep_count},
            {"decoder_layers", m.decoder_layers},
            {"encoder_layer", m.encoder_layer},
            {"attention_gain", m.attention_gain},
            {"embedding_dim", m.embedding_dim}};
}

json backbone_json(const BackboneConfig& b) {
    return {{"kind", to_string(b.kind)},
            {"remote", endpoint_json(b.remote)},
            {"mock", mock_json(b.mock)},
            {"resize_inputs", b.resize_inputs}};
}

json style_json(const StyleTransferConfig& s) {
    return {{"gamma", s.gamma},
            {"delta", s.delta},
            {"beta_contrast", s.beta_contrast},
            {"guidance_scale", s.guidance_scale},
            {"injection_window", format_window(s.injection_window)},
            {"adain", s.adain_enabled},
            {"prompt", s.prompt}};
}

json overlay_json(const OverlayConfig& o) {
    return {{"quantile", o.quantile},
            {"window", format_window(o.window)},
            {"downsample", to_string(o.downsample)},
            {"dilation_radius", o.dilation_radius},
            {"polish_steps", o.polish_steps},
            {"guidance_scale", o.guidance_scale},
            {"prompt", o.prompt}};
}

json perception_json(const PerceptionConfig& p) {
    return {{"mode", to_string(p.mode)}, {"fixtures", p.fixtures.string()}, {"remote", endpoint_json(p.remote)}};
}

json optional_int(const std::optional<int>& v) { return v ? json(*v) : json(nullptr); }

json boundaries_json(const BoundaryOverrides& b) {
    return {{"start", optional_int(b.start)}, {"end", optional_int(b.end)}};
}

json tracking_json(const TrackingOptions& t) {
    return {{"min_confidence", t.min_confidence},
            {"max_interpolated_gap", t.max_interpolated_gap},
            {"max_missing_fraction", t.max_missing_fraction}};
}

json arrows_json(const ArrowConfig& a) {
    return {{"color", {a.style.color.r, a.style.color.g, a.style.color.b}},
            {"stroke_width", a.style.stroke_width},
            {"head_length", a.style.head_length},
            {"head_width", a.style.head_width},
            {"opacity", a.style.opacity},
            {"samples", a.samples},
            {"motion_fraction", a.motion_fraction}};
}

json config_json(const PipelineConfig& c) {
    return {{"steps", c.steps},
            {"seed", c.seed},
            {"backbone", backbone_json(c.backbone)},
            {"style", style_json(c.style)},
            {"overlay", overlay_json(c.overlay)},
            {"perception", perception_json(c.perception)},
            {"boundaries", boundaries_json(c.boundaries)},
            {"tracking", tracking_json(c.tracking)},
            {"arrows", arrows_json(c.arrows)},
            {"hand_prompt", c.hand_prompt},
            {"skip_overlay", c.skip_overlay},
            {"draw_arrows", c.draw_arrows},
            {"output_root", c.output_root.string()}};
}

// Reads one JSON object, rejecting keys nobody asked for.
class Reader {
public:
    Reader(const json& j, std::string where) : m_j(j), m_where(std::move(where)) {
        if (!j.is_object()) {
            throw ConfigError(fmt::format("{} must be an object", m_where.empty() ? "config" : m_where));
        }
    }

    template <class T>
    void get(const char* key, T& out) {
        m_seen.insert(key);
        if (auto it = m_j.find(key); it != m_j.end()) {
            try {
                out = it->get<T>();
            } catch (const json::exception&) {
                throw ConfigError(fmt::format("config key {} has the wrong type", path(key)));
            }
        }
    }

    void get_optional(const char* key, std::optional<int>& out) {
        m_seen.insert(key);
        if (auto it = m_j.find(key); it != m_j.end()) {
            if (it->is_null()) {
                out.reset();
            } else if (it->is_number_integer()) {
                out = it->get<int>();
            } else {
                throw ConfigError(fmt::format("config key {} must be an integer or null", path(key)));
            }
        }
    }

    template <class F>
    void get_with(const char* key, F&& parse) {
        std::string text;
        get(key, text);
        if (m_j.contains(key)) {
            parse(text);
        }
    }

    template <class F>
    void object(const char* key, F&& read) {
        m_seen.insert(key);
        if (auto it = m_j.find(key); it != m_j.end()) {
            Reader sub(*it, path(key));
            read(sub);
            sub.finish();
        }
    }

    void finish() const {
        for (const auto& [k, v] : m_j.items()) {
            if (!m_seen.contains(k)) {
                throw ConfigError(fmt::format("unknown config key {}", path(k.c_str())));
            }
        }
    }

private:
    std::string path(const char* key) const { return m_where.empty() ? key : m_where + "." + key; }

    const json& m_j;
    std::string m_where;
    std::set<std::string> m_seen;
};

void read_endpoint(Reader& r, RemoteEndpoint& e) {
    r.get("url", e.url);
    r.get("pool_size", e.pool_size);
    long long timeout = e.timeout.count();
    r.get("timeout_s", timeout);
    e.timeout = std::chrono::seconds(timeout);
}

} // namespace

std::string config_to_json(const PipelineConfig& config) { return config_json(config).dump(2); }

PipelineConfig config_from_json(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("config is not valid JSON: {}", e.what()));
    }
    PipelineConfig c;
    Reader r(j, "");
    r.get("steps", c.steps);
    r.get("seed", c.seed);
    r.object("backbone", [&](Reader& b) {
        b.get_with("kind", [&](const std::string& s) { c.backbone.kind = parse_backbone_kind(s); });
        b.object("remote", [&](Reader& e) { read_endpoint(e, c.backbone.remote); });
        b.object("mock", [&](Reader& m) {
            auto& o = c.backbone.mock;
            m.get("seed", o.seed);
            m.get("heads", o.heads);
            m.get("latent_size", o.latent_size);
            m.get("head_channels", o.head_channels);
            m.get("latent_channels", o.latent_channels);
            m.get("pixel_scale", o.pixel_scale);
            m.get("timestep_count", o.timestep_count);
            m.get("decoder_layers", o.decoder_layers);
            m.get("encoder_layer", o.encoder_layer);
            m.get("attention_gain", o.attention_gain);
            m.get("embedding_dim", o.embedding_dim);
        });
        b.get("resize_inputs", c.backbone.resize_inputs);
    });
    r.object("style", [&](Reader& s) {
        s.get("gamma", c.style.gamma);
        s.get("delta", c.style.delta);
        s.get("beta_contrast", c.style.beta_contrast);
        s.get("guidance_scale", c.style.guidance_scale);
        s.get_with("injection_window", [&](const std::string& w) { c.style.injection_window = parse_window(w); });
        s.get("adain", c.style.adain_enabled);
        s.get("prompt", c.style.prompt);
    });
    r.object("overlay", [&](Reader& o) {
        o.get("quantile", c.overlay.quantile);
        o.get_with("window", [&](const std::string& w) { c.overlay.window = parse_window(w); });
        o.get_with("downsample", [&](const std::string& d) { c.overlay.downsample = parse_downsample_rule(d); });
        o.get("dilation_radius", c.overlay.dilation_radius);
        o.get("polish_steps", c.overlay.polish_steps);
        o.get("guidance_scale", c.overlay.guidance_scale);
        o.get("prompt", c.overlay.prompt);
    });
    r.object("perception", [&](Reader& p) {
        p.get_with("mode", [&](const std::string& m) { c.perception.mode = parse_perception_mode(m); });
        std::string fixtures = c.perception.fixtures.string();
        p.get("fixtures", fixtures);
        c.perception.fixtures = fixtures;
        p.object("remote", [&](Reader& e) { read_endpoint(e, c.perception.remote); });
    });
    r.object("boundaries", [&](Reader& b) {
        b.get_optional("start", c.boundaries.start);
        b.get_optional("end", c.boundaries.end);
    });
    r.object("tracking", [&](Reader& t) {
        t.get("min_confidence", c.tracking.min_confidence);
        t.get("max_interpolated_gap", c.tracking.max_interpolated_gap);
        t.get("max_missing_fraction", c.tracking.max_missing_fraction);
    });
    r.object("arrows", [&](Reader& a) {
        std::array<int, 3> color{c.arrows.style.color.r, c.arrows.style.color.g, c.arrows.style.color.b};
        a.get("color", color);
        for (int v : color) {
            if (v < 0 || v > 255) {
                throw ConfigError("arrows.color components must lie in [0, 255]");
            }
        }
        c.arrows.style.color = {static_cast<std::uint8_t>(color[0]), static_cast<std::uint8_t>(color[1]),
                                static_cast<std::uint8_t>(color[2])};
        a.get("stroke_width", c.arrows.style.stroke_width);
        a.get("head_length", c.arrows.style.head_length);
        a.get("head_width", c.arrows.style.head_width);
        a.get("opacity", c.arrows.style.opacity);
        a.get("samples", c.arrows.samples);
        a.get("motion_fraction", c.arrows.motion_fraction);
    });
    r.get("hand_prompt", c.hand_prompt);
    r.get("skip_overlay", c.skip_overlay);
    r.get("draw_arrows", c.draw_arrows);
    std::string root = c.output_root.string();
    r.get("output_root", root);
    c.output_root = root;
    r.finish();
    return c;
}

PipelineConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError(fmt::format("cannot read config {}", path.string()));
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return config_from_json(ss.str());
}

void save_config(const PipelineConfig& config, const fs::path& path) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::trunc);
    out << config_to_json(config) << "\n";
    if (!out) {
        throw IoError(fmt::format("cannot write {}", path.string()));
    }
}

std::unique_ptr<Denoiser> make_backbone(const BackboneConfig& config) {
    BackboneOptions options;
    options.resize_inputs = config.resize_inputs;
    if (config.kind == BackboneKind::Mock) {
        return std::make_unique<MockBackbone>(config.mock, options);
    }
    return std::make_unique<RemoteBackbone>(config.remote, options);
}

// Stages and manifest

namespace {

constexpr std::array<std::pair<StageId, const char*>, 7> kStageNames{{{StageId::Segment, "segment"},
                                                                       {StageId::Edges, "edges"},
                                                                       {StageId::Keypoints, "keypoints"},
                                                                       {StageId::Masks, "masks"},
                                                                       {StageId::Stylize, "stylize"},
                                                                       {StageId::Overlay, "overlay"},
                                                                       {StageId::Arrows, "arrows"}}};

constexpr std::array<std::pair<StageStatus, const char*>, 5> kStatusNames{{{StageStatus::Pending, "pending"},
                                                                           {StageStatus::Completed, "completed"},
                                                                           {StageStatus::Cached, "cached"},
                                                                           {StageStatus::Reused, "reused"},
                                                                           {StageStatus::Failed, "failed"}}};

} // namespace

const char* to_string(StageId stage) {
    for (const auto& [id, name] : kStageNames) {
        if (id == stage) {
            return name;
        }
    }
    return "?";
}

StageId parse_stage(std::string_view text) {
    for (const auto& [id, name] : kStageNames) {
        if (text == name) {
            return id;
        }
    }
    throw ConfigError(fmt::format("unknown stage '{}'", text));
}

const std::vector<StageId>& all_stages() {
    static const std::vector<StageId> stages = [] {
        std::vector<StageId> s;
        for (const auto& [id, name] : kStageNames) {
            s.push_back(id);
        }
        return s;
    }();
    return stages;
}

const char* to_string(StageStatus status) {
    for (const auto& [s, name] : kStatusNames) {
        if (s == status) {
            return name;
        }
    }
    return "?";
}

StageStatus parse_stage_status(std::string_view text) {
    for (const auto& [s, name] : kStatusNames) {
        if (text == name) {
            return s;
        }
    }
    throw ContractError(fmt::format("unknown stage status '{}'", text));
}

const StageRecord* RunManifest::stage(StageId id) const {
    for (const auto& s : stages) {
        if (s.id == id) {
            return &s;
        }
    }
    return nullptr;
}

StageRecord& RunManifest::stage(StageId id) {
    for (auto& s : stages) {
        if (s.id == id) {
            return s;
        }
    }
    stages.push_back({});
    stages.back().id = id;
    std::sort(stages.begin(), stages.end(), [](const StageRecord& a, const StageRecord& b) { return a.id < b.id; });
    for (auto& s : stages) {
        if (s.id == id) {
            return s;
        }
    }
    throw ContractError("unreachable");
}

bool RunManifest::complete() const {
    return std::all_of(all_stages().begin(), all_stages().end(), [&](StageId id) {
        const StageRecord* s = stage(id);
        return s != nullptr && s->done();
    });
}

std::map<std::string, std::string> RunManifest::artifact_hashes() const {
    std::map<std::string, std::string> out;
    for (const auto& s : stages) {
        if (s.done()) {
            for (const auto& a : s.artifacts) {
                out[a.path] = a.sha256;
            }
        }
    }
    return out;
}

std::string manifest_to_json(const RunManifest& m) {
    json stages = json::array();
    for (const auto& s : m.stages) {
        json artifacts = json::array();
        for (const auto& a : s.artifacts) {
            artifacts.push_back({{"path", a.path}, {"sha256", a.sha256}});
        }
        json rec = {{"name", to_string(s.id)},
                    {"status", to_string(s.status)},
                    {"cache_key", s.cache_key},
                    {"wall_seconds", s.wall_seconds},
                    {"denoiser_evaluations", s.denoiser_evaluations},
                    {"artifacts", artifacts}};
        if (!s.error.empty()) {
            rec["error"] = s.error;
        }
        stages.push_back(std::move(rec));
    }
    json config = m.config_json.empty() ? json::object() : json::parse(m.config_json);
    return json{{"run_id", m.run_id},
                {"config", config},
                {"inputs", {{"video", m.video_hash}, {"style", m.style_hash}}},
                {"stages", stages},
                {"overlap_skipped", m.overlap_skipped},
                {"relabeled_frames", m.relabeled_frames},
                {"warnings", m.warnings}}
        .dump(2);
}

RunManifest manifest_from_json(std::string_view text) {
    RunManifest m;
    try {
        const json j = json::parse(text);
        m.run_id = j.at("run_id").get<std::string>();
        m.config_json = j.at("config").dump(2);
        m.video_hash = j.at("inputs").at("video").get<std::string>();
        m.style_hash = j.at("inputs").at("style").get<std::string>();
        for (const auto& s : j.at("stages")) {
            StageRecord rec;
            rec.id = parse_stage(s.at("name").get<std::string>());
            rec.status = parse_stage_status(s.at("status").get<std::string>());
            rec.cache_key = s.at("cache_key").get<std::string>();
            rec.wall_seconds = s.at("wall_seconds").get<double>();
            rec.denoiser_evaluations = s.at("denoiser_evaluations").get<std::size_t>();
            for (const auto& a : s.at("artifacts")) {
                rec.artifacts.push_back({a.at("path").get<std::string>(), a.at("sha256").get<std::string>()});
            }
            rec.error = s.value("error", "");
            m.stages.push_back(std::move(rec));
        }
        m.overlap_skipped = j.at("overlap_skipped").get<bool>();
        m.relabeled_frames = j.at("relabeled_frames").get<std::vector<int>>();
        m.warnings = j.at("warnings").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw ContractError(fmt::format("malformed run manifest: {}", e.what()));
    }
    return m;
}

RunManifest read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError(fmt::format("cannot read {}", path.string()));
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return manifest_from_json(ss.str());
}

std::vector<std::string> verify_manifest(const RunManifest& manifest, const fs::path& run_dir) {
    std::vector<std::string> problems;
    for (const auto& s : manifest.stages) {
        if (!s.done()) {
            continue;
        }
        if (s.artifacts.empty()) {
            problems.push_back(fmt::format("stage {} lists no artifacts", to_string(s.id)));
        }
        for (const auto& a : s.artifacts) {
            const fs::path p = run_dir / a.path;
            if (!fs::exists(p)) {
                problems.push_back(fmt::format("{}: missing {}", to_string(s.id), a.path));
            } else if (sha256_tree(p) != a.sha256) {
                problems.push_back(fmt::format("{}: {} does not match its recorded hash", to_string(s.id), a.path));
            }
        }
    }
    return problems;
}

fs::path default_cache_root() {
    if (const char* env = std::getenv("ILLUSIGN_CACHE"); env != nullptr && *env != '\0') {
        return env;
    }
    if (const char* xdg = std::getenv("XDG_CACHE_HOME"); xdg != nullptr && *xdg != '\0') {
        return fs::path(xdg) / "illusign";
    }
    if (const char* home = std::getenv("HOME"); home != nullptr && *home != '\0') {
        return fs::path(home) / ".cache" / "illusign";
    }
    return fs::temp_directory_path() / "illusign-cache";
}

// Pipeline

namespace {

constexpr const char* kStageVersion = "1";

void copy_tree(const fs::path& from, const fs::path& to) {
    if (to.has_parent_path()) {
        fs::create_directories(to.parent_path());
    }
    fs::remove_all(to);
    if (fs::is_directory(from)) {
        fs::copy(from, to, fs::copy_options::recursive);
    } else {
        fs::copy_file(from, to);
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        out << text;
        if (!text.empty() && text.back() != '\n') {
            out << "\n";
        }
        if (!out) {
            throw IoError(fmt::format("cannot write {}", path.string()));
        }
    }
    fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError(fmt::format("cannot read {}", path.string()));
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ContractError(fmt::format("malformed {}: {}", path.string(), e.what()));
    }
}

struct Artifact {
    std::string path;
    bool optional = false;
};

/// The files a stage may read and must write, rooted in a private work directory.
class StageIO {
public:
    StageIO(StageId id, fs::path work, std::vector<Artifact> inputs, std::vector<Artifact> outputs)
        : m_id(id), m_work(std::move(work)), m_inputs(std::move(inputs)), m_outputs(std::move(outputs)) {}

    fs::path in_dir() const { return m_work / "in"; }
    fs::path out_dir() const { return m_work / "out"; }

    fs::path input(std::string_view rel) const {
        find(m_inputs, rel, "input");
        return in_dir() / rel;
    }
    bool has_input(std::string_view rel) const { return fs::exists(input(rel)); }

    fs::path output(std::string_view rel) const {
        find(m_outputs, rel, "output");
        const fs::path p = out_dir() / rel;
        fs::create_directories(p.parent_path());
        return p;
    }

private:
    void find(const std::vector<Artifact>& list, std::string_view rel, const char* what) const {
        for (const auto& a : list) {
            if (a.path == rel) {
                return;
            }
        }
        throw StageError(to_string(m_id), fmt::format("'{}' is not a declared {}", rel, what));
    }

    StageId m_id;
    fs::path m_work;
    std::vector<Artifact> m_inputs;
    std::vector<Artifact> m_outputs;
};

struct StageDef {
    StageId id;
    std::vector<StageId> deps;
    std::vector<Artifact> inputs;
    std::vector<Artifact> outputs;
    json key;
    std::function<void(const StageIO&)> body;
};

const char* side_name(int side) { return side == 0 ? "start" : "end"; }

json curve_json(const SplineCurve& c) {
    json control = json::array();
    for (const auto& p : c.control) {
        control.push_back({p.x, p.y});
    }
    return {{"degree", c.degree}, {"knots", c.knots}, {"control", control}, {"fit_mse", c.fit_mse}};
}

SplineCurve curve_from_json(const json& j) {
    SplineCurve c;
    c.degree = j.at("degree").get<int>();
    c.knots = j.at("knots").get<std::vector<double>>();
    for (const auto& p : j.at("control")) {
        c.control.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    }
    c.fit_mse = j.at("fit_mse").get<double>();
    return c;
}

} // namespace

struct Pipeline::Impl {
    PipelineConfig config;
    PipelineInputs inputs;
    RunOptions options;
    PipelineServices services;

    std::unique_ptr<Denoiser> owned_denoiser;
    std::optional<PerceptionAdapters> owned_perception;
    std::unique_ptr<FrameSource> video;
    std::optional<Image> style;

    std::string run_id;
    fs::path run_dir;
    fs::path cache_root;
    RunManifest manifest;
    std::size_t evaluations = 0;

    Denoiser& denoiser() {
        if (services.denoiser) {
            return services.denoiser();
        }
        if (!owned_denoiser) {
            owned_denoiser = make_backbone(config.backbone);
        }
        return *owned_denoiser;
    }

    PerceptionAdapters& perception() {
        if (services.perception != nullptr) {
            return *services.perception;
        }
        if (!owned_perception) {
            owned_perception = make_perception(config.perception);
        }
        return *owned_perception;
    }

    const FrameSource& frames() {
        if (!video) {
            video = open_frames(inputs.video);
        }
        return *video;
    }

    const Image& style_image() {
        if (!style) {
            style = read_image(inputs.style);
        }
        return *style;
    }

    fs::path manifest_path() const { return run_dir / "manifest.json"; }

    void save_manifest() const { write_text(manifest_path(), manifest_to_json(manifest)); }

    StageDef define(StageId id) {
        const json perception_key = perception_json(config.perception);
        const json backbone_key = backbone_json(config.backbone);
        switch (id) {
        case StageId::Segment:
            return {id,
                    {},
                    {},
                    {{"boundaries.json"}, {"frames/start.png"}, {"frames/end.png"}},
                    {{"video", manifest.video_hash},
                     {"boundaries", boundaries_json(config.boundaries)},
                     {"min_frames", kMinSegmentableFrames},
                     {"perception", perception_key}},
                    [this](const StageIO& io) { segment(io); }};
        case StageId::Edges:
            return {id,
                    {StageId::Segment},
                    {{"frames/start.png"}, {"frames/end.png"}},
                    {{"edges/start.png"}, {"edges/end.png"}},
                    {{"perception", perception_key}},
                    [this](const StageIO& io) { edges(io); }};
        case StageId::Keypoints:
            return {id,
                    {StageId::Segment},
                    {{"boundaries.json"}},
                    {{"trajectories/tracks.json"}, {"trajectories/curves.json"}, {"trajectories/tracking.json"}},
                    {{"video", manifest.video_hash},
                     {"tracking", tracking_json(config.tracking)},
                     {"motion_fraction", config.arrows.motion_fraction},
                     {"perception", perception_key}},
                    [this](const StageIO& io) { keypoints(io); }};
        case StageId::Masks: {
            std::vector<Artifact> outs;
            for (const char* name : {"hands", "arms", "combined"}) {
                for (int side = 0; side < 2; ++side) {
                    outs.push_back({fmt::format("masks/{}_{}.png", name, side_name(side))});
                }
            }
            outs.push_back({"masks/overlap.json"});
            return {id,
                    {StageId::Segment},
                    {{"frames/start.png"}, {"frames/end.png"}},
                    outs,
                    {{"hand_prompt", config.hand_prompt},
                     {"downsample", to_string(config.overlay.downsample)},
                     {"dilation_radius", config.overlay.dilation_radius},
                     {"backbone", backbone_key},
                     {"perception", perception_key}},
                    [this](const StageIO& io) { masks(io); }};
        }
        case StageId::Stylize:
            return {id,
                    {StageId::Segment, StageId::Edges},
                    {{"frames/start.png"}, {"frames/end.png"}, {"edges/start.png"}, {"edges/end.png"}},
                    {{"illustrations/start.png"},
                     {"illustrations/end.png"},
                     {"illustrations/start_latents"},
                     {"illustrations/end_latents"}},
                    {{"style_image", manifest.style_hash},
                     {"steps", config.steps},
                     {"seed", config.seed},
                     {"style", style_json(config.style)},
                     {"backbone", backbone_key}},
                    [this](const StageIO& io) { stylize(io); }};
        case StageId::Overlay:
            return {id,
                    {StageId::Masks, StageId::Stylize},
                    {{"illustrations/start_latents"},
                     {"illustrations/end_latents"},
                     {"masks/combined_start.png"},
                     {"masks/combined_end.png"},
                     {"masks/overlap.json"}},
                    {{"overlay/result.json"}, {"overlay/overlay.png", true}},
                    {{"overlay", overlay_json(config.overlay)},
                     {"skip_overlay", config.skip_overlay},
                     {"steps", config.steps},
                     {"backbone", backbone_key}},
                    [this](const StageIO& io) { overlay(io); }};
        case StageId::Arrows: {
            std::vector<Artifact> outs{{"final.png"}, {"arrows/arrows.json"}};
            if (config.draw_arrows) {
                outs.push_back({"arrows/arrows.svg"});
            }
            return {id,
                    {StageId::Keypoints, StageId::Stylize, StageId::Overlay},
                    {{"trajectories/curves.json"},
                     {"illustrations/start.png"},
                     {"overlay/result.json"},
                     {"overlay/overlay.png", true}},
                    outs,
                    {{"arrows", arrows_json(config.arrows)}, {"draw_arrows", config.draw_arrows}},
                    [this](const StageIO& io) { arrows(io); }};
        }
        }
        throw ContractError("unknown stage");
    }

    // Stage bodies

    void segment(const StageIO& io) {
        const FrameSource& video = frames();
        const SignBoundaries b = segment_sign(video, perception().segmenter.get(), config.boundaries);
        write_boundaries(io.output("boundaries.json"), b);
        write_png(io.output("frames/start.png"), video.frame(b.start_frame));
        write_png(io.output("frames/end.png"), video.frame(b.end_frame));
    }

    void edges(const StageIO& io) {
        for (int side = 0; side < 2; ++side) {
            const Image frame = read_image(io.input(fmt::format("frames/{}.png", side_name(side))));
            write_png(io.output(fmt::format("edges/{}.png", side_name(side))),
                      extract_edges(frame, perception().edges.get()));
        }
    }

    void keypoints(const StageIO& io) {
        const FrameSource& video = frames();
        const SignBoundaries b = read_boundaries(io.input("boundaries.json"));
        const TrackingResult r = track_keypoints(video, b, perception().keypoints.get(), config.tracking);
        write_tracks(io.output("trajectories/tracks.json"), r.tracks);
        const Image first = video.frame(b.start_frame);
        json curves = json::array();
        for (const auto& t : r.tracks) {
            if (t.samples.size() < 2) {
                continue;
            }
            const auto points = t.points();
            json c = curve_json(fit_bspline(points));
            c["hand"] = t.hand;
            c["samples"] = t.samples.size();
            c["moving"] = has_motion(t, first.width, first.height, config.arrows.motion_fraction);
            curves.push_back(std::move(c));
        }
        write_text(io.output("trajectories/curves.json"), curves.dump(2));
        write_text(io.output("trajectories/tracking.json"),
                   json{{"relabeled_frames", r.relabeled_frames}, {"warnings", r.warnings}}.dump(2));
    }

    void masks(const StageIO& io) {
        const int size = denoiser().info().latent_size;
        SpatialMask hands[2];
        SpatialMask arms[2];
        for (int side = 0; side < 2; ++side) {
            const Image frame = read_image(io.input(fmt::format("frames/{}.png", side_name(side))));
            const auto found = hand_masks(frame, config.hand_prompt, perception().hands.get());
            hands[side] = found.empty() ? SpatialMask::zeros(frame.height, frame.width, MaskKind::Hands)
                                        : union_masks(found, MaskKind::Hands);
            arms[side] = arm_masks(frame, perception().arms.get());
            write_mask_png(io.output(fmt::format("masks/hands_{}.png", side_name(side))), hands[side]);
            write_mask_png(io.output(fmt::format("masks/arms_{}.png", side_name(side))), arms[side]);
        }
        const PreparedMasks prepared = prepare_masks(hands[0], arms[0], hands[1], arms[1], size, config.overlay);
        write_mask_png(io.output("masks/combined_start.png"), prepared.masks.m1);
        write_mask_png(io.output("masks/combined_end.png"), prepared.masks.m2);
        write_text(io.output("masks/overlap.json"),
                   json{{"hands_overlap", prepared.hands_overlap}, {"shared_arm_cells", prepared.shared_cells}}.dump(2));
    }

    void stylize(const StageIO& io) {
        Denoiser& d = denoiser();
        const PromptEmbedding prompt = d.embed_prompt(config.style.prompt);
        const double g = config.style.guidance_scale;
        const LatentTrajectory style_traj =
            invert(d, d.encode(style_image()), config.steps, prompt, {g, derive_seed(config.seed, 1), SourceTag::Style});
        for (int side = 0; side < 2; ++side) {
            const auto k = static_cast<std::uint64_t>(side);
            const Image frame = read_image(io.input(fmt::format("frames/{}.png", side_name(side))));
            const GrayImage edge = read_gray(io.input(fmt::format("edges/{}.png", side_name(side))));
            const LatentTrajectory img =
                invert(d, d.encode(frame), config.steps, prompt, {g, derive_seed(config.seed, 10 + 2 * k), SourceTag::Img});
            const LatentTrajectory edg = invert(d, d.encode(to_rgb(edge)), config.steps, prompt,
                                                {g, derive_seed(config.seed, 11 + 2 * k), SourceTag::Edges});
            const StylizeResult r =
                stylize_frame(d, img, edg, style_traj, config.style,
                              {true, derive_seed(config.seed, 20 + k),
                               side == 0 ? SourceTag::Illustration1 : SourceTag::Illustration2});
            write_png(io.output(fmt::format("illustrations/{}.png", side_name(side))), r.image);
            save_trajectory(r.trajectory, io.output(fmt::format("illustrations/{}_latents", side_name(side))));
        }
    }

    void overlay(const StageIO& io) {
        json result{{"skipped", false}, {"reason", ""}, {"compositions", 0}};
        const bool overlap = read_json(io.input("masks/overlap.json")).at("hands_overlap").get<bool>();
        if (config.skip_overlay) {
            result["skipped"] = true;
            result["reason"] = "disabled";
        } else if (overlap) {
            result["skipped"] = true;
            result["reason"] = "overlap";
        } else {
            const LatentTrajectory t1 = load_trajectory(io.input("illustrations/start_latents"));
            const LatentTrajectory t2 = load_trajectory(io.input("illustrations/end_latents"));
            const OverlayMasks masks{read_mask_png(io.input("masks/combined_start.png"), MaskKind::CombinedStart),
                                     read_mask_png(io.input("masks/combined_end.png"), MaskKind::CombinedEnd)};
            try {
                const OverlayResult r = run_overlay(denoiser(), t1, t2, masks, config.overlay);
                write_png(io.output("overlay/overlay.png"), r.image);
                result["compositions"] = r.compositions;
            } catch (const OverlapSkip&) {
                result["skipped"] = true;
                result["reason"] = "overlap";
            }
        }
        if (result["skipped"].get<bool>()) {
            spdlog::info("overlay skipped ({}); arrows go on the start illustration",
                         result["reason"].get<std::string>());
        }
        write_text(io.output("overlay/result.json"), result.dump(2));
    }

    void arrows(const StageIO& io) {
        const bool overlaid = io.has_input("overlay/overlay.png");
        const Image base = read_image(overlaid ? io.input("overlay/overlay.png") : io.input("illustrations/start.png"));
        json info{{"base", overlaid ? "overlay" : "start"}, {"arrow_count", 0}};
        Image final_image = base;
        if (config.draw_arrows) {
            std::vector<std::vector<Point2>> lines;
            for (const auto& c : read_json(io.input("trajectories/curves.json"))) {
                if (c.at("moving").get<bool>()) {
                    lines.push_back(sample_curve(curve_from_json(c), config.arrows.samples));
                }
            }
            const ArrowDocument doc = render_arrows(lines, config.arrows.style, base.width, base.height);
            write_text(io.output("arrows/arrows.svg"), doc.svg);
            final_image = composite(base, doc);
            info["arrow_count"] = doc.arrow_count;
        }
        write_png(io.output("final.png"), final_image);
        write_text(io.output("arrows/arrows.json"), info.dump(2));
    }

    // Execution

    std::string cache_key(const StageDef& def) const {
        json inputs = json::object();
        for (const auto& a : def.inputs) {
            const fs::path p = run_dir / a.path;
            inputs[a.path] = fs::exists(p) ? sha256_tree(p) : "";
        }
        const json material{{"stage", to_string(def.id)}, {"version", kStageVersion}, {"inputs", inputs},
                            {"config", def.key}};
        return sha256_hex(material.dump());
    }

    std::vector<ArtifactRecord> hash_outputs(const StageDef& def, const fs::path& root) const {
        std::vector<ArtifactRecord> out;
        for (const auto& a : def.outputs) {
            const fs::path p = root / a.path;
            if (fs::exists(p)) {
                out.push_back({a.path, sha256_tree(p)});
            } else if (!a.optional) {
                throw StageError(to_string(def.id), fmt::format("declared output {} was not produced", a.path));
            }
        }
        return out;
    }

    void check_no_strays(const StageDef& def, const fs::path& out) const {
        for (auto it = fs::recursive_directory_iterator(out); it != fs::recursive_directory_iterator(); ++it) {
            if (!it->is_regular_file()) {
                continue;
            }
            const std::string rel = fs::relative(it->path(), out).generic_string();
            const bool declared = std::any_of(def.outputs.begin(), def.outputs.end(), [&](const Artifact& a) {
                return rel == a.path || rel.starts_with(a.path + "/");
            });
            if (!declared) {
                throw StageError(to_string(def.id), fmt::format("wrote undeclared file {}", rel));
            }
        }
    }

    void install(const StageDef& def, const fs::path& from, const std::vector<ArtifactRecord>& artifacts) const {
        for (const auto& a : def.outputs) {
            fs::remove_all(run_dir / a.path);
        }
        for (const auto& a : artifacts) {
            copy_tree(from / a.path, run_dir / a.path);
        }
    }

    bool reusable(const StageDef& def, const std::string& key) const {
        const StageRecord* prev = manifest.stage(def.id);
        if (prev == nullptr || !prev->done() || prev->cache_key != key) {
            return false;
        }
        for (const auto& a : prev->artifacts) {
            const fs::path p = run_dir / a.path;
            if (!fs::exists(p) || sha256_tree(p) != a.sha256) {
                return false;
            }
        }
        return true;
    }

    std::optional<std::vector<ArtifactRecord>> cache_lookup(const StageDef& def, const fs::path& entry) const {
        const fs::path meta = entry / "entry.json";
        if (!fs::exists(meta)) {
            return std::nullopt;
        }
        try {
            std::vector<ArtifactRecord> artifacts;
            const json listing = read_json(meta);
            for (const auto& a : listing.at("artifacts")) {
                ArtifactRecord r{a.at("path").get<std::string>(), a.at("sha256").get<std::string>()};
                if (!fs::exists(entry / r.path) || sha256_tree(entry / r.path) != r.sha256) {
                    spdlog::warn("cache entry {} is corrupt; recomputing {}", entry.string(), to_string(def.id));
                    return std::nullopt;
                }
                artifacts.push_back(std::move(r));
            }
            return artifacts;
        } catch (const std::exception& e) {
            spdlog::warn("unreadable cache entry {}: {}", entry.string(), e.what());
            return std::nullopt;
        }
    }

    void cache_store(const fs::path& entry, const fs::path& from, const std::vector<ArtifactRecord>& artifacts) const {
        const fs::path tmp = entry.string() + fmt::format(".tmp{}", ::getpid());
        fs::remove_all(tmp);
        json list = json::array();
        for (const auto& a : artifacts) {
            copy_tree(from / a.path, tmp / a.path);
            list.push_back({{"path", a.path}, {"sha256", a.sha256}});
        }
        write_text(tmp / "entry.json", json{{"artifacts", list}}.dump(2));
        fs::remove_all(entry);
        fs::rename(tmp, entry);
    }

    std::vector<ArtifactRecord> execute(const StageDef& def) {
        const fs::path work = run_dir / ".work" / to_string(def.id);
        fs::remove_all(work);
        StageIO io(def.id, work, def.inputs, def.outputs);
        fs::create_directories(io.in_dir());
        fs::create_directories(io.out_dir());
        for (const auto& a : def.inputs) {
            const fs::path src = run_dir / a.path;
            if (fs::exists(src)) {
                copy_tree(src, io.in_dir() / a.path);
            } else if (!a.optional) {
                throw StageError(to_string(def.id), fmt::format("input {} is missing", a.path));
            }
        }
        const std::size_t before = services.denoiser || owned_denoiser ? denoiser().evaluations() : 0;
        def.body(io);
        const std::size_t after = services.denoiser || owned_denoiser ? denoiser().evaluations() : 0;
        manifest.stage(def.id).denoiser_evaluations = after - before;
        evaluations += after - before;
        check_no_strays(def, io.out_dir());
        auto artifacts = hash_outputs(def, io.out_dir());
        if (options.use_cache) {
            cache_store(cache_root / to_string(def.id) / manifest.stage(def.id).cache_key, io.out_dir(), artifacts);
        }
        install(def, io.out_dir(), artifacts);
        fs::remove_all(work);
        return artifacts;
    }

    void run_one(StageId id) {
        const StageDef def = define(id);
        for (StageId dep : def.deps) {
            const StageRecord* r = std::as_const(manifest).stage(dep);
            if (r == nullptr || !r->done()) {
                throw StageError(to_string(id), fmt::format("stage '{}' has not completed in {}", to_string(dep),
                                                            run_dir.string()));
            }
        }
        const std::string key = cache_key(def);
        if (reusable(def, key)) {
            manifest.stage(id).status = StageStatus::Reused;
            manifest.stage(id).denoiser_evaluations = 0;
            spdlog::info("{}: up to date", to_string(id));
            return;
        }
        const auto started = std::chrono::steady_clock::now();
        StageRecord& rec = manifest.stage(id);
        rec = StageRecord{};
        rec.id = id;
        rec.cache_key = key;
        try {
            if (options.use_cache) {
                const fs::path dir = cache_root / to_string(id);
                fs::create_directories(dir);
                const fs::path lock_path = dir / (key + ".lock");
                std::ofstream(lock_path, std::ios::app).close();
                boost::interprocess::file_lock lock(lock_path.c_str());
                boost::interprocess::scoped_lock guard(lock);
                if (auto hit = cache_lookup(def, dir / key)) {
                    install(def, dir / key, *hit);
                    rec.artifacts = *hit;
                    rec.status = StageStatus::Cached;
                } else {
                    rec.artifacts = execute(def);
                    rec.status = StageStatus::Completed;
                }
            } else {
                rec.artifacts = execute(def);
                rec.status = StageStatus::Completed;
            }
        } catch (const Error& e) {
            fail(id, e.what());
            throw;
        } catch (const std::exception& e) {
            fail(id, e.what());
            throw StageError(to_string(id), e.what());
        }
        manifest.stage(id).wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        spdlog::info("{}: {} ({:.2f} s)", to_string(id), to_string(manifest.stage(id).status),
                     manifest.stage(id).wall_seconds);
    }

    void fail(StageId id, const std::string& message) {
        StageRecord& rec = manifest.stage(id);
        rec.status = StageStatus::Failed;
        rec.artifacts.clear();
        rec.error = message;
        spdlog::error("{}: {}", to_string(id), message);
        save_manifest();
    }

    void refresh_facts() {
        manifest.overlap_skipped = false;
        manifest.relabeled_frames.clear();
        manifest.warnings.clear();
        auto done = [&](StageId id) {
            const StageRecord* r = std::as_const(manifest).stage(id);
            return r != nullptr && r->done();
        };
        if (done(StageId::Overlay)) {
            const json r = read_json(run_dir / "overlay/result.json");
            manifest.overlap_skipped = r.at("reason").get<std::string>() == "overlap";
        }
        if (done(StageId::Keypoints)) {
            const json t = read_json(run_dir / "trajectories/tracking.json");
            manifest.relabeled_frames = t.at("relabeled_frames").get<std::vector<int>>();
            manifest.warnings = t.at("warnings").get<std::vector<std::string>>();
        }
    }
};

Pipeline::Pipeline(PipelineConfig config, PipelineInputs inputs, RunOptions options, PipelineServices services)
    : m_impl(std::make_unique<Impl>()) {
    config.validate();
    Impl& p = *m_impl;
    p.config = std::move(config);
    p.inputs = std::move(inputs);
    p.options = std::move(options);
    p.services = std::move(services);

    if (!fs::exists(p.inputs.video)) {
        throw IoError(fmt::format("video {} does not exist", p.inputs.video.string()));
    }
    p.manifest.video_hash = p.frames().content_hash();
    p.manifest.style_hash = content_hash(p.style_image());

    json identity = config_json(p.config);
    identity.erase("output_root");
    p.manifest.config_json = config_json(p.config).dump(2);
    p.run_id = sha256_hex(json{{"config", identity}, {"video", p.manifest.video_hash}, {"style", p.manifest.style_hash}}
                              .dump())
                   .substr(0, 12);
    p.manifest.run_id = p.run_id;
    p.run_dir = p.options.run_dir ? *p.options.run_dir : p.config.output_root / p.run_id;
    p.cache_root = p.options.cache_root ? *p.options.cache_root : default_cache_root();
    fs::create_directories(p.run_dir);

    if (fs::exists(p.manifest_path())) {
        try {
            const RunManifest prev = read_manifest(p.manifest_path());
            p.manifest.stages = prev.stages;
        } catch (const Error& e) {
            spdlog::warn("ignoring unreadable manifest in {}: {}", p.run_dir.string(), e.what());
        }
    }
}

Pipeline::~Pipeline() = default;

const std::string& Pipeline::run_id() const { return m_impl->run_id; }
const fs::path& Pipeline::run_dir() const { return m_impl->run_dir; }
const PipelineConfig& Pipeline::config() const { return m_impl->config; }
std::size_t Pipeline::denoising_steps() const { return m_impl->evaluations; }

RunManifest Pipeline::run() { return run_stages(all_stages()); }

RunManifest Pipeline::run_stages(std::span<const StageId> stages) {
    Impl& p = *m_impl;
    const fs::path lock_path = p.run_dir / ".lock";
    std::ofstream(lock_path, std::ios::app).close();
    boost::interprocess::file_lock lock(lock_path.c_str());
    boost::interprocess::scoped_lock guard(lock);

    for (StageId id : all_stages()) {
        if (std::find(stages.begin(), stages.end(), id) == stages.end()) {
            continue;
        }
        p.run_one(id);
        p.refresh_facts();
        p.save_manifest();
    }
    fs::remove_all(p.run_dir / ".work");
    return p.manifest;
}

} // namespace illusign
