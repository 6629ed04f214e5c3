#include "illusign/perception.hpp"

#include "illusign/errors.hpp"
#include "illusign/hashing.hpp"

#include "http_pool.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>
#include <opencv2/videoio.hpp>
#include <spdlog/spdlog.h>

namespace illusign {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(fmt::format("cannot read {}", path.string()));
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, std::string_view text) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) {
        throw IoError(fmt::format("cannot write {}", path.string()));
    }
}

json parse_json(std::string_view text, std::string_view what) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw ContractError(fmt::format("malformed {}: {}", what, e.what()));
    }
}

bool is_image_file(const fs::path& path) {
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

void check_mask_size(const SpatialMask& mask, const Image& image, std::string_view what) {
    if (mask.width != image.width || mask.height != image.height) {
        throw AdapterError(fmt::format("{} mask is {}x{}, image is {}x{}", what, mask.width, mask.height,
                                       image.width, image.height));
    }
    if (!mask.is_binary()) {
        throw AdapterError(fmt::format("{} mask is not binary", what));
    }
}

std::span<const std::uint8_t> as_bytes(const std::string& s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

std::string as_string(const std::vector<std::uint8_t>& bytes) {
    return {bytes.begin(), bytes.end()};
}

} // namespace

const char* to_string(BoundarySource source) {
    return source == BoundarySource::Model ? "model" : "manual_override";
}

BoundarySource parse_boundary_source(std::string_view text) {
    if (text == "model") {
        return BoundarySource::Model;
    }
    if (text == "manual_override" || text == "manual") {
        return BoundarySource::ManualOverride;
    }
    throw ConfigError(fmt::format("unknown boundary source '{}'", text));
}

void SignBoundaries::validate(int frame_count) const {
    if (start_frame < 0) {
        throw ConfigError(fmt::format("start frame {} is negative", start_frame));
    }
    if (start_frame >= end_frame) {
        throw ConfigError(fmt::format("degenerate boundaries: start {} is not before end {}", start_frame, end_frame));
    }
    if (end_frame >= frame_count) {
        throw ConfigError(fmt::format("end frame {} is outside a {}-frame video", end_frame, frame_count));
    }
}

std::string boundaries_to_json(const SignBoundaries& b) {
    return json{{"start_frame", b.start_frame}, {"end_frame", b.end_frame}, {"source", to_string(b.source)}}.dump(2);
}

SignBoundaries boundaries_from_json(std::string_view text) {
    const json j = parse_json(text, "boundaries");
    try {
        SignBoundaries b;
        b.start_frame = j.at("start_frame").get<int>();
        b.end_frame = j.at("end_frame").get<int>();
        b.source = parse_boundary_source(j.value("source", "model"));
        return b;
    } catch (const json::exception& e) {
        throw ContractError(fmt::format("malformed boundaries: {}", e.what()));
    }
}

void write_boundaries(const fs::path& path, const SignBoundaries& b) {
    write_file(path, boundaries_to_json(b) + "\n");
}

SignBoundaries read_boundaries(const fs::path& path) {
    return boundaries_from_json(read_file(path));
}

// Frame sources

std::string FrameSource::content_hash() const {
    if (m_hash.empty()) {
        Sha256 h;
        h.update("frames");
        h.update_u64(static_cast<std::uint64_t>(frame_count()));
        for (int i = 0; i < frame_count(); ++i) {
            h.update(illusign::content_hash(frame(i)));
        }
        m_hash = h.hex();
    }
    return m_hash;
}

void FrameSource::check_index(int index) const {
    if (index < 0 || index >= frame_count()) {
        throw ContractError(fmt::format("frame {} is outside a {}-frame video", index, frame_count()));
    }
}

InMemoryFrames::InMemoryFrames(std::vector<Image> frames, double fps) : m_frames(std::move(frames)), m_fps(fps) {}

Image InMemoryFrames::frame(int index) const {
    check_index(index);
    return m_frames[static_cast<std::size_t>(index)];
}

ImageSequenceSource::ImageSequenceSource(const fs::path& directory, double fps) : m_fps(fps) {
    if (!fs::is_directory(directory)) {
        throw IoError(fmt::format("{} is not a directory", directory.string()));
    }
    for (const auto& entry : fs::directory_iterator(directory)) {
        if (entry.is_regular_file() && is_image_file(entry.path())) {
            m_files.push_back(entry.path());
        }
    }
    std::sort(m_files.begin(), m_files.end());
    if (m_files.empty()) {
        throw IoError(fmt::format("no image frames in {}", directory.string()));
    }
}

Image ImageSequenceSource::frame(int index) const {
    check_index(index);
    return read_image(m_files[static_cast<std::size_t>(index)]);
}

VideoFileSource::VideoFileSource(const fs::path& path) {
    if (!fs::is_regular_file(path)) {
        throw IoError(fmt::format("video {} does not exist", path.string()));
    }
    cv::VideoCapture capture(path.string());
    if (!capture.isOpened()) {
        throw IoError(fmt::format("cannot decode video {}", path.string()));
    }
    const double fps = capture.get(cv::CAP_PROP_FPS);
    if (fps > 0) {
        m_fps = fps;
    }
    cv::Mat bgr;
    while (capture.read(bgr)) {
        cv::Mat rgb;
        cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
        Image img;
        img.width = rgb.cols;
        img.height = rgb.rows;
        img.rgb.assign(rgb.data, rgb.data + rgb.total() * 3);
        m_frames.push_back(std::move(img));
    }
    if (m_frames.empty()) {
        throw IoError(fmt::format("video {} has no decodable frames", path.string()));
    }
}

Image VideoFileSource::frame(int index) const {
    check_index(index);
    return m_frames[static_cast<std::size_t>(index)];
}

std::unique_ptr<FrameSource> open_frames(const fs::path& path) {
    if (fs::is_directory(path)) {
        return std::make_unique<ImageSequenceSource>(path);
    }
    return std::make_unique<VideoFileSource>(path);
}

std::string detections_to_json(const std::vector<FrameDetection>& detections) {
    json arr = json::array();
    for (const auto& d : detections) {
        arr.push_back({{"frame", d.frame}, {"hand", d.hand}, {"x", d.x}, {"y", d.y}, {"confidence", d.confidence}});
    }
    return arr.dump();
}

std::vector<FrameDetection> detections_from_json(std::string_view text) {
    const json arr = parse_json(text, "detections");
    std::vector<FrameDetection> out;
    try {
        for (const auto& j : arr) {
            out.push_back({j.at("frame").get<int>(), j.at("hand").get<std::string>(), j.at("x").get<double>(),
                           j.at("y").get<double>(), j.value("confidence", 1.0)});
        }
    } catch (const json::exception& e) {
        throw ContractError(fmt::format("malformed detections: {}", e.what()));
    }
    return out;
}

GrayImage GradientEdges::extract(const Image& image) {
    if (image.empty()) {
        throw ContractError("cannot extract edges from an empty image");
    }
    const GrayImage gray = to_gray(image);
    cv::Mat src(gray.height, gray.width, CV_8UC1, const_cast<std::uint8_t*>(gray.pixels.data()));
    cv::Mat gx;
    cv::Mat gy;
    cv::Sobel(src, gx, CV_32F, 1, 0, 3, 1.0, 0.0, cv::BORDER_REPLICATE);
    cv::Sobel(src, gy, CV_32F, 0, 1, 3, 1.0, 0.0, cv::BORDER_REPLICATE);
    cv::Mat mag;
    cv::magnitude(gx, gy, mag);
    GrayImage out = GrayImage::filled(gray.width, gray.height, 255);
    for (int y = 0; y < gray.height; ++y) {
        const float* row = mag.ptr<float>(y);
        for (int x = 0; x < gray.width; ++x) {
            const double v = 255.0 - row[x] / m_gain;
            out.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
    }
    return out;
}

// Fixtures

std::string prompt_slug(std::string_view prompt) {
    std::string out;
    for (unsigned char c : prompt) {
        out += std::isalnum(c) ? static_cast<char>(std::tolower(c)) : '_';
    }
    return out.empty() ? "_" : out;
}

fs::path FixtureStore::entry(std::string_view adapter, std::string_view hash) const {
    return m_root / adapter / hash;
}

fs::path FixtureStore::require(std::string_view adapter, std::string_view hash) const {
    fs::path dir = entry(adapter, hash);
    if (!fs::is_directory(dir)) {
        throw AdapterError(fmt::format("no {} fixture for input {} (expected {})", adapter, hash.substr(0, 12),
                                       dir.string()));
    }
    return dir;
}

void FixtureStore::put_boundaries(const FrameSource& video, const SignBoundaries& b) const {
    write_boundaries(entry("segmenter", video.content_hash()) / "boundaries.json", b);
}

void FixtureStore::put_edges(const Image& image, const GrayImage& edges) const {
    const fs::path dir = entry("edges", content_hash(image));
    fs::create_directories(dir);
    write_png(dir / "edges.png", edges);
}

void FixtureStore::put_hand_masks(const Image& image, std::string_view prompt,
                                  const std::vector<SpatialMask>& masks) const {
    const fs::path dir = entry("hands", content_hash(image)) / prompt_slug(prompt);
    fs::remove_all(dir);
    fs::create_directories(dir);
    for (std::size_t i = 0; i < masks.size(); ++i) {
        write_mask_png(dir / fmt::format("mask_{:02}.png", i), masks[i]);
    }
}

void FixtureStore::put_arm_mask(const Image& frame, const SpatialMask& mask) const {
    const fs::path dir = entry("arms", content_hash(frame));
    fs::create_directories(dir);
    write_mask_png(dir / "mask.png", mask);
}

void FixtureStore::put_detections(const FrameSource& video, const std::vector<FrameDetection>& detections) const {
    write_file(entry("keypoints", video.content_hash()) / "detections.json", detections_to_json(detections));
}

SignBoundaries FixtureSegmenter::segment(const FrameSource& video) {
    SignBoundaries b = read_boundaries(m_store.require("segmenter", video.content_hash()) / "boundaries.json");
    b.source = BoundarySource::Model;
    return b;
}

GrayImage FixtureEdges::extract(const Image& image) {
    return read_gray(m_store.require("edges", content_hash(image)) / "edges.png");
}

std::vector<SpatialMask> FixtureHands::segment(const Image& image, std::string_view prompt) {
    const fs::path dir = m_store.require("hands", content_hash(image)) / prompt_slug(prompt);
    if (!fs::is_directory(dir)) {
        throw AdapterError(fmt::format("hand fixture has no entry for prompt '{}'", prompt));
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() == ".png") {
            files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    std::vector<SpatialMask> masks;
    for (const auto& f : files) {
        masks.push_back(read_mask_png(f, MaskKind::Hands));
    }
    return masks;
}

SpatialMask FixtureArms::segment(const Image& frame) {
    return read_mask_png(m_store.require("arms", content_hash(frame)) / "mask.png", MaskKind::Arms);
}

std::vector<FrameDetection> FixtureKeypoints::detect(const FrameSource& video, const SignBoundaries& b) {
    auto all = detections_from_json(read_file(m_store.require("keypoints", video.content_hash()) / "detections.json"));
    std::erase_if(all, [&](const FrameDetection& d) { return d.frame < b.start_frame || d.frame > b.end_frame; });
    return all;
}

// Remote adapters

struct RemotePerception::Pool : detail::HttpPool {
    using HttpPool::HttpPool;
};

namespace {

using PoolPtr = std::shared_ptr<RemotePerception::Pool>;

httplib::MultipartFormDataItems frame_parts(const FrameSource& video) {
    httplib::MultipartFormDataItems items;
    for (int i = 0; i < video.frame_count(); ++i) {
        items.push_back({"frame", as_string(encode_png(video.frame(i))), fmt::format("{:05}.png", i), "image/png"});
    }
    return items;
}

InMemoryFrames frames_from_request(const httplib::Request& req) {
    std::vector<Image> frames;
    for (const auto& part : req.get_file_values("frame")) {
        frames.push_back(decode_image(as_bytes(part.content)));
    }
    if (frames.empty()) {
        throw ContractError("request carries no frames");
    }
    return InMemoryFrames(std::move(frames));
}

class RemoteSegmenter final : public SignSegmenter {
public:
    explicit RemoteSegmenter(PoolPtr pool) : m_pool(std::move(pool)) {}
    SignBoundaries segment(const FrameSource& video) override {
        auto client = m_pool->acquire();
        auto res = client->Post("/v1/segment", frame_parts(video));
        m_pool->check(res, "sign segmentation");
        SignBoundaries b = boundaries_from_json(res->body);
        b.source = BoundarySource::Model;
        return b;
    }

private:
    PoolPtr m_pool;
};

class RemoteEdges final : public EdgeExtractor {
public:
    explicit RemoteEdges(PoolPtr pool) : m_pool(std::move(pool)) {}
    GrayImage extract(const Image& image) override {
        auto client = m_pool->acquire();
        auto res = client->Post("/v1/edges", as_string(encode_png(image)), "image/png");
        m_pool->check(res, "edge extraction");
        return decode_gray(as_bytes(res->body));
    }

private:
    PoolPtr m_pool;
};

class RemoteHands final : public HandSegmenter {
public:
    explicit RemoteHands(PoolPtr pool) : m_pool(std::move(pool)) {}
    std::vector<SpatialMask> segment(const Image& image, std::string_view prompt) override {
        auto client = m_pool->acquire();
        const std::string path = "/v1/hands?prompt=" + httplib::detail::encode_query_param(std::string(prompt));
        auto res = client->Post(path, as_string(encode_png(image)), "image/png");
        m_pool->check(res, "hand segmentation");
        const json j = parse_json(res->body, "hand masks");
        std::vector<SpatialMask> masks;
        for (const auto& m : j.at("masks")) {
            masks.push_back(decode_mask_png(base64_decode(m.get<std::string>()), MaskKind::Hands));
        }
        return masks;
    }

private:
    PoolPtr m_pool;
};

class RemoteArms final : public ArmSegmenter {
public:
    explicit RemoteArms(PoolPtr pool) : m_pool(std::move(pool)) {}
    SpatialMask segment(const Image& frame) override {
        auto client = m_pool->acquire();
        auto res = client->Post("/v1/arms", as_string(encode_png(frame)), "image/png");
        m_pool->check(res, "arm segmentation");
        return decode_mask_png(as_bytes(res->body), MaskKind::Arms);
    }

private:
    PoolPtr m_pool;
};

class RemoteKeypoints final : public KeypointDetector {
public:
    explicit RemoteKeypoints(PoolPtr pool) : m_pool(std::move(pool)) {}
    std::vector<FrameDetection> detect(const FrameSource& video, const SignBoundaries& b) override {
        auto client = m_pool->acquire();
        const std::string path = fmt::format("/v1/keypoints?start={}&end={}", b.start_frame, b.end_frame);
        auto res = client->Post(path, frame_parts(video));
        m_pool->check(res, "keypoint tracking");
        return detections_from_json(res->body);
    }

private:
    PoolPtr m_pool;
};

} // namespace

RemotePerception::RemotePerception(const RemoteEndpoint& endpoint)
    : m_pool(std::make_shared<Pool>(endpoint.url, endpoint.pool_size, endpoint.timeout)) {}

RemotePerception::~RemotePerception() = default;

std::unique_ptr<SignSegmenter> RemotePerception::segmenter() const { return std::make_unique<RemoteSegmenter>(m_pool); }
std::unique_ptr<EdgeExtractor> RemotePerception::edges() const { return std::make_unique<RemoteEdges>(m_pool); }
std::unique_ptr<HandSegmenter> RemotePerception::hands() const { return std::make_unique<RemoteHands>(m_pool); }
std::unique_ptr<ArmSegmenter> RemotePerception::arms() const { return std::make_unique<RemoteArms>(m_pool); }
std::unique_ptr<KeypointDetector> RemotePerception::keypoints() const {
    return std::make_unique<RemoteKeypoints>(m_pool);
}

// Server

struct PerceptionServer::Impl {
    SignSegmenter* segmenter;
    EdgeExtractor* edges;
    HandSegmenter* hands;
    ArmSegmenter* arms;
    KeypointDetector* keypoints;
    std::mutex model_mutex;  // one request in flight per model handle
    httplib::Server server;
    std::thread thread;

    template <class F>
    void handle(httplib::Response& res, bool available, F&& body) {
        if (!available) {
            res.status = 501;
            res.set_content(R"({"error":"not_implemented"})", "application/json");
            return;
        }
        try {
            std::lock_guard lock(model_mutex);
            body();
        } catch (const Error& e) {
            const bool caller = e.kind() == ErrorKind::Contract || e.kind() == ErrorKind::Configuration;
            res.status = caller ? 422 : 502;
            res.set_content(json{{"error", to_string(e.kind())}, {"message", e.what()}}.dump(), "application/json");
        } catch (const std::exception& e) {
            res.status = 500;
            res.set_content(json{{"error", "internal"}, {"message", e.what()}}.dump(), "application/json");
        }
    }

    void routes() {
        server.Get("/v1/health", [](const httplib::Request&, httplib::Response& res) {
            res.set_content("ok", "text/plain");
        });
        server.Post("/v1/segment", [this](const httplib::Request& req, httplib::Response& res) {
            handle(res, segmenter != nullptr, [&] {
                const auto frames = frames_from_request(req);
                res.set_content(boundaries_to_json(segmenter->segment(frames)), "application/json");
            });
        });
        server.Post("/v1/edges", [this](const httplib::Request& req, httplib::Response& res) {
            handle(res, edges != nullptr, [&] {
                const GrayImage out = edges->extract(decode_image(as_bytes(req.body)));
                res.set_content(as_string(encode_png(out)), "image/png");
            });
        });
        server.Post("/v1/hands", [this](const httplib::Request& req, httplib::Response& res) {
            handle(res, hands != nullptr, [&] {
                json masks = json::array();
                for (const auto& m : hands->segment(decode_image(as_bytes(req.body)), req.get_param_value("prompt"))) {
                    masks.push_back(base64_encode(encode_mask_png(m)));
                }
                res.set_content(json{{"masks", masks}}.dump(), "application/json");
            });
        });
        server.Post("/v1/arms", [this](const httplib::Request& req, httplib::Response& res) {
            handle(res, arms != nullptr, [&] {
                const SpatialMask m = arms->segment(decode_image(as_bytes(req.body)));
                res.set_content(as_string(encode_mask_png(m)), "image/png");
            });
        });
        server.Post("/v1/keypoints", [this](const httplib::Request& req, httplib::Response& res) {
            handle(res, keypoints != nullptr, [&] {
                const auto frames = frames_from_request(req);
                SignBoundaries b;
                try {
                    b.start_frame = std::stoi(req.get_param_value("start"));
                    b.end_frame = std::stoi(req.get_param_value("end"));
                } catch (const std::logic_error&) {
                    throw ContractError("keypoint request needs integer start and end parameters");
                }
                res.set_content(detections_to_json(keypoints->detect(frames, b)), "application/json");
            });
        });
    }
};

PerceptionServer::PerceptionServer(SignSegmenter* segmenter, EdgeExtractor* edges, HandSegmenter* hands,
                                   ArmSegmenter* arms, KeypointDetector* keypoints)
    : m_impl(std::make_unique<Impl>()) {
    m_impl->segmenter = segmenter;
    m_impl->edges = edges;
    m_impl->hands = hands;
    m_impl->arms = arms;
    m_impl->keypoints = keypoints;
    m_impl->server.set_keep_alive_timeout(2);
    m_impl->server.set_tcp_nodelay(true);
    m_impl->routes();
}

PerceptionServer::~PerceptionServer() { stop(); }

int PerceptionServer::start(const std::string& host, int port) {
    const int bound = port == 0 ? m_impl->server.bind_to_any_port(host) : port;
    if (port != 0 && !m_impl->server.bind_to_port(host, port)) {
        throw IoError(fmt::format("cannot bind {}:{}", host, port));
    }
    if (bound < 0) {
        throw IoError(fmt::format("cannot bind {}", host));
    }
    m_impl->thread = std::thread([this] { m_impl->server.listen_after_bind(); });
    m_impl->server.wait_until_ready();
    return bound;
}

void PerceptionServer::listen(const std::string& host, int port) {
    if (!m_impl->server.listen(host, port)) {
        throw IoError(fmt::format("cannot listen on {}:{}", host, port));
    }
}

void PerceptionServer::stop() {
    m_impl->server.stop();
    if (m_impl->thread.joinable()) {
        m_impl->thread.join();
    }
}

// Configuration

const char* to_string(PerceptionMode mode) {
    switch (mode) {
    case PerceptionMode::Fixture:
        return "fixture";
    case PerceptionMode::Remote:
        return "remote";
    case PerceptionMode::Offline:
        return "offline";
    }
    return "?";
}

PerceptionMode parse_perception_mode(std::string_view text) {
    for (auto m : {PerceptionMode::Fixture, PerceptionMode::Remote, PerceptionMode::Offline}) {
        if (text == to_string(m)) {
            return m;
        }
    }
    throw ConfigError(fmt::format("unknown perception mode '{}'", text));
}

bool fixtures_forced() {
    const char* v = std::getenv("ILLUSIGN_FIXTURES");
    return v != nullptr && std::string_view(v) == "1";
}

PerceptionAdapters make_perception(const PerceptionConfig& config) {
    PerceptionMode mode = config.mode;
    if (fixtures_forced() && mode != PerceptionMode::Fixture) {
        spdlog::info("ILLUSIGN_FIXTURES=1: using fixture adapters instead of {} mode", to_string(mode));
        mode = PerceptionMode::Fixture;
    }
    PerceptionAdapters a;
    if (mode == PerceptionMode::Fixture) {
        FixtureStore store(config.fixtures);
        a.segmenter = std::make_unique<FixtureSegmenter>(store);
        a.edges = std::make_unique<FixtureEdges>(store);
        a.hands = std::make_unique<FixtureHands>(store);
        a.arms = std::make_unique<FixtureArms>(store);
        a.keypoints = std::make_unique<FixtureKeypoints>(store);
    } else if (mode == PerceptionMode::Remote) {
        RemotePerception remote(config.remote);
        a.segmenter = remote.segmenter();
        a.edges = remote.edges();
        a.hands = remote.hands();
        a.arms = remote.arms();
        a.keypoints = remote.keypoints();
    }
    return a;
}

// Operations

SignBoundaries segment_sign(const FrameSource& video, SignSegmenter* model, const BoundaryOverrides& overrides,
                            int min_model_frames) {
    const int n = video.frame_count();
    if (overrides.start && overrides.end) {
        SignBoundaries b{*overrides.start, *overrides.end, BoundarySource::ManualOverride};
        b.validate(n);
        return b;
    }
    if (n < min_model_frames) {
        throw ConfigError(fmt::format("video has {} frames; segmentation is unreliable below {} frames, pass both "
                                      "--start and --end",
                                      n, min_model_frames));
    }
    if (model == nullptr) {
        throw ConfigError("no segmentation model is configured; pass both --start and --end");
    }
    SignBoundaries b;
    try {
        b = model->segment(video);
    } catch (const AdapterError& e) {
        throw AdapterError(fmt::format("{}; pass both --start and --end to continue without the model", e.what()));
    }
    b.source = BoundarySource::Model;
    if (overrides.start || overrides.end) {
        b.start_frame = overrides.start.value_or(b.start_frame);
        b.end_frame = overrides.end.value_or(b.end_frame);
        b.source = BoundarySource::ManualOverride;
    }
    b.validate(n);
    return b;
}

GrayImage extract_edges(const Image& image, EdgeExtractor* adapter) {
    GradientEdges fallback;
    if (adapter == nullptr) {
        spdlog::warn("no edge model configured; using gradient edges");
        return fallback.extract(image);
    }
    try {
        GrayImage edges = adapter->extract(image);
        if (edges.width != image.width || edges.height != image.height) {
            throw AdapterError(fmt::format("edge map is {}x{}, image is {}x{}", edges.width, edges.height,
                                           image.width, image.height));
        }
        return edges;
    } catch (const AdapterError& e) {
        spdlog::warn("edge model failed ({}); using gradient edges", e.what());
        return fallback.extract(image);
    }
}

std::vector<SpatialMask> hand_masks(const Image& image, std::string_view prompt, HandSegmenter* adapter) {
    if (prompt.empty()) {
        throw ConfigError("hand segmentation prompt is empty");
    }
    if (adapter == nullptr) {
        throw AdapterError("no hand segmentation model is configured");
    }
    std::vector<SpatialMask> out;
    for (auto& m : adapter->segment(image, prompt)) {
        check_mask_size(m, image, "hand");
        if (!m.empty()) {
            m.kind = MaskKind::Hands;
            out.push_back(std::move(m));
        }
    }
    return out;
}

SpatialMask arm_masks(const Image& frame, ArmSegmenter* adapter) {
    if (adapter == nullptr) {
        throw AdapterError("no arm segmentation model is configured");
    }
    SpatialMask m = adapter->segment(frame);
    check_mask_size(m, frame, "arm");
    m.kind = MaskKind::Arms;
    return m;
}

const KeypointTrack* TrackingResult::track(std::string_view hand) const {
    for (const auto& t : tracks) {
        if (t.hand == hand) {
            return &t;
        }
    }
    return nullptr;
}

TrackingResult track_keypoints(const FrameSource& video, const SignBoundaries& boundaries, KeypointDetector* detector,
                               const TrackingOptions& options) {
    boundaries.validate(video.frame_count());
    if (detector == nullptr) {
        throw AdapterError("no keypoint model is configured");
    }
    return assemble_tracks(detector->detect(video, boundaries), boundaries, options);
}

TrackingResult assemble_tracks(std::vector<FrameDetection> detections, const SignBoundaries& b,
                               const TrackingOptions& options) {
    if (b.start_frame >= b.end_frame || b.start_frame < 0) {
        throw ConfigError(fmt::format("degenerate boundaries {}..{}", b.start_frame, b.end_frame));
    }
    if (options.max_interpolated_gap < 0 || options.max_missing_fraction < 0 || options.max_missing_fraction > 1) {
        throw ConfigError("invalid tracking options");
    }
    static constexpr const char* kHands[2] = {"left", "right"};
    auto label_of = [](const std::string& hand) { return hand == "left" ? 0 : (hand == "right" ? 1 : -1); };

    std::map<int, std::vector<FrameDetection>> by_frame;
    for (auto& d : detections) {
        if (d.frame < b.start_frame || d.frame > b.end_frame || !std::isfinite(d.x) || !std::isfinite(d.y) ||
            !(d.confidence >= options.min_confidence)) {
            continue;
        }
        d.x = std::clamp(d.x, 0.0, 1.0);
        d.y = std::clamp(d.y, 0.0, 1.0);
        by_frame[d.frame].push_back(d);
    }

    TrackingResult result;
    std::vector<KeypointSample> samples[2];
    std::optional<Point2> last[2];
    auto dist = [](const std::optional<Point2>& p, const FrameDetection& d) {
        return std::hypot(p->x - d.x, p->y - d.y);
    };

    for (auto& [frame, dets] : by_frame) {
        std::stable_sort(dets.begin(), dets.end(),
                         [](const FrameDetection& a, const FrameDetection& c) { return a.confidence > c.confidence; });
        if (dets.size() > 2) {
            dets.resize(2);
        }
        int hand[2] = {-1, -1};
        if (dets.size() == 2) {
            const int l0 = label_of(dets[0].hand);
            const int l1 = label_of(dets[1].hand);
            hand[0] = l0 >= 0 ? l0 : (l1 >= 0 ? 1 - l1 : 0);
            hand[1] = 1 - hand[0];
            if (last[0] && last[1]) {
                const double keep = dist(last[hand[0]], dets[0]) + dist(last[hand[1]], dets[1]);
                const double swap = dist(last[hand[1]], dets[0]) + dist(last[hand[0]], dets[1]);
                if (swap < keep) {
                    std::swap(hand[0], hand[1]);
                }
            }
        } else {
            const int l = label_of(dets[0].hand);
            if (l >= 0) {
                hand[0] = l;
            } else if (last[0] && last[1]) {
                hand[0] = dist(last[0], dets[0]) <= dist(last[1], dets[0]) ? 0 : 1;
            } else {
                hand[0] = last[1] && !last[0] ? 1 : 0;
            }
        }
        bool relabeled = false;
        for (std::size_t i = 0; i < dets.size(); ++i) {
            const int h = hand[i];
            relabeled = relabeled || label_of(dets[i].hand) != h;
            samples[h].push_back({frame, dets[i].x, dets[i].y});
            last[h] = Point2{dets[i].x, dets[i].y};
        }
        if (relabeled) {
            result.relabeled_frames.push_back(frame);
        }
    }

    const int span = b.frame_span();
    for (int h = 0; h < 2; ++h) {
        if (samples[h].empty()) {
            continue;
        }
        KeypointTrack track{kHands[h], {}};
        const double missing = static_cast<double>(span - static_cast<int>(samples[h].size())) / span;
        if (missing > options.max_missing_fraction) {
            result.warnings.push_back(fmt::format("{} hand found in {} of {} frames; track dropped", kHands[h],
                                                  samples[h].size(), span));
            spdlog::warn(result.warnings.back());
            result.tracks.push_back(std::move(track));
            continue;
        }
        for (std::size_t i = 0; i < samples[h].size(); ++i) {
            if (i > 0) {
                const auto& a = samples[h][i - 1];
                const auto& c = samples[h][i];
                const int gap = c.frame - a.frame - 1;
                if (gap > 0 && gap <= options.max_interpolated_gap) {
                    for (int k = 1; k <= gap; ++k) {
                        const double s = static_cast<double>(k) / (gap + 1);
                        track.samples.push_back({a.frame + k, a.x + s * (c.x - a.x), a.y + s * (c.y - a.y)});
                    }
                }
            }
            track.samples.push_back(samples[h][i]);
        }
        result.tracks.push_back(std::move(track));
    }
    if (!result.relabeled_frames.empty()) {
        result.warnings.push_back(fmt::format("hand labels reassigned by nearest-neighbour continuation in {} frames",
                                              result.relabeled_frames.size()));
    }
    return result;
}

} // namespace illusign
