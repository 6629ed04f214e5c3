#pragma once

#include "illusign/image.hpp"
#include "illusign/mask.hpp"
#include "illusign/remote.hpp"
#include "illusign/trajectory.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace illusign {

enum class BoundarySource { Model, ManualOverride };

const char* to_string(BoundarySource source);
BoundarySource parse_boundary_source(std::string_view text);

/// Sign stroke span: first frame after preparation, last frame before retraction.
struct SignBoundaries {
    int start_frame = 0;
    int end_frame = 0;
    BoundarySource source = BoundarySource::Model;

    /// Throws ConfigError unless 0 <= start < end < frame_count.
    void validate(int frame_count) const;
    int frame_span() const { return end_frame - start_frame + 1; }

    friend bool operator==(const SignBoundaries&, const SignBoundaries&) = default;
};

std::string boundaries_to_json(const SignBoundaries& boundaries);
SignBoundaries boundaries_from_json(std::string_view text);
void write_boundaries(const std::filesystem::path& path, const SignBoundaries& boundaries);
SignBoundaries read_boundaries(const std::filesystem::path& path);

/// Random-access decoded frames at native frame rate.
class FrameSource {
public:
    virtual ~FrameSource() = default;

    virtual int frame_count() const = 0;
    virtual Image frame(int index) const = 0;
    virtual double fps() const { return 25.0; }

    /// SHA-256 over the frame count and every frame's pixel hash. Cached after the first call.
    std::string content_hash() const;

protected:
    void check_index(int index) const;

private:
    mutable std::string m_hash;
};

class InMemoryFrames final : public FrameSource {
public:
    explicit InMemoryFrames(std::vector<Image> frames, double fps = 25.0);

    int frame_count() const override { return static_cast<int>(m_frames.size()); }
    Image frame(int index) const override;
    double fps() const override { return m_fps; }

private:
    std::vector<Image> m_frames;
    double m_fps;
};

/// Directory of still images (png, jpg, jpeg, bmp) ordered by file name. Frames load lazily.
class ImageSequenceSource final : public FrameSource {
public:
    explicit ImageSequenceSource(const std::filesystem::path& directory, double fps = 25.0);

    int frame_count() const override { return static_cast<int>(m_files.size()); }
    Image frame(int index) const override;
    double fps() const override { return m_fps; }

    const std::vector<std::filesystem::path>& files() const { return m_files; }

private:
    std::vector<std::filesystem::path> m_files;
    double m_fps;
};

/// Any container OpenCV can decode. All frames are decoded when the file is opened.
class VideoFileSource final : public FrameSource {
public:
    explicit VideoFileSource(const std::filesystem::path& path);

    int frame_count() const override { return static_cast<int>(m_frames.size()); }
    Image frame(int index) const override;
    double fps() const override { return m_fps; }

private:
    std::vector<Image> m_frames;
    double m_fps = 25.0;
};

/// Directory -> image sequence, file -> video.
std::unique_ptr<FrameSource> open_frames(const std::filesystem::path& path);

/// One fingertip detection as reported by a keypoint model, before filtering.
struct FrameDetection {
    int frame = 0;
    std::string hand;  ///< "left" or "right" as labelled by the model
    double x = 0.0;
    double y = 0.0;
    double confidence = 1.0;

    friend bool operator==(const FrameDetection&, const FrameDetection&) = default;
};

std::string detections_to_json(const std::vector<FrameDetection>& detections);
std::vector<FrameDetection> detections_from_json(std::string_view text);

// Adapter interfaces. Implementations are stateless per call.

class SignSegmenter {
public:
    virtual ~SignSegmenter() = default;
    virtual SignBoundaries segment(const FrameSource& video) = 0;
};

class EdgeExtractor {
public:
    virtual ~EdgeExtractor() = default;
    /// Grayscale edge map at input resolution, dark lines on a light background.
    virtual GrayImage extract(const Image& image) = 0;
};

class HandSegmenter {
public:
    virtual ~HandSegmenter() = default;
    virtual std::vector<SpatialMask> segment(const Image& image, std::string_view prompt) = 0;
};

class ArmSegmenter {
public:
    virtual ~ArmSegmenter() = default;
    virtual SpatialMask segment(const Image& frame) = 0;
};

class KeypointDetector {
public:
    virtual ~KeypointDetector() = default;
    /// Index fingertip detections for frames inside the boundaries.
    virtual std::vector<FrameDetection> detect(const FrameSource& video, const SignBoundaries& boundaries) = 0;
};

/// Sobel magnitude edges; used when no edge model is available or it fails.
class GradientEdges final : public EdgeExtractor {
public:
    /// Magnitude divided by `gain` is subtracted from white.
    explicit GradientEdges(double gain = 4.0) : m_gain(gain) {}
    GrayImage extract(const Image& image) override;

private:
    double m_gain;
};

/// Fixture layout: <root>/<adapter>/<content hash>/...
///   segmenter/<h>/boundaries.json
///   edges/<h>/edges.png
///   hands/<h>/<prompt>/mask_NN.png
///   arms/<h>/mask.png
///   keypoints/<h>/detections.json
class FixtureStore {
public:
    explicit FixtureStore(std::filesystem::path root) : m_root(std::move(root)) {}

    const std::filesystem::path& root() const { return m_root; }
    std::filesystem::path entry(std::string_view adapter, std::string_view hash) const;

    void put_boundaries(const FrameSource& video, const SignBoundaries& boundaries) const;
    void put_edges(const Image& image, const GrayImage& edges) const;
    void put_hand_masks(const Image& image, std::string_view prompt, const std::vector<SpatialMask>& masks) const;
    void put_arm_mask(const Image& frame, const SpatialMask& mask) const;
    void put_detections(const FrameSource& video, const std::vector<FrameDetection>& detections) const;

    /// Throws AdapterError naming the missing directory.
    std::filesystem::path require(std::string_view adapter, std::string_view hash) const;

private:
    std::filesystem::path m_root;
};

/// Directory-safe form of a prompt ("left hand" -> "left_hand").
std::string prompt_slug(std::string_view prompt);

class FixtureSegmenter final : public SignSegmenter {
public:
    explicit FixtureSegmenter(FixtureStore store) : m_store(std::move(store)) {}
    SignBoundaries segment(const FrameSource& video) override;

private:
    FixtureStore m_store;
};

class FixtureEdges final : public EdgeExtractor {
public:
    explicit FixtureEdges(FixtureStore store) : m_store(std::move(store)) {}
    GrayImage extract(const Image& image) override;

private:
    FixtureStore m_store;
};

class FixtureHands final : public HandSegmenter {
public:
    explicit FixtureHands(FixtureStore store) : m_store(std::move(store)) {}
    std::vector<SpatialMask> segment(const Image& image, std::string_view prompt) override;

private:
    FixtureStore m_store;
};

class FixtureArms final : public ArmSegmenter {
public:
    explicit FixtureArms(FixtureStore store) : m_store(std::move(store)) {}
    SpatialMask segment(const Image& frame) override;

private:
    FixtureStore m_store;
};

class FixtureKeypoints final : public KeypointDetector {
public:
    explicit FixtureKeypoints(FixtureStore store) : m_store(std::move(store)) {}
    std::vector<FrameDetection> detect(const FrameSource& video, const SignBoundaries& boundaries) override;

private:
    FixtureStore m_store;
};

/// Perception models behind an HTTP service (see PerceptionServer for the protocol).
class RemotePerception {
public:
    explicit RemotePerception(const RemoteEndpoint& endpoint);
    ~RemotePerception();

    std::unique_ptr<SignSegmenter> segmenter() const;
    std::unique_ptr<EdgeExtractor> edges() const;
    std::unique_ptr<HandSegmenter> hands() const;
    std::unique_ptr<ArmSegmenter> arms() const;
    std::unique_ptr<KeypointDetector> keypoints() const;

    struct Pool;

private:
    std::shared_ptr<Pool> m_pool;
};

/// Serves any adapter set over the protocol RemotePerception speaks. Null adapters answer 501.
class PerceptionServer {
public:
    PerceptionServer(SignSegmenter* segmenter, EdgeExtractor* edges, HandSegmenter* hands, ArmSegmenter* arms,
                     KeypointDetector* keypoints);
    ~PerceptionServer();
    PerceptionServer(const PerceptionServer&) = delete;
    PerceptionServer& operator=(const PerceptionServer&) = delete;

    /// Binds (port 0 picks a free port) and serves on a background thread. Returns the port.
    int start(const std::string& host = "127.0.0.1", int port = 0);
    /// Blocks the caller until stop() is called from elsewhere.
    void listen(const std::string& host, int port);
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> m_impl;
};

enum class PerceptionMode { Fixture, Remote, Offline };

const char* to_string(PerceptionMode mode);
PerceptionMode parse_perception_mode(std::string_view text);

struct PerceptionConfig {
    PerceptionMode mode = PerceptionMode::Fixture;
    std::filesystem::path fixtures = "fixtures";
    RemoteEndpoint remote;
};

/// Bundle handed to the pipeline. Offline mode leaves every model adapter empty, so
/// boundaries must be given manually and edges come from GradientEdges.
struct PerceptionAdapters {
    std::unique_ptr<SignSegmenter> segmenter;
    std::unique_ptr<EdgeExtractor> edges;
    std::unique_ptr<HandSegmenter> hands;
    std::unique_ptr<ArmSegmenter> arms;
    std::unique_ptr<KeypointDetector> keypoints;
};

/// ILLUSIGN_FIXTURES=1 in the environment forces fixture mode.
PerceptionAdapters make_perception(const PerceptionConfig& config);
bool fixtures_forced();

// Operations on top of the adapters.

struct BoundaryOverrides {
    std::optional<int> start;
    std::optional<int> end;
};

/// Videos shorter than this skip the segmentation model and need both overrides.
inline constexpr int kMinSegmentableFrames = 8;

/// Overrides win over the model. A single override replaces that side of the model's answer.
SignBoundaries segment_sign(const FrameSource& video, SignSegmenter* model, const BoundaryOverrides& overrides = {},
                            int min_model_frames = kMinSegmentableFrames);

/// Falls back to GradientEdges (with a warning) when the adapter is missing, fails, or
/// returns a map of the wrong size.
GrayImage extract_edges(const Image& image, EdgeExtractor* adapter);

/// Non-empty binary masks at image resolution; an empty list when nothing is detected.
std::vector<SpatialMask> hand_masks(const Image& image, std::string_view prompt, HandSegmenter* adapter);

/// Binary mask at frame resolution (all zero when no arm is found).
SpatialMask arm_masks(const Image& frame, ArmSegmenter* adapter);

struct TrackingOptions {
    double min_confidence = 0.5;
    /// Runs of at most this many missing frames between detections are filled linearly.
    int max_interpolated_gap = 2;
    /// A hand missing from more than this fraction of the span yields an empty track.
    double max_missing_fraction = 0.5;
};

struct TrackingResult {
    /// Left before right; at most one track per hand.
    std::vector<KeypointTrack> tracks;
    /// Frames where nearest-neighbour continuation overrode the model's hand labels.
    std::vector<int> relabeled_frames;
    std::vector<std::string> warnings;

    const KeypointTrack* track(std::string_view hand) const;
};

TrackingResult track_keypoints(const FrameSource& video, const SignBoundaries& boundaries, KeypointDetector* detector,
                               const TrackingOptions& options = {});

/// Post-processing applied by track_keypoints, exposed for reuse on recorded detections.
TrackingResult assemble_tracks(std::vector<FrameDetection> detections, const SignBoundaries& boundaries,
                               const TrackingOptions& options = {});

} // namespace illusign
