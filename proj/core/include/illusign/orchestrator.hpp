#pragma once

#include "illusign/backbone.hpp"
#include "illusign/mock_backbone.hpp"
#include "illusign/overlay.hpp"
#include "illusign/perception.hpp"
#include "illusign/remote.hpp"
#include "illusign/style_transfer.hpp"
#include "illusign/trajectory.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace illusign {

enum class BackboneKind { Mock, Remote };

const char* to_string(BackboneKind kind);
BackboneKind parse_backbone_kind(std::string_view text);

struct BackboneConfig {
    BackboneKind kind = BackboneKind::Remote;
    RemoteEndpoint remote{"http://127.0.0.1:8600"};
    MockOptions mock;
    /// Resize frames and style images to the backbone resolution instead of rejecting them.
    bool resize_inputs = true;
};

struct ArrowConfig {
    ArrowStyle style;
    /// Points sampled along each fitted curve.
    int samples = 50;
    /// Tracks whose net displacement stays below this fraction of the diagonal get no arrow.
    double motion_fraction = 0.03;
};

struct PipelineConfig {
    int steps = 100;
    std::uint64_t seed = 0;
    BackboneConfig backbone;
    StyleTransferConfig style;
    OverlayConfig overlay;
    PerceptionConfig perception;
    BoundaryOverrides boundaries;
    TrackingOptions tracking;
    ArrowConfig arrows;
    /// Prompt for the hand masks that drive the overlay.
    std::string hand_prompt = "hands";
    bool skip_overlay = false;
    bool draw_arrows = true;
    std::filesystem::path output_root = "out";

    /// Throws ConfigError on any out-of-range field.
    void validate() const;
};

/// Single JSON document; missing keys keep their defaults, unknown keys are rejected.
std::string config_to_json(const PipelineConfig& config);
PipelineConfig config_from_json(std::string_view text);
PipelineConfig load_config(const std::filesystem::path& path);
void save_config(const PipelineConfig& config, const std::filesystem::path& path);

/// Builds the configured backbone (a MockBackbone or a RemoteBackbone).
std::unique_ptr<Denoiser> make_backbone(const BackboneConfig& config);

enum class StageId { Segment, Edges, Keypoints, Masks, Stylize, Overlay, Arrows };

const char* to_string(StageId stage);
StageId parse_stage(std::string_view text);
/// Execution order.
const std::vector<StageId>& all_stages();

enum class StageStatus { Pending, Completed, Cached, Reused, Failed };

const char* to_string(StageStatus status);
StageStatus parse_stage_status(std::string_view text);

struct ArtifactRecord {
    std::string path;  ///< relative to the run directory
    std::string sha256;
    friend bool operator==(const ArtifactRecord&, const ArtifactRecord&) = default;
};

struct StageRecord {
    StageId id = StageId::Segment;
    StageStatus status = StageStatus::Pending;
    std::string cache_key;
    double wall_seconds = 0.0;
    std::size_t denoiser_evaluations = 0;
    std::vector<ArtifactRecord> artifacts;
    std::string error;

    bool done() const { return status == StageStatus::Completed || status == StageStatus::Cached ||
                               status == StageStatus::Reused; }
};

struct RunManifest {
    std::string run_id;
    std::string config_json;
    std::string video_hash;
    std::string style_hash;
    std::vector<StageRecord> stages;
    bool overlap_skipped = false;
    std::vector<int> relabeled_frames;
    std::vector<std::string> warnings;

    const StageRecord* stage(StageId id) const;
    StageRecord& stage(StageId id);
    bool complete() const;
    /// artifact path -> sha256 over all finished stages.
    std::map<std::string, std::string> artifact_hashes() const;
};

std::string manifest_to_json(const RunManifest& manifest);
RunManifest manifest_from_json(std::string_view text);
RunManifest read_manifest(const std::filesystem::path& path);

/// Problems found when checking finished stages against the files on disk; empty when consistent.
std::vector<std::string> verify_manifest(const RunManifest& manifest, const std::filesystem::path& run_dir);

struct PipelineInputs {
    std::filesystem::path video;  ///< video file or directory of frame images
    std::filesystem::path style;
};

/// Collaborators the stages call into. Anything left empty is built from the config on
/// first use, so fully cached runs never construct a backbone.
struct PipelineServices {
    std::function<Denoiser&()> denoiser;
    PerceptionAdapters* perception = nullptr;
};

struct RunOptions {
    /// Defaults to <output_root>/<run id>.
    std::optional<std::filesystem::path> run_dir;
    /// Defaults to default_cache_root().
    std::optional<std::filesystem::path> cache_root;
    bool use_cache = true;
};

/// $ILLUSIGN_CACHE, else $XDG_CACHE_HOME/illusign, else ~/.cache/illusign.
std::filesystem::path default_cache_root();

/// Runs the stages of one illustration job against a run directory.
///
/// Each stage sees copies of its declared inputs only, must produce exactly its declared
/// outputs, and is cached under a key over its input hashes and the config fields it reads.
/// A stage already finished in the run directory with the same key is reused in place.
class Pipeline {
public:
    Pipeline(PipelineConfig config, PipelineInputs inputs, RunOptions options = {},
             PipelineServices services = {});
    ~Pipeline();
    Pipeline(const Pipeline&) = delete;
    Pipeline& operator=(const Pipeline&) = delete;

    const std::string& run_id() const;
    const std::filesystem::path& run_dir() const;
    const PipelineConfig& config() const;

    /// All stages in order. A failing stage is marked failed in the manifest and its error
    /// rethrown (non-library exceptions as StageError).
    RunManifest run();
    /// The given stages in execution order; each one's upstream stages must already be done.
    RunManifest run_stages(std::span<const StageId> stages);

    /// Noise predictions executed by this pipeline object.
    std::size_t denoising_steps() const;

private:
    struct Impl;
    std::unique_ptr<Impl> m_impl;
};

} // namespace illusign
