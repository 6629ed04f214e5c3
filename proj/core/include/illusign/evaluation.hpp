#pragma once

#include "illusign/image.hpp"
#include "illusign/mask.hpp"
#include "illusign/perception.hpp"
#include "illusign/remote.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace illusign {

/// Activation block [channels x height x width], channel-major.
struct FeatureMap {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> data;
};

class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    /// One map per configured layer, shallow to deep. Must be safe to call concurrently.
    virtual std::vector<FeatureMap> extract(const Image& image) const = 0;
};

/// Seeded stack of 3x3 convolutions with ReLU and 2x2 average pooling, recording the
/// activation after each ReLU. Weights are He-scaled normals drawn from the seed.
class RandomConvExtractor final : public FeatureExtractor {
public:
    explicit RandomConvExtractor(std::uint64_t seed = 1234, std::vector<int> channels = {16, 32, 64});

    std::vector<FeatureMap> extract(const Image& image) const override;

private:
    struct Conv {
        int in = 0;
        int out = 0;
        std::vector<float> weights;  // out x in x 3 x 3
        std::vector<float> bias;
    };
    std::vector<Conv> m_layers;
};

/// G = F F^T / (C H W), a C x C row-major matrix.
std::vector<double> gram_matrix(const FeatureMap& map);

/// Mean over layers of the Frobenius norm of the Gram difference.
double gram_distance(const Image& a, const Image& b, const FeatureExtractor& extractor);
double gram_distance(const std::vector<FeatureMap>& a, const std::vector<FeatureMap>& b);

/// External perceptual scorers. Both are symmetric in their arguments.
class LpipsScorer {
public:
    virtual ~LpipsScorer() = default;
    virtual double distance(const Image& a, const Image& b) = 0;
};

class ClipScorer {
public:
    virtual ~ClipScorer() = default;
    /// Cosine similarity of the two image embeddings.
    virtual double similarity(const Image& a, const Image& b) = 0;
};

/// Scores stored under <root>/<lpips|clip>/<hash pair>/score.json, the pair ordered so the
/// key is symmetric.
class FixtureScores {
public:
    explicit FixtureScores(std::filesystem::path root) : m_root(std::move(root)) {}

    std::filesystem::path entry(std::string_view metric, const Image& a, const Image& b) const;
    void put(std::string_view metric, const Image& a, const Image& b, double score) const;
    double get(std::string_view metric, const Image& a, const Image& b) const;

private:
    std::filesystem::path m_root;
};

class FixtureLpips final : public LpipsScorer {
public:
    explicit FixtureLpips(FixtureScores scores) : m_scores(std::move(scores)) {}
    double distance(const Image& a, const Image& b) override { return m_scores.get("lpips", a, b); }

private:
    FixtureScores m_scores;
};

class FixtureClip final : public ClipScorer {
public:
    explicit FixtureClip(FixtureScores scores) : m_scores(std::move(scores)) {}
    double similarity(const Image& a, const Image& b) override { return m_scores.get("clip", a, b); }

private:
    FixtureScores m_scores;
};

/// POST /v1/lpips and /v1/clip with two PNG parts "a" and "b"; replies {"score": x}.
class RemoteScorers {
public:
    explicit RemoteScorers(const RemoteEndpoint& endpoint);
    ~RemoteScorers();

    std::unique_ptr<LpipsScorer> lpips() const;
    std::unique_ptr<ClipScorer> clip() const;

    struct Pool;

private:
    std::shared_ptr<Pool> m_pool;
};

/// Identical images short-circuit to the metric's fixed point (LPIPS 0, CLIP 1).
double lpips_distance(const Image& a, const Image& b, LpipsScorer& scorer);
double clip_similarity(const Image& a, const Image& b, ClipScorer& scorer);

struct IouResult {
    std::optional<double> left;
    std::optional<double> right;
    /// Mean over hands that were scored; empty when neither was.
    std::optional<double> overall;
    std::vector<std::string> notes;
};

/// |A & B| / |A | B|. Returns nullopt when both masks are empty.
std::optional<double> iou(const SpatialMask& pred, const SpatialMask& gt);

/// Per-hand IoU; a hand whose predicted and reference masks are both empty is excluded
/// with a note.
IouResult miou(const SpatialMask& pred_left, const SpatialMask& pred_right, const SpatialMask& gt_left,
               const SpatialMask& gt_right);

/// Orange hue band used for arrows: H in [15, 45] degrees, S > 0.4, V > 0.3.
bool is_arrow_orange(Rgb color);

/// Replaces arrow-orange pixels with white.
Image remove_arrows(const Image& illustration);

struct EvalRecord {
    std::string sample_id;
    std::optional<double> lpips;
    double gram_distance = 0.0;
    std::optional<double> clip_score;
    std::optional<double> miou_left;
    std::optional<double> miou_right;
    std::optional<double> miou_overall;
    /// Which generated illustration won each style metric ("start" or "end").
    std::string lpips_branch;
    std::string gram_branch;
    std::string clip_branch;
    std::vector<std::string> notes;
};

/// Scorers used by evaluate_sample. Missing scorers leave their metric unset.
struct EvalContext {
    const FeatureExtractor* extractor = nullptr;
    LpipsScorer* lpips = nullptr;
    ClipScorer* clip = nullptr;
    HandSegmenter* hands = nullptr;
};

struct EvalSample {
    std::string id;
    Image gen_start;
    Image gen_end;
    Image gt_illustration;
    Image frame_start;
    Image frame_end;
};

/// Style metrics take the better of the start and end illustrations against the
/// arrow-free ground truth (resized to the generated size). Hand mIOU compares masks of each
/// illustration with masks of its source frame ("left hand" / "right hand" prompts),
/// averaged over the start and end pairs.
EvalRecord evaluate_sample(const EvalSample& sample, const EvalContext& context);

/// Evaluates independent samples on up to `threads` workers; output order follows input.
std::vector<EvalRecord> evaluate_samples(const std::vector<EvalSample>& samples, const EvalContext& context,
                                         int threads = 0);

/// Layout: pred/<id>/{start,end}.png, gt/<id>.png, frames/<id>/{start,end}.png.
std::vector<EvalSample> load_eval_directory(const std::filesystem::path& pred, const std::filesystem::path& gt,
                                            const std::filesystem::path& frames);

/// JSON list of {"id", "pred_start", "pred_end", "gt", "frame_start", "frame_end"}; relative
/// paths resolve against the manifest's directory.
std::vector<EvalSample> load_eval_manifest(const std::filesystem::path& manifest);

std::string records_to_csv(const std::vector<EvalRecord>& records);
/// Style table (LPIPS, Gram, CLIPScore) and hand table (mIOU left/right/overall) of means.
std::string records_to_markdown(const std::vector<EvalRecord>& records);
void write_report(const std::vector<EvalRecord>& records, const std::filesystem::path& dir);

} // namespace illusign
