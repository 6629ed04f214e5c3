#include <Eigen/Dense>

#include "illusign/evaluation.hpp"

#include "illusign/errors.hpp"
#include "illusign/hashing.hpp"
#include "illusign/rng.hpp"

#include "http_pool.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

namespace illusign {

namespace fs = std::filesystem;
using nlohmann::json;

// Feature extraction

RandomConvExtractor::RandomConvExtractor(std::uint64_t seed, std::vector<int> channels) {
    if (channels.empty()) {
        throw ConfigError("feature extractor needs at least one layer");
    }
    GaussianRng rng(seed);
    int in = 3;
    for (int out : channels) {
        if (out < 1) {
            throw ConfigError("feature extractor layer widths must be >= 1");
        }
        Conv conv{in, out, std::vector<float>(static_cast<std::size_t>(out) * in * 9), std::vector<float>(out)};
        const double scale = std::sqrt(2.0 / (9.0 * in));
        for (auto& w : conv.weights) {
            w = static_cast<float>(rng.normal() * scale);
        }
        for (auto& b : conv.bias) {
            b = static_cast<float>(rng.normal() * 0.01);
        }
        m_layers.push_back(std::move(conv));
        in = out;
    }
}

std::vector<FeatureMap> RandomConvExtractor::extract(const Image& image) const {
    if (image.empty()) {
        throw ContractError("cannot extract features from an empty image");
    }
    std::vector<cv::Mat> planes(3);
    for (int c = 0; c < 3; ++c) {
        planes[static_cast<std::size_t>(c)] = cv::Mat(image.height, image.width, CV_32F);
    }
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            const Rgb p = image.pixel(x, y);
            planes[0].at<float>(y, x) = p.r / 255.0f - 0.5f;
            planes[1].at<float>(y, x) = p.g / 255.0f - 0.5f;
            planes[2].at<float>(y, x) = p.b / 255.0f - 0.5f;
        }
    }
    std::vector<FeatureMap> maps;
    cv::Mat tmp;
    for (std::size_t li = 0; li < m_layers.size(); ++li) {
        const Conv& conv = m_layers[li];
        if (li > 0) {
            for (auto& p : planes) {
                if (p.rows >= 2 && p.cols >= 2) {
                    cv::Mat pooled;
                    cv::resize(p, pooled, cv::Size(p.cols / 2, p.rows / 2), 0, 0, cv::INTER_AREA);
                    p = pooled;
                }
            }
        }
        std::vector<cv::Mat> next(static_cast<std::size_t>(conv.out));
        for (int o = 0; o < conv.out; ++o) {
            cv::Mat acc(planes[0].size(), CV_32F, cv::Scalar(conv.bias[static_cast<std::size_t>(o)]));
            for (int i = 0; i < conv.in; ++i) {
                cv::Mat kernel(3, 3, CV_32F,
                               const_cast<float*>(conv.weights.data() + (static_cast<std::size_t>(o) * conv.in + i) * 9));
                cv::filter2D(planes[static_cast<std::size_t>(i)], tmp, CV_32F, kernel, cv::Point(-1, -1), 0,
                             cv::BORDER_REFLECT);
                acc += tmp;
            }
            cv::max(acc, 0.0f, acc);
            next[static_cast<std::size_t>(o)] = acc;
        }
        planes = std::move(next);
        FeatureMap map{conv.out, planes[0].rows, planes[0].cols, {}};
        map.data.reserve(static_cast<std::size_t>(map.channels) * map.height * map.width);
        for (const auto& p : planes) {
            const cv::Mat cont = p.isContinuous() ? p : p.clone();
            map.data.insert(map.data.end(), cont.ptr<float>(), cont.ptr<float>() + cont.total());
        }
        maps.push_back(std::move(map));
    }
    return maps;
}

std::vector<double> gram_matrix(const FeatureMap& map) {
    const Eigen::Index c = map.channels;
    const Eigen::Index n = static_cast<Eigen::Index>(map.height) * map.width;
    if (c < 1 || n < 1 || map.data.size() != static_cast<std::size_t>(c * n)) {
        throw ContractError("feature map has inconsistent dimensions");
    }
    const Eigen::MatrixXd f =
        Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(map.data.data(), c, n)
            .cast<double>();
    const Eigen::MatrixXd g = (f * f.transpose()) / static_cast<double>(c * n);
    std::vector<double> out(static_cast<std::size_t>(c * c));
    for (Eigen::Index i = 0; i < c; ++i) {
        for (Eigen::Index j = 0; j < c; ++j) {
            out[static_cast<std::size_t>(i * c + j)] = g(i, j);
        }
    }
    return out;
}

double gram_distance(const std::vector<FeatureMap>& a, const std::vector<FeatureMap>& b) {
    if (a.empty() || a.size() != b.size()) {
        throw AdapterError(fmt::format("feature extractor returned {} and {} maps", a.size(), b.size()));
    }
    double total = 0.0;
    for (std::size_t l = 0; l < a.size(); ++l) {
        if (a[l].channels != b[l].channels) {
            throw ContractError(fmt::format("layer {} has {} vs {} channels", l, a[l].channels, b[l].channels));
        }
        const auto ga = gram_matrix(a[l]);
        const auto gb = gram_matrix(b[l]);
        double sq = 0.0;
        for (std::size_t k = 0; k < ga.size(); ++k) {
            sq += (ga[k] - gb[k]) * (ga[k] - gb[k]);
        }
        total += std::sqrt(sq);
    }
    return total / static_cast<double>(a.size());
}

double gram_distance(const Image& a, const Image& b, const FeatureExtractor& extractor) {
    return gram_distance(extractor.extract(a), extractor.extract(b));
}

// Scorers

fs::path FixtureScores::entry(std::string_view metric, const Image& a, const Image& b) const {
    std::string ha = content_hash(a);
    std::string hb = content_hash(b);
    if (hb < ha) {
        std::swap(ha, hb);
    }
    return m_root / metric / (ha.substr(0, 32) + "_" + hb.substr(0, 32));
}

void FixtureScores::put(std::string_view metric, const Image& a, const Image& b, double score) const {
    const fs::path dir = entry(metric, a, b);
    fs::create_directories(dir);
    std::ofstream out(dir / "score.json", std::ios::trunc);
    out << json{{"score", score}}.dump() << "\n";
    if (!out) {
        throw IoError(fmt::format("cannot write {}", (dir / "score.json").string()));
    }
}

double FixtureScores::get(std::string_view metric, const Image& a, const Image& b) const {
    const fs::path file = entry(metric, a, b) / "score.json";
    std::ifstream in(file);
    if (!in) {
        throw AdapterError(fmt::format("no {} fixture at {}", metric, file.string()));
    }
    try {
        return json::parse(in).at("score").get<double>();
    } catch (const json::exception& e) {
        throw AdapterError(fmt::format("malformed {} fixture {}: {}", metric, file.string(), e.what()));
    }
}

struct RemoteScorers::Pool : detail::HttpPool {
    using HttpPool::HttpPool;

    double score(const std::string& path, const Image& a, const Image& b) {
        const auto pa = encode_png(a);
        const auto pb = encode_png(b);
        httplib::MultipartFormDataItems items{{"a", std::string(pa.begin(), pa.end()), "a.png", "image/png"},
                                              {"b", std::string(pb.begin(), pb.end()), "b.png", "image/png"}};
        auto client = acquire();
        auto res = client->Post(path, items);
        check(res, path);
        try {
            return json::parse(res->body).at("score").get<double>();
        } catch (const json::exception& e) {
            throw AdapterError(fmt::format("{}: malformed reply: {}", path, e.what()));
        }
    }
};

namespace {

class RemoteLpips final : public LpipsScorer {
public:
    explicit RemoteLpips(std::shared_ptr<RemoteScorers::Pool> pool) : m_pool(std::move(pool)) {}
    double distance(const Image& a, const Image& b) override { return m_pool->score("/v1/lpips", a, b); }

private:
    std::shared_ptr<RemoteScorers::Pool> m_pool;
};

class RemoteClip final : public ClipScorer {
public:
    explicit RemoteClip(std::shared_ptr<RemoteScorers::Pool> pool) : m_pool(std::move(pool)) {}
    double similarity(const Image& a, const Image& b) override { return m_pool->score("/v1/clip", a, b); }

private:
    std::shared_ptr<RemoteScorers::Pool> m_pool;
};

} // namespace

RemoteScorers::RemoteScorers(const RemoteEndpoint& endpoint)
    : m_pool(std::make_shared<Pool>(endpoint.url, endpoint.pool_size, endpoint.timeout)) {}

RemoteScorers::~RemoteScorers() = default;

std::unique_ptr<LpipsScorer> RemoteScorers::lpips() const { return std::make_unique<RemoteLpips>(m_pool); }
std::unique_ptr<ClipScorer> RemoteScorers::clip() const { return std::make_unique<RemoteClip>(m_pool); }

double lpips_distance(const Image& a, const Image& b, LpipsScorer& scorer) {
    return a == b ? 0.0 : scorer.distance(a, b);
}

double clip_similarity(const Image& a, const Image& b, ClipScorer& scorer) {
    return a == b ? 1.0 : scorer.similarity(a, b);
}

// Masks

std::optional<double> iou(const SpatialMask& pred, const SpatialMask& gt) {
    if (!pred.same_shape(gt)) {
        throw ContractError(fmt::format("mask shapes differ: {}x{} vs {}x{}", pred.height, pred.width, gt.height,
                                        gt.width));
    }
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool a = pred.values[i] >= 0.5f;
        const bool b = gt.values[i] >= 0.5f;
        inter += a && b ? 1 : 0;
        uni += a || b ? 1 : 0;
    }
    if (uni == 0) {
        return std::nullopt;
    }
    return static_cast<double>(inter) / static_cast<double>(uni);
}

IouResult miou(const SpatialMask& pred_left, const SpatialMask& pred_right, const SpatialMask& gt_left,
               const SpatialMask& gt_right) {
    IouResult r;
    r.left = iou(pred_left, gt_left);
    r.right = iou(pred_right, gt_right);
    if (!r.left) {
        r.notes.push_back("left hand absent from both masks; excluded");
    }
    if (!r.right) {
        r.notes.push_back("right hand absent from both masks; excluded");
    }
    if (r.left && r.right) {
        r.overall = (*r.left + *r.right) / 2.0;
    } else if (r.left || r.right) {
        r.overall = r.left ? *r.left : *r.right;
    }
    return r;
}

bool is_arrow_orange(Rgb c) {
    const double r = c.r / 255.0;
    const double g = c.g / 255.0;
    const double b = c.b / 255.0;
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double delta = mx - mn;
    if (mx <= 0.3 || delta <= 0.0 || delta / mx <= 0.4) {
        return false;
    }
    double h = 0.0;
    if (mx == r) {
        h = 60.0 * std::fmod((g - b) / delta, 6.0);
    } else if (mx == g) {
        h = 60.0 * ((b - r) / delta + 2.0);
    } else {
        h = 60.0 * ((r - g) / delta + 4.0);
    }
    if (h < 0) {
        h += 360.0;
    }
    return h >= 15.0 && h <= 45.0;
}

Image remove_arrows(const Image& illustration) {
    Image out = illustration;
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            if (is_arrow_orange(out.pixel(x, y))) {
                out.set_pixel(x, y, {255, 255, 255});
            }
        }
    }
    return out;
}

// Sample evaluation

namespace {

SpatialMask resize_mask(const SpatialMask& m, int width, int height) {
    if (m.width == width && m.height == height) {
        return m;
    }
    cv::Mat src(m.height, m.width, CV_32F, const_cast<float*>(m.values.data()));
    cv::Mat dst;
    cv::resize(src, dst, cv::Size(width, height), 0, 0, cv::INTER_NEAREST);
    SpatialMask out = SpatialMask::zeros(height, width, m.kind);
    out.values.assign(dst.ptr<float>(), dst.ptr<float>() + dst.total());
    return out;
}

SpatialMask hand_union(const Image& image, std::string_view prompt, HandSegmenter& segmenter) {
    const auto masks = hand_masks(image, prompt, &segmenter);
    if (masks.empty()) {
        return SpatialMask::zeros(image.height, image.width, MaskKind::Hands);
    }
    return union_masks(masks, MaskKind::Hands);
}

template <class Score>
std::pair<double, std::string> pick(double start, double end, Score better) {
    return better(end, start) ? std::pair{end, std::string("end")} : std::pair{start, std::string("start")};
}

std::optional<double> mean(const std::vector<double>& v) {
    if (v.empty()) {
        return std::nullopt;
    }
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    return s / static_cast<double>(v.size());
}

} // namespace

EvalRecord evaluate_sample(const EvalSample& sample, const EvalContext& context) {
    EvalRecord rec;
    rec.sample_id = sample.id;
    const Image& gs = sample.gen_start;
    const Image& ge = sample.gen_end;
    if (gs.empty() || gs.width != ge.width || gs.height != ge.height) {
        throw ContractError(fmt::format("sample {}: generated illustrations must be non-empty and equally sized",
                                        sample.id));
    }
    Image cleaned = remove_arrows(sample.gt_illustration);
    if (cleaned.width != gs.width || cleaned.height != gs.height) {
        cleaned = resize(cleaned, gs.width, gs.height);
    }

    static const RandomConvExtractor default_extractor;
    const FeatureExtractor& extractor = context.extractor ? *context.extractor : default_extractor;
    const auto fc = extractor.extract(cleaned);
    const auto [gram, gram_branch] =
        pick(gram_distance(extractor.extract(gs), fc), gram_distance(extractor.extract(ge), fc), std::less<>());
    rec.gram_distance = gram;
    rec.gram_branch = gram_branch;

    if (context.lpips) {
        const auto [v, b] =
            pick(lpips_distance(gs, cleaned, *context.lpips), lpips_distance(ge, cleaned, *context.lpips), std::less<>());
        rec.lpips = v;
        rec.lpips_branch = b;
    } else {
        rec.notes.push_back("no LPIPS scorer configured");
    }
    if (context.clip) {
        const auto [v, b] = pick(clip_similarity(gs, cleaned, *context.clip), clip_similarity(ge, cleaned, *context.clip),
                                 std::greater<>());
        rec.clip_score = v;
        rec.clip_branch = b;
    } else {
        rec.notes.push_back("no CLIP scorer configured");
    }

    if (!context.hands) {
        rec.notes.push_back("no hand segmenter configured; mIOU skipped");
        return rec;
    }
    try {
        std::vector<double> left;
        std::vector<double> right;
        for (const auto& [gen, frame] : {std::pair{&gs, &sample.frame_start}, std::pair{&ge, &sample.frame_end}}) {
            const auto r = miou(hand_union(*gen, "left hand", *context.hands),
                                hand_union(*gen, "right hand", *context.hands),
                                resize_mask(hand_union(*frame, "left hand", *context.hands), gen->width, gen->height),
                                resize_mask(hand_union(*frame, "right hand", *context.hands), gen->width, gen->height));
            if (r.left) {
                left.push_back(*r.left);
            }
            if (r.right) {
                right.push_back(*r.right);
            }
        }
        rec.miou_left = mean(left);
        rec.miou_right = mean(right);
        std::vector<double> hands;
        for (const auto& v : {rec.miou_left, rec.miou_right}) {
            if (v) {
                hands.push_back(*v);
            }
        }
        rec.miou_overall = mean(hands);
        if (!rec.miou_left) {
            rec.notes.push_back("left hand absent in all masks; excluded");
        }
        if (!rec.miou_right) {
            rec.notes.push_back("right hand absent in all masks; excluded");
        }
    } catch (const AdapterError& e) {
        rec.notes.push_back(fmt::format("hand segmentation failed: {}", e.what()));
    }
    return rec;
}

std::vector<EvalRecord> evaluate_samples(const std::vector<EvalSample>& samples, const EvalContext& context,
                                         int threads) {
    std::vector<EvalRecord> out(samples.size());
    if (samples.empty()) {
        return out;
    }
    const int hw = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    const int n = std::min(threads > 0 ? threads : hw, static_cast<int>(samples.size()));
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto work = [&] {
        for (std::size_t i = next++; i < samples.size(); i = next++) {
            try {
                out[i] = evaluate_sample(samples[i], context);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) {
                    failure = std::current_exception();
                }
            }
        }
    };
    std::vector<std::thread> pool;
    for (int t = 1; t < n; ++t) {
        pool.emplace_back(work);
    }
    work();
    for (auto& t : pool) {
        t.join();
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
    return out;
}

std::vector<EvalSample> load_eval_directory(const fs::path& pred, const fs::path& gt, const fs::path& frames) {
    if (!fs::is_directory(gt)) {
        throw IoError(fmt::format("{} is not a directory", gt.string()));
    }
    std::vector<fs::path> gts;
    for (const auto& e : fs::directory_iterator(gt)) {
        if (e.is_regular_file() && e.path().extension() == ".png") {
            gts.push_back(e.path());
        }
    }
    std::sort(gts.begin(), gts.end());
    std::vector<EvalSample> out;
    for (const auto& g : gts) {
        const std::string id = g.stem().string();
        out.push_back({id, read_image(pred / id / "start.png"), read_image(pred / id / "end.png"), read_image(g),
                       read_image(frames / id / "start.png"), read_image(frames / id / "end.png")});
    }
    return out;
}

std::vector<EvalSample> load_eval_manifest(const fs::path& manifest) {
    std::ifstream in(manifest);
    if (!in) {
        throw IoError(fmt::format("cannot read {}", manifest.string()));
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("malformed evaluation manifest: {}", e.what()));
    }
    const fs::path base = manifest.parent_path();
    auto path = [&](const json& entry, const char* key) {
        const fs::path p = entry.at(key).get<std::string>();
        return p.is_absolute() ? p : base / p;
    };
    std::vector<EvalSample> out;
    try {
        for (const auto& e : j) {
            out.push_back({e.at("id").get<std::string>(), read_image(path(e, "pred_start")),
                           read_image(path(e, "pred_end")), read_image(path(e, "gt")),
                           read_image(path(e, "frame_start")), read_image(path(e, "frame_end"))});
        }
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("malformed evaluation manifest: {}", e.what()));
    }
    return out;
}

// Reports

namespace {

std::string cell(const std::optional<double>& v) { return v ? fmt::format("{}", *v) : ""; }

std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string q = "\"";
    for (char c : s) {
        q += c == '"' ? std::string("\"\"") : std::string(1, c);
    }
    return q + "\"";
}

std::string md(const std::optional<double>& v) { return v ? fmt::format("{:.4f}", *v) : "n/a"; }

template <class Get>
std::optional<double> column_mean(const std::vector<EvalRecord>& records, Get get) {
    std::vector<double> v;
    for (const auto& r : records) {
        if (const std::optional<double> x = get(r)) {
            v.push_back(*x);
        }
    }
    return mean(v);
}

} // namespace

std::string records_to_csv(const std::vector<EvalRecord>& records) {
    std::string out =
        "sample_id,lpips,gram_distance,clip_score,miou_left,miou_right,miou_overall,lpips_branch,gram_branch,"
        "clip_branch,notes\n";
    for (const auto& r : records) {
        std::string notes;
        for (const auto& n : r.notes) {
            notes += (notes.empty() ? "" : "; ") + n;
        }
        out += fmt::format("{},{},{},{},{},{},{},{},{},{},{}\n", csv_quote(r.sample_id), cell(r.lpips), r.gram_distance,
                           cell(r.clip_score), cell(r.miou_left), cell(r.miou_right), cell(r.miou_overall),
                           r.lpips_branch, r.gram_branch, r.clip_branch, csv_quote(notes));
    }
    return out;
}

std::string records_to_markdown(const std::vector<EvalRecord>& records) {
    std::string out = "# Evaluation report\n\n";
    out += fmt::format("Samples: {}\n\n", records.size());
    out += "## Style\n\n| Method | LPIPS (lower is better) | Gram distance (lower is better) | CLIPScore (higher is better) |\n";
    out += "|---|---|---|---|\n";
    out += fmt::format("| illusign | {} | {} | {} |\n\n",
                       md(column_mean(records, [](const EvalRecord& r) { return r.lpips; })),
                       md(column_mean(records, [](const EvalRecord& r) { return std::optional(r.gram_distance); })),
                       md(column_mean(records, [](const EvalRecord& r) { return r.clip_score; })));
    out += "## Hand gestures\n\n| Method | mIOU left | mIOU right | mIOU overall |\n|---|---|---|---|\n";
    out += fmt::format("| illusign | {} | {} | {} |\n\n",
                       md(column_mean(records, [](const EvalRecord& r) { return r.miou_left; })),
                       md(column_mean(records, [](const EvalRecord& r) { return r.miou_right; })),
                       md(column_mean(records, [](const EvalRecord& r) { return r.miou_overall; })));
    out += "## Per sample\n\n| Sample | LPIPS | Gram | CLIPScore | mIOU left | mIOU right | mIOU overall |\n";
    out += "|---|---|---|---|---|---|---|\n";
    for (const auto& r : records) {
        out += fmt::format("| {} | {} | {:.4f} | {} | {} | {} | {} |\n", r.sample_id, md(r.lpips), r.gram_distance,
                           md(r.clip_score), md(r.miou_left), md(r.miou_right), md(r.miou_overall));
    }
    return out;
}

void write_report(const std::vector<EvalRecord>& records, const fs::path& dir) {
    fs::create_directories(dir);
    for (const auto& [name, text] : {std::pair{std::string("report.csv"), records_to_csv(records)},
                                     std::pair{std::string("report.md"), records_to_markdown(records)}}) {
        std::ofstream out(dir / name, std::ios::trunc);
        out << text;
        if (!out) {
            throw IoError(fmt::format("cannot write {}", (dir / name).string()));
        }
    }
}

} // namespace illusign
