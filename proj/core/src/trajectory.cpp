#include "illusign/trajectory.hpp"

#include "illusign/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <Eigen/Dense>
#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

namespace illusign {

std::vector<Point2> KeypointTrack::points() const {
    std::vector<Point2> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        out.push_back({s.x, s.y});
    }
    return out;
}

namespace {

nlohmann::json track_json(const KeypointTrack& track) {
    nlohmann::ordered_json j;
    j["hand"] = track.hand;
    j["samples"] = nlohmann::json::array();
    for (const auto& s : track.samples) {
        j["samples"].push_back({s.frame, s.x, s.y});
    }
    return j;
}

KeypointTrack parse_track(const nlohmann::json& j) {
    KeypointTrack track;
    try {
        track.hand = j.at("hand").get<std::string>();
        for (const auto& row : j.at("samples")) {
            if (!row.is_array() || row.size() != 3) {
                throw IoError("keypoint sample must be [frame, x, y]");
            }
            track.samples.push_back({row[0].get<int>(), row[1].get<double>(), row[2].get<double>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(fmt::format("malformed keypoint track: {}", e.what()));
    }
    return track;
}

} // namespace

std::string track_to_json(const KeypointTrack& track) {
    return track_json(track).dump();
}

KeypointTrack track_from_json(std::string_view text) {
    try {
        return parse_track(nlohmann::json::parse(text));
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError(fmt::format("keypoint track is not JSON: {}", e.what()));
    }
}

void write_tracks(const std::filesystem::path& path, const std::vector<KeypointTrack>& tracks) {
    nlohmann::json doc = nlohmann::json::array();
    for (const auto& t : tracks) {
        doc.push_back(track_json(t));
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << doc.dump(2) << '\n';
}

std::vector<KeypointTrack> read_tracks(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError(fmt::format("{} is not JSON: {}", path.string(), e.what()));
    }
    std::vector<KeypointTrack> tracks;
    if (doc.is_object()) {
        tracks.push_back(parse_track(doc));
        return tracks;
    }
    for (const auto& j : doc) {
        tracks.push_back(parse_track(j));
    }
    return tracks;
}

int find_span(std::span<const double> knots, int degree, int n_control, double u) {
    if (u >= knots[static_cast<std::size_t>(n_control)]) {
        return n_control - 1;
    }
    if (u <= knots[static_cast<std::size_t>(degree)]) {
        return degree;
    }
    int low = degree;
    int high = n_control;
    int mid = (low + high) / 2;
    while (u < knots[static_cast<std::size_t>(mid)] || u >= knots[static_cast<std::size_t>(mid) + 1]) {
        if (u < knots[static_cast<std::size_t>(mid)]) {
            high = mid;
        } else {
            low = mid;
        }
        mid = (low + high) / 2;
    }
    return mid;
}

std::vector<double> basis_functions(std::span<const double> knots, int degree, int n_control, double u) {
    if (knots.size() != static_cast<std::size_t>(n_control + degree + 1)) {
        throw ContractError(fmt::format("{} knots do not fit {} control points of degree {}", knots.size(), n_control,
                                        degree));
    }
    const int span = find_span(knots, degree, n_control, u);
    const auto p = static_cast<std::size_t>(degree);
    std::vector<double> local(p + 1, 0.0);
    std::vector<double> left(p + 1, 0.0);
    std::vector<double> right(p + 1, 0.0);
    local[0] = 1.0;
    for (std::size_t j = 1; j <= p; ++j) {
        left[j] = u - knots[static_cast<std::size_t>(span) + 1 - j];
        right[j] = knots[static_cast<std::size_t>(span) + j] - u;
        double saved = 0.0;
        for (std::size_t r = 0; r < j; ++r) {
            const double temp = local[r] / (right[r + 1] + left[j - r]);
            local[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        local[j] = saved;
    }
    std::vector<double> out(static_cast<std::size_t>(n_control), 0.0);
    for (std::size_t j = 0; j <= p; ++j) {
        out[static_cast<std::size_t>(span) - p + j] = local[j];
    }
    return out;
}

Point2 SplineCurve::evaluate(double u) const {
    if (control.empty()) {
        throw ContractError("curve has no control points");
    }
    // Clamped knots interpolate the end control points exactly.
    if (u <= 0.0) {
        return control.front();
    }
    if (u >= 1.0) {
        return control.back();
    }
    const auto n = static_cast<int>(control.size());
    const auto basis = basis_functions(knots, degree, n, u);
    Point2 out;
    for (std::size_t i = 0; i < control.size(); ++i) {
        out.x += basis[i] * control[i].x;
        out.y += basis[i] * control[i].y;
    }
    return out;
}

std::vector<double> chord_length_parameters(std::span<const Point2> points) {
    std::vector<double> params(points.size(), 0.0);
    if (points.size() < 2) {
        return params;
    }
    double total = 0.0;
    for (std::size_t i = 1; i < points.size(); ++i) {
        total += std::hypot(points[i].x - points[i - 1].x, points[i].y - points[i - 1].y);
        params[i] = total;
    }
    if (total <= 0.0) {
        for (std::size_t i = 0; i < points.size(); ++i) {
            params[i] = static_cast<double>(i) / static_cast<double>(points.size() - 1);
        }
        return params;
    }
    for (auto& v : params) {
        v /= total;
    }
    params.back() = 1.0;
    return params;
}

std::vector<double> averaged_knots(std::span<const double> params, int degree, int n_control) {
    const auto m = static_cast<int>(params.size());
    std::vector<double> knots(static_cast<std::size_t>(n_control + degree + 1), 0.0);
    for (int i = 0; i <= degree; ++i) {
        knots[static_cast<std::size_t>(n_control + i)] = 1.0;
    }
    const double d = static_cast<double>(m) / static_cast<double>(n_control - degree);
    for (int j = 1; j < n_control - degree; ++j) {
        const int i = static_cast<int>(j * d);
        const double a = j * d - i;
        knots[static_cast<std::size_t>(degree + j)] =
            (1.0 - a) * params[static_cast<std::size_t>(i - 1)] + a * params[static_cast<std::size_t>(i)];
    }
    return knots;
}

int default_control_count(int samples) {
    return std::min(std::max(4, (samples + 1) / 2), samples);
}

namespace {

double mean_squared_error(const SplineCurve& curve, std::span<const Point2> points, std::span<const double> params) {
    double total = 0.0;
    for (std::size_t k = 0; k < points.size(); ++k) {
        const Point2 c = curve.evaluate(params[k]);
        total += (c.x - points[k].x) * (c.x - points[k].x) + (c.y - points[k].y) * (c.y - points[k].y);
    }
    return total / static_cast<double>(points.size());
}

} // namespace

SplineCurve fit_bspline(std::span<const Point2> points, int degree, int n_control) {
    if (degree < 1) {
        throw ConfigError("spline degree must be at least 1");
    }
    if (points.size() < 2) {
        throw ContractError("a trajectory needs at least two samples");
    }
    const auto m = static_cast<int>(points.size());
    const auto params = chord_length_parameters(points);

    SplineCurve curve;
    if (m < degree + 1) {
        spdlog::warn("{} samples cannot carry a degree-{} spline; drawing a straight segment", m, degree);
        curve.degree = 1;
        curve.knots = {0.0, 0.0, 1.0, 1.0};
        curve.control = {points.front(), points.back()};
        curve.fit_mse = mean_squared_error(curve, points, params);
        return curve;
    }
    const int n = n_control == 0 ? default_control_count(m) : n_control;
    if (n > m || n < degree + 1) {
        throw ContractError(fmt::format("control point count {} must lie in [{}, {}]", n, degree + 1, m));
    }

    curve.degree = degree;
    curve.knots = averaged_knots(params, degree, n);
    curve.control.assign(static_cast<std::size_t>(n), Point2{});
    curve.control.front() = points.front();
    curve.control.back() = points.back();

    const int rows = m - 2;
    const int cols = n - 2;
    if (cols > 0 && rows > 0) {
        Eigen::MatrixXd a(rows, cols);
        Eigen::MatrixXd rhs(rows, 2);
        for (int k = 1; k < m - 1; ++k) {
            const auto basis = basis_functions(curve.knots, degree, n, params[static_cast<std::size_t>(k)]);
            for (int i = 1; i < n - 1; ++i) {
                a(k - 1, i - 1) = basis[static_cast<std::size_t>(i)];
            }
            const Point2& q = points[static_cast<std::size_t>(k)];
            rhs(k - 1, 0) = q.x - basis.front() * points.front().x - basis.back() * points.back().x;
            rhs(k - 1, 1) = q.y - basis.front() * points.front().y - basis.back() * points.back().y;
        }
        const Eigen::MatrixXd solution = a.colPivHouseholderQr().solve(rhs);
        for (int i = 1; i < n - 1; ++i) {
            curve.control[static_cast<std::size_t>(i)] = {solution(i - 1, 0), solution(i - 1, 1)};
        }
    }
    curve.fit_mse = mean_squared_error(curve, points, params);
    return curve;
}

std::vector<Point2> sample_curve(const SplineCurve& curve, int n) {
    if (n < 2) {
        throw ContractError("sampling a curve needs at least two points");
    }
    std::vector<Point2> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        out.push_back(curve.evaluate(static_cast<double>(i) / (n - 1)));
    }
    return out;
}

namespace {

std::string rgb_string(const Rgb& c) {
    return fmt::format("rgb({},{},{})", c.r, c.g, c.b);
}

bool has_extent(const std::vector<Point2>& polyline) {
    for (std::size_t i = 1; i < polyline.size(); ++i) {
        if (polyline[i] != polyline[0]) {
            return true;
        }
    }
    return false;
}

} // namespace

ArrowDocument render_arrows(std::span<const std::vector<Point2>> polylines, const ArrowStyle& style, int width,
                            int height) {
    if (width < 1 || height < 1) {
        throw ContractError("arrow canvas must be non-empty");
    }
    ArrowDocument doc;
    doc.width = width;
    doc.height = height;
    std::ostringstream defs;
    std::ostringstream paths;
    for (const auto& line : polylines) {
        if (line.size() < 2 || !has_extent(line)) {
            spdlog::warn("skipping an arrow with zero length");
            continue;
        }
        const int id = doc.arrow_count++;
        defs << fmt::format(
            "    <marker id=\"arrowhead-{0}\" markerUnits=\"userSpaceOnUse\" markerWidth=\"{1}\" markerHeight=\"{2}\" "
            "refX=\"{1}\" refY=\"{3}\" orient=\"auto\">\n"
            "      <path d=\"M 0 0 L {1} {3} L 0 {2} Z\" fill=\"{4}\" fill-opacity=\"{5}\"/>\n"
            "    </marker>\n",
            id, style.head_length, style.head_width, style.head_width / 2.0, rgb_string(style.color), style.opacity);
        std::string d;
        for (std::size_t i = 0; i < line.size(); ++i) {
            d += fmt::format("{}{} {}", i == 0 ? "M " : " L ", line[i].x * width, line[i].y * height);
        }
        paths << fmt::format("  <path d=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"{}\" stroke-opacity=\"{}\" "
                             "stroke-linecap=\"round\" stroke-linejoin=\"round\" marker-end=\"url(#arrowhead-{})\"/>\n",
                             d, rgb_string(style.color), style.stroke_width, style.opacity, id);
    }
    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\" standalone=\"no\"?>\n";
    svg << fmt::format("<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{0}\" height=\"{1}\" "
                       "viewBox=\"0 0 {0} {1}\">\n",
                       width, height);
    if (doc.arrow_count > 0) {
        svg << "  <defs>\n" << defs.str() << "  </defs>\n" << paths.str();
    }
    svg << "</svg>\n";
    doc.svg = svg.str();
    return doc;
}

ArrowDocument render_arrow(const std::vector<Point2>& polyline, const ArrowStyle& style, int width, int height) {
    return render_arrows(std::span(&polyline, 1), style, width, height);
}

namespace {

namespace pt = boost::property_tree;

Rgb parse_rgb(const std::string& text) {
    int r = 0;
    int g = 0;
    int b = 0;
    if (std::sscanf(text.c_str(), "rgb(%d,%d,%d)", &r, &g, &b) != 3) {
        throw IoError(fmt::format("unsupported colour '{}'", text));
    }
    return {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)};
}

std::vector<Point2> parse_path_points(const std::string& d) {
    std::vector<double> numbers;
    std::string token;
    std::istringstream in(d);
    while (in >> token) {
        if (token == "M" || token == "L" || token == "Z") {
            continue;
        }
        numbers.push_back(std::stod(token));
    }
    if (numbers.size() % 2 != 0) {
        throw IoError("path data has an odd coordinate count");
    }
    std::vector<Point2> points;
    for (std::size_t i = 0; i < numbers.size(); i += 2) {
        points.push_back({numbers[i], numbers[i + 1]});
    }
    return points;
}

} // namespace

std::vector<ParsedArrow> parse_arrows(const ArrowDocument& document) {
    pt::ptree tree;
    std::istringstream in(document.svg);
    try {
        pt::read_xml(in, tree);
    } catch (const pt::xml_parser_error& e) {
        throw IoError(fmt::format("arrow document is not XML: {}", e.what()));
    }
    const auto& svg = tree.get_child("svg");
    std::map<std::string, std::pair<double, double>> markers;
    if (const auto defs = svg.get_child_optional("defs")) {
        for (const auto& [name, node] : *defs) {
            if (name == "marker") {
                markers[node.get<std::string>("<xmlattr>.id")] = {node.get<double>("<xmlattr>.refX"),
                                                                   node.get<double>("<xmlattr>.markerHeight")};
            }
        }
    }
    std::vector<ParsedArrow> arrows;
    for (const auto& [name, node] : svg) {
        if (name != "path") {
            continue;
        }
        ParsedArrow arrow;
        arrow.points = parse_path_points(node.get<std::string>("<xmlattr>.d"));
        arrow.color = parse_rgb(node.get<std::string>("<xmlattr>.stroke"));
        arrow.stroke_width = node.get<double>("<xmlattr>.stroke-width");
        arrow.opacity = node.get<double>("<xmlattr>.stroke-opacity", 1.0);
        const auto marker = node.get<std::string>("<xmlattr>.marker-end", "");
        if (marker.size() > 6 && marker.starts_with("url(#")) {
            const auto id = marker.substr(5, marker.size() - 6);
            if (const auto it = markers.find(id); it != markers.end()) {
                arrow.has_marker = true;
                arrow.head_length = it->second.first;
                arrow.head_width = it->second.second;
            }
        }
        arrows.push_back(std::move(arrow));
    }
    return arrows;
}

namespace {

constexpr int kShift = 4;
constexpr double kSub = 1 << kShift;
constexpr int kSupersample = 4;

cv::Point fixed(const Point2& p) {
    // Pixel centres sit at integer coordinates in OpenCV and at +0.5 in SVG user space.
    return {static_cast<int>(std::lround((p.x * kSupersample - 0.5) * kSub)),
            static_cast<int>(std::lround((p.y * kSupersample - 0.5) * kSub))};
}

// Renders one arrow into an 8-bit coverage layer: thick round-joined polyline plus the
// arrowhead, filled at kSupersample x resolution and area-averaged down.
cv::Mat arrow_layer(const ParsedArrow& arrow, int width, int height) {
    cv::Mat fine = cv::Mat::zeros(height * kSupersample, width * kSupersample, CV_8UC1);
    // Integer polygon fill also sets boundary pixels; pull edges in by half a fine pixel.
    constexpr double kInset = 0.5 / kSupersample;
    const double half = std::max(0.0, arrow.stroke_width / 2.0 - kInset);
    const auto radius = static_cast<int>(std::lround(half * kSupersample * kSub));
    for (std::size_t i = 0; i < arrow.points.size(); ++i) {
        const Point2& a = arrow.points[i];
        cv::circle(fine, fixed(a), radius, cv::Scalar(255), cv::FILLED, cv::LINE_8, kShift);
        if (i == 0) {
            continue;
        }
        const Point2& b = arrow.points[i - 1];
        const double len = std::hypot(a.x - b.x, a.y - b.y);
        if (len <= 0.0) {
            continue;
        }
        const double nx = -(a.y - b.y) / len * half;
        const double ny = (a.x - b.x) / len * half;
        const std::vector<cv::Point> quad{fixed({b.x + nx, b.y + ny}), fixed({a.x + nx, a.y + ny}),
                                          fixed({a.x - nx, a.y - ny}), fixed({b.x - nx, b.y - ny})};
        cv::fillConvexPoly(fine, quad, cv::Scalar(255), cv::LINE_8, kShift);
    }
    if (arrow.has_marker && arrow.points.size() >= 2) {
        const Point2 tip = arrow.points.back();
        Point2 from = tip;
        for (auto it = arrow.points.rbegin(); it != arrow.points.rend(); ++it) {
            if (*it != tip) {
                from = *it;
                break;
            }
        }
        const double len = std::hypot(tip.x - from.x, tip.y - from.y);
        if (len > 0.0) {
            const double dx = (tip.x - from.x) / len;
            const double dy = (tip.y - from.y) / len;
            const Point2 base{tip.x - dx * arrow.head_length, tip.y - dy * arrow.head_length};
            const double hw = std::max(0.0, arrow.head_width / 2.0 - kInset);
            const std::vector<cv::Point> head{fixed(tip), fixed({base.x - dy * hw, base.y + dx * hw}),
                                              fixed({base.x + dy * hw, base.y - dx * hw})};
            cv::fillConvexPoly(fine, head, cv::Scalar(255), cv::LINE_8, kShift);
        }
    }
    cv::Mat coarse;
    cv::resize(fine, coarse, cv::Size(width, height), 0, 0, cv::INTER_AREA);
    return coarse;
}

} // namespace

std::vector<float> arrow_coverage(const ArrowDocument& document) {
    std::vector<float> out(static_cast<std::size_t>(document.width) * document.height, 0.0f);
    for (const auto& arrow : parse_arrows(document)) {
        const cv::Mat layer = arrow_layer(arrow, document.width, document.height);
        for (int y = 0; y < document.height; ++y) {
            const auto* row = layer.ptr<std::uint8_t>(y);
            for (int x = 0; x < document.width; ++x) {
                auto& v = out[static_cast<std::size_t>(y) * document.width + x];
                const float a = static_cast<float>(row[x] / 255.0 * arrow.opacity);
                v = v + a * (1.0f - v);
            }
        }
    }
    return out;
}

Image composite(const Image& illustration, const ArrowDocument& document) {
    if (illustration.width != document.width || illustration.height != document.height) {
        throw ContractError(fmt::format("illustration {}x{} does not match arrow canvas {}x{}", illustration.width,
                                        illustration.height, document.width, document.height));
    }
    const auto arrows = parse_arrows(document);
    if (arrows.empty()) {
        return illustration;
    }
    Image out = illustration;
    for (const auto& arrow : arrows) {
        const cv::Mat layer = arrow_layer(arrow, document.width, document.height);
        for (int y = 0; y < document.height; ++y) {
            const auto* row = layer.ptr<std::uint8_t>(y);
            for (int x = 0; x < document.width; ++x) {
                if (row[x] == 0) {
                    continue;
                }
                const double a = row[x] / 255.0 * arrow.opacity;
                const Rgb src = out.pixel(x, y);
                auto mix = [a](std::uint8_t under, std::uint8_t over) {
                    return static_cast<std::uint8_t>(std::lround(under * (1.0 - a) + over * a));
                };
                out.set_pixel(x, y, {mix(src.r, arrow.color.r), mix(src.g, arrow.color.g), mix(src.b, arrow.color.b)});
            }
        }
    }
    return out;
}

bool has_motion(const KeypointTrack& track, int width, int height, double fraction) {
    if (track.samples.size() < 2) {
        return false;
    }
    const auto& a = track.samples.front();
    const auto& b = track.samples.back();
    const double moved = std::hypot((b.x - a.x) * width, (b.y - a.y) * height);
    return moved >= fraction * std::hypot(width, height);
}

} // namespace illusign
