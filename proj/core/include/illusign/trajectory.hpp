#pragma once

#include "illusign/image.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace illusign {

struct Point2 {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Point2&, const Point2&) = default;
};

/// Fingertip position of one hand at one frame, in normalised image coordinates [0, 1].
struct KeypointSample {
    int frame = 0;
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const KeypointSample&, const KeypointSample&) = default;
};

struct KeypointTrack {
    std::string hand;  ///< "left" or "right"
    std::vector<KeypointSample> samples;

    std::vector<Point2> points() const;

    friend bool operator==(const KeypointTrack&, const KeypointTrack&) = default;
};

/// JSON form: {"hand": "...", "samples": [[frame, x, y], ...]}; files hold an array of tracks.
std::string track_to_json(const KeypointTrack& track);
KeypointTrack track_from_json(std::string_view text);
void write_tracks(const std::filesystem::path& path, const std::vector<KeypointTrack>& tracks);
std::vector<KeypointTrack> read_tracks(const std::filesystem::path& path);

/// Clamped B-spline over the parameter range [0, 1].
struct SplineCurve {
    int degree = 3;
    std::vector<double> knots;
    std::vector<Point2> control;
    double fit_mse = 0.0;

    Point2 evaluate(double u) const;
};

/// Index of the knot span containing u (clamped to the last non-empty span at u = 1).
int find_span(std::span<const double> knots, int degree, int n_control, double u);

/// All n_control basis values N_{i,degree}(u); zero outside the active span.
std::vector<double> basis_functions(std::span<const double> knots, int degree, int n_control, double u);

/// Normalised cumulative chord length; uniform when every sample coincides.
std::vector<double> chord_length_parameters(std::span<const Point2> points);

/// Knots placed by averaging the sample parameters so every span holds samples.
std::vector<double> averaged_knots(std::span<const double> params, int degree, int n_control);

int default_control_count(int samples);

/// Least-squares fit with fixed end points at chord-length parameters. n_control = 0 picks
/// default_control_count. Fewer than degree + 1 samples degrade to a straight segment.
SplineCurve fit_bspline(std::span<const Point2> points, int degree = 3, int n_control = 0);

/// n points at evenly spaced parameters, first and last at the curve ends.
std::vector<Point2> sample_curve(const SplineCurve& curve, int n);

struct ArrowStyle {
    Rgb color{255, 140, 0};
    double stroke_width = 4.0;
    /// Isoceles arrowhead: length along the path and base width, in pixels.
    double head_length = 12.0;
    double head_width = 12.0;
    double opacity = 1.0;
};

/// SVG 1.1 document with one path and one end marker per arrow.
struct ArrowDocument {
    int width = 0;
    int height = 0;
    std::string svg;
    int arrow_count = 0;
};

/// Polylines are in normalised coordinates; they are scaled to the canvas. Polylines with
/// fewer than two distinct points are skipped with a warning.
ArrowDocument render_arrows(std::span<const std::vector<Point2>> polylines, const ArrowStyle& style, int width,
                            int height);
ArrowDocument render_arrow(const std::vector<Point2>& polyline, const ArrowStyle& style, int width, int height);

/// Paths read back from an arrow document (pixel coordinates).
struct ParsedArrow {
    std::vector<Point2> points;
    Rgb color;
    double stroke_width = 0.0;
    double opacity = 1.0;
    double head_length = 0.0;
    double head_width = 0.0;
    bool has_marker = false;
};

std::vector<ParsedArrow> parse_arrows(const ArrowDocument& document);

/// Anti-aliased coverage (0..1 per pixel) of all arrows in the document.
std::vector<float> arrow_coverage(const ArrowDocument& document);

/// Alpha-blends the arrows over the illustration. Throws ContractError on size mismatch.
Image composite(const Image& illustration, const ArrowDocument& document);

/// True when the first-to-last displacement exceeds `fraction` of the image diagonal.
bool has_motion(const KeypointTrack& track, int width, int height, double fraction = 0.03);

} // namespace illusign
