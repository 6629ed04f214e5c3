#include "illusign/image.hpp"

#include "illusign/errors.hpp"
#include "illusign/hashing.hpp"

#include <cmath>
#include <limits>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace illusign {

namespace {

cv::Mat as_bgr_mat(const Image& image) {
    cv::Mat rgb(image.height, image.width, CV_8UC3, const_cast<std::uint8_t*>(image.rgb.data()));
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    return bgr;
}

Image from_bgr_mat(const cv::Mat& bgr) {
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    Image image;
    image.width = rgb.cols;
    image.height = rgb.rows;
    image.rgb.assign(rgb.datastart, rgb.dataend);
    return image;
}

Image from_any_mat(const cv::Mat& mat) {
    if (mat.channels() == 1) {
        cv::Mat bgr;
        cv::cvtColor(mat, bgr, cv::COLOR_GRAY2BGR);
        return from_bgr_mat(bgr);
    }
    if (mat.channels() == 4) {
        cv::Mat bgr;
        cv::cvtColor(mat, bgr, cv::COLOR_BGRA2BGR);
        return from_bgr_mat(bgr);
    }
    return from_bgr_mat(mat);
}

GrayImage gray_from_mat(const cv::Mat& mat) {
    cv::Mat gray = mat;
    if (mat.channels() == 3) {
        cv::cvtColor(mat, gray, cv::COLOR_BGR2GRAY);
    } else if (mat.channels() == 4) {
        cv::cvtColor(mat, gray, cv::COLOR_BGRA2GRAY);
    }
    GrayImage out;
    out.width = gray.cols;
    out.height = gray.rows;
    cv::Mat cont = gray.isContinuous() ? gray : gray.clone();
    out.pixels.assign(cont.datastart, cont.dataend);
    return out;
}

void check_nonempty(int width, int height, const char* what) {
    if (width <= 0 || height <= 0) {
        throw ContractError(std::string("cannot encode empty ") + what);
    }
}

} // namespace

Image Image::filled(int width, int height, Rgb color) {
    Image image;
    image.width = width;
    image.height = height;
    image.rgb.resize(static_cast<std::size_t>(width) * height * 3);
    for (std::size_t i = 0; i < image.rgb.size(); i += 3) {
        image.rgb[i] = color.r;
        image.rgb[i + 1] = color.g;
        image.rgb[i + 2] = color.b;
    }
    return image;
}

GrayImage GrayImage::filled(int width, int height, std::uint8_t value) {
    GrayImage image;
    image.width = width;
    image.height = height;
    image.pixels.assign(static_cast<std::size_t>(width) * height, value);
    return image;
}

Image read_image(const std::filesystem::path& path) {
    cv::Mat mat = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (mat.empty()) {
        throw IoError("cannot read image " + path.string());
    }
    return from_any_mat(mat);
}

GrayImage read_gray(const std::filesystem::path& path) {
    cv::Mat mat = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (mat.empty()) {
        throw IoError("cannot read image " + path.string());
    }
    return gray_from_mat(mat);
}

void write_png(const std::filesystem::path& path, const Image& image) {
    check_nonempty(image.width, image.height, "image");
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    if (!cv::imwrite(path.string(), as_bgr_mat(image))) {
        throw IoError("cannot write " + path.string());
    }
}

void write_png(const std::filesystem::path& path, const GrayImage& image) {
    check_nonempty(image.width, image.height, "image");
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    cv::Mat mat(image.height, image.width, CV_8UC1, const_cast<std::uint8_t*>(image.pixels.data()));
    if (!cv::imwrite(path.string(), mat)) {
        throw IoError("cannot write " + path.string());
    }
}

std::vector<std::uint8_t> encode_png(const Image& image) {
    check_nonempty(image.width, image.height, "image");
    std::vector<std::uint8_t> bytes;
    cv::imencode(".png", as_bgr_mat(image), bytes);
    return bytes;
}

std::vector<std::uint8_t> encode_png(const GrayImage& image) {
    check_nonempty(image.width, image.height, "image");
    cv::Mat mat(image.height, image.width, CV_8UC1, const_cast<std::uint8_t*>(image.pixels.data()));
    std::vector<std::uint8_t> bytes;
    cv::imencode(".png", mat, bytes);
    return bytes;
}

Image decode_image(std::span<const std::uint8_t> bytes) {
    cv::Mat buffer(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
    cv::Mat mat = cv::imdecode(buffer, cv::IMREAD_COLOR);
    if (mat.empty()) {
        throw IoError("cannot decode image bytes");
    }
    return from_any_mat(mat);
}

GrayImage decode_gray(std::span<const std::uint8_t> bytes) {
    cv::Mat buffer(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
    cv::Mat mat = cv::imdecode(buffer, cv::IMREAD_GRAYSCALE);
    if (mat.empty()) {
        throw IoError("cannot decode image bytes");
    }
    return gray_from_mat(mat);
}

Image resize(const Image& image, int width, int height) {
    if (image.width == width && image.height == height) {
        return image;
    }
    if (width <= 0 || height <= 0) {
        throw ContractError("resize target must be positive");
    }
    cv::Mat rgb(image.height, image.width, CV_8UC3, const_cast<std::uint8_t*>(image.rgb.data()));
    cv::Mat out;
    const bool shrinking = width <= image.width && height <= image.height;
    cv::resize(rgb, out, cv::Size(width, height), 0, 0, shrinking ? cv::INTER_AREA : cv::INTER_LINEAR);
    Image result;
    result.width = width;
    result.height = height;
    result.rgb.assign(out.datastart, out.dataend);
    return result;
}

GrayImage to_gray(const Image& image) {
    GrayImage gray;
    gray.width = image.width;
    gray.height = image.height;
    gray.pixels.resize(image.pixel_count());
    for (std::size_t i = 0; i < gray.pixels.size(); ++i) {
        const double y = 0.299 * image.rgb[3 * i] + 0.587 * image.rgb[3 * i + 1] + 0.114 * image.rgb[3 * i + 2];
        gray.pixels[i] = static_cast<std::uint8_t>(std::lround(y));
    }
    return gray;
}

Image to_rgb(const GrayImage& image) {
    Image rgb;
    rgb.width = image.width;
    rgb.height = image.height;
    rgb.rgb.resize(image.pixels.size() * 3);
    for (std::size_t i = 0; i < image.pixels.size(); ++i) {
        rgb.rgb[3 * i] = rgb.rgb[3 * i + 1] = rgb.rgb[3 * i + 2] = image.pixels[i];
    }
    return rgb;
}

std::string content_hash(const Image& image) {
    Sha256 hasher;
    hasher.update("rgb8");
    hasher.update_u64(static_cast<std::uint64_t>(image.width));
    hasher.update_u64(static_cast<std::uint64_t>(image.height));
    hasher.update(image.rgb);
    return hasher.hex();
}

std::string content_hash(const GrayImage& image) {
    Sha256 hasher;
    hasher.update("gray8");
    hasher.update_u64(static_cast<std::uint64_t>(image.width));
    hasher.update_u64(static_cast<std::uint64_t>(image.height));
    hasher.update(image.pixels);
    return hasher.hex();
}

double psnr(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height) {
        throw ContractError("psnr requires equal image sizes");
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < a.rgb.size(); ++i) {
        const double d = static_cast<double>(a.rgb[i]) - b.rgb[i];
        sum += d * d;
    }
    const double mse = sum / static_cast<double>(a.rgb.size());
    if (mse == 0.0) {
        return std::numeric_limits<double>::infinity();
    }
    return 10.0 * std::log10(255.0 * 255.0 / mse);
}

} // namespace illusign
