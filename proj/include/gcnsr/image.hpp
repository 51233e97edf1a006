#ifndef GCNSR_IMAGE_HPP
#define GCNSR_IMAGE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "gcnsr/errors.hpp"
#include "gcnsr/tensor.hpp"

namespace gcnsr {

/// 8-bit RGB image as a 1 x 3 x H x W tensor of values in [0, 255].
/// Returns nullopt (with `why` filled) when the file cannot be decoded.
inline std::optional<Tensor<float>> try_read_image(const std::filesystem::path& path, std::string* why = nullptr)
{
    cv::Mat bgr;
    try {
        bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    } catch (const cv::Exception& e) {
        if (why)
            *why = e.what();
        return std::nullopt;
    }
    if (bgr.empty() || bgr.depth() != CV_8U || bgr.channels() != 3) {
        if (why)
            *why = "not a decodable 8-bit image";
        return std::nullopt;
    }
    const auto h = static_cast<std::size_t>(bgr.rows), w = static_cast<std::size_t>(bgr.cols);
    Tensor<float> t(Shape{1, 3, h, w});
    for (std::size_t y = 0; y < h; ++y) {
        const auto* row = bgr.ptr<cv::Vec3b>(static_cast<int>(y));
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                t(0, c, y, x) = static_cast<float>(row[x][2 - c]);
    }
    return t;
}

inline Tensor<float> read_image(const std::filesystem::path& path)
{
    std::string why;
    auto img = try_read_image(path, &why);
    if (!img)
        throw DataError("cannot read image '" + path.string() + "': " + why);
    return std::move(*img);
}

/// Writes item 0 of a 1 x 3 x H x W tensor holding integral values in
/// [0, 255] as an 8-bit PNG.
template <class T>
void write_png(const std::filesystem::path& path, const Tensor<T>& pixels)
{
    const Shape& s = pixels.shape();
    if (s.n != 1 || s.c != 3)
        throw DimensionError("write_png expects a 1x3xHxW tensor, got " + s.str());
    cv::Mat bgr(static_cast<int>(s.h), static_cast<int>(s.w), CV_8UC3);
    for (std::size_t y = 0; y < s.h; ++y) {
        auto* row = bgr.ptr<cv::Vec3b>(static_cast<int>(y));
        for (std::size_t x = 0; x < s.w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = static_cast<double>(pixels(0, c, y, x));
                row[x][2 - c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
    }
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), bgr))
        throw DataError("cannot write image '" + path.string() + "'");
}

} // namespace gcnsr

#endif
