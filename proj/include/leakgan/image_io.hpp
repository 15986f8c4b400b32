#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <opencv2/videoio.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "leakgan/error.hpp"

namespace leakgan {

/// 8-bit image, interleaved HWC, RGB channel order for colour images.
struct Image {
    std::size_t height = 0, width = 0, channels = 1;
    std::vector<std::uint8_t> data;

    Image() = default;
    Image(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill = 0)
        : height(h), width(w), channels(c), data(h * w * c, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) { return data[(y * width + x) * channels + c]; }
    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
        return data[(y * width + x) * channels + c];
    }
    std::size_t pixels() const noexcept { return height * width; }
    bool empty() const noexcept { return data.empty(); }
};

/// Binary 0/1 mask, row-major.
struct BinaryMask {
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> data;

    BinaryMask() = default;
    BinaryMask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), data(h * w, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
    std::size_t pixels() const noexcept { return height * width; }
    std::size_t count() const {
        return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
    }
};

namespace detail {

inline cv::Mat decode_with_opencv(const std::filesystem::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty()) {
        // imread has no GIF codec; the video backend decodes single-frame GIFs.
        cv::VideoCapture cap(path.string());
        cv::Mat frame;
        if (cap.isOpened() && cap.read(frame)) m = frame;
    }
    return m;
}

}  // namespace detail

inline Image read_image(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw DataError("image not found: " + path.string());
    cv::Mat m = detail::decode_with_opencv(path);
    if (m.empty()) throw DataError("cannot decode image: " + path.string());
    if (m.depth() != CV_8U) throw DataError("only 8-bit images are supported: " + path.string());
    cv::Mat rgb;
    switch (m.channels()) {
        case 1: rgb = m; break;
        case 3: cv::cvtColor(m, rgb, cv::COLOR_BGR2RGB); break;
        case 4: cv::cvtColor(m, rgb, cv::COLOR_BGRA2RGB); break;
        default: throw DataError("unsupported channel count in " + path.string());
    }
    Image img(static_cast<std::size_t>(rgb.rows), static_cast<std::size_t>(rgb.cols),
              static_cast<std::size_t>(rgb.channels()));
    for (int y = 0; y < rgb.rows; ++y) {
        const auto* row = rgb.ptr<std::uint8_t>(y);
        std::copy_n(row, img.width * img.channels, img.data.begin() + static_cast<std::ptrdiff_t>(y * img.width * img.channels));
    }
    return img;
}

/// Decode a mask image; any colour image is reduced to its first channel.
/// Values above half the maximum intensity count as foreground.
inline BinaryMask read_mask(const std::filesystem::path& path) {
    Image img = read_image(path);
    BinaryMask m(img.height, img.width);
    std::uint8_t hi = 0;
    for (std::size_t k = 0; k < img.pixels(); ++k) hi = std::max(hi, img.data[k * img.channels]);
    const std::uint8_t cut = hi <= 1 ? 0 : 127;
    for (std::size_t k = 0; k < img.pixels(); ++k) m.data[k] = img.data[k * img.channels] > cut ? 1 : 0;
    return m;
}

namespace detail {

inline void write_mat(const std::filesystem::path& path, const cv::Mat& m) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    bool ok = false;
    try {
        ok = cv::imwrite(path.string(), m);
    } catch (const cv::Exception& e) {
        throw IoError("cannot write " + path.string() + ": " + e.what());
    }
    if (!ok) throw IoError("cannot write " + path.string());
}

}  // namespace detail

inline void write_image(const std::filesystem::path& path, const Image& img) {
    const int type = img.channels == 1 ? CV_8UC1 : CV_8UC3;
    cv::Mat m(static_cast<int>(img.height), static_cast<int>(img.width), type,
              const_cast<std::uint8_t*>(img.data.data()));
    if (img.channels == 3) {
        cv::Mat bgr;
        cv::cvtColor(m, bgr, cv::COLOR_RGB2BGR);
        detail::write_mat(path, bgr);
    } else {
        detail::write_mat(path, m);
    }
}

/// Writes 0/255.
inline void write_mask(const std::filesystem::path& path, const BinaryMask& mask) {
    Image img(mask.height, mask.width, 1);
    for (std::size_t k = 0; k < mask.pixels(); ++k) img.data[k] = mask.data[k] ? 255 : 0;
    write_image(path, img);
}

/// 16-bit grayscale PNG; `values` row-major in [0, 65535].
inline void write_png16(const std::filesystem::path& path, std::size_t height, std::size_t width,
                        const std::vector<std::uint16_t>& values) {
    cv::Mat m(static_cast<int>(height), static_cast<int>(width), CV_16UC1,
              const_cast<std::uint16_t*>(values.data()));
    detail::write_mat(path, m);
}

inline std::vector<std::uint16_t> read_png16(const std::filesystem::path& path, std::size_t& height,
                                             std::size_t& width) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty() || m.depth() != CV_16U || m.channels() != 1) {
        throw DataError("not a 16-bit grayscale PNG: " + path.string());
    }
    height = static_cast<std::size_t>(m.rows);
    width = static_cast<std::size_t>(m.cols);
    std::vector<std::uint16_t> out(height * width);
    for (int y = 0; y < m.rows; ++y) {
        std::copy_n(m.ptr<std::uint16_t>(y), width, out.begin() + static_cast<std::ptrdiff_t>(y * width));
    }
    return out;
}

}  // namespace leakgan
