#pragma once

// Raster types shared by every stage. Row-major storage, origin at the top-left
// corner, x is the column index and y the row index.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "srpl/error.hpp"

namespace srpl {

namespace detail {

inline std::size_t checked_area(int width, int height, const char* what) {
    if (width < 1 || height < 1) {
        throw ShapeError(std::string(what) + ": dimensions must be positive, got " +
                         std::to_string(width) + "x" + std::to_string(height));
    }
    return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
}

}  // namespace detail

/// Number of gray levels used wherever intensities are viewed as integers.
struct ImageSpec {
    int gray_levels = 256;

    void validate() const {
        if (gray_levels < 2) throw InvalidArgument("ImageSpec: gray_levels must be >= 2");
    }
};

/// Scalar intensity field with values in [0, 1].
class GrayImage {
public:
    GrayImage() = default;

    GrayImage(int width, int height, std::vector<float> data)
        : width_(width), height_(height), data_(std::move(data)) {
        const auto n = detail::checked_area(width, height, "GrayImage");
        if (data_.size() != n) {
            throw ShapeError("GrayImage: data length " + std::to_string(data_.size()) +
                             " != " + std::to_string(n));
        }
        for (float v : data_) {
            if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
                throw InvalidArgument("GrayImage: value outside [0,1]: " + std::to_string(v));
            }
        }
    }

    static GrayImage filled(int width, int height, float value) {
        return GrayImage(width, height,
                         std::vector<float>(detail::checked_area(width, height, "GrayImage"), value));
    }

    int width() const { return width_; }
    int height() const { return height_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float at(int x, int y) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    float operator[](std::size_t i) const { return data_[i]; }
    std::span<const float> data() const { return data_; }

    /// Pixel mean accumulated in double, row-major order.
    double mean() const {
        double s = 0.0;
        for (float v : data_) s += v;
        return s / static_cast<double>(data_.size());
    }

    friend bool operator==(const GrayImage&, const GrayImage&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<float> data_;
};

inline bool same_shape(const GrayImage& a, const GrayImage& b) {
    return a.width() == b.width() && a.height() == b.height();
}

/// Three GrayImage-compatible channels of identical size.
class RgbImage {
public:
    RgbImage() = default;

    RgbImage(GrayImage c0, GrayImage c1, GrayImage c2)
        : channels_{std::move(c0), std::move(c1), std::move(c2)} {
        if (channels_[0].empty() || !same_shape(channels_[0], channels_[1]) ||
            !same_shape(channels_[0], channels_[2])) {
            throw ShapeError("RgbImage: channel dimensions differ");
        }
    }

    /// The single-channel image repeated three times.
    static RgbImage replicate(const GrayImage& g) { return RgbImage(g, g, g); }

    int width() const { return channels_[0].width(); }
    int height() const { return channels_[0].height(); }
    const GrayImage& channel(int c) const { return channels_.at(static_cast<std::size_t>(c)); }

    friend bool operator==(const RgbImage&, const RgbImage&) = default;

private:
    std::array<GrayImage, 3> channels_;
};

/// Per-pixel class index in {0, ..., num_classes - 1}.
class LabelMask {
public:
    LabelMask() = default;

    LabelMask(int width, int height, std::vector<std::uint8_t> data, int num_classes = 2)
        : width_(width), height_(height), num_classes_(num_classes), data_(std::move(data)) {
        const auto n = detail::checked_area(width, height, "LabelMask");
        if (num_classes < 2 || num_classes > 256) throw InvalidArgument("LabelMask: num_classes out of range");
        if (data_.size() != n) throw ShapeError("LabelMask: data length mismatch");
        for (auto v : data_) {
            if (v >= num_classes) throw InvalidArgument("LabelMask: label " + std::to_string(v) + " >= C");
        }
    }

    static LabelMask zeros(int width, int height, int num_classes = 2) {
        return LabelMask(width, height,
                         std::vector<std::uint8_t>(detail::checked_area(width, height, "LabelMask"), 0),
                         num_classes);
    }

    int width() const { return width_; }
    int height() const { return height_; }
    int num_classes() const { return num_classes_; }
    std::size_t size() const { return data_.size(); }

    std::uint8_t at(int x, int y) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    std::uint8_t operator[](std::size_t i) const { return data_[i]; }
    std::span<const std::uint8_t> data() const { return data_; }

    std::size_t count(int cls) const {
        std::size_t n = 0;
        for (auto v : data_) n += (v == cls);
        return n;
    }

    friend bool operator==(const LabelMask&, const LabelMask&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    int num_classes_ = 2;
    std::vector<std::uint8_t> data_;
};

/// Per-pixel class probabilities, stored class-major as (C, H, W).
class ProbMap {
public:
    static constexpr double kSumTolerance = 1e-6;

    ProbMap() = default;

    ProbMap(int width, int height, int num_classes, std::vector<float> data)
        : width_(width), height_(height), num_classes_(num_classes), data_(std::move(data)) {
        const auto n = detail::checked_area(width, height, "ProbMap");
        if (num_classes < 2) throw InvalidArgument("ProbMap: num_classes must be >= 2");
        if (data_.size() != n * static_cast<std::size_t>(num_classes)) {
            throw ShapeError("ProbMap: data length mismatch");
        }
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (int c = 0; c < num_classes; ++c) {
                const float v = data_[c * n + i];
                if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
                    throw InvalidArgument("ProbMap: probability outside [0,1] at pixel " + std::to_string(i));
                }
                s += v;
            }
            if (std::abs(s - 1.0) > kSumTolerance) {
                throw InvalidArgument("ProbMap: class sum " + std::to_string(s) + " at pixel " +
                                      std::to_string(i));
            }
        }
    }

    static ProbMap uniform(int width, int height, int num_classes) {
        const auto n = detail::checked_area(width, height, "ProbMap");
        return ProbMap(width, height, num_classes,
                       std::vector<float>(n * num_classes, 1.0f / static_cast<float>(num_classes)));
    }

    int width() const { return width_; }
    int height() const { return height_; }
    int num_classes() const { return num_classes_; }
    std::size_t pixels() const { return static_cast<std::size_t>(width_) * height_; }

    float at(int cls, std::size_t pixel) const { return data_[cls * pixels() + pixel]; }
    std::span<const float> data() const { return data_; }

    friend bool operator==(const ProbMap&, const ProbMap&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    int num_classes_ = 0;
    std::vector<float> data_;
};

/// Integer gray level per pixel, produced by quantize().
struct IndexImage {
    int width = 0;
    int height = 0;
    int levels = 256;
    std::vector<int> data;
};

inline int quantize_value(float value, int levels) {
    return static_cast<int>(std::floor(static_cast<double>(value) * (levels - 1) + 0.5));
}

inline IndexImage quantize(const GrayImage& img, const ImageSpec& spec = {}) {
    spec.validate();
    IndexImage out{img.width(), img.height(), spec.gray_levels, {}};
    out.data.reserve(img.size());
    for (float v : img.data()) out.data.push_back(quantize_value(v, spec.gray_levels));
    return out;
}

inline GrayImage dequantize(const IndexImage& idx) {
    std::vector<float> data;
    data.reserve(idx.data.size());
    const double scale = 1.0 / (idx.levels - 1);
    for (int level : idx.data) {
        if (level < 0 || level >= idx.levels) throw InvalidArgument("dequantize: level out of range");
        data.push_back(static_cast<float>(level * scale));
    }
    return GrayImage(idx.width, idx.height, std::move(data));
}

}  // namespace srpl
