#pragma once

// Fixed per-pixel feature set for the desk-scale classifier.

#include <algorithm>
#include <cmath>
#include <vector>

#include "srpl/image.hpp"
#include "srpl/t3ie.hpp"

namespace srpl {

/// Feature order (v1): channel 0, channel 1, channel 2, 3x3 mean of channel 0,
/// 3x3 population std of channel 0, x/(W-1), y/(H-1), bias. The 3x3 window
/// clamps to the edge.
///
/// The four intensity features are shifted by -kIntensityCenter so they are
/// zero-mean over [0,1]. With all-positive inputs every entropy or CE
/// gradient on an intensity weight shares the bias gradient's sign, and Adam
/// then cannot sharpen the decision boundary without also sliding it.
struct FeatureSpec {
    static constexpr int kCount = 8;
    static constexpr const char* kId = "v1";
    static constexpr double kIntensityCenter = 0.5;
};

/// Feature-major (F, H, W) doubles.
struct FeatureMap {
    int width = 0;
    int height = 0;
    int count = FeatureSpec::kCount;
    std::vector<double> data;

    std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
    double at(int f, std::size_t pixel) const { return data[f * pixels() + pixel]; }
};

inline FeatureMap extract_features(const RgbImage& img) {
    const int w = img.width();
    const int h = img.height();
    FeatureMap fm{w, h, FeatureSpec::kCount, {}};
    const std::size_t n = fm.pixels();
    fm.data.assign(n * FeatureSpec::kCount, 0.0);
    auto put = [&](int f, std::size_t i, double v) { fm.data[f * n + i] = v; };
    const GrayImage& base = img.channel(0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            double sum = 0.0, sum_sq = 0.0;
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    const double v = base.at(std::clamp(x + dx, 0, w - 1), std::clamp(y + dy, 0, h - 1));
                    sum += v;
                    sum_sq += v * v;
                }
            }
            const double mean = sum / 9.0;
            constexpr double c = FeatureSpec::kIntensityCenter;
            put(0, i, img.channel(0).at(x, y) - c);
            put(1, i, img.channel(1).at(x, y) - c);
            put(2, i, img.channel(2).at(x, y) - c);
            put(3, i, mean - c);
            put(4, i, std::sqrt(std::max(0.0, sum_sq / 9.0 - mean * mean)));
            put(5, i, w > 1 ? static_cast<double>(x) / (w - 1) : 0.0);
            put(6, i, h > 1 ? static_cast<double>(y) / (h - 1) : 0.0);
            put(7, i, 1.0);
        }
    }
    return fm;
}

inline FeatureMap extract_features(const T3Bundle& bundle) { return extract_features(concat_rgb(bundle)); }

inline FeatureMap extract_features(const GrayImage& img) { return extract_features(RgbImage::replicate(img)); }

}  // namespace srpl
