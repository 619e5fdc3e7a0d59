#pragma once

// Test-time tri-branch intensity enhancement: histogram equalization,
// domain-adaptive gamma and natural-image-compatible gamma, plus the
// three-channel concatenation of their outputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "srpl/error.hpp"
#include "srpl/golden_section.hpp"
#include "srpl/image.hpp"

namespace srpl {

/// Mean intensity of the whole target-domain training set, normalized to (0,1).
struct DomainStats {
    double mean_intensity = 0.5;
    std::uint64_t n_pixels = 0;
};

/// Intensity statistics of natural images after normalization (127.5 / 74 on 8-bit).
struct SamStats {
    double mean = 0.5;
    double stddev = 0.29;
};

struct GammaSearchConfig {
    double gamma_min = 0.05;
    double gamma_max = 20.0;
    double tolerance = 1e-5;  // bracket width in log-gamma
    int coarse_samples = 64;  // log-spaced scan that seeds the golden-section bracket

    void validate() const {
        if (!(gamma_min > 0.0 && gamma_min < gamma_max)) throw InvalidArgument("GammaSearchConfig: bad range");
        if (!(tolerance > 0.0)) throw InvalidArgument("GammaSearchConfig: tolerance must be > 0");
        if (coarse_samples < 3) throw InvalidArgument("GammaSearchConfig: coarse_samples must be >= 3");
    }
};

struct T3Bundle {
    GrayImage he;
    GrayImage gd;
    GrayImage gs;
    double gamma_d = 1.0;
    double gamma_s = 1.0;

    friend bool operator==(const T3Bundle&, const T3Bundle&) = default;
};

// Histogram equalization: level i maps to round((L-1) * CDF(i)), with the
// inclusive CDF of the quantized image.
inline GrayImage histogram_equalize(const GrayImage& img, const ImageSpec& spec = {}) {
    const IndexImage q = quantize(img, spec);
    const int levels = spec.gray_levels;
    std::vector<std::uint64_t> cumulative(levels, 0);
    for (int level : q.data) ++cumulative[level];
    for (int i = 1; i < levels; ++i) cumulative[i] += cumulative[i - 1];

    // Integer rounding, half away from zero: floor((2 (L-1) cum + N) / 2N).
    const std::uint64_t n = q.data.size();
    std::vector<int> lut(levels);
    for (int i = 0; i < levels; ++i) {
        lut[i] = static_cast<int>((2 * static_cast<std::uint64_t>(levels - 1) * cumulative[i] + n) / (2 * n));
    }
    IndexImage out{q.width, q.height, levels, {}};
    out.data.reserve(q.data.size());
    for (int level : q.data) out.data.push_back(lut[level]);
    return dequantize(out);
}

/// Pixel-weighted grand mean over a dataset, summed in a fixed order.
inline DomainStats compute_domain_stats(std::span<const GrayImage> images) {
    if (images.empty()) throw EmptyDataset("compute_domain_stats: no images");
    long double sum = 0.0L;
    std::uint64_t n = 0;
    for (const auto& img : images) {
        for (float v : img.data()) sum += v;
        n += img.size();
    }
    if (n == 0) throw EmptyDataset("compute_domain_stats: no pixels");
    const double mean = static_cast<double>(sum / static_cast<long double>(n));
    if (!(mean > 0.0 && mean < 1.0)) {
        throw DegenerateDomain("compute_domain_stats: dataset mean " + std::to_string(mean) + " is not in (0,1)");
    }
    return {mean, n};
}

inline GrayImage apply_gamma(const GrayImage& img, double gamma) {
    std::vector<float> out;
    out.reserve(img.size());
    if (gamma == 1.0) {
        out.assign(img.data().begin(), img.data().end());
    } else {
        for (float v : img.data()) {
            out.push_back(static_cast<float>(std::clamp(std::pow(static_cast<double>(v), gamma), 0.0, 1.0)));
        }
    }
    return GrayImage(img.width(), img.height(), std::move(out));
}

struct GammaResult {
    double gamma = 1.0;
    GrayImage out;
};

/// Gamma that moves the image's mean intensity point onto the dataset mean:
/// mean(img)^gamma == u_D.
inline GammaResult gamma_domain(const GrayImage& img, const DomainStats& stats) {
    const double u_d = stats.mean_intensity;
    if (!(u_d > 0.0 && u_d < 1.0)) throw DegenerateDomain("gamma_domain: domain mean not in (0,1)");
    const double u_x = img.mean();
    if (!(u_x > 0.0 && u_x < 1.0)) {
        throw DegenerateImage("gamma_domain: image mean " + std::to_string(u_x) + " is not in (0,1)");
    }
    const double gamma = std::log(u_d) / std::log(u_x);
    return {gamma, apply_gamma(img, gamma)};
}

/// Squared deviation of the gamma-corrected mean and population variance from
/// the target statistics.
inline double gamma_sam_objective(std::span<const float> pixels, double gamma, const SamStats& sam = {}) {
    double sum = 0.0;
    double sum_sq = 0.0;
    for (float v : pixels) {
        const double p = std::pow(static_cast<double>(v), gamma);
        sum += p;
        sum_sq += p * p;
    }
    const double n = static_cast<double>(pixels.size());
    const double mean = sum / n;
    const double var = std::max(0.0, sum_sq / n - mean * mean);
    const double dm = sam.mean - mean;
    const double dv = sam.stddev * sam.stddev - var;
    return dm * dm + dv * dv;
}

/// Minimizes gamma_sam_objective over [gamma_min, gamma_max] in log-gamma: a
/// coarse log-spaced scan picks the bracket, golden-section refines it.
inline GammaResult gamma_sam(const GrayImage& img, const SamStats& sam = {}, const GammaSearchConfig& cfg = {}) {
    cfg.validate();
    const auto pixels = img.data();
    auto objective = [&](double log_gamma) { return gamma_sam_objective(pixels, std::exp(log_gamma), sam); };

    const double lo = std::log(cfg.gamma_min);
    const double hi = std::log(cfg.gamma_max);
    const int samples = cfg.coarse_samples;
    const double step = (hi - lo) / (samples - 1);
    int best = 0;
    double best_value = objective(lo);
    for (int k = 1; k < samples; ++k) {
        const double value = objective(lo + k * step);
        if (value < best_value) {
            best_value = value;
            best = k;
        }
    }
    const double a = lo + std::max(best - 1, 0) * step;
    const double b = lo + std::min(best + 1, samples - 1) * step;
    ScalarMinimum m = golden_section_minimize(objective, a, b, cfg.tolerance);
    if (best_value < m.value) m = {lo + best * step, best_value, m.iterations};

    // Never worse than the identity.
    if (lo <= 0.0 && 0.0 <= hi) {
        const double at_identity = objective(0.0);
        if (at_identity < m.value) m = {0.0, at_identity, m.iterations};
    }
    const double gamma = std::clamp(std::exp(m.x), cfg.gamma_min, cfg.gamma_max);
    return {gamma, apply_gamma(img, gamma)};
}

inline T3Bundle t3ie(const GrayImage& img, const DomainStats& stats, const SamStats& sam = {},
                     const ImageSpec& spec = {}, const GammaSearchConfig& cfg = {}) {
    auto gd = gamma_domain(img, stats);
    auto gs = gamma_sam(img, sam, cfg);
    return {histogram_equalize(img, spec), std::move(gd.out), std::move(gs.out), gd.gamma, gs.gamma};
}

/// Channel order is fixed: (he, gd, gs).
inline RgbImage concat_rgb(const T3Bundle& bundle) {
    if (!same_shape(bundle.he, bundle.gd) || !same_shape(bundle.he, bundle.gs)) {
        throw ShapeError("concat_rgb: branch dimensions differ");
    }
    return RgbImage(bundle.he, bundle.gd, bundle.gs);
}

}  // namespace srpl
