#pragma once

// Seeded two-domain toy benchmark: bright ellipses on a dark background.
// The target domain is the same geometry pushed through a gamma curve,
// contrast compression and extra noise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "srpl/error.hpp"
#include "srpl/image.hpp"

namespace srpl {

struct SynthDomainConfig {
    int width = 64;
    int height = 64;
    int n_train = 24;
    int n_test = 12;
    int ellipses_min = 1;
    int ellipses_max = 1;
    double axis_min = 7.0;
    double axis_max = 16.0;
    double fg_mean = 0.75;
    double bg_mean = 0.25;
    double halo_width = 0.0;  // px; a background ring of intermediate intensity around each ellipse
    double halo_mean = 0.5;
    bool halo_is_foreground = false;
    int edge_blur = 0;  // box-blur radius (px) of the noiseless intensity map; partial-volume edges
    double source_noise = 0.05;
    double target_gamma = 1.8;
    double target_gamma_jitter = 0.0;  // per-image log-gamma std in the target domain
    double target_bias_field = 0.0;    // amplitude of a per-image linear intensity ramp in the target domain
    double target_contrast = 0.6;
    double target_offset = 0.1;
    double target_noise = 0.08;
    std::uint64_t seed = 7;

    void validate() const {
        if (width < 8 || height < 8) throw InvalidArgument("SynthDomainConfig: image must be at least 8x8");
        if (n_train < 1 || n_test < 1) throw InvalidArgument("SynthDomainConfig: need at least one image per split");
        if (ellipses_min < 1 || ellipses_max < ellipses_min) throw InvalidArgument("SynthDomainConfig: bad ellipse count");
        if (!(axis_min >= 1.0 && axis_max >= axis_min)) throw InvalidArgument("SynthDomainConfig: bad axis range");
        if (edge_blur < 0) throw InvalidArgument("SynthDomainConfig: edge_blur must be >= 0");
        if (target_gamma_jitter < 0.0 || target_bias_field < 0.0) throw InvalidArgument("SynthDomainConfig: negative jitter");
        if (halo_width < 0.0) throw InvalidArgument("SynthDomainConfig: halo_width must be >= 0");
        if (2.0 * (axis_max + halo_width) + 2.0 > std::min(width, height)) throw InvalidArgument("SynthDomainConfig: ellipses too large");
        if (!(target_gamma > 0.0 && target_contrast > 0.0)) throw InvalidArgument("SynthDomainConfig: bad shift");
    }
};

struct LabeledImage {
    std::string id;
    GrayImage image;
    LabelMask label;
};

struct SynthDataset {
    std::vector<LabeledImage> source_train;
    std::vector<LabeledImage> source_test;
    std::vector<LabeledImage> target_train;
    std::vector<LabeledImage> target_test;
};

namespace detail {

struct Ellipse {
    double cx, cy, a, b, theta;
    bool contains(double x, double y, double grow = 0.0) const {
        const double dx = x - cx;
        const double dy = y - cy;
        const double u = dx * std::cos(theta) + dy * std::sin(theta);
        const double v = -dx * std::sin(theta) + dy * std::cos(theta);
        const double ga = a + grow;
        const double gb = b + grow;
        return (u * u) / (ga * ga) + (v * v) / (gb * gb) <= 1.0;
    }
};

inline std::vector<Ellipse> sample_geometry(const SynthDomainConfig& cfg, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> count(cfg.ellipses_min, cfg.ellipses_max);
    std::uniform_real_distribution<double> axis(cfg.axis_min, cfg.axis_max);
    std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
    std::vector<Ellipse> out;
    const int k = count(rng);
    for (int e = 0; e < k; ++e) {
        const double a = axis(rng);
        const double b = axis(rng);
        const double r = std::max(a, b) + cfg.halo_width + 1.0;
        std::uniform_real_distribution<double> cx(r, cfg.width - 1 - r);
        std::uniform_real_distribution<double> cy(r, cfg.height - 1 - r);
        out.push_back({cx(rng), cy(rng), a, b, angle(rng)});
    }
    return out;
}

inline std::vector<double> box_blur(const std::vector<double>& src, int w, int h, int radius) {
    std::vector<double> out(src.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double sum = 0.0;
            int cnt = 0;
            for (int dy = -radius; dy <= radius; ++dy) {
                for (int dx = -radius; dx <= radius; ++dx) {
                    sum += src[static_cast<std::size_t>(std::clamp(y + dy, 0, h - 1)) * w + std::clamp(x + dx, 0, w - 1)];
                    ++cnt;
                }
            }
            out[static_cast<std::size_t>(y) * w + x] = sum / cnt;
        }
    }
    return out;
}

inline std::vector<LabeledImage> synth_split(const SynthDomainConfig& cfg, bool target, int count,
                                             std::uint64_t stream, const std::string& prefix) {
    std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ull + stream);
    std::normal_distribution<double> source_noise(0.0, cfg.source_noise);
    std::normal_distribution<double> target_noise(0.0, cfg.target_noise);
    std::vector<LabeledImage> out;
    const std::size_t n = static_cast<std::size_t>(cfg.width) * cfg.height;
    std::normal_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    for (int k = 0; k < count; ++k) {
        const auto shapes = sample_geometry(cfg, rng);
        std::vector<std::uint8_t> label(n, 0);
        std::vector<double> mean(n);
        for (int y = 0; y < cfg.height; ++y) {
            for (int x = 0; x < cfg.width; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * cfg.width + x;
                bool fg = false;
                bool halo = false;
                for (const auto& e : shapes) {
                    fg = fg || e.contains(x, y);
                    halo = halo || (cfg.halo_width > 0.0 && e.contains(x, y, cfg.halo_width));
                }
                label[i] = fg || (halo && cfg.halo_is_foreground);
                mean[i] = fg ? cfg.fg_mean : (halo ? cfg.halo_mean : cfg.bg_mean);
            }
        }
        if (cfg.edge_blur > 0) mean = box_blur(mean, cfg.width, cfg.height, cfg.edge_blur);

        const double gamma = cfg.target_gamma * std::exp(cfg.target_gamma_jitter * unit(rng));
        const double ramp_dir = angle(rng);
        const double rx = std::cos(ramp_dir);
        const double ry = std::sin(ramp_dir);
        std::vector<float> pixels(n);
        for (int y = 0; y < cfg.height; ++y) {
            for (int x = 0; x < cfg.width; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * cfg.width + x;
                double v = std::clamp(mean[i] + source_noise(rng), 0.0, 1.0);
                if (target) {
                    const double u = static_cast<double>(x) / (cfg.width - 1) - 0.5;
                    const double t = static_cast<double>(y) / (cfg.height - 1) - 0.5;
                    const double ramp = 1.0 + cfg.target_bias_field * (u * rx + t * ry);
                    v = cfg.target_offset + cfg.target_contrast * ramp * std::pow(v, gamma) + target_noise(rng);
                    v = std::clamp(v, 0.0, 1.0);
                }
                pixels[i] = static_cast<float>(v);
            }
        }
        char id[32];
        std::snprintf(id, sizeof id, "%s_%03d", prefix.c_str(), k);
        out.push_back({id, GrayImage(cfg.width, cfg.height, std::move(pixels)),
                       LabelMask(cfg.width, cfg.height, std::move(label), 2)});
    }
    return out;
}

}  // namespace detail

inline SynthDataset synth_dataset(const SynthDomainConfig& cfg) {
    cfg.validate();
    return {detail::synth_split(cfg, false, cfg.n_train, 1, "src_train"),
            detail::synth_split(cfg, false, cfg.n_test, 2, "src_test"),
            detail::synth_split(cfg, true, cfg.n_train, 3, "tgt_train"),
            detail::synth_split(cfg, true, cfg.n_test, 4, "tgt_test")};
}

}  // namespace srpl
