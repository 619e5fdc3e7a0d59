#pragma once

// Reliability-aware pseudo-label losses: partial cross-entropy and partial
// Dice on the reliable region, entropy minimization on the unreliable region,
// with analytic gradients with respect to the softmax logits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "srpl/cmso.hpp"
#include "srpl/error.hpp"
#include "srpl/image.hpp"

namespace srpl {

struct LossConfig {
    double lambda = 10.0;
    double epsilon = 1e-5;
    double prob_floor = 1e-8;

    void validate() const {
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InvalidArgument("LossConfig: lambda must be >= 0");
        if (!(epsilon > 0.0)) throw InvalidArgument("LossConfig: epsilon must be > 0");
        if (!(prob_floor > 0.0 && prob_floor < 1.0)) throw InvalidArgument("LossConfig: prob_floor must be in (0,1)");
    }
};

/// Pre-softmax scores, stored class-major as (C, H, W).
struct LogitMap {
    int width = 0;
    int height = 0;
    int num_classes = 0;
    std::vector<double> data;

    std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
    double& at(int cls, std::size_t pixel) { return data[cls * pixels() + pixel]; }
    double at(int cls, std::size_t pixel) const { return data[cls * pixels() + pixel]; }
};

struct LossReport {
    double l_pce = 0.0;
    double l_pdc = 0.0;
    double l_rpl = 0.0;
    double l_pem = 0.0;
    double l_total = 0.0;
    std::vector<double> grad;  // d l_total / d z, same layout as LogitMap::data
};

/// Numerically stable per-pixel softmax in double precision.
inline std::vector<double> softmax(const LogitMap& z) {
    const std::size_t n = z.pixels();
    const int c_count = z.num_classes;
    std::vector<double> q(z.data.size());
    for (std::size_t i = 0; i < n; ++i) {
        double peak = z.at(0, i);
        for (int c = 1; c < c_count; ++c) peak = std::max(peak, z.at(c, i));
        double sum = 0.0;
        for (int c = 0; c < c_count; ++c) {
            const double e = std::exp(z.at(c, i) - peak);
            q[c * n + i] = e;
            sum += e;
        }
        for (int c = 0; c < c_count; ++c) q[c * n + i] /= sum;
    }
    return q;
}

inline ProbMap to_probmap(const LogitMap& z) {
    const auto q = softmax(z);
    return ProbMap(z.width, z.height, z.num_classes, std::vector<float>(q.begin(), q.end()));
}

namespace detail {

// Probabilities as a flat (C, N) double array with shape metadata.
struct ProbView {
    std::span<const double> q;
    int num_classes;
    std::size_t pixels;
    double at(int c, std::size_t i) const { return q[c * pixels + i]; }
};

inline void check_shapes(int width, int height, int num_classes, const LabelMask* r, const ReliabilityMask& reliab,
                         const char* who) {
    if (reliab.width() != width || reliab.height() != height) {
        throw ShapeError(std::string(who) + ": reliability mask shape mismatch");
    }
    if (r) {
        if (r->width() != width || r->height() != height) throw ShapeError(std::string(who) + ": label shape mismatch");
        for (auto v : r->data()) {
            if (v >= num_classes) throw ShapeError(std::string(who) + ": label exceeds class count");
        }
    }
}

// Each accumulator adds its loss and, when `gq` is non-null, `weight` times its
// gradient with respect to the probabilities.

inline double pce(const ProbView& q, const LabelMask& r, const ReliabilityMask& reliab, double floor,
                  std::vector<double>* gq, double weight) {
    const std::size_t n_reliable = reliab.reliable_count();
    if (n_reliable == 0) return 0.0;
    const double inv = 1.0 / static_cast<double>(n_reliable);
    double sum = 0.0;
    for (std::size_t i = 0; i < q.pixels; ++i) {
        if (!reliab.reliable(i)) continue;
        const int y = r[i];
        const double p = q.at(y, i);
        sum -= std::log(std::max(p, floor));
        if (gq && p > floor) (*gq)[y * q.pixels + i] -= weight * inv / p;
    }
    return sum * inv;
}

inline double pdc(const ProbView& q, const LabelMask& r, const ReliabilityMask& reliab, double eps,
                  std::vector<double>* gq, double weight) {
    if (reliab.reliable_count() == 0) return 0.0;
    const int c_count = q.num_classes;
    double ratio_sum = 0.0;
    for (int c = 0; c < c_count; ++c) {
        double overlap = 0.0;
        double squares = 0.0;
        for (std::size_t i = 0; i < q.pixels; ++i) {
            if (!reliab.reliable(i)) continue;
            const double p = q.at(c, i);
            const double t = r[i] == c ? 1.0 : 0.0;
            overlap += p * t;
            squares += p * p + t * t;
        }
        const double num = 2.0 * overlap + eps;
        const double den = squares + eps;
        ratio_sum += num / den;
        if (gq) {
            const double scale = -weight / static_cast<double>(c_count);
            for (std::size_t i = 0; i < q.pixels; ++i) {
                if (!reliab.reliable(i)) continue;
                const double t = r[i] == c ? 1.0 : 0.0;
                (*gq)[c * q.pixels + i] += scale * (2.0 * t / den - num * 2.0 * q.at(c, i) / (den * den));
            }
        }
    }
    return 1.0 - ratio_sum / static_cast<double>(c_count);
}

inline double pem(const ProbView& q, const ReliabilityMask& reliab, double floor, std::vector<double>* gq,
                  double weight) {
    const std::size_t n_unreliable = reliab.unreliable_count();
    if (n_unreliable == 0) return 0.0;
    const double inv = 1.0 / static_cast<double>(n_unreliable);
    double sum = 0.0;
    for (std::size_t i = 0; i < q.pixels; ++i) {
        if (reliab.reliable(i)) continue;
        for (int c = 0; c < q.num_classes; ++c) {
            const double p = q.at(c, i);
            const double log_p = std::log(std::max(p, floor));
            sum -= p * log_p;
            if (gq) (*gq)[c * q.pixels + i] -= weight * inv * (log_p + (p > floor ? 1.0 : 0.0));
        }
    }
    return sum * inv;
}

inline std::vector<double> widen(const ProbMap& q) { return {q.data().begin(), q.data().end()}; }

}  // namespace detail

inline double loss_pce(const ProbMap& q, const LabelMask& r, const ReliabilityMask& reliab,
                       const LossConfig& cfg = {}) {
    detail::check_shapes(q.width(), q.height(), q.num_classes(), &r, reliab, "loss_pce");
    const auto wide = detail::widen(q);
    return detail::pce({wide, q.num_classes(), q.pixels()}, r, reliab, cfg.prob_floor, nullptr, 0.0);
}

inline double loss_pdc(const ProbMap& q, const LabelMask& r, const ReliabilityMask& reliab,
                       const LossConfig& cfg = {}) {
    detail::check_shapes(q.width(), q.height(), q.num_classes(), &r, reliab, "loss_pdc");
    const auto wide = detail::widen(q);
    return detail::pdc({wide, q.num_classes(), q.pixels()}, r, reliab, cfg.epsilon, nullptr, 0.0);
}

inline double loss_rpl(const ProbMap& q, const LabelMask& r, const ReliabilityMask& reliab,
                       const LossConfig& cfg = {}) {
    return 0.5 * (loss_pce(q, r, reliab, cfg) + loss_pdc(q, r, reliab, cfg));
}

inline double loss_pem(const ProbMap& q, const ReliabilityMask& reliab, const LossConfig& cfg = {}) {
    detail::check_shapes(q.width(), q.height(), q.num_classes(), nullptr, reliab, "loss_pem");
    const auto wide = detail::widen(q);
    return detail::pem({wide, q.num_classes(), q.pixels()}, reliab, cfg.prob_floor, nullptr, 0.0);
}

/// l_total = l_rpl + lambda * l_pem on q = softmax(z), with d l_total / d z.
inline LossReport loss_total_with_grad(const LogitMap& z, const LabelMask& r, const ReliabilityMask& reliab,
                                       const LossConfig& cfg = {}) {
    cfg.validate();
    if (z.num_classes < 2 || z.data.size() != z.pixels() * static_cast<std::size_t>(z.num_classes)) {
        throw ShapeError("loss_total_with_grad: malformed logits");
    }
    for (double v : z.data) {
        if (!std::isfinite(v)) throw NumericError("loss_total_with_grad: non-finite logit");
    }
    detail::check_shapes(z.width, z.height, z.num_classes, &r, reliab, "loss_total_with_grad");

    const std::vector<double> q = softmax(z);
    const detail::ProbView view{q, z.num_classes, z.pixels()};
    std::vector<double> gq(q.size(), 0.0);

    LossReport rep;
    rep.l_pce = detail::pce(view, r, reliab, cfg.prob_floor, &gq, 0.5);
    rep.l_pdc = detail::pdc(view, r, reliab, cfg.epsilon, &gq, 0.5);
    rep.l_pem = detail::pem(view, reliab, cfg.prob_floor, cfg.lambda > 0.0 ? &gq : nullptr, cfg.lambda);
    rep.l_rpl = 0.5 * (rep.l_pce + rep.l_pdc);
    rep.l_total = rep.l_rpl + cfg.lambda * rep.l_pem;

    // Softmax Jacobian: dz_k = q_k (g_k - sum_c q_c g_c).
    const std::size_t n = z.pixels();
    rep.grad.assign(q.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (int c = 0; c < z.num_classes; ++c) dot += q[c * n + i] * gq[c * n + i];
        for (int c = 0; c < z.num_classes; ++c) rep.grad[c * n + i] = q[c * n + i] * (gq[c * n + i] - dot);
    }
    return rep;
}

}  // namespace srpl
