#pragma once

// Dice overlap and average symmetric surface distance on 2-D label masks.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "srpl/error.hpp"
#include "srpl/image.hpp"

namespace srpl {

struct PixelPoint {
    int x = 0;
    int y = 0;
    friend bool operator==(const PixelPoint&, const PixelPoint&) = default;
};

/// Foreground pixels with at least one background 4-neighbour; the image
/// border counts as background. Row-major order.
using SurfacePointSet = std::vector<PixelPoint>;

struct Spacing {
    double sx = 1.0;
    double sy = 1.0;
};

namespace detail {

inline void require_same_shape(const LabelMask& a, const LabelMask& b, const char* who) {
    if (a.width() != b.width() || a.height() != b.height()) throw ShapeError(std::string(who) + ": mask shapes differ");
}

}  // namespace detail

/// 2|A and B| / (|A| + |B|); 1 when both are empty.
inline double dice(const LabelMask& a, const LabelMask& b, int cls = 1) {
    detail::require_same_shape(a, b, "dice");
    std::size_t na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool in_a = a[i] == cls;
        const bool in_b = b[i] == cls;
        na += in_a;
        nb += in_b;
        both += in_a && in_b;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

inline SurfacePointSet boundary_points(const LabelMask& mask, int cls = 1) {
    SurfacePointSet pts;
    const int w = mask.width();
    const int h = mask.height();
    auto fg = [&](int x, int y) { return x >= 0 && y >= 0 && x < w && y < h && mask.at(x, y) == cls; };
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!fg(x, y)) continue;
            if (!fg(x - 1, y) || !fg(x + 1, y) || !fg(x, y - 1) || !fg(x, y + 1)) pts.push_back({x, y});
        }
    }
    return pts;
}

namespace detail {

// One pass of the lower-envelope distance transform over `f` (squared
// distances, +inf where no site), with sample positions k * spacing.
inline void edt_1d(std::vector<double>& f, double spacing) {
    const int n = static_cast<int>(f.size());
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<int> sites;
    std::vector<double> bounds;
    for (int q = 0; q < n; ++q) {
        if (f[q] == inf) continue;
        const double pq = q * spacing;
        double start = -inf;
        while (!sites.empty()) {
            const int r = sites.back();
            const double pr = r * spacing;
            const double s = ((f[q] + pq * pq) - (f[r] + pr * pr)) / (2.0 * (pq - pr));
            if (s > bounds.back()) {
                start = s;
                break;
            }
            sites.pop_back();
            bounds.pop_back();
        }
        sites.push_back(q);
        bounds.push_back(start);
    }
    if (sites.empty()) return;
    std::vector<double> out(n);
    std::size_t k = 0;
    for (int p = 0; p < n; ++p) {
        const double pp = p * spacing;
        while (k + 1 < sites.size() && bounds[k + 1] < pp) ++k;
        const double d = spacing * (p - sites[k]);
        out[p] = f[sites[k]] + d * d;
    }
    f = std::move(out);
}

/// Squared distance from every pixel to the nearest point of `pts`.
inline std::vector<double> squared_distance_map(const SurfacePointSet& pts, int w, int h, Spacing sp) {
    std::vector<double> grid(static_cast<std::size_t>(w) * h, std::numeric_limits<double>::infinity());
    for (auto p : pts) grid[static_cast<std::size_t>(p.y) * w + p.x] = 0.0;
    std::vector<double> line;
    for (int x = 0; x < w; ++x) {
        line.resize(h);
        for (int y = 0; y < h; ++y) line[y] = grid[static_cast<std::size_t>(y) * w + x];
        edt_1d(line, sp.sy);
        for (int y = 0; y < h; ++y) grid[static_cast<std::size_t>(y) * w + x] = line[y];
    }
    for (int y = 0; y < h; ++y) {
        line.assign(grid.begin() + static_cast<std::ptrdiff_t>(y) * w, grid.begin() + static_cast<std::ptrdiff_t>(y + 1) * w);
        edt_1d(line, sp.sx);
        std::copy(line.begin(), line.end(), grid.begin() + static_cast<std::ptrdiff_t>(y) * w);
    }
    return grid;
}

}  // namespace detail

/// Mean of nearest-surface distances in both directions; nullopt when exactly
/// one of the surfaces is empty, 0 when both are.
inline std::optional<double> assd(const LabelMask& a, const LabelMask& b, int cls = 1, Spacing spacing = {}) {
    detail::require_same_shape(a, b, "assd");
    if (!(spacing.sx > 0.0 && spacing.sy > 0.0)) throw InvalidArgument("assd: spacing must be positive");
    const auto sa = boundary_points(a, cls);
    const auto sb = boundary_points(b, cls);
    if (sa.empty() && sb.empty()) return 0.0;
    if (sa.empty() || sb.empty()) return std::nullopt;
    const int w = a.width();
    const int h = a.height();
    const auto to_b = detail::squared_distance_map(sb, w, h, spacing);
    const auto to_a = detail::squared_distance_map(sa, w, h, spacing);
    double total = 0.0;
    for (auto p : sa) total += std::sqrt(to_b[static_cast<std::size_t>(p.y) * w + p.x]);
    for (auto p : sb) total += std::sqrt(to_a[static_cast<std::size_t>(p.y) * w + p.x]);
    return total / static_cast<double>(sa.size() + sb.size());
}

enum class EvalStatus { ok, undefined_assd };

inline const char* to_string(EvalStatus s) { return s == EvalStatus::ok ? "ok" : "undefined_assd"; }

struct EvalRecord {
    std::string image_id;
    double dice = 0.0;
    std::optional<double> assd;
    EvalStatus status = EvalStatus::ok;
};

inline EvalRecord evaluate(std::string id, const LabelMask& pred, const LabelMask& gt, int cls = 1,
                           Spacing spacing = {}) {
    EvalRecord rec{std::move(id), dice(pred, gt, cls), assd(pred, gt, cls, spacing), EvalStatus::ok};
    if (!rec.assd) rec.status = EvalStatus::undefined_assd;
    return rec;
}

struct EvalSummary {
    double mean_dice = 0.0;
    double std_dice = 0.0;
    double mean_assd = 0.0;
    double std_assd = 0.0;
    std::size_t n = 0;
    std::size_t n_undefined = 0;
};

/// Population statistics; ASSD statistics cover only records with a defined ASSD.
inline EvalSummary summarize(const std::vector<EvalRecord>& records) {
    EvalSummary s;
    s.n = records.size();
    double dsum = 0.0, dsq = 0.0, asum = 0.0, asq = 0.0;
    std::size_t defined = 0;
    for (const auto& r : records) {
        dsum += r.dice;
        dsq += r.dice * r.dice;
        if (r.assd) {
            asum += *r.assd;
            asq += *r.assd * *r.assd;
            ++defined;
        }
    }
    s.n_undefined = s.n - defined;
    if (s.n) {
        s.mean_dice = dsum / s.n;
        s.std_dice = std::sqrt(std::max(0.0, dsq / s.n - s.mean_dice * s.mean_dice));
    }
    if (defined) {
        s.mean_assd = asum / defined;
        s.std_assd = std::sqrt(std::max(0.0, asq / defined - s.mean_assd * s.mean_assd));
    }
    return s;
}

inline nlohmann::json to_json(const EvalSummary& s) {
    return {{"mean_dice", s.mean_dice}, {"std_dice", s.std_dice}, {"mean_assd", s.mean_assd},
            {"std_assd", s.std_assd},   {"n", s.n},               {"n_undefined", s.n_undefined}};
}

}  // namespace srpl
