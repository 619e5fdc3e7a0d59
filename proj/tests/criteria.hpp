#pragma once
// Checks shared by the unit suites and the acceptance binary. Every check
// returns an Outcome with a one-line explanation; the oracles here are written
// from the definitions and do not call the code paths they verify.

#include <unistd.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "srpl/srpl.hpp"

#ifndef SRPL_STUB_BRIDGE_PATH
#define SRPL_STUB_BRIDGE_PATH "srpl_stub_bridge"
#endif
#ifndef SRPL_FIXTURE_DIR
#define SRPL_FIXTURE_DIR "tests/fixtures"
#endif

namespace srpl::criteria {

namespace fs = std::filesystem;

struct Outcome {
    bool pass = true;
    std::string detail;
};

inline std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

inline fs::path stub_path() { return SRPL_STUB_BRIDGE_PATH; }
inline fs::path protocol_fixtures() { return fs::path(SRPL_FIXTURE_DIR) / "protocol"; }

/// Removes itself on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<unsigned> counter{0};
        path_ = fs::temp_directory_path() /
                ("srpl-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

// ---------------------------------------------------------------------------
// Random inputs.

inline GrayImage random_image(std::mt19937_64& rng, int w, int h) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    // Skewed, bimodal or uniform intensity populations.
    const int kind = static_cast<int>(rng() % 3);
    const double skew = std::exp(std::uniform_real_distribution<double>(-1.5, 1.5)(rng));
    std::vector<float> px(static_cast<std::size_t>(w) * h);
    for (auto& v : px) {
        double x = u(rng);
        if (kind == 0) x = std::pow(x, skew);
        if (kind == 1) x = (u(rng) < 0.4 ? 0.2 : 0.7) + 0.1 * (x - 0.5);
        v = static_cast<float>(std::clamp(x, 0.01, 0.99));
    }
    return GrayImage(w, h, std::move(px));
}

inline LabelMask random_mask(std::mt19937_64& rng, int w, int h) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::uint8_t> m(static_cast<std::size_t>(w) * h, 0);
    const int kind = static_cast<int>(rng() % 6);
    if (kind == 0) return LabelMask(w, h, std::move(m));  // empty
    if (kind == 1) {
        std::fill(m.begin(), m.end(), std::uint8_t{1});
        return LabelMask(w, h, std::move(m));
    }
    if (kind == 2) {
        const double p = u(rng);
        for (auto& v : m) v = u(rng) < p;
        return LabelMask(w, h, std::move(m));
    }
    const int blobs = 1 + static_cast<int>(rng() % 3);
    for (int b = 0; b < blobs; ++b) {
        const double cx = u(rng) * w, cy = u(rng) * h;
        const double ax = 0.5 + u(rng) * w / 2.0, ay = 0.5 + u(rng) * h / 2.0;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double dx = (x - cx) / ax, dy = (y - cy) / ay;
                if (dx * dx + dy * dy <= 1.0) m[static_cast<std::size_t>(y) * w + x] = 1;
            }
        }
    }
    return LabelMask(w, h, std::move(m));
}

inline LabelMask perturb(std::mt19937_64& rng, const LabelMask& m, double p) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::uint8_t> d(m.data().begin(), m.data().end());
    for (auto& v : d) {
        if (u(rng) < p) v = 1 - v;
    }
    return LabelMask(m.width(), m.height(), std::move(d));
}

// ---------------------------------------------------------------------------
// Intensity enhancement.

inline int level_of(float v) { return static_cast<int>(std::lround(static_cast<double>(v) * 255.0)); }

/// Equalized level of every pixel by counting: round(255 * #{j : l_j <= l_i} / N).
inline std::vector<int> equalize_by_counting(const std::vector<int>& levels) {
    const std::size_t n = levels.size();
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t at_or_below = 0;
        for (int l : levels) at_or_below += l <= levels[i];
        out[i] = static_cast<int>(std::lround(255.0L * at_or_below / n));
    }
    return out;
}

inline GrayImage image_from_levels(int w, int h, const std::vector<int>& levels) {
    std::vector<float> px;
    for (int l : levels) px.push_back(static_cast<float>(l / 255.0));
    return GrayImage(w, h, std::move(px));
}

inline Outcome check_equalization_small_images() {
    struct Hand {
        int w, h;
        std::vector<int> in, out;
    };
    const std::vector<Hand> hand = {
        {2, 2, {0, 0, 128, 255}, {128, 128, 191, 255}},
        {2, 2, {100, 100, 100, 100}, {255, 255, 255, 255}},
        {1, 1, {37}, {255}},
        {3, 1, {200, 10, 90}, {255, 85, 170}},
        {4, 4, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15},
         {16, 32, 48, 64, 80, 96, 112, 128, 143, 159, 175, 191, 207, 223, 239, 255}},
    };
    for (std::size_t k = 0; k < hand.size(); ++k) {
        const auto& c = hand[k];
        const GrayImage eq = histogram_equalize(image_from_levels(c.w, c.h, c.in));
        for (std::size_t i = 0; i < c.in.size(); ++i) {
            if (level_of(eq[i]) != c.out[i]) {
                return {false, "hand case " + std::to_string(k) + " pixel " + std::to_string(i) + ": got " +
                                   std::to_string(level_of(eq[i])) + ", want " + std::to_string(c.out[i])};
            }
        }
    }
    std::mt19937_64 rng(11);
    int cases = 0;
    for (int n = 1; n <= 16; ++n) {
        for (int rep = 0; rep < 60; ++rep, ++cases) {
            const int w = (n % 4 == 0) ? 4 : n;
            const int h = n / w;
            std::vector<int> levels(static_cast<std::size_t>(n));
            const int span = rep % 3 == 0 ? 4 : 256;  // small spans force ties
            for (auto& l : levels) l = static_cast<int>(rng() % span) * (rep % 3 == 0 ? 60 : 1);
            const auto want = equalize_by_counting(levels);
            const GrayImage eq = histogram_equalize(image_from_levels(w, h, levels));
            for (int i = 0; i < n; ++i) {
                if (level_of(eq[static_cast<std::size_t>(i)]) != want[static_cast<std::size_t>(i)]) {
                    return {false, "random case n=" + std::to_string(n) + " differs at pixel " + std::to_string(i)};
                }
            }
        }
    }
    return {true, std::to_string(hand.size()) + " hand cases and " + std::to_string(cases) +
                      " counted-CDF cases match exactly"};
}

inline Outcome check_gamma_domain_identity() {
    std::mt19937_64 rng(12);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        const int w = 4 + static_cast<int>(rng() % 40), h = 4 + static_cast<int>(rng() % 40);
        const GrayImage img = random_image(rng, w, h);
        const double u_d = std::uniform_real_distribution<double>(0.05, 0.95)(rng);
        long double sum = 0;
        for (float v : img.data()) sum += v;
        const double u_x = static_cast<double>(sum / img.size());
        const double gamma = gamma_domain(img, DomainStats{u_d, img.size()}).gamma;
        worst = std::max(worst, std::abs(std::pow(u_x, gamma) - u_d));
    }
    return {worst < 1e-9, "max |u_X^gamma_D - u_D| = " + fmt("%.3g", worst) + " over 100 images (bound 1e-9)"};
}

/// (mean - 0.5)^2 + (var - 0.29^2)^2 of x^gamma, two passes over exp(gamma ln x).
inline double sam_objective_oracle(const std::vector<double>& log_px, double gamma, std::vector<double>& scratch) {
    scratch.resize(log_px.size());
    double mean = 0;
    for (std::size_t i = 0; i < log_px.size(); ++i) mean += scratch[i] = std::exp(gamma * log_px[i]);
    mean /= static_cast<double>(log_px.size());
    double var = 0;
    for (double p : scratch) var += (p - mean) * (p - mean);
    var /= static_cast<double>(log_px.size());
    const double dm = 0.5 - mean, dv = 0.29 * 0.29 - var;
    return dm * dm + dv * dv;
}

inline Outcome check_gamma_sam_grid() {
    constexpr int kGrid = 10000;
    const double lo = std::log(0.05), hi = std::log(20.0);
    const double step = (hi - lo) / (kGrid - 1);
    std::mt19937_64 rng(13);
    double worst_steps = 0.0;
    for (int k = 0; k < 50; ++k) {
        const int w = 8 + static_cast<int>(rng() % 24), h = 8 + static_cast<int>(rng() % 24);
        const GrayImage img = random_image(rng, w, h);
        std::vector<double> log_px, scratch;
        for (float v : img.data()) log_px.push_back(std::log(static_cast<double>(v)));
        int best = 0;
        double best_v = std::numeric_limits<double>::infinity();
        for (int g = 0; g < kGrid; ++g) {
            const double v = sam_objective_oracle(log_px, std::exp(lo + g * step), scratch);
            if (v < best_v) {
                best_v = v;
                best = g;
            }
        }
        const double found = std::log(gamma_sam(img).gamma);
        worst_steps = std::max(worst_steps, std::abs(found - (lo + best * step)) / step);
    }
    return {worst_steps <= 1.0, "max distance to the 10000-point grid optimum = " + fmt("%.3f", worst_steps) +
                                    " grid steps over 50 images (bound 1)"};
}

// ---------------------------------------------------------------------------
// Losses.

struct LossInstance {
    LogitMap z;
    LabelMask r;
    ReliabilityMask mask;
    double lambda = 0.0;
};

inline LossInstance random_loss_instance(std::mt19937_64& rng, int k, int w = 5, int h = 5, int classes = 2) {
    std::normal_distribution<double> logit(0.0, 1.5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::size_t n = static_cast<std::size_t>(w) * h;
    LossInstance in;
    in.z = LogitMap{w, h, classes, std::vector<double>(n * classes)};
    for (auto& v : in.z.data) v = logit(rng);
    std::vector<std::uint8_t> lab(n), rel(n);
    for (auto& v : lab) v = static_cast<std::uint8_t>(rng() % classes);
    for (auto& v : rel) v = k % 10 == 0 ? 1 : (k % 10 == 1 ? 0 : u(rng) < 0.6);
    in.r = LabelMask(w, h, std::move(lab), classes);
    in.mask = ReliabilityMask(w, h, std::move(rel));
    in.lambda = k % 7 == 0 ? 0.0 : 20.0 * u(rng);
    return in;
}

inline double total_loss(const LossInstance& in) {
    LossConfig cfg;
    cfg.lambda = in.lambda;
    return loss_total_with_grad(in.z, in.r, in.mask, cfg).l_total;
}

/// max over 100 instances of ||analytic - central difference||_inf / ||central difference||_inf.
inline Outcome check_loss_gradient() {
    constexpr double h = 1e-4;
    std::mt19937_64 rng(21);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        LossInstance in = random_loss_instance(rng, k);
        LossConfig cfg;
        cfg.lambda = in.lambda;
        const auto analytic = loss_total_with_grad(in.z, in.r, in.mask, cfg).grad;
        double err = 0.0, scale = 0.0;
        for (std::size_t i = 0; i < in.z.data.size(); ++i) {
            const double z0 = in.z.data[i];
            in.z.data[i] = z0 + h;
            const double up = total_loss(in);
            in.z.data[i] = z0 - h;
            const double down = total_loss(in);
            in.z.data[i] = z0;
            const double fd = (up - down) / (2 * h);
            err = std::max(err, std::abs(analytic[i] - fd));
            scale = std::max(scale, std::abs(fd));
        }
        worst = std::max(worst, scale > 0 ? err / scale : err);
    }
    return {worst < 1e-5, "max relative error " + fmt("%.3g", worst) + " over 100 random 5x5 C=2 instances (bound 1e-5)"};
}

inline Outcome check_loss_closed_forms() {
    std::mt19937_64 rng(22);
    std::vector<std::string> bad;
    double worst = 0.0;
    auto near = [&](double got, double want, const std::string& what) {
        worst = std::max(worst, std::abs(got - want));
        if (!(std::abs(got - want) <= 1e-12)) bad.push_back(what + "=" + fmt("%.17g", got));
    };
    for (int rep = 0; rep < 10; ++rep) {
        const int w = 1 + static_cast<int>(rng() % 8), h = 1 + static_cast<int>(rng() % 8);
        const std::size_t n = static_cast<std::size_t>(w) * h;
        std::vector<std::uint8_t> lab(n);
        for (auto& v : lab) v = static_cast<std::uint8_t>(rng() % 2);
        const LabelMask r(w, h, lab);
        const LogitMap uniform2{w, h, 2, std::vector<double>(2 * n, 0.0)};
        near(loss_total_with_grad(uniform2, r, ReliabilityMask::all(w, h, true)).l_pce, std::log(2.0), "pce(uniform)");
        for (int c = 2; c <= 6; ++c) {
            const LogitMap uniform{w, h, c, std::vector<double>(c * n, 0.0)};
            near(loss_total_with_grad(uniform, LabelMask::zeros(w, h, c), ReliabilityMask::all(w, h, false)).l_pem,
                 std::log(static_cast<double>(c)), "pem(uniform, C=" + std::to_string(c) + ")");
        }
        // Perfect match: q is the one-hot encoding of r.
        std::vector<float> onehot(2 * n, 0.0f);
        for (std::size_t i = 0; i < n; ++i) onehot[lab[i] * n + i] = 1.0f;
        const ProbMap q(w, h, 2, onehot);
        const auto all = ReliabilityMask::all(w, h, true);
        near(loss_pce(q, r, all), 0.0, "pce(match)");
        near(loss_pdc(q, r, all), 0.0, "pdc(match)");
        near(loss_rpl(q, r, all), 0.0, "rpl(match)");
        near(loss_pem(q, ReliabilityMask::all(w, h, false)), 0.0, "pem(one-hot)");
    }
    return {bad.empty(), bad.empty() ? "pce(uniform)=ln 2, pem(uniform)=ln C for C=2..6, perfect-match losses 0; max "
                                       "deviation " + fmt("%.3g", worst)
                                     : "off: " + bad.front()};
}

inline Outcome check_loss_affine_in_lambda() {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> lam(0.0, 50.0);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        const LossInstance in = random_loss_instance(rng, k);
        LossConfig a, b;
        a.lambda = lam(rng);
        b.lambda = lam(rng);
        const auto ra = loss_total_with_grad(in.z, in.r, in.mask, a);
        const auto rb = loss_total_with_grad(in.z, in.r, in.mask, b);
        worst = std::max(worst, std::abs((ra.l_total - rb.l_total) - (a.lambda - b.lambda) * ra.l_pem));
        worst = std::max(worst, std::abs(ra.l_total - ra.l_rpl - a.lambda * ra.l_pem));
    }
    return {worst <= 1e-12, "max |L(l1) - L(l2) - (l1 - l2) L_pem| = " + fmt("%.3g", worst) + " over 100 instances (bound 1e-12)"};
}

// ---------------------------------------------------------------------------
// Consensus masks.

inline Outcome check_cmso_properties() {
    std::mt19937_64 rng(31);
    int triples = 0;
    for (int k = 0; k < 300; ++k, ++triples) {
        const int w = 1 + static_cast<int>(rng() % 32), h = 1 + static_cast<int>(rng() % 32);
        const LabelMask base = random_mask(rng, w, h);
        const std::array<LabelMask, 3> m = {perturb(rng, base, 0.1), perturb(rng, base, 0.1), perturb(rng, base, 0.1)};
        const ReliabilityMask rel = cmso(m[0], m[1], m[2]);
        std::size_t agree = 0;
        for (std::size_t i = 0; i < base.size(); ++i) {
            const bool all_same = m[0][i] == m[1][i] && m[1][i] == m[2][i];
            agree += all_same;
            if (rel.reliable(i) != all_same) return {false, "triple " + std::to_string(k) + ": flag differs from consensus"};
        }
        if (rel.reliable_count() + rel.unreliable_count() != base.size() || rel.reliable_count() != agree) {
            return {false, "triple " + std::to_string(k) + ": partition law violated"};
        }
        const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
        for (const auto& p : perms) {
            if (!(cmso(m[p[0]], m[p[1]], m[p[2]]) == rel)) {
                return {false, "triple " + std::to_string(k) + ": not symmetric under branch permutation"};
            }
        }
        // Flip one pixel of one branch: only that pixel's flag may change.
        const std::size_t at = rng() % base.size();
        const int branch = static_cast<int>(rng() % 3);
        std::array<LabelMask, 3> f = m;
        std::vector<std::uint8_t> d(f[branch].data().begin(), f[branch].data().end());
        d[at] = 1 - d[at];
        f[branch] = LabelMask(w, h, std::move(d));
        const ReliabilityMask flipped = cmso(f[0], f[1], f[2]);
        for (std::size_t i = 0; i < base.size(); ++i) {
            if (i != at && flipped.reliable(i) != rel.reliable(i)) {
                return {false, "triple " + std::to_string(k) + ": flipping one pixel changed another"};
            }
        }
        // On an all-agreeing triple the flipped pixel becomes the only unreliable one.
        std::vector<std::uint8_t> e(base.data().begin(), base.data().end());
        e[at] = 1 - e[at];
        const ReliabilityMask single = cmso(base, base, LabelMask(w, h, std::move(e)));
        if (single.unreliable_count() != 1 || single.reliable(at)) {
            return {false, "triple " + std::to_string(k) + ": single disagreement not isolated"};
        }
    }
    return {true, std::to_string(triples) + " random triples: partition law, 6 permutations and single-flip locality hold"};
}

// ---------------------------------------------------------------------------
// Metrics.

inline double dice_oracle(const LabelMask& a, const LabelMask& b) {
    std::set<std::pair<int, int>> sa, sb, both;
    for (int y = 0; y < a.height(); ++y) {
        for (int x = 0; x < a.width(); ++x) {
            if (a.at(x, y) == 1) sa.insert({x, y});
            if (b.at(x, y) == 1) sb.insert({x, y});
        }
    }
    std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(both, both.begin()));
    if (sa.empty() && sb.empty()) return 1.0;
    return 2.0 * both.size() / static_cast<double>(sa.size() + sb.size());
}

inline std::vector<std::pair<int, int>> surface_oracle(const LabelMask& m) {
    std::vector<std::pair<int, int>> pts;
    auto inside = [&](int x, int y) { return x >= 0 && y >= 0 && x < m.width() && y < m.height() && m.at(x, y) == 1; };
    for (int y = 0; y < m.height(); ++y) {
        for (int x = 0; x < m.width(); ++x) {
            if (inside(x, y) && !(inside(x - 1, y) && inside(x + 1, y) && inside(x, y - 1) && inside(x, y + 1))) {
                pts.push_back({x, y});
            }
        }
    }
    return pts;
}

/// Exhaustive nearest-point search in both directions.
inline std::optional<double> assd_oracle(const LabelMask& a, const LabelMask& b) {
    const auto sa = surface_oracle(a), sb = surface_oracle(b);
    if (sa.empty() && sb.empty()) return 0.0;
    if (sa.empty() || sb.empty()) return std::nullopt;
    auto directed = [](const auto& from, const auto& to) {
        double s = 0.0;
        for (auto [x, y] : from) {
            double best = std::numeric_limits<double>::infinity();
            for (auto [u, v] : to) best = std::min(best, std::hypot(double(x - u), double(y - v)));
            s += best;
        }
        return s;
    };
    return (directed(sa, sb) + directed(sb, sa)) / static_cast<double>(sa.size() + sb.size());
}

inline Outcome check_metrics_against_brute_force() {
    std::mt19937_64 rng(41);
    double worst = 0.0;
    for (int k = 0; k < 200; ++k) {
        const int w = 1 + static_cast<int>(rng() % 32), h = 1 + static_cast<int>(rng() % 32);
        const LabelMask a = random_mask(rng, w, h);
        const LabelMask b = rng() % 2 ? random_mask(rng, w, h) : perturb(rng, a, 0.05);
        worst = std::max(worst, std::abs(dice(a, b) - dice_oracle(a, b)));
        const auto got = assd(a, b), want = assd_oracle(a, b);
        if (got.has_value() != want.has_value()) return {false, "pair " + std::to_string(k) + ": ASSD definedness differs"};
        if (got) worst = std::max(worst, std::abs(*got - *want));
    }
    return {worst <= 1e-9, "200 random pairs up to 32x32, max |metric - brute force| = " + fmt("%.3g", worst) + " (bound 1e-9)"};
}

inline Outcome check_metrics_hand_cases() {
    auto line_at = [](int column) {
        std::vector<std::uint8_t> d(20 * 20, 0);
        for (int y = 5; y < 15; ++y) d[static_cast<std::size_t>(y) * 20 + column] = 1;
        return LabelMask(20, 20, std::move(d));
    };
    std::vector<std::uint8_t> blob(12 * 9, 0);
    for (int y = 2; y < 7; ++y) {
        for (int x = 3; x < 10; ++x) blob[static_cast<std::size_t>(y) * 12 + x] = 1;
    }
    const LabelMask same(12, 9, blob);
    const double d_same = dice(same, same);
    const auto a_same = assd(same, same);
    const auto a_shift = assd(line_at(5), line_at(8));
    const bool ok = d_same == 1.0 && a_same && *a_same == 0.0 && a_shift && std::abs(*a_shift - 3.0) <= 1e-12 &&
                    dice(line_at(5), line_at(8)) == 0.0;
    return {ok, "identical: Dice " + fmt("%.6f", d_same) + ", ASSD " + fmt("%.6f", a_same.value_or(-1)) +
                    "; segments 3 px apart: ASSD " + fmt("%.6f", a_shift.value_or(-1))};
}

// ---------------------------------------------------------------------------
// End-to-end runs on the synthetic benchmark.

inline pipeline::PipelineConfig benchmark_config(const fs::path& work) {
    pipeline::PipelineConfig c;
    c.work = work.string();
    return c;
}

inline void require_ok(const pipeline::StageReport& r) {
    if (!r.ok()) throw std::runtime_error("stage " + r.stage + " failed: " + r.to_json().dump());
}

struct EndToEnd {
    double source_on_source = 0.0;
    double source_on_target = 0.0;
    std::map<std::string, double> modes;  // ablation rows, including source_only
    double standalone_rpl_pem = 0.0;
    bool ablate_matches_standalone = false;
    std::string source_hash, rpl_pem_hash, ablation_hash;
};

inline double mean_dice_of(const fs::path& model, const std::vector<LabeledImage>& data) {
    const ModelParams p = load_model(model);
    double s = 0.0;
    for (const auto& d : data) s += dice(argmax(forward(p, extract_features(d.image)).q), d.label);
    return s / static_cast<double>(data.size());
}

inline EndToEnd run_end_to_end(const fs::path& work) {
    using namespace pipeline;
    const PipelineConfig c = benchmark_config(work);
    for (auto stage : {stage_synth, stage_train_source, stage_stats, stage_t3ie, stage_pseudo, stage_refine, stage_adapt}) {
        require_ok(stage(c));
    }
    const Layout L{c.work};
    EndToEnd e;
    e.source_on_source = mean_dice_of(L.source_model(), load_labeled(L, "source_test"));
    e.source_on_target = mean_dice_of(L.source_model(), load_labeled(L, "target_test"));
    e.standalone_rpl_pem = mean_dice_of(L.adapted_model(AdaptMode::RPL_PEM), load_labeled(L, "target_test"));
    require_ok(stage_ablate(c));
    const nlohmann::json table = read_json(L.ablate_dir() / "ablation.json");
    for (const auto& row : table.at("modes")) e.modes[row.at("name").get<std::string>()] = row.at("mean_dice").get<double>();
    e.ablate_matches_standalone = table.value("matches_standalone_rpl_pem", false);
    e.source_hash = file_hash(L.source_model());
    e.rpl_pem_hash = file_hash(L.adapted_model(AdaptMode::RPL_PEM));
    e.ablation_hash = file_hash(L.ablate_dir() / "ablation.json");
    return e;
}

inline Outcome check_domain_drop(const EndToEnd& e) {
    const double drop = e.source_on_source - e.source_on_target;
    return {drop >= 0.10, "source model Dice " + fmt("%.4f", e.source_on_source) + " on source test, " +
                              fmt("%.4f", e.source_on_target) + " on target test (drop " + fmt("%.1f", 100 * drop) +
                              " points, need >= 10)"};
}

inline Outcome check_recovery(const EndToEnd& e) {
    const double gain = e.standalone_rpl_pem - e.source_on_target;
    return {gain >= 0.05, "RPL_PEM target Dice " + fmt("%.4f", e.standalone_rpl_pem) + " vs source-only " +
                              fmt("%.4f", e.source_on_target) + " (" + fmt("%+.1f", 100 * gain) + " points, need >= +5)"};
}

inline Outcome check_determinism(const EndToEnd& a, const EndToEnd& b) {
    const bool same = a.source_hash == b.source_hash && a.rpl_pem_hash == b.rpl_pem_hash &&
                      a.ablation_hash == b.ablation_hash && a.ablate_matches_standalone && b.ablate_matches_standalone;
    return {same, "two runs with the same seed: source model " + a.source_hash + "/" + b.source_hash +
                      ", RPL_PEM model " + a.rpl_pem_hash + "/" + b.rpl_pem_hash + ", ablation table " +
                      a.ablation_hash + "/" + b.ablation_hash + ", ablate row reuses standalone model: " +
                      (a.ablate_matches_standalone ? "yes" : "no")};
}

inline Outcome check_mode_ordering(const EndToEnd& e) {
    const std::vector<std::string> order = {"EM", "PL_Y", "PL_R", "RPL", "RPL_PEM"};
    std::string detail;
    bool ok = true;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const double v = e.modes.at(order[i]);
        detail += (i ? " <= " : "") + order[i] + " " + fmt("%.4f", v);
        if (i && !(e.modes.at(order[i - 1]) <= v)) {
            ok = false;
            detail += " (violated)";
        }
    }
    return {ok, detail};
}

struct PseudoLabelQuality {
    std::array<double, 4> dice{};  // theta_s, +T3IE, +segmenter(X), +segmenter(X^RGB)
    std::size_t images = 0;
};

/// Scores the four pseudo-label variants of every target training image
/// against its hidden label. Runs the stages up to refinement itself.
inline PseudoLabelQuality run_pseudo_label_quality(const fs::path& work) {
    using namespace pipeline;
    const PipelineConfig c = benchmark_config(work);
    for (auto stage : {stage_synth, stage_train_source, stage_stats, stage_t3ie, stage_pseudo, stage_refine}) {
        require_ok(stage(c));
    }
    const Layout L{c.work};
    const nlohmann::json index = read_json(L.refine_index());
    BuiltinSourceModel model(load_model(L.source_model()));
    SegmenterHandle seg = SegmenterHandle::oracle();
    PseudoLabelQuality q;
    for (const auto& item : load_labeled(L, "target_train")) {
        const LabelMask y = load_mask(L.y(item.id));
        const LabelMask x_only =
            segment_with_prompt(seg, RgbImage::replicate(item.image), derive_box_prompt(y, 1, c.margin));
        if (index.at(item.id).at("status") != "ok") throw std::runtime_error("no refined label for " + item.id);
        q.dice[0] += dice(argmax(predict_prob(model, item.image)), item.label);
        q.dice[1] += dice(y, item.label);
        q.dice[2] += dice(x_only, item.label);
        q.dice[3] += dice(load_mask(L.refined(item.id, "r")), item.label);
        ++q.images;
    }
    for (auto& d : q.dice) d /= static_cast<double>(q.images);
    return q;
}

inline Outcome check_pseudo_label_trend(const PseudoLabelQuality& q) {
    const char* names[4] = {"theta_S", "+T3IE", "+segmenter(X)", "+segmenter(X_RGB)"};
    std::string detail;
    bool ok = q.images > 0;
    for (int i = 0; i < 4; ++i) {
        detail += std::string(i ? " <= " : "") + names[i] + " " + fmt("%.4f", q.dice[i]);
        if (i && !(q.dice[i - 1] <= q.dice[i])) {
            ok = false;
            detail += " (violated)";
        }
    }
    return {ok, detail + " over " + std::to_string(q.images) + " target training images"};
}

// ---------------------------------------------------------------------------
// srpl-seg/1 conformance.

inline std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream f(p);
    if (!f) throw std::runtime_error("cannot open " + p.string());
    std::vector<std::string> lines;
    for (std::string line; std::getline(f, line);) {
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

inline std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char ch : s) out += ch == '\'' ? std::string("'\\''") : std::string(1, ch);
    return out + "'";
}

/// Expected op of fixture request k, read from the request fixture.
inline protocol::Op fixture_op(const std::string& request_line) { return protocol::parse_request(request_line).op; }

/// Canonical encoding round trip and rejection of every malformed fixture line.
inline Outcome check_fixture_grammar() {
    const fs::path dir = protocol_fixtures();
    const auto handshake = read_lines(dir / "handshake.jsonl");
    if (handshake.size() != 1 || handshake[0] != protocol::handshake_line() || !protocol::lint_handshake(handshake[0]).empty()) {
        return {false, "handshake fixture does not match the client's handshake"};
    }
    const auto requests = read_lines(dir / "requests.jsonl");
    const auto responses = read_lines(dir / "responses.jsonl");
    for (std::size_t k = 0; k < requests.size(); ++k) {
        const auto req = protocol::parse_request(requests[k]);
        if (protocol::to_json(req).dump() != requests[k]) return {false, "request " + std::to_string(k) + " does not round-trip"};
        const auto resp = protocol::parse_response(responses[k], req.op, req.id);
        if (protocol::to_json(resp, req.op).dump() != responses[k]) {
            return {false, "response " + std::to_string(k) + " does not round-trip"};
        }
    }
    std::size_t rejected = 0;
    for (const auto& line : read_lines(dir / "malformed_handshakes.jsonl")) {
        if (protocol::lint_handshake(line).empty()) return {false, "accepted bad handshake: " + line};
        ++rejected;
    }
    for (const auto& line : read_lines(dir / "malformed_requests.jsonl")) {
        if (protocol::lint_request(line).empty()) return {false, "accepted bad request: " + line};
        try {
            protocol::parse_request(line);
            return {false, "parsed bad request: " + line};
        } catch (const FormatError&) {
            ++rejected;
        }
    }
    for (const auto& line : read_lines(dir / "malformed_responses.jsonl")) {
        try {
            protocol::parse_response(line, protocol::Op::segment, 1);
            return {false, "parsed bad response: " + line};
        } catch (const SegmenterIoError&) {
            ++rejected;
        }
    }
    return {true, std::to_string(requests.size()) + " request/response pairs round-trip; " + std::to_string(rejected) +
                      " malformed lines rejected"};
}

/// The stub, fed the recorded requests, answers with the recorded outcomes and
/// byte-identical tensors.
inline Outcome check_stub_against_fixtures() {
    const fs::path dir = protocol_fixtures();
    TempDir out("stub-out");
    Subprocess proc({stub_path().string(), "--out-dir", out.path().string()}, fs::absolute(dir));
    const auto timeout = std::chrono::milliseconds(5000);
    const auto hello = proc.read_line(timeout);
    if (!hello || *hello != read_lines(dir / "handshake.jsonl").at(0)) return {false, "stub handshake differs from fixture"};
    const auto requests = read_lines(dir / "requests.jsonl");
    const auto responses = read_lines(dir / "responses.jsonl");
    for (std::size_t k = 0; k < requests.size(); ++k) {
        const auto req = protocol::parse_request(requests[k]);
        proc.write_line(requests[k]);
        const auto line = proc.read_line(timeout);
        if (!line) return {false, "stub gave no reply to request " + std::to_string(req.id)};
        const auto issues = protocol::lint_response(*line, req.op);
        if (!issues.empty()) return {false, "stub reply to " + std::to_string(req.id) + ": " + issues.front()};
        const auto got = protocol::parse_response(*line, req.op, req.id);
        const auto want = protocol::parse_response(responses[k], req.op, req.id);
        if (got.ok != want.ok || got.error != want.error) return {false, "stub outcome differs for request " + std::to_string(req.id)};
        if (got.ok && !(load_srt(got.path) == load_srt(dir / want.path))) {
            return {false, "stub tensor differs from " + want.path};
        }
    }
    return {true, "stub reproduces " + std::to_string(requests.size()) + " recorded replies, tensors byte-identical"};
}

/// The client, talking to a server that replays the recorded responses,
/// returns the recorded tensors and surfaces the recorded error.
inline Outcome check_client_against_fixtures() {
    const fs::path dir = fs::absolute(protocol_fixtures());
    BridgeConfig cfg;
    cfg.command = shell_quote(stub_path().string()) + " --replay responses.jsonl";
    cfg.cwd = dir;
    cfg.timeout = std::chrono::milliseconds(5000);
    auto bridge = std::make_shared<Bridge>(cfg);
    const Tensor image = load_srt(dir / "rect_image.srt");
    const auto requests = read_lines(dir / "requests.jsonl");
    const auto first = protocol::parse_request(requests.at(0));
    ExternalSegmenter seg(bridge);
    const LabelMask mask = seg.segment(rgb_from_tensor(image), *first.box);
    if (!(to_tensor(mask) == load_srt(dir / "rect_mask.srt"))) return {false, "client mask differs from fixture"};
    const Tensor probs = bridge->call(protocol::Op::predict, image, std::nullopt);
    if (!(probs == load_srt(dir / "uniform_probs.srt"))) return {false, "client probabilities differ from fixture"};
    try {
        bridge->call(protocol::Op::segment, image, protocol::parse_request(requests.at(2)).box);
        return {false, "client accepted a recorded failure"};
    } catch (const SegmenterIoError& e) {
        if (std::string(e.what()).find("box out of bounds") == std::string::npos) {
            return {false, std::string("client lost the bridge's message: ") + e.what()};
        }
    }
    return {true, "client decodes recorded mask, probabilities and error; " + std::to_string(bridge->restarts()) +
                      " restarts"};
}

/// Misbehaving servers must surface as SegmenterIoError (or a clipped mask for
/// out-of-box leaks), never as a crash or a hang.
inline Outcome check_client_against_misbehaving_servers() {
    const fs::path dir = fs::absolute(protocol_fixtures());
    const Tensor image = load_srt(dir / "rect_image.srt");
    const RgbImage rgb = rgb_from_tensor(image);
    const BoxPrompt box{2, 1, 13, 14};
    const std::vector<std::string> modes = {"bad-handshake", "silent", "wrong-id", "truncated", "garbage",
                                            "crash",         "hang",   "wrong-dims", "reject", "non-binary",
                                            "missing-file",  "oversized"};
    TempDir out("fuzz-out");
    for (const auto& mode : modes) {
        BridgeConfig cfg;
        cfg.command = shell_quote(stub_path().string()) + " --misbehave " + mode + " --out-dir " +
                      shell_quote(out.path().string());
        cfg.cwd = dir;
        cfg.timeout = std::chrono::milliseconds(400);
        SegmenterHandle handle(std::make_unique<ExternalSegmenter>(cfg));
        try {
            segment_with_prompt(handle, rgb, box);
            return {false, "mode " + mode + ": no error raised"};
        } catch (const SegmenterIoError&) {
        }
    }
    BridgeConfig leak;
    leak.command = shell_quote(stub_path().string()) + " --misbehave leak --out-dir " + shell_quote(out.path().string());
    leak.cwd = dir;
    leak.timeout = std::chrono::milliseconds(2000);
    SegmenterHandle handle(std::make_unique<ExternalSegmenter>(leak));
    const LabelMask clipped = segment_with_prompt(handle, rgb, box);
    for (int y = 0; y < clipped.height(); ++y) {
        for (int x = 0; x < clipped.width(); ++x) {
            if (clipped.at(x, y) && !box.contains(x, y)) return {false, "leaked pixel kept outside the box"};
        }
    }
    if (handle.clipped_responses() != 1) return {false, "leak not counted"};
    return {true, std::to_string(modes.size()) + " failure modes raise SegmenterIoError; out-of-box leak clipped and counted"};
}

/// Random byte edits, truncations and numeric extremes fed to the parsers.
inline Outcome check_parser_mutation_fuzz() {
    const fs::path dir = protocol_fixtures();
    std::vector<std::string> seeds = read_lines(dir / "responses.jsonl");
    for (const auto& l : read_lines(dir / "requests.jsonl")) seeds.push_back(l);
    seeds.push_back(R"({"id":18446744073709551615,"mask":"m.srt","ok":true})");
    seeds.push_back(R"({"box":[0,0,99999999999,4],"id":-9223372036854775808,"image":"a","op":"segment"})");
    seeds.push_back(R"({"box":[1e308,0,1,1],"id":1.5,"image":"a","op":"segment"})");
    std::mt19937_64 rng(51);
    const std::string alphabet = "{}[]\":,0123456789-+.eE truefalsnul\\\x01\xff";
    std::size_t cases = 0, accepted = 0;
    for (int k = 0; k < 20000; ++k, ++cases) {
        std::string s = seeds[rng() % seeds.size()];
        const int edits = 1 + static_cast<int>(rng() % 4);
        for (int e = 0; e < edits && !s.empty(); ++e) {
            const std::size_t at = rng() % s.size();
            switch (rng() % 4) {
                case 0: s[at] = alphabet[rng() % alphabet.size()]; break;
                case 1: s.erase(at, 1 + rng() % 3); break;
                case 2: s.insert(at, 1, alphabet[rng() % alphabet.size()]); break;
                default: s.resize(at); break;
            }
        }
        try {
            for (auto op : {protocol::Op::segment, protocol::Op::predict}) {
                try {
                    protocol::parse_response(s, op, 1);
                    ++accepted;
                } catch (const SegmenterIoError&) {
                }
            }
            try {
                protocol::parse_request(s);
                ++accepted;
            } catch (const FormatError&) {
            }
            protocol::lint_handshake(s);
        } catch (const std::exception& e) {
            return {false, "parser threw " + std::string(e.what()) + " on: " + s};
        }
    }
    // Tensor headers: oversized, overflowing and truncated dimension lists.
    std::size_t tensors = 0;
    const std::string valid = encode_srt(load_srt(dir / "rect_mask.srt"));
    for (int k = 0; k < 5000; ++k, ++tensors) {
        std::string s = valid;
        if (k % 3 == 0) {
            for (int b = 6; b < 14 && b < static_cast<int>(s.size()); ++b) s[b] = static_cast<char>(rng());
        } else if (k % 3 == 1) {
            s.resize(rng() % s.size());
        } else {
            s[rng() % s.size()] = static_cast<char>(rng());
        }
        try {
            decode_srt(std::vector<char>(s.begin(), s.end()));
        } catch (const FormatError&) {
        } catch (const std::exception& e) {
            return {false, std::string("tensor decoder threw ") + e.what()};
        }
    }
    return {true, std::to_string(cases) + " mutated lines and " + std::to_string(tensors) +
                      " mutated tensors handled without a crash (" + std::to_string(accepted) + " still well-formed)"};
}

}  // namespace srpl::criteria
