#pragma once

// Initial pseudo-labels, box prompts and the promptable-segmenter abstraction.

#include <array>
#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "srpl/error.hpp"
#include "srpl/image.hpp"

namespace srpl {

/// Inclusive pixel rectangle, x = column, y = row, origin top-left.
struct BoxPrompt {
    int xmin = 0;
    int ymin = 0;
    int xmax = 0;
    int ymax = 0;

    bool valid_for(int width, int height) const {
        return 0 <= xmin && xmin <= xmax && xmax < width && 0 <= ymin && ymin <= ymax && ymax < height;
    }
    bool contains(int x, int y) const { return xmin <= x && x <= xmax && ymin <= y && y <= ymax; }

    friend bool operator==(const BoxPrompt&, const BoxPrompt&) = default;
};

inline constexpr int kDefaultBoxMargin = 8;

/// Per-pixel argmax; ties go to the lowest class index.
inline LabelMask argmax(const ProbMap& p) {
    const std::size_t n = p.pixels();
    std::vector<std::uint8_t> labels(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        float best = p.at(0, i);
        for (int c = 1; c < p.num_classes(); ++c) {
            if (p.at(c, i) > best) {
                best = p.at(c, i);
                labels[i] = static_cast<std::uint8_t>(c);
            }
        }
    }
    return LabelMask(p.width(), p.height(), std::move(labels), p.num_classes());
}

struct InitialLabel {
    ProbMap p_bar;
    LabelMask y;
};

/// Mean of the three branch probability maps and its argmax.
inline InitialLabel ensemble_initial_label(const ProbMap& p_he, const ProbMap& p_gd, const ProbMap& p_gs) {
    for (const ProbMap* p : {&p_gd, &p_gs}) {
        if (p->width() != p_he.width() || p->height() != p_he.height() || p->num_classes() != p_he.num_classes()) {
            throw ShapeError("ensemble_initial_label: probability maps differ in shape or class count");
        }
    }
    const auto a = p_he.data();
    const auto b = p_gd.data();
    const auto c = p_gs.data();
    std::vector<float> mean(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        mean[i] = static_cast<float>((static_cast<double>(a[i]) + b[i] + c[i]) / 3.0);
    }
    ProbMap p_bar(p_he.width(), p_he.height(), p_he.num_classes(), std::move(mean));
    LabelMask y = argmax(p_bar);
    return {std::move(p_bar), std::move(y)};
}

/// Tight bounding box of `foreground_class`, grown by `margin` and clamped to the image.
inline BoxPrompt derive_box_prompt(const LabelMask& y, int foreground_class = 1, int margin = kDefaultBoxMargin) {
    if (margin < 0) throw InvalidArgument("derive_box_prompt: margin must be >= 0");
    int xmin = y.width(), ymin = y.height(), xmax = -1, ymax = -1;
    for (int row = 0; row < y.height(); ++row) {
        for (int col = 0; col < y.width(); ++col) {
            if (y.at(col, row) != foreground_class) continue;
            xmin = std::min(xmin, col);
            xmax = std::max(xmax, col);
            ymin = std::min(ymin, row);
            ymax = std::max(ymax, row);
        }
    }
    if (xmax < 0) throw EmptyPseudoLabel("derive_box_prompt: no pixel of class " + std::to_string(foreground_class));
    return {std::max(0, xmin - margin), std::max(0, ymin - margin), std::min(y.width() - 1, xmax + margin),
            std::min(y.height() - 1, ymax + margin)};
}

/// Otsu's threshold over 8-bit levels. Returns the last level of the dark
/// class, or -1 when all samples share one level.
inline int otsu_threshold(const std::array<std::uint64_t, 256>& hist) {
    double total = 0.0, weighted = 0.0;
    for (int i = 0; i < 256; ++i) {
        total += static_cast<double>(hist[i]);
        weighted += static_cast<double>(i) * static_cast<double>(hist[i]);
    }
    int best = -1;
    double best_between = 0.0;
    double w0 = 0.0, s0 = 0.0;
    for (int t = 0; t < 255; ++t) {
        w0 += static_cast<double>(hist[t]);
        s0 += static_cast<double>(t) * static_cast<double>(hist[t]);
        const double w1 = total - w0;
        if (w0 == 0.0 || w1 == 0.0) continue;
        const double m0 = s0 / w0;
        const double m1 = (weighted - s0) / w1;
        const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if (between > best_between) {
            best_between = between;
            best = t;
        }
    }
    return best;
}

/// Keeps the largest 4-connected component of `fg` (earliest in row-major
/// order on ties).
inline std::vector<std::uint8_t> largest_component(const std::vector<std::uint8_t>& fg, int width, int height) {
    std::vector<int> label(fg.size(), -1);
    std::vector<std::size_t> sizes;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < fg.size(); ++start) {
        if (!fg[start] || label[start] >= 0) continue;
        const int id = static_cast<int>(sizes.size());
        std::size_t size = 0;
        stack.push_back(start);
        label[start] = id;
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            ++size;
            const int x = static_cast<int>(p % width);
            const int y = static_cast<int>(p / width);
            const std::array<std::array<int, 2>, 4> nbrs{{{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}}};
            for (auto [nx, ny] : nbrs) {
                if (nx < 0 || ny < 0 || nx >= width || ny >= height) continue;
                const std::size_t q = static_cast<std::size_t>(ny) * width + nx;
                if (fg[q] && label[q] < 0) {
                    label[q] = id;
                    stack.push_back(q);
                }
            }
        }
        sizes.push_back(size);
    }
    std::vector<std::uint8_t> out(fg.size(), 0);
    if (sizes.empty()) return out;
    int keep = 0;
    for (int i = 1; i < static_cast<int>(sizes.size()); ++i) {
        if (sizes[i] > sizes[keep]) keep = i;
    }
    for (std::size_t p = 0; p < fg.size(); ++p) out[p] = (label[p] == keep);
    return out;
}

/// Built-in deterministic segmenter: Otsu threshold of the channel mean inside
/// the box (bright = foreground), largest 4-connected component, zero outside.
inline LabelMask oracle_segment(const RgbImage& img, const BoxPrompt& box) {
    if (!box.valid_for(img.width(), img.height())) throw InvalidArgument("oracle_segment: box out of bounds");
    const int w = img.width();
    const int h = img.height();
    std::vector<int> level(static_cast<std::size_t>(w) * h, 0);
    std::array<std::uint64_t, 256> hist{};
    for (int y = box.ymin; y <= box.ymax; ++y) {
        for (int x = box.xmin; x <= box.xmax; ++x) {
            const double m = (static_cast<double>(img.channel(0).at(x, y)) + img.channel(1).at(x, y) +
                              img.channel(2).at(x, y)) / 3.0;
            const int l = static_cast<int>(std::floor(m * 255.0 + 0.5));
            level[static_cast<std::size_t>(y) * w + x] = l;
            ++hist[l];
        }
    }
    std::vector<std::uint8_t> fg(level.size(), 0);
    const int t = otsu_threshold(hist);
    if (t >= 0) {
        for (int y = box.ymin; y <= box.ymax; ++y) {
            for (int x = box.xmin; x <= box.xmax; ++x) {
                const std::size_t p = static_cast<std::size_t>(y) * w + x;
                fg[p] = level[p] > t;
            }
        }
    }
    return LabelMask(w, h, largest_component(fg, w, h), 2);
}

/// A promptable segmenter: RGB image plus box in, binary mask out.
class Segmenter {
public:
    virtual ~Segmenter() = default;
    virtual LabelMask segment(const RgbImage& img, const BoxPrompt& box) = 0;
    virtual std::string name() const = 0;
};

class OracleSegmenter final : public Segmenter {
public:
    LabelMask segment(const RgbImage& img, const BoxPrompt& box) override { return oracle_segment(img, box); }
    std::string name() const override { return "oracle"; }
};

/// Owns a segmenter backend and counts responses that leaked outside the prompt box.
class SegmenterHandle {
public:
    explicit SegmenterHandle(std::unique_ptr<Segmenter> backend) : backend_(std::move(backend)) {
        if (!backend_) throw InvalidArgument("SegmenterHandle: null backend");
    }

    SegmenterHandle(SegmenterHandle&& o) noexcept
        : backend_(std::move(o.backend_)),
          clipped_responses_(o.clipped_responses_.load()),
          clipped_pixels_(o.clipped_pixels_.load()) {}

    static SegmenterHandle oracle() { return SegmenterHandle(std::make_unique<OracleSegmenter>()); }

    Segmenter& backend() { return *backend_; }
    std::string name() const { return backend_->name(); }

    std::uint64_t clipped_responses() const { return clipped_responses_.load(); }
    std::uint64_t clipped_pixels() const { return clipped_pixels_.load(); }

    void record_clip(std::uint64_t pixels) {
        ++clipped_responses_;
        clipped_pixels_ += pixels;
    }

private:
    std::unique_ptr<Segmenter> backend_;
    std::atomic<std::uint64_t> clipped_responses_{0};
    std::atomic<std::uint64_t> clipped_pixels_{0};
};

/// Runs the segmenter and forces every foreground pixel outside `box` to 0.
inline LabelMask segment_with_prompt(SegmenterHandle& seg, const RgbImage& img, const BoxPrompt& box) {
    if (!box.valid_for(img.width(), img.height())) throw InvalidArgument("segment_with_prompt: box out of bounds");
    const LabelMask raw = seg.backend().segment(img, box);
    if (raw.width() != img.width() || raw.height() != img.height()) {
        throw SegmenterIoError("segmenter returned a " + std::to_string(raw.width()) + "x" +
                               std::to_string(raw.height()) + " mask for a " + std::to_string(img.width()) + "x" +
                               std::to_string(img.height()) + " image");
    }
    std::vector<std::uint8_t> out(raw.data().begin(), raw.data().end());
    std::uint64_t clipped = 0;
    for (int y = 0; y < raw.height(); ++y) {
        for (int x = 0; x < raw.width(); ++x) {
            auto& v = out[static_cast<std::size_t>(y) * raw.width() + x];
            if (v > 1) throw SegmenterIoError("segmenter returned a non-binary mask");
            if (v && !box.contains(x, y)) {
                v = 0;
                ++clipped;
            }
        }
    }
    if (clipped) seg.record_clip(clipped);
    return LabelMask(raw.width(), raw.height(), std::move(out), 2);
}

}  // namespace srpl
