#pragma once

// Refined pseudo-labels and the reliable / unreliable pixel partition derived
// from agreement of the three single-branch segmenter outputs.

#include <cstdint>
#include <vector>

#include "srpl/error.hpp"
#include "srpl/image.hpp"
#include "srpl/segmenter.hpp"
#include "srpl/t3ie.hpp"

namespace srpl {

/// 1 = reliable, 0 = unreliable, one flag per pixel.
class ReliabilityMask {
public:
    ReliabilityMask() = default;

    ReliabilityMask(int width, int height, std::vector<std::uint8_t> flags)
        : width_(width), height_(height), flags_(std::move(flags)) {
        if (flags_.size() != detail::checked_area(width, height, "ReliabilityMask")) {
            throw ShapeError("ReliabilityMask: data length mismatch");
        }
        for (auto f : flags_) {
            if (f > 1) throw InvalidArgument("ReliabilityMask: flags must be 0 or 1");
        }
    }

    static ReliabilityMask all(int width, int height, bool reliable) {
        return ReliabilityMask(width, height,
                               std::vector<std::uint8_t>(detail::checked_area(width, height, "ReliabilityMask"),
                                                         reliable ? 1 : 0));
    }

    int width() const { return width_; }
    int height() const { return height_; }
    std::size_t size() const { return flags_.size(); }
    bool reliable(std::size_t i) const { return flags_[i] != 0; }
    std::span<const std::uint8_t> data() const { return flags_; }

    std::size_t reliable_count() const {
        std::size_t n = 0;
        for (auto f : flags_) n += f;
        return n;
    }
    std::size_t unreliable_count() const { return flags_.size() - reliable_count(); }

    friend bool operator==(const ReliabilityMask&, const ReliabilityMask&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint8_t> flags_;
};

struct RefinedLabelSet {
    LabelMask r;
    LabelMask r_he;
    LabelMask r_gd;
    LabelMask r_gs;
    ReliabilityMask mask;
    BoxPrompt box;

    friend bool operator==(const RefinedLabelSet&, const RefinedLabelSet&) = default;
};

/// A pixel is reliable iff all three branch labels agree there.
inline ReliabilityMask cmso(const LabelMask& r_he, const LabelMask& r_gd, const LabelMask& r_gs) {
    for (const LabelMask* m : {&r_gd, &r_gs}) {
        if (m->width() != r_he.width() || m->height() != r_he.height()) {
            throw ShapeError("cmso: branch masks differ in shape");
        }
    }
    std::vector<std::uint8_t> flags(r_he.size());
    for (std::size_t i = 0; i < flags.size(); ++i) {
        flags[i] = (r_he[i] == r_gd[i] && r_gd[i] == r_gs[i]) ? 1 : 0;
    }
    return ReliabilityMask(r_he.width(), r_he.height(), std::move(flags));
}

/// Four segmenter calls with one box: the concatenated RGB input gives the
/// supervision label, each branch replicated to three channels gives a vote.
inline RefinedLabelSet refine(SegmenterHandle& seg, const T3Bundle& bundle, const BoxPrompt& box) {
    LabelMask r = segment_with_prompt(seg, concat_rgb(bundle), box);
    LabelMask r_he = segment_with_prompt(seg, RgbImage::replicate(bundle.he), box);
    LabelMask r_gd = segment_with_prompt(seg, RgbImage::replicate(bundle.gd), box);
    LabelMask r_gs = segment_with_prompt(seg, RgbImage::replicate(bundle.gs), box);
    ReliabilityMask mask = cmso(r_he, r_gd, r_gs);
    return {std::move(r), std::move(r_he), std::move(r_gd), std::move(r_gs), std::move(mask), box};
}

}  // namespace srpl
