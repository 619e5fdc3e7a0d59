#pragma once

// Source training and target adaptation of the linear pixel classifier.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "srpl/adam.hpp"
#include "srpl/cmso.hpp"
#include "srpl/error.hpp"
#include "srpl/features.hpp"
#include "srpl/loss.hpp"
#include "srpl/metrics.hpp"
#include "srpl/model.hpp"
#include "srpl/segmenter.hpp"
#include "srpl/synth.hpp"

namespace srpl {

enum class AdaptMode { EM, PL_Y, PL_R, RPL, RPL_PEM };

inline constexpr AdaptMode kAllModes[] = {AdaptMode::EM, AdaptMode::PL_Y, AdaptMode::PL_R, AdaptMode::RPL,
                                          AdaptMode::RPL_PEM};

inline std::string to_string(AdaptMode m) {
    switch (m) {
        case AdaptMode::EM: return "EM";
        case AdaptMode::PL_Y: return "PL_Y";
        case AdaptMode::PL_R: return "PL_R";
        case AdaptMode::RPL: return "RPL";
        case AdaptMode::RPL_PEM: return "RPL_PEM";
    }
    return "?";
}

inline AdaptMode parse_mode(const std::string& s) {
    for (auto m : kAllModes) {
        if (to_string(m) == s) return m;
    }
    throw ConfigError("unknown adaptation mode '" + s + "'");
}

struct TrainConfig {
    double learning_rate = 6.0e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int epochs = 100;
    std::uint64_t seed = 0;
    AdaptMode mode = AdaptMode::RPL_PEM;
    double init_scale = 0.01;  // std of the seeded initial weights (source training only)

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("TrainConfig: learning_rate must be > 0");
        if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
    }

    AdamConfig adam() const { return {learning_rate, beta1, beta2, adam_eps}; }
};

/// One line of a training log: per-epoch means over images of each loss term.
struct EpochLog {
    int epoch = 0;
    double l_pce = 0.0;
    double l_pdc = 0.0;
    double l_rpl = 0.0;
    double l_pem = 0.0;
    double l_total = 0.0;
    std::optional<double> val_dice;

    nlohmann::json to_json() const {
        nlohmann::json j{{"epoch", epoch}, {"l_pce", l_pce}, {"l_pdc", l_pdc}, {"l_rpl", l_rpl},
                         {"l_pem", l_pem}, {"l_total", l_total}};
        if (val_dice) j["val_dice"] = *val_dice;
        return j;
    }
};

using EpochCallback = std::function<void(const EpochLog&)>;

namespace detail {

inline void accumulate(EpochLog& log, const LossReport& r, double weight) {
    log.l_pce += weight * r.l_pce;
    log.l_pdc += weight * r.l_pdc;
    log.l_rpl += weight * r.l_rpl;
    log.l_pem += weight * r.l_pem;
    log.l_total += weight * r.l_total;
}

inline double mean_dice(const ModelParams& params, const std::vector<LabeledImage>& data) {
    double s = 0.0;
    for (const auto& d : data) {
        s += dice(argmax(forward(params, extract_features(d.image)).q), d.label);
    }
    return data.empty() ? 0.0 : s / static_cast<double>(data.size());
}

}  // namespace detail

struct SourceTrainResult {
    ModelParams params;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

/// Supervised training on labeled source images with the CE + Dice pair (the
/// reliable-label loss over an all-reliable mask). One Adam step per image,
/// images visited in dataset order.
inline SourceTrainResult train_source(const std::vector<LabeledImage>& dataset, const TrainConfig& cfg,
                                      const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (dataset.empty()) throw EmptyDataset("train_source: no labeled images");
    const int classes = 2;
    ModelParams params = ModelParams::zeros(classes);
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> init(0.0, cfg.init_scale);
    for (double& w : params.weights) w = init(rng);

    std::vector<FeatureMap> feats;
    std::vector<ReliabilityMask> masks;
    for (const auto& d : dataset) {
        feats.push_back(extract_features(d.image));
        masks.push_back(ReliabilityMask::all(d.image.width(), d.image.height(), true));
    }
    const LossConfig loss_cfg{0.0, LossConfig{}.epsilon, LossConfig{}.prob_floor};
    auto dataset_loss = [&](const ModelParams& p) {
        double s = 0.0;
        for (std::size_t k = 0; k < dataset.size(); ++k) {
            s += loss_total_with_grad(logits(p, feats[k]), dataset[k].label, masks[k], loss_cfg).l_total;
        }
        return s / static_cast<double>(dataset.size());
    };

    SourceTrainResult res;
    res.initial_loss = dataset_loss(params);
    Adam opt(params.weights.size(), cfg.adam());
    const double weight = 1.0 / static_cast<double>(dataset.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        EpochLog log;
        log.epoch = epoch;
        for (std::size_t k = 0; k < dataset.size(); ++k) {
            const auto rep = loss_total_with_grad(logits(params, feats[k]), dataset[k].label, masks[k], loss_cfg);
            detail::accumulate(log, rep, weight);
            opt.step(params.weights, weight_gradient(params, feats[k], rep.grad));
        }
        if (on_epoch) on_epoch(log);
    }
    res.final_loss = dataset_loss(params);
    res.params = std::move(params);
    return res;
}

/// Read counters for the pseudo-label fields of AdaptSample.
struct AccessCounters {
    std::uint64_t initial_label_reads = 0;
    std::uint64_t refined_reads = 0;
};

/// A target image with the pseudo-label artifacts produced for it. Accessors
/// count reads so callers can verify which artifacts a mode consumed.
class AdaptSample {
public:
    AdaptSample(std::string id, GrayImage image, std::optional<LabelMask> y = std::nullopt,
                std::optional<RefinedLabelSet> refined = std::nullopt,
                std::shared_ptr<AccessCounters> counters = std::make_shared<AccessCounters>())
        : id_(std::move(id)),
          image_(std::move(image)),
          y_(std::move(y)),
          refined_(std::move(refined)),
          counters_(std::move(counters)) {}

    const std::string& id() const { return id_; }
    const GrayImage& image() const { return image_; }
    bool has_initial_label() const { return y_.has_value(); }
    bool has_refined() const { return refined_.has_value(); }

    const LabelMask& initial_label() const {
        ++counters_->initial_label_reads;
        if (!y_) throw ConfigError("sample " + id_ + " has no initial pseudo-label");
        return *y_;
    }
    const RefinedLabelSet& refined() const {
        ++counters_->refined_reads;
        if (!refined_) throw ConfigError("sample " + id_ + " has no refined pseudo-label set");
        return *refined_;
    }

    void set_pseudo_labels(std::optional<LabelMask> y, std::optional<RefinedLabelSet> refined) {
        y_ = std::move(y);
        refined_ = std::move(refined);
    }

    const AccessCounters& counters() const { return *counters_; }

private:
    std::string id_;
    GrayImage image_;
    std::optional<LabelMask> y_;
    std::optional<RefinedLabelSet> refined_;
    std::shared_ptr<AccessCounters> counters_;
};

struct AdaptOptions {
    const std::vector<LabeledImage>* select_best_on = nullptr;  // labeled validation set, optional
    int refresh_every = 0;                                      // 0 = pseudo-labels fixed once
    std::function<void(const ModelParams&, std::vector<AdaptSample>&)> refresh;
    EpochCallback on_epoch;
};

/// Per-sample supervision target for a mode: labels, reliability mask, PEM weight.
struct ModeTarget {
    LabelMask labels;
    ReliabilityMask mask;
    double lambda = 0.0;
};

inline ModeTarget mode_target(AdaptMode mode, const AdaptSample& s, const LossConfig& loss_cfg) {
    const int w = s.image().width();
    const int h = s.image().height();
    switch (mode) {
        case AdaptMode::EM:
            // Entropy on every pixel; labels are never read.
            return {LabelMask::zeros(w, h), ReliabilityMask::all(w, h, false), 1.0};
        case AdaptMode::PL_Y:
            return {s.initial_label(), ReliabilityMask::all(w, h, true), 0.0};
        case AdaptMode::PL_R:
            return {s.refined().r, ReliabilityMask::all(w, h, true), 0.0};
        case AdaptMode::RPL:
            return {s.refined().r, s.refined().mask, 0.0};
        case AdaptMode::RPL_PEM:
            return {s.refined().r, s.refined().mask, loss_cfg.lambda};
    }
    throw ConfigError("unknown mode");
}

/// Adapts a copy of theta_s to the target samples with the loss selected by
/// cfg.mode; theta_s itself is left untouched.
inline ModelParams adapt(const ModelParams& theta_s, std::vector<AdaptSample> samples, const TrainConfig& cfg,
                         const LossConfig& loss_cfg = {}, const AdaptOptions& opts = {}) {
    cfg.validate();
    loss_cfg.validate();
    theta_s.validate();
    if (samples.empty()) throw EmptyDataset("adapt: no target samples");
    for (const auto& s : samples) {
        const bool needs_y = cfg.mode == AdaptMode::PL_Y;
        const bool needs_r = cfg.mode == AdaptMode::PL_R || cfg.mode == AdaptMode::RPL || cfg.mode == AdaptMode::RPL_PEM;
        if ((needs_y && !s.has_initial_label()) || (needs_r && !s.has_refined())) {
            throw ConfigError("adapt: mode " + to_string(cfg.mode) + " lacks pseudo-labels for " + s.id());
        }
    }

    ModelParams params = theta_s;
    std::vector<FeatureMap> feats;
    for (const auto& s : samples) feats.push_back(extract_features(s.image()));
    auto build_targets = [&] {
        std::vector<ModeTarget> t;
        for (const auto& s : samples) t.push_back(mode_target(cfg.mode, s, loss_cfg));
        return t;
    };
    std::vector<ModeTarget> targets = build_targets();

    Adam opt(params.weights.size(), cfg.adam());
    const double weight = 1.0 / static_cast<double>(samples.size());
    std::optional<double> best_dice;
    ModelParams best = params;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (opts.refresh && opts.refresh_every > 0 && epoch > 0 && epoch % opts.refresh_every == 0) {
            opts.refresh(params, samples);
            targets = build_targets();
        }
        EpochLog log;
        log.epoch = epoch;
        for (std::size_t k = 0; k < samples.size(); ++k) {
            LossConfig lc = loss_cfg;
            lc.lambda = targets[k].lambda;
            const auto rep = loss_total_with_grad(logits(params, feats[k]), targets[k].labels, targets[k].mask, lc);
            detail::accumulate(log, rep, weight);
            opt.step(params.weights, weight_gradient(params, feats[k], rep.grad));
        }
        if (opts.select_best_on) {
            log.val_dice = detail::mean_dice(params, *opts.select_best_on);
            if (!best_dice || *log.val_dice > *best_dice) {
                best_dice = log.val_dice;
                best = params;
            }
        }
        if (opts.on_epoch) opts.on_epoch(log);
    }
    return opts.select_best_on ? best : params;
}

}  // namespace srpl
