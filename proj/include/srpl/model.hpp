#pragma once

// Linear per-pixel classifier over FeatureSpec v1 and the source-model
// abstraction used to produce branch probability maps.

#include <cmath>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "srpl/error.hpp"
#include "srpl/features.hpp"
#include "srpl/image.hpp"
#include "srpl/loss.hpp"
#include "srpl/pgm.hpp"

namespace srpl {

/// Weights of the linear classifier, row-major (C, F).
struct ModelParams {
    int num_classes = 2;
    int num_features = FeatureSpec::kCount;
    std::vector<double> weights;

    static ModelParams zeros(int num_classes = 2) {
        return {num_classes, FeatureSpec::kCount,
                std::vector<double>(static_cast<std::size_t>(num_classes) * FeatureSpec::kCount, 0.0)};
    }

    double& w(int cls, int feature) { return weights[static_cast<std::size_t>(cls) * num_features + feature]; }
    double w(int cls, int feature) const { return weights[static_cast<std::size_t>(cls) * num_features + feature]; }

    void validate() const {
        if (num_classes < 2) throw InvalidArgument("ModelParams: need at least 2 classes");
        if (num_features != FeatureSpec::kCount) throw ShapeError("ModelParams: feature count mismatch");
        if (weights.size() != static_cast<std::size_t>(num_classes) * num_features) {
            throw ShapeError("ModelParams: weight count mismatch");
        }
        for (double v : weights) {
            if (!std::isfinite(v)) throw NumericError("ModelParams: non-finite weight");
        }
    }

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct ForwardResult {
    LogitMap z;
    ProbMap q;
};

inline LogitMap logits(const ModelParams& params, const FeatureMap& feats) {
    if (feats.count != params.num_features) throw ShapeError("forward: feature count mismatch");
    const std::size_t n = feats.pixels();
    LogitMap z{feats.width, feats.height, params.num_classes, std::vector<double>(n * params.num_classes, 0.0)};
    for (int c = 0; c < params.num_classes; ++c) {
        double* row = z.data.data() + c * n;
        for (int f = 0; f < params.num_features; ++f) {
            const double wcf = params.w(c, f);
            const double* feat = feats.data.data() + f * n;
            for (std::size_t i = 0; i < n; ++i) row[i] += wcf * feat[i];
        }
    }
    return z;
}

inline ForwardResult forward(const ModelParams& params, const FeatureMap& feats) {
    LogitMap z = logits(params, feats);
    ProbMap q = to_probmap(z);
    return {std::move(z), std::move(q)};
}

/// d loss / d W from d loss / d z: sum over pixels of grad_z(c,i) * feature(f,i).
inline std::vector<double> weight_gradient(const ModelParams& params, const FeatureMap& feats,
                                           const std::vector<double>& grad_z) {
    const std::size_t n = feats.pixels();
    std::vector<double> g(params.weights.size(), 0.0);
    for (int c = 0; c < params.num_classes; ++c) {
        const double* gz = grad_z.data() + c * n;
        for (int f = 0; f < params.num_features; ++f) {
            const double* feat = feats.data.data() + f * n;
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += gz[i] * feat[i];
            g[static_cast<std::size_t>(c) * params.num_features + f] = s;
        }
    }
    return g;
}

inline nlohmann::json to_json(const ModelParams& p) {
    nlohmann::json rows = nlohmann::json::array();
    for (int c = 0; c < p.num_classes; ++c) {
        rows.push_back(std::vector<double>(p.weights.begin() + c * p.num_features,
                                           p.weights.begin() + (c + 1) * p.num_features));
    }
    return {{"c", p.num_classes}, {"f", p.num_features}, {"feature_spec", FeatureSpec::kId}, {"weights", rows}};
}

inline ModelParams model_from_json(const nlohmann::json& j) {
    try {
        if (j.at("feature_spec").get<std::string>() != FeatureSpec::kId) {
            throw FormatError("model: unsupported feature_spec");
        }
        ModelParams p{j.at("c").get<int>(), j.at("f").get<int>(), {}};
        const auto& rows = j.at("weights");
        if (!rows.is_array() || rows.size() != static_cast<std::size_t>(p.num_classes)) {
            throw FormatError("model: weights must have c rows");
        }
        for (const auto& row : rows) {
            auto vals = row.get<std::vector<double>>();
            if (vals.size() != static_cast<std::size_t>(p.num_features)) throw FormatError("model: row length != f");
            p.weights.insert(p.weights.end(), vals.begin(), vals.end());
        }
        p.validate();
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model: ") + e.what());
    }
}

inline void save_model(const ModelParams& p, const std::filesystem::path& path) {
    detail::write_file(path, to_json(p).dump(2) + "\n");
}

inline ModelParams load_model(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    try {
        return model_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

/// Anything that maps a 3-channel image to class probabilities.
class SourceModel {
public:
    virtual ~SourceModel() = default;
    virtual int num_classes() const = 0;
    virtual ProbMap predict(const RgbImage& img) = 0;
};

class BuiltinSourceModel final : public SourceModel {
public:
    explicit BuiltinSourceModel(ModelParams params) : params_(std::move(params)) { params_.validate(); }

    int num_classes() const override { return params_.num_classes; }
    ProbMap predict(const RgbImage& img) override { return forward(params_, extract_features(img)).q; }
    const ModelParams& params() const { return params_; }

private:
    ModelParams params_;
};

inline ProbMap predict_prob(SourceModel& model, const RgbImage& img) {
    ProbMap p = model.predict(img);
    if (p.width() != img.width() || p.height() != img.height() || p.num_classes() != model.num_classes()) {
        throw ShapeError("predict_prob: model output shape mismatch");
    }
    return p;
}

/// Single-channel inputs are fed as three identical channels.
inline ProbMap predict_prob(SourceModel& model, const GrayImage& img) {
    return predict_prob(model, RgbImage::replicate(img));
}

}  // namespace srpl
