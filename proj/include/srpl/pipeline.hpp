#pragma once

// Stage graph behind the command-line tool. Each stage reads earlier stages'
// artifacts from the work directory and rewrites only its own outputs, so
// stages can be rerun (or run on another machine) independently.
//
// Layout under <work>:
//   data/<split>/images/<id>.pgm      data/<split>/labels/<id>.srt (u8 H,W)
//   models/source.json                models/target_<MODE>.json
//   stats/domain.json                 t3ie/<id>.srt (3,H,W) + t3ie/gammas.json
//   pseudo/<id>_pbar.srt, <id>_y.srt  refine/<id>_{r,r_he,r_gd,r_gs,omega}.srt + refine/index.json
//   eval/*.csv, eval/*.json           ablate/*.csv, ablate/ablation.json
//   logs/<stage>.jsonl                report.md

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <mutex>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "srpl/cmso.hpp"
#include "srpl/error.hpp"
#include "srpl/external.hpp"
#include "srpl/metrics.hpp"
#include "srpl/model.hpp"
#include "srpl/parallel.hpp"
#include "srpl/pgm.hpp"
#include "srpl/segmenter.hpp"
#include "srpl/srt.hpp"
#include "srpl/synth.hpp"
#include "srpl/t3ie.hpp"
#include "srpl/train.hpp"

namespace srpl::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

inline const std::array<std::string, 4> kSplits = {"source_train", "source_test", "target_train", "target_test"};

enum class EmptyBoxPolicy { skip, full_image };
enum class ErrorPolicy { abort, skip };

inline std::string to_string(EmptyBoxPolicy p) { return p == EmptyBoxPolicy::skip ? "skip" : "full-image"; }
inline std::string to_string(ErrorPolicy p) { return p == ErrorPolicy::abort ? "abort" : "skip"; }

/// Where segmenter (or source-model) calls go: the built-in implementation or
/// an srpl-seg/1 bridge command.
struct ProviderSpec {
    std::string kind = "builtin";  // builtin | external ("oracle" is accepted for the segmenter)
    std::string command;
    std::string cwd;
    double timeout_s = 120.0;

    bool external() const { return kind == "external"; }
    BridgeConfig bridge() const {
        return BridgeConfig{command, cwd, std::chrono::milliseconds(static_cast<long long>(timeout_s * 1000.0)), {}};
    }
};

struct PipelineConfig {
    std::string work = "work";
    std::uint64_t seed = 7;
    int jobs = 0;  // 0 = all cores
    SynthDomainConfig synth = default_synth();
    ImageSpec image;
    GammaSearchConfig gamma;
    LossConfig loss;
    TrainConfig source_train = default_source_train();
    TrainConfig adapt;
    int margin = kDefaultBoxMargin;
    EmptyBoxPolicy empty_box = EmptyBoxPolicy::skip;
    ErrorPolicy on_segmenter_error = ErrorPolicy::abort;
    ProviderSpec segmenter{"oracle", "", "", 120.0};
    ProviderSpec predictor;
    int refresh_every = 0;
    std::string select_best_on;  // directory with images/ and labels/; empty = keep the final epoch

    // Benchmark defaults. Large organs, a strong contrast squeeze and a
    // per-image intensity ramp: the source model's fixed threshold then sits
    // above most target organ pixels, while HE and Otsu inside a box still
    // recover the shape.
    static SynthDomainConfig default_synth() {
        SynthDomainConfig s;
        s.axis_min = 15.0;
        s.axis_max = 23.0;
        s.target_contrast = 0.5;
        s.target_offset = 0.07;
        s.target_gamma_jitter = 0.03;
        s.target_bias_field = 0.75;
        return s;
    }

    static TrainConfig default_source_train() {
        TrainConfig t;
        t.epochs = 400;
        return t;
    }

    void validate() const {
        if (work.empty()) throw ConfigError("config: 'work' must not be empty");
        if (jobs < 0) throw ConfigError("config: 'jobs' must be >= 0");
        if (margin < 0) throw ConfigError("config: 'margin' must be >= 0");
        if (refresh_every < 0) throw ConfigError("config: 'refresh_every' must be >= 0");
        for (const auto* p : {&segmenter, &predictor}) {
            if (p->external() && p->command.empty()) throw ConfigError("config: external provider needs 'command'");
            if (!(p->timeout_s > 0.0)) throw ConfigError("config: provider 'timeout_s' must be > 0");
        }
        if (segmenter.kind != "oracle" && segmenter.kind != "builtin" && segmenter.kind != "external") {
            throw ConfigError("config: segmenter.kind must be 'oracle' or 'external'");
        }
        if (predictor.kind != "builtin" && predictor.kind != "external") {
            throw ConfigError("config: predictor.kind must be 'builtin' or 'external'");
        }
        try {
            synth.validate();
            image.validate();
            gamma.validate();
            loss.validate();
            source_train.validate();
            adapt.validate();
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
    }
};

// ---------------------------------------------------------------------------
// Config JSON: every key optional, unknown keys and wrong types rejected.

namespace impl {

class ObjectReader {
public:
    ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }

    template <class T>
    void read(const char* key, T& out) {
        if (!j_.contains(key)) return;
        seen_.insert(key);
        const json& v = j_.at(key);
        const std::string path = where_ + "." + key;
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(path + ": expected a boolean");
            out = v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError(path + ": expected a string");
            out = v.get<std::string>();
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ConfigError(path + ": expected an integer");
            if constexpr (std::is_unsigned_v<T>) {
                if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
                    throw ConfigError(path + ": expected a non-negative integer");
                }
            }
            out = v.get<T>();
        } else {
            if (!v.is_number()) throw ConfigError(path + ": expected a number");
            out = v.get<T>();
        }
    }

    const json* child(const char* key) {
        if (!j_.contains(key)) return nullptr;
        seen_.insert(key);
        return &j_.at(key);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
        }
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

inline void read_train(const json& j, const std::string& where, TrainConfig& t, bool with_mode) {
    ObjectReader r(j, where);
    r.read("learning_rate", t.learning_rate);
    r.read("beta1", t.beta1);
    r.read("beta2", t.beta2);
    r.read("adam_eps", t.adam_eps);
    r.read("epochs", t.epochs);
    r.read("init_scale", t.init_scale);
    if (with_mode) {
        std::string mode = to_string(t.mode);
        r.read("mode", mode);
        try {
            t.mode = parse_mode(mode);
        } catch (const ConfigError&) {
            throw ConfigError(where + ".mode: unknown mode '" + mode + "'");
        }
    }
    r.finish();
}

inline json train_json(const TrainConfig& t, bool with_mode) {
    json j{{"learning_rate", t.learning_rate}, {"beta1", t.beta1}, {"beta2", t.beta2},
           {"adam_eps", t.adam_eps},           {"epochs", t.epochs}, {"init_scale", t.init_scale}};
    if (with_mode) j["mode"] = to_string(t.mode);
    return j;
}

inline void read_provider(const json& j, const std::string& where, ProviderSpec& p) {
    ObjectReader r(j, where);
    r.read("kind", p.kind);
    r.read("command", p.command);
    r.read("cwd", p.cwd);
    r.read("timeout_s", p.timeout_s);
    r.finish();
}

inline json provider_json(const ProviderSpec& p) {
    return {{"kind", p.kind}, {"command", p.command}, {"cwd", p.cwd}, {"timeout_s", p.timeout_s}};
}

}  // namespace impl

inline json to_json(const PipelineConfig& c) {
    const auto& s = c.synth;
    return {
        {"work", c.work},
        {"seed", c.seed},
        {"jobs", c.jobs},
        {"synth",
         {{"width", s.width},
          {"height", s.height},
          {"n_train", s.n_train},
          {"n_test", s.n_test},
          {"ellipses_min", s.ellipses_min},
          {"ellipses_max", s.ellipses_max},
          {"axis_min", s.axis_min},
          {"axis_max", s.axis_max},
          {"fg_mean", s.fg_mean},
          {"bg_mean", s.bg_mean},
          {"halo_width", s.halo_width},
          {"halo_mean", s.halo_mean},
          {"halo_is_foreground", s.halo_is_foreground},
          {"edge_blur", s.edge_blur},
          {"source_noise", s.source_noise},
          {"target_gamma", s.target_gamma},
          {"target_gamma_jitter", s.target_gamma_jitter},
          {"target_bias_field", s.target_bias_field},
          {"target_contrast", s.target_contrast},
          {"target_offset", s.target_offset},
          {"target_noise", s.target_noise}}},
        {"image", {{"gray_levels", c.image.gray_levels}}},
        {"gamma_search",
         {{"gamma_min", c.gamma.gamma_min},
          {"gamma_max", c.gamma.gamma_max},
          {"tolerance", c.gamma.tolerance},
          {"coarse_samples", c.gamma.coarse_samples}}},
        {"loss", {{"lambda", c.loss.lambda}, {"epsilon", c.loss.epsilon}, {"prob_floor", c.loss.prob_floor}}},
        {"source_train", impl::train_json(c.source_train, false)},
        {"adapt", impl::train_json(c.adapt, true)},
        {"margin", c.margin},
        {"empty_box_policy", to_string(c.empty_box)},
        {"on_segmenter_error", to_string(c.on_segmenter_error)},
        {"segmenter", impl::provider_json(c.segmenter)},
        {"predictor", impl::provider_json(c.predictor)},
        {"refresh_every", c.refresh_every},
        {"select_best_on", c.select_best_on},
    };
}

/// Overlays `j` on `base`. The synth seed and both training seeds follow `seed`.
inline PipelineConfig config_from_json(const json& j, PipelineConfig base = {}) {
    PipelineConfig c = std::move(base);
    impl::ObjectReader r(j, "config");
    r.read("work", c.work);
    r.read("seed", c.seed);
    r.read("jobs", c.jobs);
    if (const json* s = r.child("synth")) {
        impl::ObjectReader sr(*s, "config.synth");
        auto& d = c.synth;
        sr.read("width", d.width);
        sr.read("height", d.height);
        sr.read("n_train", d.n_train);
        sr.read("n_test", d.n_test);
        sr.read("ellipses_min", d.ellipses_min);
        sr.read("ellipses_max", d.ellipses_max);
        sr.read("axis_min", d.axis_min);
        sr.read("axis_max", d.axis_max);
        sr.read("fg_mean", d.fg_mean);
        sr.read("bg_mean", d.bg_mean);
        sr.read("halo_width", d.halo_width);
        sr.read("halo_mean", d.halo_mean);
        sr.read("halo_is_foreground", d.halo_is_foreground);
        sr.read("edge_blur", d.edge_blur);
        sr.read("source_noise", d.source_noise);
        sr.read("target_gamma", d.target_gamma);
        sr.read("target_gamma_jitter", d.target_gamma_jitter);
        sr.read("target_bias_field", d.target_bias_field);
        sr.read("target_contrast", d.target_contrast);
        sr.read("target_offset", d.target_offset);
        sr.read("target_noise", d.target_noise);
        sr.finish();
    }
    if (const json* s = r.child("image")) {
        impl::ObjectReader sr(*s, "config.image");
        sr.read("gray_levels", c.image.gray_levels);
        sr.finish();
    }
    if (const json* s = r.child("gamma_search")) {
        impl::ObjectReader sr(*s, "config.gamma_search");
        sr.read("gamma_min", c.gamma.gamma_min);
        sr.read("gamma_max", c.gamma.gamma_max);
        sr.read("tolerance", c.gamma.tolerance);
        sr.read("coarse_samples", c.gamma.coarse_samples);
        sr.finish();
    }
    if (const json* s = r.child("loss")) {
        impl::ObjectReader sr(*s, "config.loss");
        sr.read("lambda", c.loss.lambda);
        sr.read("epsilon", c.loss.epsilon);
        sr.read("prob_floor", c.loss.prob_floor);
        sr.finish();
    }
    if (const json* s = r.child("source_train")) impl::read_train(*s, "config.source_train", c.source_train, false);
    if (const json* s = r.child("adapt")) impl::read_train(*s, "config.adapt", c.adapt, true);
    r.read("margin", c.margin);
    std::string policy = to_string(c.empty_box);
    r.read("empty_box_policy", policy);
    if (policy == "skip") {
        c.empty_box = EmptyBoxPolicy::skip;
    } else if (policy == "full-image") {
        c.empty_box = EmptyBoxPolicy::full_image;
    } else {
        throw ConfigError("config.empty_box_policy: expected 'skip' or 'full-image'");
    }
    std::string on_err = to_string(c.on_segmenter_error);
    r.read("on_segmenter_error", on_err);
    if (on_err == "abort") {
        c.on_segmenter_error = ErrorPolicy::abort;
    } else if (on_err == "skip") {
        c.on_segmenter_error = ErrorPolicy::skip;
    } else {
        throw ConfigError("config.on_segmenter_error: expected 'abort' or 'skip'");
    }
    if (const json* s = r.child("segmenter")) impl::read_provider(*s, "config.segmenter", c.segmenter);
    if (const json* s = r.child("predictor")) impl::read_provider(*s, "config.predictor", c.predictor);
    r.read("refresh_every", c.refresh_every);
    r.read("select_best_on", c.select_best_on);
    r.finish();
    c.validate();
    return c;
}

inline PipelineConfig load_config(const fs::path& path, PipelineConfig base = {}) {
    const auto bytes = srpl::detail::read_file(path);
    json j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (j.is_discarded()) throw ConfigError(path.string() + ": not valid JSON");
    return config_from_json(j, std::move(base));
}

/// Seeds that follow the master seed.
inline SynthDomainConfig seeded_synth(const PipelineConfig& c) {
    SynthDomainConfig s = c.synth;
    s.seed = c.seed;
    return s;
}

// ---------------------------------------------------------------------------
// Paths and artifact I/O.

struct Layout {
    fs::path root;

    fs::path images(const std::string& split) const { return root / "data" / split / "images"; }
    fs::path labels(const std::string& split) const { return root / "data" / split / "labels"; }
    fs::path image(const std::string& split, const std::string& id) const { return images(split) / (id + ".pgm"); }
    fs::path label(const std::string& split, const std::string& id) const { return labels(split) / (id + ".srt"); }
    fs::path source_model() const { return root / "models" / "source.json"; }
    fs::path adapted_model(AdaptMode m) const { return root / "models" / ("target_" + to_string(m) + ".json"); }
    fs::path domain_stats() const { return root / "stats" / "domain.json"; }
    fs::path t3ie_dir() const { return root / "t3ie"; }
    fs::path bundle(const std::string& id) const { return t3ie_dir() / (id + ".srt"); }
    fs::path gammas() const { return t3ie_dir() / "gammas.json"; }
    fs::path pseudo_dir() const { return root / "pseudo"; }
    fs::path p_bar(const std::string& id) const { return pseudo_dir() / (id + "_pbar.srt"); }
    fs::path y(const std::string& id) const { return pseudo_dir() / (id + "_y.srt"); }
    fs::path refine_dir() const { return root / "refine"; }
    fs::path refined(const std::string& id, const std::string& part) const {
        return refine_dir() / (id + "_" + part + ".srt");
    }
    fs::path refine_index() const { return refine_dir() / "index.json"; }
    fs::path eval_dir() const { return root / "eval"; }
    fs::path ablate_dir() const { return root / "ablate"; }
    fs::path logs() const { return root / "logs"; }
    fs::path report() const { return root / "report.md"; }
};

inline void require(const fs::path& p) {
    if (!fs::exists(p)) throw MissingArtifact("missing artifact: " + p.string());
}

/// Sorted file stems with extension `ext` in `dir`.
inline std::vector<std::string> list_ids(const fs::path& dir, const std::string& ext) {
    require(dir);
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ext) ids.push_back(e.path().stem().string());
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

inline void write_json(const fs::path& p, const json& j) { srpl::detail::write_file(p, j.dump(2) + "\n"); }

inline json read_json(const fs::path& p) {
    const auto bytes = srpl::detail::read_file(p);
    json j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (j.is_discarded()) throw FormatError(p.string() + ": not valid JSON");
    return j;
}

/// Masks are SRT u8 (H,W); PGM masks are accepted with any nonzero value as foreground.
inline LabelMask load_mask(const fs::path& p) {
    if (p.extension() == ".pgm") {
        const GrayImage g = load_pgm(p);
        std::vector<std::uint8_t> v(g.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = g[i] > 0.0f ? 1 : 0;
        return LabelMask(g.width(), g.height(), std::move(v), 2);
    }
    return mask_from_tensor(load_srt(p), 2);
}

inline ReliabilityMask reliability_from_mask(const LabelMask& m) {
    return ReliabilityMask(m.width(), m.height(), {m.data().begin(), m.data().end()});
}

inline LabelMask mask_from_reliability(const ReliabilityMask& r) {
    return LabelMask(r.width(), r.height(), {r.data().begin(), r.data().end()}, 2);
}

inline T3Bundle load_bundle(const Layout& L, const std::string& id) {
    const RgbImage rgb = rgb_from_tensor(load_srt(L.bundle(id)));
    return {rgb.channel(0), rgb.channel(1), rgb.channel(2), 1.0, 1.0};
}

/// Labeled images of one split; labels are required.
inline std::vector<LabeledImage> load_labeled(const Layout& L, const std::string& split) {
    std::vector<LabeledImage> out;
    for (const auto& id : list_ids(L.images(split), ".pgm")) {
        require(L.label(split, id));
        out.push_back({id, load_pgm(L.image(split, id)), load_mask(L.label(split, id))});
    }
    if (out.empty()) throw EmptyDataset("no images in " + L.images(split).string());
    return out;
}

/// Labeled images from an arbitrary directory with images/ and labels/.
inline std::vector<LabeledImage> load_labeled_dir(const fs::path& dir) {
    std::vector<LabeledImage> out;
    for (const auto& id : list_ids(dir / "images", ".pgm")) {
        const auto lbl = dir / "labels" / (id + ".srt");
        require(lbl);
        out.push_back({id, load_pgm(dir / "images" / (id + ".pgm")), load_mask(lbl)});
    }
    return out;
}

inline std::uint64_t fnv1a(const std::vector<char>& bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (char ch : bytes) {
        h ^= static_cast<unsigned char>(ch);
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string file_hash(const fs::path& p) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(srpl::detail::read_file(p))));
    return buf;
}

/// Truncates on open; one JSON object per line.
class JsonlLog {
public:
    explicit JsonlLog(const fs::path& p) {
        fs::create_directories(p.parent_path());
        out_.open(p, std::ios::trunc);
        if (!out_) throw Error("cannot write " + p.string());
    }
    void write(const json& j) {
        std::lock_guard lock(mu_);
        out_ << j.dump() << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
    std::mutex mu_;
};

struct StageReport {
    std::string stage;
    std::size_t processed = 0;
    std::size_t skipped = 0;
    std::size_t failed = 0;
    json details = json::object();

    bool ok() const { return failed == 0; }
    json to_json() const {
        return {{"stage", stage}, {"processed", processed}, {"skipped", skipped}, {"failed", failed}, {"details", details}};
    }
};

// ---------------------------------------------------------------------------
// Providers.

inline std::unique_ptr<SourceModel> make_source_model(const PipelineConfig& c, const Layout& L) {
    if (c.predictor.external()) return std::make_unique<ExternalSourceModel>(c.predictor.bridge().with_env_override(), 2);
    require(L.source_model());
    return std::make_unique<BuiltinSourceModel>(load_model(L.source_model()));
}

inline SegmenterHandle make_segmenter(const PipelineConfig& c) {
    if (c.segmenter.external()) {
        return SegmenterHandle(std::make_unique<ExternalSegmenter>(c.segmenter.bridge().with_env_override()));
    }
    return SegmenterHandle::oracle();
}

/// One segmenter per worker: bridge processes serve one request at a time.
class SegmenterPool {
public:
    SegmenterPool(const PipelineConfig& c, int workers) {
        for (int w = 0; w < workers; ++w) handles_.push_back(std::make_unique<SegmenterHandle>(make_segmenter(c)));
    }
    SegmenterHandle& at(int worker) { return *handles_.at(static_cast<std::size_t>(worker)); }
    std::uint64_t clipped_responses() const {
        std::uint64_t n = 0;
        for (const auto& h : handles_) n += h->clipped_responses();
        return n;
    }

private:
    std::vector<std::unique_ptr<SegmenterHandle>> handles_;
};

// ---------------------------------------------------------------------------
// Stages.

inline StageReport stage_synth(const PipelineConfig& c) {
    const Layout L{c.work};
    const SynthDataset ds = synth_dataset(seeded_synth(c));
    StageReport rep{"synth"};
    const std::vector<const std::vector<LabeledImage>*> splits = {&ds.source_train, &ds.source_test, &ds.target_train,
                                                                  &ds.target_test};
    for (std::size_t s = 0; s < splits.size(); ++s) {
        std::error_code ec;
        fs::remove_all(L.root / "data" / kSplits[s], ec);
        for (const auto& item : *splits[s]) {
            save_pgm(item.image, L.image(kSplits[s], item.id));
            save_srt(to_tensor(item.label), L.label(kSplits[s], item.id));
            ++rep.processed;
        }
    }
    write_json(L.root / "data" / "manifest.json", to_json(c));
    return rep;
}

inline StageReport stage_train_source(const PipelineConfig& c) {
    const Layout L{c.work};
    const auto train = load_labeled(L, "source_train");
    TrainConfig tc = c.source_train;
    tc.seed = c.seed;
    JsonlLog log(L.logs() / "train_source.jsonl");
    const auto res = train_source(train, tc, [&](const EpochLog& e) { log.write(e.to_json()); });
    save_model(res.params, L.source_model());
    StageReport rep{"train-source", train.size()};
    rep.details = {{"initial_loss", res.initial_loss}, {"final_loss", res.final_loss},
                   {"train_dice", detail::mean_dice(res.params, train)}};
    if (fs::exists(L.images("source_test"))) {
        rep.details["source_test_dice"] = detail::mean_dice(res.params, load_labeled(L, "source_test"));
    }
    return rep;
}

inline StageReport stage_stats(const PipelineConfig& c) {
    const Layout L{c.work};
    std::vector<GrayImage> imgs;
    for (const auto& id : list_ids(L.images("target_train"), ".pgm")) imgs.push_back(load_pgm(L.image("target_train", id)));
    const DomainStats st = compute_domain_stats(imgs);
    write_json(L.domain_stats(), {{"mean_intensity", st.mean_intensity}, {"n_pixels", st.n_pixels}});
    StageReport rep{"stats", imgs.size()};
    rep.details = {{"mean_intensity", st.mean_intensity}};
    return rep;
}

inline DomainStats load_domain_stats(const Layout& L) {
    require(L.domain_stats());
    const json j = read_json(L.domain_stats());
    return {j.at("mean_intensity").get<double>(), j.at("n_pixels").get<std::uint64_t>()};
}

/// Computes the domain statistics first when the stats stage has not run.
inline StageReport stage_t3ie(const PipelineConfig& c) {
    const Layout L{c.work};
    if (!fs::exists(L.domain_stats())) stage_stats(c);
    const DomainStats st = load_domain_stats(L);
    const auto ids = list_ids(L.images("target_train"), ".pgm");
    std::vector<std::optional<json>> gammas(ids.size());
    std::vector<std::string> errors(ids.size());
    parallel_for(ids.size(), c.jobs, [&](std::size_t i, int) {
        try {
            const T3Bundle b = t3ie(load_pgm(L.image("target_train", ids[i])), st, SamStats{}, c.image, c.gamma);
            save_srt(to_tensor(concat_rgb(b)), L.bundle(ids[i]));
            gammas[i] = json{{"gamma_d", b.gamma_d}, {"gamma_s", b.gamma_s}};
        } catch (const Error& e) {
            errors[i] = e.what();
        }
    });
    StageReport rep{"t3ie"};
    JsonlLog log(L.logs() / "t3ie.jsonl");
    json index = json::object();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (gammas[i]) {
            index[ids[i]] = *gammas[i];
            ++rep.processed;
            log.write({{"id", ids[i]}, {"status", "ok"}, {"gamma_d", (*gammas[i])["gamma_d"]}, {"gamma_s", (*gammas[i])["gamma_s"]}});
        } else {
            ++rep.failed;
            log.write({{"id", ids[i]}, {"status", "failed"}, {"error", errors[i]}});
        }
    }
    write_json(L.gammas(), index);
    return rep;
}

/// P-bar and Y for one bundle.
inline InitialLabel initial_label(SourceModel& model, const T3Bundle& b) {
    return ensemble_initial_label(predict_prob(model, b.he), predict_prob(model, b.gd), predict_prob(model, b.gs));
}

inline StageReport stage_pseudo(const PipelineConfig& c) {
    const Layout L{c.work};
    const auto ids = list_ids(L.t3ie_dir(), ".srt");
    // The built-in model is pure; an external predictor is one bridge, so serialize.
    const int jobs = c.predictor.external() ? 1 : c.jobs;
    auto model = make_source_model(c, L);
    std::vector<std::string> errors(ids.size());
    parallel_for(ids.size(), jobs, [&](std::size_t i, int) {
        try {
            const InitialLabel il = initial_label(*model, load_bundle(L, ids[i]));
            save_srt(to_tensor(il.p_bar), L.p_bar(ids[i]));
            save_srt(to_tensor(il.y), L.y(ids[i]));
        } catch (const Error& e) {
            errors[i] = e.what();
        }
    });
    StageReport rep{"pseudo"};
    JsonlLog log(L.logs() / "pseudo.jsonl");
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (errors[i].empty()) {
            ++rep.processed;
            log.write({{"id", ids[i]}, {"status", "ok"}});
        } else {
            ++rep.failed;
            log.write({{"id", ids[i]}, {"status", "failed"}, {"error", errors[i]}});
        }
    }
    return rep;
}

/// Box for a pseudo-label under the empty-box policy; nullopt = skip the image.
inline std::optional<BoxPrompt> box_for(const LabelMask& y, const PipelineConfig& c) {
    try {
        return derive_box_prompt(y, 1, c.margin);
    } catch (const EmptyPseudoLabel&) {
        if (c.empty_box == EmptyBoxPolicy::skip) return std::nullopt;
        return BoxPrompt{0, 0, y.width() - 1, y.height() - 1};
    }
}

struct RefineOutcome {
    std::string status;  // ok | skipped | failed
    std::string error;
    std::optional<RefinedLabelSet> set;
};

inline RefineOutcome refine_one(SegmenterHandle& seg, const T3Bundle& b, const LabelMask& y, const PipelineConfig& c) {
    const auto box = box_for(y, c);
    if (!box) return {"skipped", "empty initial pseudo-label", std::nullopt};
    try {
        return {"ok", "", refine(seg, b, *box)};
    } catch (const SegmenterIoError& e) {
        return {"failed", e.what(), std::nullopt};
    }
}

inline StageReport stage_refine(const PipelineConfig& c) {
    const Layout L{c.work};
    const auto ids = list_ids(L.t3ie_dir(), ".srt");
    const int workers = std::max(1, std::min<int>(resolve_jobs(c.jobs), static_cast<int>(std::max<std::size_t>(ids.size(), 1))));
    SegmenterPool pool(c, workers);
    std::vector<RefineOutcome> out(ids.size());
    parallel_for(ids.size(), workers, [&](std::size_t i, int w) {
        require(L.y(ids[i]));
        out[i] = refine_one(pool.at(w), load_bundle(L, ids[i]), load_mask(L.y(ids[i])), c);
        if (out[i].set) {
            const auto& s = *out[i].set;
            save_srt(to_tensor(s.r), L.refined(ids[i], "r"));
            save_srt(to_tensor(s.r_he), L.refined(ids[i], "r_he"));
            save_srt(to_tensor(s.r_gd), L.refined(ids[i], "r_gd"));
            save_srt(to_tensor(s.r_gs), L.refined(ids[i], "r_gs"));
            save_srt(to_tensor(mask_from_reliability(s.mask)), L.refined(ids[i], "omega"));
        }
    });
    StageReport rep{"refine"};
    JsonlLog log(L.logs() / "refine.jsonl");
    json index = json::object();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        json e{{"status", out[i].status}};
        if (out[i].set) {
            const auto& b = out[i].set->box;
            e["box"] = {b.xmin, b.ymin, b.xmax, b.ymax};
            e["reliable_fraction"] =
                static_cast<double>(out[i].set->mask.reliable_count()) / static_cast<double>(out[i].set->mask.size());
            ++rep.processed;
        } else if (out[i].status == "skipped") {
            ++rep.skipped;
        } else {
            ++rep.failed;
        }
        if (!out[i].error.empty()) e["error"] = out[i].error;
        index[ids[i]] = e;
        json line = e;
        line["id"] = ids[i];
        log.write(line);
    }
    write_json(L.refine_index(), index);
    rep.details["clipped_responses"] = pool.clipped_responses();
    if (rep.failed && c.on_segmenter_error == ErrorPolicy::abort) {
        rep.details["error"] = "segmenter failures with policy 'abort'";
    }
    if (c.on_segmenter_error == ErrorPolicy::skip) {
        rep.skipped += rep.failed;
        rep.failed = 0;
    }
    return rep;
}

inline RefinedLabelSet load_refined(const Layout& L, const std::string& id, const json& entry) {
    const auto& b = entry.at("box");
    return {load_mask(L.refined(id, "r")),
            load_mask(L.refined(id, "r_he")),
            load_mask(L.refined(id, "r_gd")),
            load_mask(L.refined(id, "r_gs")),
            reliability_from_mask(load_mask(L.refined(id, "omega"))),
            BoxPrompt{b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()}};
}

/// Adaptation samples for `mode`: EM takes every target training image,
/// PL_Y every image with a Y, the refined modes every image refine kept.
inline std::vector<AdaptSample> load_samples(const Layout& L, AdaptMode mode,
                                             const std::shared_ptr<AccessCounters>& counters) {
    std::vector<AdaptSample> out;
    const bool refined = mode == AdaptMode::PL_R || mode == AdaptMode::RPL || mode == AdaptMode::RPL_PEM;
    json index;
    if (refined) {
        require(L.refine_index());
        index = read_json(L.refine_index());
    }
    for (const auto& id : list_ids(L.images("target_train"), ".pgm")) {
        GrayImage img = load_pgm(L.image("target_train", id));
        if (mode == AdaptMode::EM) {
            out.emplace_back(id, std::move(img), std::nullopt, std::nullopt, counters);
        } else if (mode == AdaptMode::PL_Y) {
            if (!fs::exists(L.y(id))) continue;
            out.emplace_back(id, std::move(img), load_mask(L.y(id)), std::nullopt, counters);
        } else {
            if (!index.contains(id) || index[id].at("status") != "ok") continue;
            out.emplace_back(id, std::move(img), std::nullopt, load_refined(L, id, index[id]), counters);
        }
    }
    if (out.empty()) throw EmptyDataset("adapt: no usable target samples for mode " + to_string(mode));
    return out;
}

inline ModelParams run_adapt(const PipelineConfig& c, AdaptMode mode, StageReport& rep) {
    const Layout L{c.work};
    require(L.source_model());
    const ModelParams theta_s = load_model(L.source_model());
    auto counters = std::make_shared<AccessCounters>();
    auto samples = load_samples(L, mode, counters);
    TrainConfig tc = c.adapt;
    tc.mode = mode;
    tc.seed = c.seed;
    JsonlLog log(L.logs() / ("adapt_" + to_string(mode) + ".jsonl"));
    AdaptOptions opts;
    opts.on_epoch = [&](const EpochLog& e) { log.write(e.to_json()); };
    std::vector<LabeledImage> val;
    if (!c.select_best_on.empty()) {
        val = load_labeled_dir(c.select_best_on);
        opts.select_best_on = &val;
    }
    std::optional<SegmenterHandle> seg;
    std::optional<DomainStats> stats;
    if (c.refresh_every > 0 && mode != AdaptMode::EM) {
        seg.emplace(make_segmenter(c));
        stats = load_domain_stats(L);
        opts.refresh_every = c.refresh_every;
        opts.refresh = [&](const ModelParams& p, std::vector<AdaptSample>& ss) {
            BuiltinSourceModel current(p);
            for (auto& s : ss) {
                const T3Bundle b = t3ie(s.image(), *stats, SamStats{}, c.image, c.gamma);
                const InitialLabel il = initial_label(current, b);
                std::optional<RefinedLabelSet> r;
                if (mode != AdaptMode::PL_Y) {
                    RefineOutcome o = refine_one(*seg, b, il.y, c);
                    r = o.set ? o.set : (s.has_refined() ? std::optional(s.refined()) : std::nullopt);
                }
                s.set_pseudo_labels(il.y, r);
            }
        };
    }
    ModelParams theta_t = adapt(theta_s, std::move(samples), tc, c.loss, opts);
    save_model(theta_t, L.adapted_model(mode));
    rep.processed += 1;
    rep.details[to_string(mode)] = {{"model", L.adapted_model(mode).string()},
                                    {"initial_label_reads", counters->initial_label_reads},
                                    {"refined_reads", counters->refined_reads}};
    return theta_t;
}

inline StageReport stage_adapt(const PipelineConfig& c) {
    StageReport rep{"adapt"};
    run_adapt(c, c.adapt.mode, rep);
    return rep;
}

// ---------------------------------------------------------------------------
// Evaluation and reports.

inline std::vector<EvalRecord> evaluate_model(const ModelParams& p, const std::vector<LabeledImage>& data, int jobs) {
    std::vector<EvalRecord> recs(data.size());
    parallel_for(data.size(), jobs, [&](std::size_t i, int) {
        recs[i] = evaluate(data[i].id, argmax(forward(p, extract_features(data[i].image)).q), data[i].label);
    });
    return recs;
}

inline std::string records_csv(const std::vector<EvalRecord>& recs) {
    std::string out = "image_id,dice,assd,status\n";
    char buf[128];
    for (const auto& r : recs) {
        if (r.assd) {
            std::snprintf(buf, sizeof buf, ",%.6f,%.6f,", r.dice, *r.assd);
        } else {
            std::snprintf(buf, sizeof buf, ",%.6f,,", r.dice);
        }
        out += r.image_id + buf + srpl::to_string(r.status) + "\n";
    }
    return out;
}

inline json records_json(const std::vector<EvalRecord>& recs) {
    json arr = json::array();
    for (const auto& r : recs) {
        json e{{"image_id", r.image_id}, {"dice", r.dice}, {"status", srpl::to_string(r.status)}};
        e["assd"] = r.assd ? json(*r.assd) : json(nullptr);
        arr.push_back(e);
    }
    return arr;
}

inline void write_eval(const fs::path& dir, const std::string& name, const std::vector<EvalRecord>& recs) {
    srpl::detail::write_file(dir / (name + ".csv"), records_csv(recs));
    write_json(dir / (name + ".json"), {{"summary", to_json(summarize(recs))}, {"records", records_json(recs)}});
}

inline std::string fmt(double v, const char* f = "%.4f") {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

/// Rebuilds report.md from eval/summary.json and ablate/ablation.json, whichever exist.
inline void write_report(const Layout& L) {
    std::string md = "# SRPL-SFDA run report\n\n";
    if (fs::exists(L.eval_dir() / "summary.json")) {
        const json s = read_json(L.eval_dir() / "summary.json");
        md += "## Target test evaluation\n\n| model | mean Dice | std Dice | mean ASSD | std ASSD | n | undefined ASSD |\n"
              "|---|---|---|---|---|---|---|\n";
        for (const auto& row : s.at("models")) {
            const auto& m = row.at("summary");
            md += "| " + row.at("name").get<std::string>() + " | " + fmt(m.at("mean_dice")) + " | " + fmt(m.at("std_dice")) +
                  " | " + fmt(m.at("mean_assd")) + " | " + fmt(m.at("std_assd")) + " | " +
                  std::to_string(m.at("n").get<std::size_t>()) + " | " +
                  std::to_string(m.at("n_undefined").get<std::size_t>()) + " |\n";
        }
        md += "\n";
    }
    if (fs::exists(L.ablate_dir() / "ablation.json")) {
        const json a = read_json(L.ablate_dir() / "ablation.json");
        md += "## Adaptation modes (target test)\n\n| mode | mean Dice | mean ASSD |\n|---|---|---|\n";
        for (const auto& row : a.at("modes")) {
            md += "| " + row.at("name").get<std::string>() + " | " + fmt(row.at("mean_dice")) + " | " +
                  fmt(row.at("mean_assd")) + " |\n";
        }
        md += "\n## Pseudo-label quality (target train)\n\n| pseudo-label | mean Dice | mean ASSD |\n|---|---|---|\n";
        for (const auto& row : a.at("pseudo_labels")) {
            md += "| " + row.at("name").get<std::string>() + " | " + fmt(row.at("mean_dice")) + " | " +
                  fmt(row.at("mean_assd")) + " |\n";
        }
        md += "\n";
    }
    srpl::detail::write_file(L.report(), md);
}

struct EvalOptions {
    std::vector<std::pair<std::string, fs::path>> models;  // empty = source + every adapted model found
    std::string split = "target_test";
};

inline StageReport stage_eval(const PipelineConfig& c, const EvalOptions& o = {}) {
    const Layout L{c.work};
    const auto data = load_labeled(L, o.split);
    auto models = o.models;
    if (models.empty()) {
        models.emplace_back("source_only", L.source_model());
        for (auto m : kAllModes) {
            if (fs::exists(L.adapted_model(m))) models.emplace_back(to_string(m), L.adapted_model(m));
        }
    }
    StageReport rep{"eval"};
    json rows = json::array();
    for (const auto& [name, path] : models) {
        require(path);
        const auto recs = evaluate_model(load_model(path), data, c.jobs);
        write_eval(L.eval_dir(), name, recs);
        rows.push_back({{"name", name}, {"model", path.string()}, {"summary", to_json(summarize(recs))}});
        rep.processed += recs.size();
    }
    write_json(L.eval_dir() / "summary.json", {{"split", o.split}, {"models", rows}});
    write_report(L);
    rep.details = rows;
    return rep;
}

/// Compares two directories of masks matched by file stem.
inline std::vector<EvalRecord> evaluate_dirs(const fs::path& pred_dir, const fs::path& gt_dir, int jobs) {
    std::vector<std::string> ids;
    for (const char* ext : {".srt", ".pgm"}) {
        if (!fs::exists(gt_dir)) break;
        for (const auto& id : list_ids(gt_dir, ext)) ids.push_back(id);
    }
    require(gt_dir);
    require(pred_dir);
    std::sort(ids.begin(), ids.end());
    auto find = [](const fs::path& dir, const std::string& id) {
        for (const char* ext : {".srt", ".pgm"}) {
            if (fs::exists(dir / (id + ext))) return dir / (id + ext);
        }
        throw MissingArtifact("missing artifact: " + (dir / (id + ".srt")).string());
    };
    std::vector<EvalRecord> recs(ids.size());
    parallel_for(ids.size(), jobs, [&](std::size_t i, int) {
        recs[i] = evaluate(ids[i], load_mask(find(pred_dir, ids[i])), load_mask(find(gt_dir, ids[i])));
    });
    return recs;
}

/// Mode ablation and pseudo-label quality tables on the current artifacts. Every adaptation
/// mode is rerun and its model rewritten; the RPL_PEM model hash is compared
/// with the standalone adapt output that existed beforehand.
inline StageReport stage_ablate(const PipelineConfig& c) {
    const Layout L{c.work};
    StageReport rep{"ablate"};
    const std::optional<std::string> standalone_hash =
        fs::exists(L.adapted_model(AdaptMode::RPL_PEM)) ? std::optional(file_hash(L.adapted_model(AdaptMode::RPL_PEM)))
                                                        : std::nullopt;
    const auto test = load_labeled(L, "target_test");
    json modes = json::array();
    auto add_mode_row = [&](const std::string& name, const ModelParams& p) {
        const auto recs = evaluate_model(p, test, c.jobs);
        write_eval(L.ablate_dir() / "modes", name, recs);
        const auto s = summarize(recs);
        modes.push_back({{"name", name}, {"mean_dice", s.mean_dice}, {"std_dice", s.std_dice},
                         {"mean_assd", s.mean_assd}, {"n_undefined", s.n_undefined}});
    };
    require(L.source_model());
    const ModelParams theta_s = load_model(L.source_model());
    add_mode_row("source_only", theta_s);
    StageReport adapt_rep{"adapt"};
    for (auto m : kAllModes) add_mode_row(to_string(m), run_adapt(c, m, adapt_rep));
    const std::string ablate_hash = file_hash(L.adapted_model(AdaptMode::RPL_PEM));

    // Pseudo-label quality on the target training images (labels used for scoring only).
    const auto train = load_labeled(L, "target_train");
    require(L.refine_index());
    const json index = read_json(L.refine_index());
    BuiltinSourceModel model(theta_s);
    const int workers = std::max(1, std::min<int>(resolve_jobs(c.jobs), static_cast<int>(train.size())));
    SegmenterPool pool(c, workers);
    std::vector<std::array<std::optional<EvalRecord>, 4>> pq(train.size());
    std::vector<std::string> errors(train.size());
    parallel_for(train.size(), workers, [&](std::size_t i, int w) {
        const auto& item = train[i];
        const LabelMask y_s = argmax(predict_prob(model, item.image));
        pq[i][0] = evaluate(item.id, y_s, item.label);
        if (!fs::exists(L.y(item.id))) return;
        const LabelMask y = load_mask(L.y(item.id));
        pq[i][1] = evaluate(item.id, y, item.label);
        const auto box = box_for(y, c);
        if (!box) return;
        try {
            pq[i][2] = evaluate(item.id, segment_with_prompt(pool.at(w), RgbImage::replicate(item.image), *box), item.label);
        } catch (const SegmenterIoError& e) {
            errors[i] = e.what();
        }
        if (index.contains(item.id) && index[item.id].at("status") == "ok") {
            pq[i][3] = evaluate(item.id, load_mask(L.refined(item.id, "r")), item.label);
        }
    });
    const char* names[4] = {"theta_s", "theta_s+t3ie", "+sam(x)", "+sam(x_rgb)"};
    json pseudo = json::array();
    for (int k = 0; k < 4; ++k) {
        std::vector<EvalRecord> recs;
        for (const auto& row : pq) {
            if (row[static_cast<std::size_t>(k)]) recs.push_back(*row[static_cast<std::size_t>(k)]);
        }
        write_eval(L.ablate_dir() / "pseudo", names[k], recs);
        const auto s = summarize(recs);
        pseudo.push_back({{"name", names[k]}, {"mean_dice", s.mean_dice}, {"std_dice", s.std_dice},
                          {"mean_assd", s.mean_assd}, {"n", s.n}});
    }
    for (std::size_t i = 0; i < errors.size(); ++i) {
        if (!errors[i].empty()) ++rep.failed;
    }

    json result{{"modes", modes}, {"pseudo_labels", pseudo}, {"rpl_pem_model_hash", ablate_hash}};
    if (standalone_hash) result["matches_standalone_rpl_pem"] = (*standalone_hash == ablate_hash);
    write_json(L.ablate_dir() / "ablation.json", result);
    std::string csv = "table,name,mean_dice,mean_assd\n";
    for (const auto& r : modes) csv += "modes," + r["name"].get<std::string>() + "," + fmt(r["mean_dice"], "%.6f") + "," + fmt(r["mean_assd"], "%.6f") + "\n";
    for (const auto& r : pseudo) csv += "pseudo," + r["name"].get<std::string>() + "," + fmt(r["mean_dice"], "%.6f") + "," + fmt(r["mean_assd"], "%.6f") + "\n";
    srpl::detail::write_file(L.ablate_dir() / "ablation.csv", csv);
    write_report(L);
    rep.processed = modes.size() + pseudo.size();
    rep.details = result;
    return rep;
}

}  // namespace srpl::pipeline
