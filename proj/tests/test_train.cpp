#include <gtest/gtest.h>

#include "criteria.hpp"

using namespace srpl;
namespace cr = srpl::criteria;

namespace {

SynthDomainConfig small_synth() {
    SynthDomainConfig c;
    c.width = 32;
    c.height = 32;
    c.n_train = 4;
    c.n_test = 2;
    c.axis_min = 6.0;
    c.axis_max = 10.0;
    return c;
}

TrainConfig quick(AdaptMode mode, int epochs = 15) {
    TrainConfig t;
    t.epochs = epochs;
    t.mode = mode;
    return t;
}

struct Fixture {
    SynthDataset ds;
    ModelParams theta_s;
    std::vector<AdaptSample> samples;
    std::shared_ptr<AccessCounters> counters = std::make_shared<AccessCounters>();
};

Fixture make_fixture() {
    Fixture f;
    f.ds = synth_dataset(small_synth());
    f.theta_s = train_source(f.ds.source_train, quick(AdaptMode::RPL_PEM, 60)).params;
    std::vector<GrayImage> imgs;
    for (const auto& d : f.ds.target_train) imgs.push_back(d.image);
    const DomainStats st = compute_domain_stats(imgs);
    BuiltinSourceModel model(f.theta_s);
    SegmenterHandle seg = SegmenterHandle::oracle();
    for (const auto& d : f.ds.target_train) {
        const T3Bundle b = t3ie(d.image, st);
        const auto il = ensemble_initial_label(predict_prob(model, b.he), predict_prob(model, b.gd), predict_prob(model, b.gs));
        const BoxPrompt box = il.y.count(1) ? derive_box_prompt(il.y) : BoxPrompt{0, 0, 31, 31};
        f.samples.emplace_back(d.id, d.image, il.y, refine(seg, b, box), f.counters);
    }
    return f;
}

const Fixture& fixture() {
    static const Fixture f = make_fixture();
    return f;
}

}  // namespace

TEST(Synth, SameSeedSameData) {
    const auto a = synth_dataset(small_synth());
    const auto b = synth_dataset(small_synth());
    ASSERT_EQ(a.target_test.size(), 2u);
    for (std::size_t i = 0; i < a.target_test.size(); ++i) {
        EXPECT_EQ(a.target_test[i].image, b.target_test[i].image);
        EXPECT_EQ(a.target_test[i].label, b.target_test[i].label);
    }
    auto other = small_synth();
    other.seed = 8;
    EXPECT_NE(synth_dataset(other).source_train[0].image, a.source_train[0].image);
}

TEST(Synth, TargetIsDimmerAndLowerContrast) {
    const auto ds = synth_dataset(small_synth());
    auto gap = [](const LabeledImage& d) {
        double fg = 0, bg = 0;
        for (std::size_t i = 0; i < d.label.size(); ++i) (d.label[i] ? fg : bg) += d.image[i];
        return fg / d.label.count(1) - bg / d.label.count(0);
    };
    const double src = gap(ds.source_train[0]);
    EXPECT_GT(src, 0.4);
    EXPECT_LT(gap(ds.target_train[0]), 0.7 * src);
}

TEST(Synth, RejectsImpossibleGeometry) {
    auto c = small_synth();
    c.axis_max = 20.0;
    EXPECT_THROW(synth_dataset(c), InvalidArgument);
}

TEST(Features, LayoutAndValues) {
    const GrayImage g(3, 2, {0.f, 0.5f, 1.f, 0.25f, 0.75f, 0.5f});
    const FeatureMap f = extract_features(g);
    ASSERT_EQ(f.count, 8);
    const std::size_t i = 4;  // (x=1, y=1)
    EXPECT_DOUBLE_EQ(f.at(0, i), 0.75f - 0.5);
    EXPECT_DOUBLE_EQ(f.at(1, i), f.at(0, i));
    EXPECT_DOUBLE_EQ(f.at(5, i), 0.5);
    EXPECT_DOUBLE_EQ(f.at(6, i), 1.0);
    EXPECT_DOUBLE_EQ(f.at(7, i), 1.0);
    // 3x3 window with edge replication around (1,1): rows y=0,1,1.
    const double win[9] = {0, 0.5, 1, 0.25, 0.75, 0.5, 0.25, 0.75, 0.5};
    double m = 0, sq = 0;
    for (double v : win) {
        m += v / 9;
        sq += v * v / 9;
    }
    EXPECT_NEAR(f.at(3, i), m - 0.5, 1e-7);
    EXPECT_NEAR(f.at(4, i), std::sqrt(sq - m * m), 1e-7);
}

TEST(Model, JsonRoundTripIsExact) {
    cr::TempDir dir("model");
    ModelParams p = ModelParams::zeros();
    for (std::size_t k = 0; k < p.weights.size(); ++k) p.weights[k] = std::sin(k + 0.1) * 1e3 / 7;
    save_model(p, dir.path() / "m.json");
    EXPECT_EQ(load_model(dir.path() / "m.json"), p);
    srpl::detail::write_file(dir.path() / "bad.json", R"({"classes":2,"weights":[[1,2]]})");
    EXPECT_THROW(load_model(dir.path() / "bad.json"), Error);
}

TEST(Model, WeightGradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(9);
    const GrayImage img = cr::random_image(rng, 6, 5);
    const FeatureMap f = extract_features(img);
    ModelParams p = ModelParams::zeros();
    std::normal_distribution<double> nd(0, 0.5);
    for (auto& w : p.weights) w = nd(rng);
    const LabelMask r = cr::random_mask(rng, 6, 5);
    const auto m = ReliabilityMask(6, 5, [&] {
        std::vector<std::uint8_t> v(30);
        for (auto& x : v) x = rng() % 2;
        return v;
    }());
    auto loss = [&](const ModelParams& q) { return loss_total_with_grad(logits(q, f), r, m).l_total; };
    const auto g = weight_gradient(p, f, loss_total_with_grad(logits(p, f), r, m).grad);
    for (std::size_t k = 0; k < p.weights.size(); ++k) {
        ModelParams a = p, b = p;
        a.weights[k] += 1e-5;
        b.weights[k] -= 1e-5;
        EXPECT_NEAR(g[k], (loss(a) - loss(b)) / 2e-5, 1e-6 * std::max(1.0, std::abs(g[k])));
    }
}

TEST(SourceTraining, LowersLossAndIsSeeded) {
    const auto ds = synth_dataset(small_synth());
    const auto a = train_source(ds.source_train, quick(AdaptMode::RPL_PEM, 30));
    const auto b = train_source(ds.source_train, quick(AdaptMode::RPL_PEM, 30));
    EXPECT_LT(a.final_loss, a.initial_loss);
    EXPECT_EQ(a.params, b.params);
    EXPECT_THROW(train_source({}, quick(AdaptMode::RPL_PEM)), EmptyDataset);
}

TEST(Adapt, ModesReadOnlyTheirArtifacts) {
    const auto& f = fixture();
    struct Want {
        AdaptMode mode;
        bool y, r;
    };
    for (const auto& w : {Want{AdaptMode::EM, false, false}, Want{AdaptMode::PL_Y, true, false},
                          Want{AdaptMode::PL_R, false, true}, Want{AdaptMode::RPL, false, true},
                          Want{AdaptMode::RPL_PEM, false, true}}) {
        auto counters = std::make_shared<AccessCounters>();
        std::vector<AdaptSample> ss;
        for (const auto& s : f.samples) {
            ss.emplace_back(s.id(), s.image(), s.initial_label(), s.refined(), counters);
        }
        adapt(f.theta_s, ss, quick(w.mode, 2));
        EXPECT_EQ(counters->initial_label_reads > 0, w.y) << to_string(w.mode);
        EXPECT_EQ(counters->refined_reads > 0, w.r) << to_string(w.mode);
    }
}

TEST(Adapt, MissingArtifactsAreAConfigError) {
    const auto& f = fixture();
    std::vector<AdaptSample> bare;
    for (const auto& s : f.samples) bare.emplace_back(s.id(), s.image());
    EXPECT_NO_THROW(adapt(f.theta_s, bare, quick(AdaptMode::EM, 1)));
    EXPECT_THROW(adapt(f.theta_s, bare, quick(AdaptMode::PL_Y, 1)), ConfigError);
    EXPECT_THROW(adapt(f.theta_s, bare, quick(AdaptMode::RPL_PEM, 1)), ConfigError);
    EXPECT_THROW(adapt(f.theta_s, {}, quick(AdaptMode::EM, 1)), EmptyDataset);
}

TEST(Adapt, ZeroLambdaEqualsRpl) {
    const auto& f = fixture();
    LossConfig zero;
    zero.lambda = 0.0;
    EXPECT_EQ(adapt(f.theta_s, f.samples, quick(AdaptMode::RPL_PEM), zero), adapt(f.theta_s, f.samples, quick(AdaptMode::RPL)));
}

TEST(Adapt, DeterministicAndLeavesSourceUntouched) {
    const auto& f = fixture();
    const ModelParams before = f.theta_s;
    const auto a = adapt(f.theta_s, f.samples, quick(AdaptMode::RPL_PEM));
    const auto b = adapt(f.theta_s, f.samples, quick(AdaptMode::RPL_PEM));
    EXPECT_EQ(a, b);
    EXPECT_EQ(f.theta_s, before);
    EXPECT_NE(a, f.theta_s);
}

TEST(Adapt, EpochLogCarriesLossTerms) {
    const auto& f = fixture();
    std::vector<EpochLog> logs;
    AdaptOptions opts;
    opts.on_epoch = [&](const EpochLog& e) { logs.push_back(e); };
    adapt(f.theta_s, f.samples, quick(AdaptMode::RPL_PEM, 3), LossConfig{}, opts);
    ASSERT_EQ(logs.size(), 3u);
    for (const auto& e : logs) EXPECT_NEAR(e.l_total, e.l_rpl + 10.0 * e.l_pem, 1e-9);
}

TEST(Adapt, SelectBestKeepsBestValidationEpoch) {
    const auto& f = fixture();
    std::vector<double> seen;
    AdaptOptions opts;
    opts.select_best_on = &f.ds.target_test;
    opts.on_epoch = [&](const EpochLog& e) { seen.push_back(*e.val_dice); };
    const auto best = adapt(f.theta_s, f.samples, quick(AdaptMode::PL_R, 10), LossConfig{}, opts);
    EXPECT_DOUBLE_EQ(srpl::detail::mean_dice(best, f.ds.target_test), *std::max_element(seen.begin(), seen.end()));
}

TEST(Adapt, RefreshRunsOnSchedule) {
    const auto& f = fixture();
    std::vector<int> calls;
    int epoch = 0;
    AdaptOptions opts;
    opts.refresh_every = 3;
    opts.on_epoch = [&](const EpochLog& e) { epoch = e.epoch; };
    opts.refresh = [&](const ModelParams&, std::vector<AdaptSample>&) { calls.push_back(epoch + 1); };
    adapt(f.theta_s, f.samples, quick(AdaptMode::RPL, 10), LossConfig{}, opts);
    EXPECT_EQ(calls, (std::vector<int>{3, 6, 9}));
}
