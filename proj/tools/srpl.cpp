// Stage-oriented driver: srpl [options] <stage> [stage options]

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "srpl/pipeline.hpp"

namespace fs = std::filesystem;
using namespace srpl;
using namespace srpl::pipeline;

namespace {

enum Exit { kOk = 0, kStageFailed = 1, kUsage = 2, kMissing = 3, kError = 4 };

struct Overrides {
    std::string config;
    std::optional<std::string> work;
    std::optional<int> jobs;
    std::optional<std::uint64_t> seed;
    std::optional<int> margin;
    std::optional<std::string> empty_box;
    std::optional<std::string> on_error;
    std::optional<std::string> segmenter;
    std::optional<std::string> segmenter_cmd;
    std::optional<std::string> segmenter_cwd;
    std::optional<double> segmenter_timeout;
    std::optional<std::string> predictor_cmd;
    std::optional<int> refresh_every;
    std::optional<std::string> select_best_on;
    std::optional<std::string> mode;
    std::optional<double> lambda;
    std::optional<int> adapt_epochs;
};

PipelineConfig build_config(const Overrides& o) {
    PipelineConfig c = o.config.empty() ? PipelineConfig{} : load_config(o.config);
    if (o.work) c.work = *o.work;
    if (o.jobs) c.jobs = *o.jobs;
    if (o.seed) c.seed = *o.seed;
    if (o.margin) c.margin = *o.margin;
    if (o.empty_box) c.empty_box = *o.empty_box == "skip" ? EmptyBoxPolicy::skip : EmptyBoxPolicy::full_image;
    if (o.on_error) c.on_segmenter_error = *o.on_error == "abort" ? ErrorPolicy::abort : ErrorPolicy::skip;
    if (o.segmenter) c.segmenter.kind = *o.segmenter;
    if (o.segmenter_cmd) {
        c.segmenter.command = *o.segmenter_cmd;
        if (!o.segmenter) c.segmenter.kind = "external";
    }
    if (o.segmenter_cwd) c.segmenter.cwd = *o.segmenter_cwd;
    if (o.segmenter_timeout) c.segmenter.timeout_s = *o.segmenter_timeout;
    if (o.predictor_cmd) {
        c.predictor.kind = "external";
        c.predictor.command = *o.predictor_cmd;
    }
    if (o.refresh_every) c.refresh_every = *o.refresh_every;
    if (o.select_best_on) c.select_best_on = *o.select_best_on;
    if (o.mode) c.adapt.mode = parse_mode(*o.mode);
    if (o.lambda) c.loss.lambda = *o.lambda;
    if (o.adapt_epochs) c.adapt.epochs = *o.adapt_epochs;
    // The env override applies at bridge start; a set variable also selects the external kind.
    if (const char* env = std::getenv(kSegmenterCmdEnv); env && *env && !o.segmenter) c.segmenter.kind = "external";
    if (c.segmenter.external() && c.segmenter.command.empty()) {
        if (const char* env = std::getenv(kSegmenterCmdEnv); env && *env) c.segmenter.command = env;
    }
    c.validate();
    return c;
}

int finish(const StageReport& rep) {
    std::cout << rep.to_json().dump(2) << '\n';
    if (!rep.ok()) {
        std::cerr << "srpl: stage '" << rep.stage << "' failed for " << rep.failed << " item(s); see "
                  << "logs/" << rep.stage << ".jsonl\n";
        return kStageFailed;
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SRPL-SFDA pipeline: source-free domain adaptation with refined, reliability-masked pseudo-labels"};
    app.require_subcommand(1);
    app.fallthrough();
    Overrides o;
    bool print_config = false;
    app.add_option("--config", o.config, "pipeline config JSON (every key optional)")->check(CLI::ExistingFile);
    app.add_option("--work", o.work, "work directory holding all artifacts");
    app.add_option("--jobs", o.jobs, "parallel workers for per-image stages (0 = all cores)")->check(CLI::NonNegativeNumber);
    app.add_option("--seed", o.seed, "master seed (dataset and training)");
    app.add_option("--margin", o.margin, "box prompt margin in pixels")->check(CLI::NonNegativeNumber);
    app.add_option("--empty-box-policy", o.empty_box, "image whose pseudo-label is empty")
        ->check(CLI::IsMember({"skip", "full-image"}));
    app.add_option("--on-segmenter-error", o.on_error, "per-image segmenter failure handling")
        ->check(CLI::IsMember({"abort", "skip"}));
    app.add_option("--segmenter", o.segmenter, "segmenter backend")->check(CLI::IsMember({"oracle", "external"}));
    app.add_option("--segmenter-cmd", o.segmenter_cmd, "srpl-seg/1 bridge command (implies --segmenter external)");
    app.add_option("--segmenter-cwd", o.segmenter_cwd, "working directory of the bridge");
    app.add_option("--segmenter-timeout", o.segmenter_timeout, "seconds per bridge reply")->check(CLI::PositiveNumber);
    app.add_option("--predictor-cmd", o.predictor_cmd, "srpl-seg/1 bridge serving op 'predict' in place of models/source.json");
    app.add_option("--refresh-every", o.refresh_every, "regenerate pseudo-labels every N adaptation epochs (0 = never)")
        ->check(CLI::NonNegativeNumber);
    app.add_option("--select-best-on", o.select_best_on, "labeled directory (images/, labels/) for best-epoch selection");
    app.add_option("--lambda", o.lambda, "PEM weight")->check(CLI::NonNegativeNumber);
    app.add_option("--adapt-epochs", o.adapt_epochs, "adaptation epochs")->check(CLI::PositiveNumber);
    app.add_flag("--print-config", print_config, "print the effective config as JSON before running");

    app.add_subcommand("synth", "generate the seeded two-domain benchmark under <work>/data");
    app.add_subcommand("train-source", "train the source model on data/source_train");
    app.add_subcommand("stats", "target-domain mean intensity from data/target_train");
    app.add_subcommand("t3ie", "tri-branch intensity enhancement of every target training image");
    app.add_subcommand("pseudo", "initial pseudo-labels from the source model on the three branches");
    app.add_subcommand("refine", "box-prompted refinement and reliability masks");
    auto* adapt_cmd = app.add_subcommand("adapt", "adapt the source model to the target domain");
    adapt_cmd->add_option("--mode", o.mode, "loss variant")->check(CLI::IsMember({"EM", "PL_Y", "PL_R", "RPL", "RPL_PEM"}));
    auto* eval_cmd = app.add_subcommand("eval", "Dice and ASSD of models, or of a prediction directory");
    std::string pred_dir, gt_dir, out_dir, split = "target_test";
    eval_cmd->add_option("--pred-dir", pred_dir, "predicted masks (.srt or .pgm), matched to --gt-dir by name");
    eval_cmd->add_option("--gt-dir", gt_dir, "ground-truth masks");
    eval_cmd->add_option("--out", out_dir, "output directory for --pred-dir mode (default <work>/eval)");
    eval_cmd->add_option("--split", split, "labeled split for model evaluation")
        ->check(CLI::IsMember({"source_test", "target_test", "target_train", "source_train"}));
    app.add_subcommand("ablate", "all adaptation modes plus the pseudo-label quality table");
    app.add_subcommand("run", "synth, train-source, stats, t3ie, pseudo, refine, adapt, eval in order");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }
    const std::string stage = app.get_subcommands().front()->get_name();
    if (eval_cmd->parsed() && (pred_dir.empty() != gt_dir.empty())) {
        std::cerr << "srpl eval: --pred-dir and --gt-dir go together\n";
        return kUsage;
    }

    try {
        const PipelineConfig c = build_config(o);
        if (print_config) std::cout << to_json(c).dump(2) << '\n';
        if (stage == "synth") return finish(stage_synth(c));
        if (stage == "train-source") return finish(stage_train_source(c));
        if (stage == "stats") return finish(stage_stats(c));
        if (stage == "t3ie") return finish(stage_t3ie(c));
        if (stage == "pseudo") return finish(stage_pseudo(c));
        if (stage == "refine") return finish(stage_refine(c));
        if (stage == "adapt") return finish(stage_adapt(c));
        if (stage == "ablate") return finish(stage_ablate(c));
        if (stage == "eval") {
            if (pred_dir.empty()) return finish(stage_eval(c, EvalOptions{{}, split}));
            const auto recs = evaluate_dirs(pred_dir, gt_dir, c.jobs);
            const fs::path out = out_dir.empty() ? Layout{c.work}.eval_dir() : fs::path(out_dir);
            write_eval(out, "dirs", recs);
            StageReport rep{"eval", recs.size()};
            rep.details = to_json(summarize(recs));
            return finish(rep);
        }
        if (stage == "run") {
            for (auto fn : {stage_synth, stage_train_source, stage_stats, stage_t3ie, stage_pseudo, stage_refine,
                            stage_adapt}) {
                const StageReport rep = fn(c);
                std::cout << rep.to_json().dump() << '\n';
                if (!rep.ok()) return finish(rep);
            }
            return finish(stage_eval(c));
        }
    } catch (const MissingArtifact& e) {
        std::cerr << "srpl " << stage << ": " << e.what() << " (run the upstream stage first)\n";
        return kMissing;
    } catch (const ConfigError& e) {
        std::cerr << "srpl " << stage << ": " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "srpl " << stage << ": " << e.what() << '\n';
        return kError;
    }
    return kUsage;
}
