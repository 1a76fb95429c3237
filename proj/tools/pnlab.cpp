// Command-line front end for the privacy-neuron laboratory.
//
// Every subcommand reads one plain-text config (--config), works inside one
// artifact directory, and is composable: `pnlab pipeline` produces byte-for-
// byte the same artifacts as running gen-corpus, train, detect, edit, and
// eval one after another.
//
// Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact,
// 4 numeric failure (divergence / non-finite values), 1 anything else.

#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "pnlab/experiment.hpp"

namespace {

using namespace pnlab;

struct CommonArgs {
    std::string config_path;
    std::string out_dir;     // overrides the config's out_dir when set
    int64_t seed = -1;       // overrides the config's seed when >= 0
    std::string stage_input; // reads artifacts from here instead of out_dir
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
    auto* opt = cmd->add_option("--config", args.config_path,
                                "Path to the key-value experiment config");
    if (config_required) opt->required();
    cmd->add_option("--out", args.out_dir, "Artifact directory (overrides out_dir)");
    cmd->add_option("--seed", args.seed, "Global seed (overrides seed)");
    cmd->add_option("--stage-input", args.stage_input,
                    "Directory holding the upstream artifacts (defaults to the output directory)");
}

ExperimentConfig resolve_config(const CommonArgs& args) {
    ExperimentConfig cfg = load_experiment_config(args.config_path);
    bool changed = false;
    if (!args.out_dir.empty()) {
        cfg.out_dir = args.out_dir;
        changed = true;
    }
    if (args.seed >= 0) {
        cfg.seed = static_cast<uint64_t>(args.seed);
        changed = true;
    }
    if (changed) cfg.validate();
    return cfg;
}

// Stages that consume upstream artifacts can take them from a different run
// directory (--stage-input): the named subdirectories are copied into the
// output directory before the stage runs, so its provenance checks still see
// a self-contained run. Missing upstream pieces surface through the stage's
// own missing-artifact errors.
void materialize_inputs(const ExperimentConfig& cfg, const std::string& stage_input,
                        std::initializer_list<const char*> subdirs) {
    if (stage_input.empty()) return;
    namespace fs = std::filesystem;
    if (fs::exists(stage_input) && fs::exists(cfg.out_dir) &&
        fs::equivalent(fs::path(stage_input), fs::path(cfg.out_dir)))
        return;
    fs::create_directories(cfg.out_dir);
    for (const char* sub : subdirs) {
        const fs::path src = fs::path(stage_input) / sub;
        if (!fs::exists(src)) continue;
        fs::copy(src, fs::path(cfg.out_dir) / sub,
                 fs::copy_options::recursive | fs::copy_options::overwrite_existing);
    }
}

void print_eval_summary(const EvalSummary& s) {
    std::printf("validation ppl     %s -> %s (ratio %s)\n",
                format_double(s.pre.validation_ppl).c_str(),
                format_double(s.post.validation_ppl).c_str(),
                format_double(s.post.validation_ppl / s.pre.validation_ppl).c_str());
    std::printf("mean exposure      %s -> %s\n", format_double(s.pre_mean_exposure).c_str(),
                format_double(s.post_mean_exposure).c_str());
    std::printf("mean reciprocal rank %s -> %s\n", format_double(s.pre_mean_mrr).c_str(),
                format_double(s.post_mean_mrr).c_str());
    std::printf("mean secret ppl    %s -> %s\n", format_double(s.pre_mean_secret_ppl).c_str(),
                format_double(s.post_mean_secret_ppl).c_str());
    std::printf("memorized records  %zu (risk reduced on %zu)\n", s.memorized_pre,
                s.memorized_improved);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale lab for locating and erasing memorized secrets in a "
                 "masked-language-model transformer"};
    app.require_subcommand(1);

    CommonArgs args;

    auto* gen = app.add_subcommand("gen-corpus", "Generate the canary-injected corpus");
    add_common(gen, args);
    auto* train_cmd = app.add_subcommand("train", "Train the model on the generated corpus");
    add_common(train_cmd, args);
    auto* detect = app.add_subcommand("detect", "Attribute each secret to the FFN neurons");
    add_common(detect, args);
    auto* edit = app.add_subcommand("edit", "Aggregate attributions and zero the chosen neurons");
    add_common(edit, args);
    auto* eval = app.add_subcommand("eval", "Score leakage before and after the edit");
    add_common(eval, args);
    auto* pipeline = app.add_subcommand("pipeline", "Run all five stages in order");
    add_common(pipeline, args);
    auto* sweep = app.add_subcommand("sweep-z", "Re-edit at each neuron budget and score");
    add_common(sweep, args);
    auto* ablate = app.add_subcommand("ablate",
                                      "Compare attribution, single-token, and random selection "
                                      "across seeds");
    add_common(ablate, args);
    auto* prompts = app.add_subcommand("prompts", "Score paraphrased prompts before/after the edit");
    add_common(prompts, args);
    auto* epochs = app.add_subcommand("epochs", "Track where selected neurons sit across checkpoints");
    add_common(epochs, args);
    auto* report = app.add_subcommand("report", "Summarize a run directory into one table");
    add_common(report, args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;  // bad flags are configuration errors
    }

    try {
        const ExperimentConfig cfg = resolve_config(args);

        if (gen->parsed()) {
            Corpus corpus = run_gen_corpus(cfg);
            std::printf("corpus: %zu train / %zu valid lines, %zu canaries -> %s\n",
                        corpus.train.size(), corpus.valid.size(), corpus.registry.size(),
                        cfg.out_dir.c_str());
        } else if (train_cmd->parsed()) {
            materialize_inputs(cfg, args.stage_input, {"corpus"});
            TrainResult r = run_train(cfg);
            std::printf("trained %zu epochs, final checksum %s -> %s\n", r.completed_epochs,
                        to_hex(r.model.checksum()).c_str(), cfg.out_dir.c_str());
        } else if (detect->parsed()) {
            materialize_inputs(cfg, args.stage_input, {"corpus", "train"});
            auto matrices = run_detect(cfg);
            std::printf("attributed %zu records -> %s/detect\n", matrices.size(),
                        cfg.out_dir.c_str());
        } else if (edit->parsed()) {
            materialize_inputs(cfg, args.stage_input, {"train", "detect"});
            EditStage stage = run_edit(cfg);
            std::printf("zeroed %zu neurons (plan %s/plans/pnd.json), edited checksum %s\n",
                        stage.plan.neurons.size(), cfg.out_dir.c_str(),
                        to_hex(stage.edited.checksum()).c_str());
        } else if (eval->parsed()) {
            materialize_inputs(cfg, args.stage_input, {"corpus", "train", "edit", "plans"});
            EvalSummary s = run_eval(cfg);
            print_eval_summary(s);
        } else if (pipeline->parsed()) {
            EvalSummary s = run_pipeline(cfg);
            print_eval_summary(s);
        } else if (sweep->parsed()) {
            materialize_inputs(cfg, args.stage_input, {"corpus", "train", "detect"});
            auto rows = run_sweep_z(cfg);
            std::printf("z,mean_exposure,validation_ppl\n");
            for (const SweepRow& r : rows)
                std::printf("%zu,%s,%s\n", r.z, format_double(r.mean_exposure).c_str(),
                            format_double(r.validation_ppl).c_str());
        } else if (ablate->parsed()) {
            AblateSummary s = run_ablate(cfg);
            std::printf("mean post-edit exposure: attribution %s, single-token %s, random %s\n",
                        format_double(s.mean_pnd).c_str(), format_double(s.mean_kn).c_str(),
                        format_double(s.mean_random).c_str());
        } else if (prompts->parsed()) {
            materialize_inputs(cfg, args.stage_input, {"corpus", "train", "edit"});
            auto rows = run_prompts(cfg);
            std::printf("template,mean_exposure_pre,mean_exposure_post\n");
            for (const PromptRow& r : rows)
                std::printf("%zu,%s,%s\n", r.template_index,
                            format_double(r.mean_exposure_pre).c_str(),
                            format_double(r.mean_exposure_post).c_str());
        } else if (epochs->parsed()) {
            materialize_inputs(cfg, args.stage_input, {"corpus", "train"});
            auto rows = run_epochs(cfg);
            std::printf("epoch,upper_half_fraction\n");
            for (const EpochRow& r : rows)
                std::printf("%zu,%s\n", r.epoch, format_double(r.upper_half_fraction).c_str());
        } else if (report->parsed()) {
            // `report` consolidates an existing run directory: --stage-input
            // names it when the artifacts live somewhere other than out_dir.
            ExperimentConfig view = cfg;
            if (!args.stage_input.empty()) view.out_dir = args.stage_input;
            nlohmann::ordered_json j = run_report(view);
            std::printf("%s\n", j.dump(2).c_str());
        }
        return 0;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "pnlab: %s\n", e.what());
        return 2;
    } catch (const MissingArtifact& e) {
        std::fprintf(stderr, "pnlab: %s\n", e.what());
        return 3;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "pnlab: %s\n", e.what());
        return 2;
    } catch (const std::domain_error& e) {
        std::fprintf(stderr, "pnlab: numeric failure: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "pnlab: %s\n", e.what());
        return 1;
    }
}
