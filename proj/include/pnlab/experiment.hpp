#pragma once

// Experiment orchestration: a plain-text key-value config, a staged artifact
// pipeline (gen-corpus -> train -> detect -> edit -> eval) rooted in one
// output directory, and the recipe drivers (sweep-z, ablate, prompts,
// epochs, report). Every stage reads its inputs from the artifacts of the
// previous stage, so running `pipeline` is byte-identical to running the
// stages one at a time with the same config.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "pnlab/checkpoint.hpp"
#include "pnlab/corpus.hpp"
#include "pnlab/detector.hpp"
#include "pnlab/editor.hpp"
#include "pnlab/metrics.hpp"
#include "pnlab/trainer.hpp"

namespace pnlab {

// Bad or internally inconsistent configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A stage was invoked before its inputs exist (CLI exit code 3).
struct MissingArtifact : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    uint64_t seed = 1;
    std::string out_dir = "run";

    // corpus
    size_t vocab_size = 2000;
    size_t n_train = 640;
    size_t n_valid = 128;
    size_t max_seq = 32;
    // Chance that a background clause's object is a short digit run. Zero by
    // default: secrets are then the only place the digit alphabet occurs, so
    // digit prediction measures memorization, not background digit statistics.
    double background_digit_prob = 0.0;
    CanarySetConfig canaries;  // counts and injection frequency

    // model geometry (vocab/max_seq/seed are supplied from the keys above)
    ModelConfig model;

    // training (seed supplied from the global seed)
    TrainConfig train;

    // detector and aggregator
    size_t attribution_steps = 20;  // Riemann steps m
    size_t edit_z = 100;
    size_t edit_ballot = 0;  // 0 = per-record ballot defaults to z

    // metrics
    size_t secret_digits = 4;
    double exposure_bits = -1.0;  // < 0 = default 0.7 * log2 |R|
    double min_mrr = 0.5;
    double max_secret_ppl = 10.0;

    // recipes
    std::vector<size_t> sweep_z = {0, 50, 100, 200, 400};
    std::vector<uint64_t> ablate_seeds = {101, 102, 103, 104, 105};

    ExperimentConfig() { canaries.fixed_frequency = 5; }

    ModelConfig model_config() const {
        ModelConfig m = model;
        m.vocab_size = vocab_size;
        m.max_seq = max_seq;
        m.seed = seed;
        return m;
    }

    TrainConfig train_config() const {
        TrainConfig t = train;
        t.seed = seed;
        return t;
    }

    RandomnessSpace secret_space() const { return digit_space(secret_digits); }

    MemorizationThresholds thresholds() const {
        MemorizationThresholds th =
            MemorizationThresholds::desk_defaults(std::log2(double(secret_space().size)));
        if (exposure_bits >= 0.0) th.exposure_bits = exposure_bits;
        th.min_mrr = min_mrr;
        th.max_secret_ppl = max_secret_ppl;
        return th;
    }

    size_t ballot() const {
        if (edit_ballot > 0) return edit_ballot;
        return std::max<size_t>(edit_z, 1);
    }

    // Canonical listing of every experiment-meaningful key (out_dir excluded:
    // where artifacts live must not change what they contain). Hashing this
    // text yields the config hash stamped into every artifact.
    std::string canonical_text() const {
        auto list = [](const auto& v) {
            std::string s;
            for (size_t i = 0; i < v.size(); ++i) {
                if (i) s += ',';
                s += std::to_string(v[i]);
            }
            return s;
        };
        std::string s;
        s += "seed = " + std::to_string(seed) + "\n";
        s += "vocab_size = " + std::to_string(vocab_size) + "\n";
        s += "n_train = " + std::to_string(n_train) + "\n";
        s += "n_valid = " + std::to_string(n_valid) + "\n";
        s += "max_seq = " + std::to_string(max_seq) + "\n";
        s += "background_digit_prob = " + format_double(background_digit_prob) + "\n";
        s += "canary.n_digit = " + std::to_string(canaries.n_digit) + "\n";
        s += "canary.n_name = " + std::to_string(canaries.n_name) + "\n";
        s += "canary.n_sentence = " + std::to_string(canaries.n_sentence) + "\n";
        s += "canary.frequency = " + std::to_string(canaries.fixed_frequency) + "\n";
        s += "model.n_layers = " + std::to_string(model.n_layers) + "\n";
        s += "model.d_model = " + std::to_string(model.d_model) + "\n";
        s += "model.d_ff = " + std::to_string(model.d_ff) + "\n";
        s += "model.n_heads = " + std::to_string(model.n_heads) + "\n";
        s += "train.epochs = " + std::to_string(train.epochs) + "\n";
        s += "train.batch_size = " + std::to_string(train.batch_size) + "\n";
        s += "train.learning_rate = " + format_double(train.learning_rate) + "\n";
        s += "train.mask_prob = " + format_double(train.mask_prob) + "\n";
        s += "train.checkpoint_epochs = " + list(train.checkpoint_epochs) + "\n";
        s += "detector.m = " + std::to_string(attribution_steps) + "\n";
        s += "edit.z = " + std::to_string(edit_z) + "\n";
        s += "edit.ballot = " + std::to_string(edit_ballot) + "\n";
        s += "metrics.secret_digits = " + std::to_string(secret_digits) + "\n";
        s += "metrics.exposure_bits = " + format_double(exposure_bits) + "\n";
        s += "metrics.min_mrr = " + format_double(min_mrr) + "\n";
        s += "metrics.max_secret_ppl = " + format_double(max_secret_ppl) + "\n";
        s += "sweep.z = " + list(sweep_z) + "\n";
        s += "ablate.seeds = " + list(ablate_seeds) + "\n";
        return s;
    }

    uint64_t config_hash() const { return fnv1a64(canonical_text()); }

    // Collects every problem instead of stopping at the first.
    void validate() const {
        std::vector<std::string> errors;
        auto check = [&](bool ok, const std::string& msg) {
            if (!ok) errors.push_back(msg);
        };

        try {
            default_lexicon(vocab_size);
        } catch (const std::exception& e) {
            errors.push_back(std::string("vocab_size: ") + e.what());
        }
        check(n_valid >= 1, "n_valid: validation split must be non-empty");
        check(max_seq >= 8, "max_seq: too short for the canary templates");
        check(background_digit_prob >= 0.0 && background_digit_prob <= 1.0,
              "background_digit_prob: must lie in [0, 1]");

        const size_t total_canaries = canaries.n_digit + canaries.n_name + canaries.n_sentence;
        check(total_canaries >= 1, "canary counts: need at least one canary record");
        size_t injections = 0;
        auto add_kind = [&](size_t count) {
            for (size_t i = 0; i < count; ++i)
                injections += canaries.fixed_frequency > 0
                                  ? canaries.fixed_frequency
                                  : canaries.frequencies[i % canaries.frequencies.size()];
        };
        add_kind(canaries.n_digit);
        add_kind(canaries.n_name);
        add_kind(canaries.n_sentence);
        check(n_train >= injections,
              "n_train: smaller than the total canary injections (" + std::to_string(injections) + ")");

        try {
            model_config().validate();
        } catch (const std::exception& e) {
            errors.push_back(std::string("model: ") + e.what());
        }
        try {
            train_config().validate();
        } catch (const std::exception& e) {
            errors.push_back(std::string("train: ") + e.what());
        }
        for (size_t e : train.checkpoint_epochs)
            check(e <= train.epochs, "train.checkpoint_epochs: epoch " + std::to_string(e) +
                                         " exceeds train.epochs");

        check(attribution_steps >= 1, "detector.m: approximation steps must be >= 1");
        const size_t total_neurons = model.n_layers * model.d_ff;
        check(edit_z <= total_neurons, "edit.z: exceeds the neuron count " + std::to_string(total_neurons));
        for (size_t z : sweep_z)
            check(z <= total_neurons, "sweep.z: entry " + std::to_string(z) +
                                          " exceeds the neuron count " + std::to_string(total_neurons));
        check(!sweep_z.empty(), "sweep.z: need at least one entry");
        check(!ablate_seeds.empty(), "ablate.seeds: need at least one seed");

        check(secret_digits >= 1 && secret_digits <= 9,
              "metrics.secret_digits: must be in [1, 9]");
        check(canaries.n_digit == 0 || secret_digits == 4,
              "metrics.secret_digits: digit canaries carry 4-digit secrets, so this must be 4");
        check(min_mrr > 0.0 && min_mrr <= 1.0, "metrics.min_mrr: must be in (0, 1]");
        check(max_secret_ppl >= 1.0, "metrics.max_secret_ppl: must be >= 1");

        if (!errors.empty()) {
            std::string all = "invalid config:";
            for (const std::string& e : errors) all += "\n  - " + e;
            throw ConfigError(all);
        }
    }
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    parts.push_back(cur);
    return parts;
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace detail

// Parses the documented `key = value` format: one pair per line, `#` starts a
// comment, lists are comma-separated. Unknown keys and malformed values are
// all reported at once.
inline ExperimentConfig parse_experiment_config(const std::string& text) {
    ExperimentConfig cfg;
    std::vector<std::string> errors;

    auto parse_u64 = [&](const std::string& key, const std::string& v, auto& out) {
        try {
            if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
            size_t used = 0;
            unsigned long long x = std::stoull(v, &used);
            if (used != v.size()) throw std::invalid_argument("trailing characters");
            out = static_cast<std::decay_t<decltype(out)>>(x);
        } catch (const std::exception&) {
            errors.push_back(key + ": expected a non-negative integer, got \"" + v + "\"");
        }
    };
    auto parse_f64 = [&](const std::string& key, const std::string& v, double& out) {
        try {
            size_t used = 0;
            double x = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument("trailing characters");
            out = x;
        } catch (const std::exception&) {
            errors.push_back(key + ": expected a number, got \"" + v + "\"");
        }
    };
    auto parse_u64_list = [&](const std::string& key, const std::string& v, auto& out) {
        out.clear();
        for (const std::string& part : detail::split_list(v)) {
            std::string p = detail::trim(part);
            if (p.empty()) {
                errors.push_back(key + ": empty list entry");
                continue;
            }
            typename std::decay_t<decltype(out)>::value_type x{};
            size_t before = errors.size();
            parse_u64(key, p, x);
            if (errors.size() == before) out.push_back(x);
        }
    };

    size_t line_no = 0;
    std::string line;
    auto handle = [&](const std::string& raw) {
        ++line_no;
        std::string l = raw;
        if (size_t hash = l.find('#'); hash != std::string::npos) l = l.substr(0, hash);
        l = detail::trim(l);
        if (l.empty()) return;
        size_t eq = l.find('=');
        if (eq == std::string::npos) {
            errors.push_back("line " + std::to_string(line_no) + ": expected `key = value`");
            return;
        }
        std::string key = detail::trim(l.substr(0, eq));
        std::string val = detail::trim(l.substr(eq + 1));

        if (key == "seed") parse_u64(key, val, cfg.seed);
        else if (key == "out_dir") cfg.out_dir = val;
        else if (key == "vocab_size") parse_u64(key, val, cfg.vocab_size);
        else if (key == "n_train") parse_u64(key, val, cfg.n_train);
        else if (key == "n_valid") parse_u64(key, val, cfg.n_valid);
        else if (key == "max_seq") parse_u64(key, val, cfg.max_seq);
        else if (key == "background_digit_prob") parse_f64(key, val, cfg.background_digit_prob);
        else if (key == "canary.n_digit") parse_u64(key, val, cfg.canaries.n_digit);
        else if (key == "canary.n_name") parse_u64(key, val, cfg.canaries.n_name);
        else if (key == "canary.n_sentence") parse_u64(key, val, cfg.canaries.n_sentence);
        else if (key == "canary.frequency") parse_u64(key, val, cfg.canaries.fixed_frequency);
        else if (key == "model.n_layers") parse_u64(key, val, cfg.model.n_layers);
        else if (key == "model.d_model") parse_u64(key, val, cfg.model.d_model);
        else if (key == "model.d_ff") parse_u64(key, val, cfg.model.d_ff);
        else if (key == "model.n_heads") parse_u64(key, val, cfg.model.n_heads);
        else if (key == "train.epochs") parse_u64(key, val, cfg.train.epochs);
        else if (key == "train.batch_size") parse_u64(key, val, cfg.train.batch_size);
        else if (key == "train.learning_rate") parse_f64(key, val, cfg.train.learning_rate);
        else if (key == "train.mask_prob") parse_f64(key, val, cfg.train.mask_prob);
        else if (key == "train.checkpoint_epochs") parse_u64_list(key, val, cfg.train.checkpoint_epochs);
        else if (key == "detector.m") parse_u64(key, val, cfg.attribution_steps);
        else if (key == "edit.z") parse_u64(key, val, cfg.edit_z);
        else if (key == "edit.ballot") parse_u64(key, val, cfg.edit_ballot);
        else if (key == "metrics.secret_digits") parse_u64(key, val, cfg.secret_digits);
        else if (key == "metrics.exposure_bits") parse_f64(key, val, cfg.exposure_bits);
        else if (key == "metrics.min_mrr") parse_f64(key, val, cfg.min_mrr);
        else if (key == "metrics.max_secret_ppl") parse_f64(key, val, cfg.max_secret_ppl);
        else if (key == "sweep.z") parse_u64_list(key, val, cfg.sweep_z);
        else if (key == "ablate.seeds") parse_u64_list(key, val, cfg.ablate_seeds);
        else errors.push_back("unknown key \"" + key + "\"");
    };

    std::string cur;
    for (char c : text) {
        if (c == '\n') {
            handle(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) handle(cur);

    if (!errors.empty()) {
        std::string all = "invalid config:";
        for (const std::string& e : errors) all += "\n  - " + e;
        throw ConfigError(all);
    }
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    if (!std::filesystem::exists(path))
        throw ConfigError("config file \"" + path + "\" does not exist");
    return parse_experiment_config(read_file(path));
}

// ---------------------------------------------------------------------------
// Artifact plumbing
// ---------------------------------------------------------------------------

namespace detail {

inline std::string ensure_dir(const std::string& dir) {
    std::filesystem::create_directories(dir);
    return dir;
}

inline void write_json(const std::string& path, const nlohmann::ordered_json& j) {
    write_file(path, j.dump(2) + "\n");
}

inline nlohmann::json read_stage_manifest(const std::string& path, const std::string& stage,
                                          const std::string& producer) {
    if (!std::filesystem::exists(path))
        throw MissingArtifact(stage + ": missing artifact \"" + path + "\"; run the " + producer +
                              " stage first");
    try {
        return nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception&) {
        throw std::runtime_error(stage + ": malformed manifest \"" + path + "\"");
    }
}

inline void require_config_hash(const nlohmann::json& manifest, const ExperimentConfig& cfg,
                                const std::string& what) {
    const std::string want = to_hex(cfg.config_hash());
    const std::string got = manifest.at("config_hash").get<std::string>();
    if (got != want)
        throw ConfigError(what + " were produced by a different configuration (hash " + got +
                          ", expected " + want + "); regenerate them or fix the config");
}

inline void require_file(const std::string& path, const std::string& stage,
                         const std::string& producer) {
    if (!std::filesystem::exists(path))
        throw MissingArtifact(stage + ": missing artifact \"" + path + "\"; run the " + producer +
                              " stage first");
}

}  // namespace detail

// Writes the canonical config next to the artifacts so a run directory is
// self-describing.
inline void write_config_artifact(const ExperimentConfig& cfg) {
    detail::ensure_dir(cfg.out_dir);
    write_file(cfg.out_dir + "/config.txt", cfg.canonical_text());
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

inline Corpus run_gen_corpus(const ExperimentConfig& cfg) {
    write_config_artifact(cfg);
    Lexicon lex = default_lexicon(cfg.vocab_size);
    std::vector<CanarySpec> canaries = make_canaries(lex, cfg.seed, cfg.canaries);
    Corpus corpus = generate(lex, cfg.seed, cfg.n_train, cfg.n_valid, canaries, cfg.max_seq,
                             cfg.background_digit_prob);

    const std::string dir = detail::ensure_dir(cfg.out_dir + "/corpus");
    save_corpus(corpus, dir);
    nlohmann::ordered_json manifest;
    manifest["stage"] = "gen-corpus";
    manifest["config_hash"] = to_hex(cfg.config_hash());
    manifest["corpus_checksum"] = to_hex(corpus.checksum());
    detail::write_json(dir + "/manifest.json", manifest);
    return corpus;
}

inline Corpus load_corpus_artifact(const ExperimentConfig& cfg, const std::string& stage) {
    const std::string dir = cfg.out_dir + "/corpus";
    nlohmann::json manifest =
        detail::read_stage_manifest(dir + "/manifest.json", stage, "gen-corpus");
    detail::require_config_hash(manifest, cfg, "corpus artifacts in \"" + dir + "\"");
    Corpus corpus = load_corpus(dir);
    if (to_hex(corpus.checksum()) != manifest.at("corpus_checksum").get<std::string>())
        throw std::runtime_error(stage + ": corpus artifacts in \"" + dir +
                                 "\" do not match their manifest checksum");
    return corpus;
}

inline TrainResult run_train(const ExperimentConfig& cfg) {
    write_config_artifact(cfg);
    Corpus corpus = load_corpus_artifact(cfg, "train");
    Model init = Model::init(cfg.model_config());
    TrainResult result = train(init, corpus, cfg.train_config());

    const std::string dir = detail::ensure_dir(cfg.out_dir + "/train");
    nlohmann::ordered_json manifest;
    manifest["stage"] = "train";
    manifest["config_hash"] = to_hex(cfg.config_hash());
    manifest["corpus_checksum"] = to_hex(corpus.checksum());
    manifest["model_checksum"] = to_hex(result.model.checksum());
    manifest["completed_epochs"] = result.completed_epochs;
    manifest["diverged"] = result.diverged;
    nlohmann::ordered_json ckpts = nlohmann::ordered_json::array();
    for (const auto& [epoch, snapshot] : result.checkpoints) {
        const std::string path = dir + "/model_epoch_" + std::to_string(epoch) + ".ckpt";
        save_checkpoint(snapshot, path);
        ckpts.push_back({{"epoch", epoch}, {"checksum", to_hex(snapshot.checksum())}});
    }
    manifest["checkpoints"] = std::move(ckpts);
    save_checkpoint(result.model, dir + "/model_final.ckpt");
    write_file(dir + "/loss_log.csv", loss_log_csv(result.loss_log));
    detail::write_json(dir + "/manifest.json", manifest);

    if (result.diverged)
        throw std::domain_error(
            "train: loss diverged after epoch " + std::to_string(result.completed_epochs) +
            "; the last finite model state was saved");
    return result;
}

inline Model load_model_artifact(const ExperimentConfig& cfg, const std::string& stage) {
    const std::string dir = cfg.out_dir + "/train";
    nlohmann::json manifest = detail::read_stage_manifest(dir + "/manifest.json", stage, "train");
    detail::require_config_hash(manifest, cfg, "training artifacts in \"" + dir + "\"");
    detail::require_file(dir + "/model_final.ckpt", stage, "train");
    Model m = load_checkpoint(dir + "/model_final.ckpt");
    if (!(m.config == cfg.model_config()))
        throw ConfigError(stage + ": the trained model in \"" + dir +
                          "\" has a different geometry than the config");
    return m;
}

inline Model load_checkpoint_artifact(const ExperimentConfig& cfg, size_t epoch,
                                      const std::string& stage) {
    const std::string path =
        cfg.out_dir + "/train/model_epoch_" + std::to_string(epoch) + ".ckpt";
    detail::require_file(path, stage, "train");
    return load_checkpoint(path);
}

inline std::vector<AttributionMatrix> run_detect(const ExperimentConfig& cfg) {
    write_config_artifact(cfg);
    Corpus corpus = load_corpus_artifact(cfg, "detect");
    Model model = load_model_artifact(cfg, "detect");

    const std::string dir = detail::ensure_dir(cfg.out_dir + "/detect");
    std::vector<AttributionMatrix> matrices;
    nlohmann::ordered_json records = nlohmann::ordered_json::array();
    for (const CanaryRecord& rec : corpus.registry) {
        AttributionMatrix a =
            attribute_all(model, rec.spec, cfg.attribution_steps, /*with_breakdown=*/true);
        const std::string file = rec.spec.id + ".attr";
        save_attribution(a, dir + "/" + file);
        records.push_back({{"id", rec.spec.id}, {"file", file}});
        matrices.push_back(std::move(a));
    }

    nlohmann::ordered_json manifest;
    manifest["stage"] = "detect";
    manifest["config_hash"] = to_hex(cfg.config_hash());
    manifest["corpus_checksum"] = to_hex(corpus.checksum());
    manifest["model_checksum"] = to_hex(model.checksum());
    manifest["attribution_steps"] = cfg.attribution_steps;
    manifest["records"] = std::move(records);
    detail::write_json(dir + "/manifest.json", manifest);
    return matrices;
}

inline std::vector<AttributionMatrix> load_attribution_artifacts(const ExperimentConfig& cfg,
                                                                 uint64_t model_checksum,
                                                                 const std::string& stage) {
    const std::string dir = cfg.out_dir + "/detect";
    nlohmann::json manifest = detail::read_stage_manifest(dir + "/manifest.json", stage, "detect");
    detail::require_config_hash(manifest, cfg, "attribution artifacts in \"" + dir + "\"");
    std::vector<AttributionMatrix> matrices;
    for (const auto& e : manifest.at("records")) {
        const std::string path = dir + "/" + e.at("file").get<std::string>();
        detail::require_file(path, stage, "detect");
        AttributionMatrix a = load_attribution(path);
        if (a.model_checksum != model_checksum)
            throw ConfigError(stage + ": attribution artifact \"" + path +
                              "\" was computed against a different model");
        matrices.push_back(std::move(a));
    }
    if (matrices.empty())
        throw MissingArtifact(stage + ": the detect manifest in \"" + dir + "\" lists no records");
    return matrices;
}

// First-secret-token score views used by the single-token (KN) baseline:
// same records, same steps, but each grid keeps only token 0's summand.
inline std::vector<AttributionMatrix> first_token_views(
    const std::vector<AttributionMatrix>& matrices) {
    std::vector<AttributionMatrix> views;
    views.reserve(matrices.size());
    for (const AttributionMatrix& m : matrices) {
        if (!m.has_breakdown())
            throw std::invalid_argument("first_token_views: matrix lacks a per-token breakdown");
        AttributionMatrix v;
        v.record_id = m.record_id;
        v.m = m.m;
        v.model_checksum = m.model_checksum;
        v.scores = m.breakdown[0];
        views.push_back(std::move(v));
    }
    return views;
}

struct EditStage {
    EditPlan plan;
    Model edited;
};

inline EditStage run_edit(const ExperimentConfig& cfg) {
    write_config_artifact(cfg);
    Model model = load_model_artifact(cfg, "edit");
    std::vector<AttributionMatrix> matrices =
        load_attribution_artifacts(cfg, model.checksum(), "edit");

    EditStage stage;
    stage.plan = aggregate(matrices, cfg.edit_z, cfg.ballot());
    stage.edited = apply_edit(model, stage.plan);

    const std::string plans = detail::ensure_dir(cfg.out_dir + "/plans");
    nlohmann::ordered_json plan_json = stage.plan.to_json();
    plan_json["config_hash"] = to_hex(cfg.config_hash());
    plan_json["model_checksum"] = to_hex(model.checksum());
    plan_json["edited_checksum"] = to_hex(stage.edited.checksum());
    detail::write_json(plans + "/pnd.json", plan_json);

    const std::string dir = detail::ensure_dir(cfg.out_dir + "/edit");
    save_checkpoint(stage.edited, dir + "/model_edited.ckpt");
    nlohmann::ordered_json manifest;
    manifest["stage"] = "edit";
    manifest["config_hash"] = to_hex(cfg.config_hash());
    manifest["model_checksum"] = to_hex(model.checksum());
    manifest["edited_checksum"] = to_hex(stage.edited.checksum());
    manifest["plan"] = "plans/pnd.json";
    detail::write_json(dir + "/manifest.json", manifest);
    return stage;
}

inline Model load_edited_model_artifact(const ExperimentConfig& cfg, const std::string& stage) {
    const std::string dir = cfg.out_dir + "/edit";
    nlohmann::json manifest = detail::read_stage_manifest(dir + "/manifest.json", stage, "edit");
    detail::require_config_hash(manifest, cfg, "edit artifacts in \"" + dir + "\"");
    detail::require_file(dir + "/model_edited.ckpt", stage, "edit");
    return load_checkpoint(dir + "/model_edited.ckpt");
}

// Means of the kind-specific leakage metrics plus the improvement bookkeeping
// the pipeline summary reports.
struct EvalSummary {
    LeakageReport pre;
    LeakageReport post;
    double pre_mean_exposure = 0.0, post_mean_exposure = 0.0;
    double pre_mean_mrr = 0.0, post_mean_mrr = 0.0;
    double pre_mean_secret_ppl = 0.0, post_mean_secret_ppl = 0.0;
    size_t memorized_pre = 0;
    size_t memorized_improved = 0;
    bool all_memorized_improved = true;
};

namespace detail {

inline double mean_metric(const LeakageReport& rep, CanaryKind kind) {
    double sum = 0.0;
    size_t n = 0;
    for (const RecordMetrics& r : rep.records) {
        if (r.kind != kind) continue;
        if (kind == CanaryKind::DigitString) sum += *r.exposure;
        if (kind == CanaryKind::Name) sum += *r.mrr;
        if (kind == CanaryKind::Sentence) sum += *r.secret_ppl;
        ++n;
    }
    return n ? sum / double(n) : 0.0;
}

inline bool risk_improved(const RecordMetrics& pre, const RecordMetrics& post) {
    switch (pre.kind) {
        case CanaryKind::DigitString: return *post.exposure < *pre.exposure;
        case CanaryKind::Name: return *post.mrr < *pre.mrr;
        case CanaryKind::Sentence: return *post.secret_ppl > *pre.secret_ppl;
    }
    return false;
}

inline EvalSummary summarize_eval(LeakageReport pre, LeakageReport post) {
    EvalSummary s;
    s.pre_mean_exposure = mean_metric(pre, CanaryKind::DigitString);
    s.post_mean_exposure = mean_metric(post, CanaryKind::DigitString);
    s.pre_mean_mrr = mean_metric(pre, CanaryKind::Name);
    s.post_mean_mrr = mean_metric(post, CanaryKind::Name);
    s.pre_mean_secret_ppl = mean_metric(pre, CanaryKind::Sentence);
    s.post_mean_secret_ppl = mean_metric(post, CanaryKind::Sentence);
    for (size_t i = 0; i < pre.records.size(); ++i) {
        if (!pre.records[i].memorized) continue;
        ++s.memorized_pre;
        if (risk_improved(pre.records[i], post.records[i]))
            ++s.memorized_improved;
        else
            s.all_memorized_improved = false;
    }
    s.pre = std::move(pre);
    s.post = std::move(post);
    return s;
}

inline nlohmann::ordered_json eval_summary_json(const ExperimentConfig& cfg, const EvalSummary& s) {
    nlohmann::ordered_json j;
    j["config_hash"] = to_hex(cfg.config_hash());
    j["pre_model_checksum"] = to_hex(s.pre.model_checksum);
    j["post_model_checksum"] = to_hex(s.post.model_checksum);
    j["validation_ppl_pre"] = s.pre.validation_ppl;
    j["validation_ppl_post"] = s.post.validation_ppl;
    j["validation_ppl_ratio"] = s.post.validation_ppl / s.pre.validation_ppl;
    j["mean_exposure_pre"] = s.pre_mean_exposure;
    j["mean_exposure_post"] = s.post_mean_exposure;
    j["mean_mrr_pre"] = s.pre_mean_mrr;
    j["mean_mrr_post"] = s.post_mean_mrr;
    j["mean_secret_ppl_pre"] = s.pre_mean_secret_ppl;
    j["mean_secret_ppl_post"] = s.post_mean_secret_ppl;
    j["memorized_pre"] = s.memorized_pre;
    j["memorized_improved"] = s.memorized_improved;
    j["all_memorized_improved"] = s.all_memorized_improved;
    return j;
}

}  // namespace detail

inline EvalSummary run_eval(const ExperimentConfig& cfg) {
    write_config_artifact(cfg);
    Corpus corpus = load_corpus_artifact(cfg, "eval");
    Model model = load_model_artifact(cfg, "eval");
    Model edited = load_edited_model_artifact(cfg, "eval");

    RandomnessSpace space = cfg.secret_space();
    MemorizationThresholds th = cfg.thresholds();
    LeakageReport pre = evaluate(model, corpus, space, th, cfg.seed, "");
    LeakageReport post = evaluate(edited, corpus, space, th, cfg.seed, "plans/pnd.json");

    const std::string dir = detail::ensure_dir(cfg.out_dir + "/reports");
    save_leakage_report(pre, dir + "/pre.json");
    save_leakage_report(post, dir + "/post.json");
    write_file(dir + "/pre.csv", pre.records_csv());
    write_file(dir + "/post.csv", post.records_csv());

    EvalSummary summary = detail::summarize_eval(std::move(pre), std::move(post));
    detail::write_json(dir + "/summary.json", detail::eval_summary_json(cfg, summary));
    return summary;
}

// Runs every stage in order against the same artifact directory.
inline EvalSummary run_pipeline(const ExperimentConfig& cfg) {
    run_gen_corpus(cfg);
    run_train(cfg);
    run_detect(cfg);
    run_edit(cfg);
    return run_eval(cfg);
}

// ---------------------------------------------------------------------------
// Recipes
// ---------------------------------------------------------------------------

struct SweepRow {
    size_t z = 0;
    double mean_exposure = 0.0;
    double validation_ppl = 0.0;
};

// Re-edits the already-trained model at each z and scores the result; the
// shared corpus/model/attribution artifacts must exist.
inline std::vector<SweepRow> run_sweep_z(const ExperimentConfig& cfg) {
    write_config_artifact(cfg);
    Corpus corpus = load_corpus_artifact(cfg, "sweep-z");
    Model model = load_model_artifact(cfg, "sweep-z");
    std::vector<AttributionMatrix> matrices =
        load_attribution_artifacts(cfg, model.checksum(), "sweep-z");

    RandomnessSpace space = cfg.secret_space();
    MemorizationThresholds th = cfg.thresholds();
    const std::string dir = detail::ensure_dir(cfg.out_dir + "/sweep");

    std::vector<SweepRow> rows;
    std::string csv = "z,mean_exposure,validation_ppl\n";
    for (size_t z : cfg.sweep_z) {
        const size_t ballot = cfg.edit_ballot > 0 ? cfg.edit_ballot : std::max<size_t>(z, 1);
        EditPlan plan = aggregate(matrices, z, ballot);
        Model edited = apply_edit(model, plan);
        LeakageReport rep =
            evaluate(edited, corpus, space, th, cfg.seed, "sweep z=" + std::to_string(z));
        save_leakage_report(rep, dir + "/z-" + std::to_string(z) + ".json");

        SweepRow row;
        row.z = z;
        row.mean_exposure = detail::mean_metric(rep, CanaryKind::DigitString);
        row.validation_ppl = rep.validation_ppl;
        rows.push_back(row);
        csv += std::to_string(z) + "," + format_double(row.mean_exposure) + "," +
               format_double(row.validation_ppl) + "\n";
    }
    write_file(dir + "/sweep.csv", csv);

    nlohmann::ordered_json manifest;
    manifest["stage"] = "sweep-z";
    manifest["config_hash"] = to_hex(cfg.config_hash());
    manifest["model_checksum"] = to_hex(model.checksum());
    detail::write_json(dir + "/manifest.json", manifest);
    return rows;
}

struct AblateRow {
    uint64_t seed = 0;
    std::string method;
    double mean_exposure_post = 0.0;
    double validation_ppl_post = 0.0;
};

struct AblateSummary {
    std::vector<AblateRow> rows;
    double mean_pnd = 0.0, mean_kn = 0.0, mean_random = 0.0;
};

// Per seed: an independent corpus + training run, then three edit methods on
// the same trained model. Sub-runs are resumable (existing artifacts reused).
inline AblateSummary run_ablate(const ExperimentConfig& cfg) {
    write_config_artifact(cfg);
    AblateSummary summary;
    const std::string dir = detail::ensure_dir(cfg.out_dir + "/ablate");
    std::string csv = "seed,method,mean_exposure_post,validation_ppl_post\n";

    RandomnessSpace space = cfg.secret_space();
    MemorizationThresholds th = cfg.thresholds();

    for (uint64_t seed : cfg.ablate_seeds) {
        ExperimentConfig sub = cfg;
        sub.seed = seed;
        sub.out_dir = dir + "/seed-" + std::to_string(seed);

        if (!std::filesystem::exists(sub.out_dir + "/corpus/manifest.json")) run_gen_corpus(sub);
        if (!std::filesystem::exists(sub.out_dir + "/train/manifest.json")) run_train(sub);
        if (!std::filesystem::exists(sub.out_dir + "/detect/manifest.json")) run_detect(sub);

        Corpus corpus = load_corpus_artifact(sub, "ablate");
        Model model = load_model_artifact(sub, "ablate");
        std::vector<AttributionMatrix> matrices =
            load_attribution_artifacts(sub, model.checksum(), "ablate");

        LeakageReport pre = evaluate(model, corpus, space, th, sub.seed, "");
        const std::string reports = detail::ensure_dir(sub.out_dir + "/reports");
        save_leakage_report(pre, reports + "/pre.json");

        std::map<std::string, EditPlan> plans;
        plans["PND"] = aggregate(matrices, cfg.edit_z, cfg.ballot());
        plans["KN"] =
            aggregate(first_token_views(matrices), cfg.edit_z, cfg.ballot(), SelectionMethod::KN);
        plans["Random"] = random_select(model.config, cfg.edit_z, sub.seed);

        for (const std::string method : {"PND", "KN", "Random"}) {
            const EditPlan& plan = plans.at(method);
            std::string slug = method;
            std::transform(slug.begin(), slug.end(), slug.begin(),
                           [](unsigned char c) { return char(std::tolower(c)); });
            nlohmann::ordered_json plan_json = plan.to_json();
            plan_json["config_hash"] = to_hex(sub.config_hash());
            plan_json["model_checksum"] = to_hex(model.checksum());
            detail::ensure_dir(sub.out_dir + "/plans");
            detail::write_json(sub.out_dir + "/plans/" + slug + ".json", plan_json);

            Model edited = apply_edit(model, plan);
            LeakageReport post =
                evaluate(edited, corpus, space, th, sub.seed, "plans/" + slug + ".json");
            save_leakage_report(post, reports + "/post_" + slug + ".json");

            AblateRow row;
            row.seed = seed;
            row.method = method;
            row.mean_exposure_post = detail::mean_metric(post, CanaryKind::DigitString);
            row.validation_ppl_post = post.validation_ppl;
            summary.rows.push_back(row);
            csv += std::to_string(seed) + "," + method + "," +
                   format_double(row.mean_exposure_post) + "," +
                   format_double(row.validation_ppl_post) + "\n";
        }
    }
    write_file(dir + "/ablate.csv", csv);

    auto mean_of = [&](const std::string& method) {
        double sum = 0.0;
        size_t n = 0;
        for (const AblateRow& r : summary.rows)
            if (r.method == method) {
                sum += r.mean_exposure_post;
                ++n;
            }
        return sum / double(n);
    };
    summary.mean_pnd = mean_of("PND");
    summary.mean_kn = mean_of("KN");
    summary.mean_random = mean_of("Random");

    nlohmann::ordered_json j;
    j["config_hash"] = to_hex(cfg.config_hash());
    j["seeds"] = cfg.ablate_seeds;
    j["edit_z"] = cfg.edit_z;
    j["mean_exposure_post"] = {{"PND", summary.mean_pnd},
                               {"KN", summary.mean_kn},
                               {"Random", summary.mean_random}};
    j["ordering_holds"] =
        summary.mean_pnd <= summary.mean_kn && summary.mean_kn <= summary.mean_random &&
        summary.mean_pnd < summary.mean_random;
    detail::write_json(dir + "/summary.json", j);
    return summary;
}

// Paraphrase prompts for a digit record, built from the record's own identity
// tokens: keyword-only, single-owner, swapped-owner, and dropped-keyword
// variants of the training prefix.
inline std::vector<PromptTemplate> default_prompt_templates(const CanarySpec& rec) {
    if (rec.kind != CanaryKind::DigitString)
        throw std::invalid_argument("default_prompt_templates: record kind must be digit-string");
    if (rec.slot_positions.front() != 4 || rec.tokens.size() < 8)
        throw std::invalid_argument("default_prompt_templates: unexpected digit template layout");
    const size_t owner_a = rec.tokens[1], owner_b = rec.tokens[2], keyword = rec.tokens[3];
    const std::vector<size_t>& secret = rec.secret;

    auto tmpl = [&](std::vector<size_t> prefix) {
        PromptTemplate t;
        t.tokens = std::move(prefix);
        for (size_t d : secret) {
            t.slot_positions.push_back(t.tokens.size());
            t.tokens.push_back(d);
        }
        return t;
    };
    // Every template keeps both owner tokens and the keyword (the model keys
    // the passcode on the owner pair; prompts without it score at chance,
    // where before/after comparisons are noise) and keeps the secret slots at
    // their training positions, but permutes the context order so none of
    // them is the training-form prompt.
    return {
        tmpl({kClsTokenId, owner_b, owner_a, keyword}),  // owners swapped
        tmpl({kClsTokenId, keyword, owner_a, owner_b}),  // keyword first
        tmpl({kClsTokenId, keyword, owner_b, owner_a}),  // keyword first, owners swapped
        tmpl({kClsTokenId, owner_a, keyword, owner_b}),  // keyword between owners
        tmpl({kClsTokenId, owner_b, keyword, owner_a}),  // keyword between, owners swapped
    };
}

struct PromptRow {
    size_t template_index = 0;
    double mean_exposure_pre = 0.0;
    double mean_exposure_post = 0.0;
};

// Scores every digit record under each paraphrase template, before and after
// the edit. Requires the pipeline's corpus/train/edit artifacts.
inline std::vector<PromptRow> run_prompts(const ExperimentConfig& cfg) {
    write_config_artifact(cfg);
    Corpus corpus = load_corpus_artifact(cfg, "prompts");
    Model model = load_model_artifact(cfg, "prompts");
    Model edited = load_edited_model_artifact(cfg, "prompts");

    std::vector<const CanarySpec*> digit_records;
    for (const CanaryRecord& rec : corpus.registry)
        if (rec.spec.kind == CanaryKind::DigitString) digit_records.push_back(&rec.spec);
    if (digit_records.empty())
        throw ConfigError("prompts: the corpus has no digit-string records to probe");

    RandomnessSpace space = cfg.secret_space();
    const size_t n_templates = default_prompt_templates(*digit_records[0]).size();
    std::vector<PromptRow> rows(n_templates);
    std::string csv = "template,record_id,exposure_pre,exposure_post\n";

    for (const CanarySpec* rec : digit_records) {
        std::vector<PromptTemplate> templates = default_prompt_templates(*rec);
        std::vector<LeakProbe> probes = prompt_variants(*rec, templates);
        for (size_t t = 0; t < probes.size(); ++t) {
            double pre = exposure_from_probe(model, probes[t], space).exposure;
            double post = exposure_from_probe(edited, probes[t], space).exposure;
            rows[t].template_index = t;
            rows[t].mean_exposure_pre += pre;
            rows[t].mean_exposure_post += post;
            csv += std::to_string(t) + "," + rec->id + "," + format_double(pre) + "," +
                   format_double(post) + "\n";
        }
    }
    for (PromptRow& r : rows) {
        r.mean_exposure_pre /= double(digit_records.size());
        r.mean_exposure_post /= double(digit_records.size());
    }

    const std::string dir = detail::ensure_dir(cfg.out_dir + "/prompts");
    write_file(dir + "/prompts.csv", csv);
    nlohmann::ordered_json j;
    j["config_hash"] = to_hex(cfg.config_hash());
    j["model_checksum"] = to_hex(model.checksum());
    j["edited_checksum"] = to_hex(edited.checksum());
    nlohmann::ordered_json tarr = nlohmann::ordered_json::array();
    bool all_improved = true;
    for (const PromptRow& r : rows) {
        tarr.push_back({{"template", r.template_index},
                        {"mean_exposure_pre", r.mean_exposure_pre},
                        {"mean_exposure_post", r.mean_exposure_post}});
        if (!(r.mean_exposure_post < r.mean_exposure_pre)) all_improved = false;
    }
    j["templates"] = std::move(tarr);
    j["all_templates_improved"] = all_improved;
    detail::write_json(dir + "/summary.json", j);
    return rows;
}

struct EpochRow {
    size_t epoch = 0;
    std::vector<size_t> layer_histogram;  // selected neurons per layer, sums to z
    double upper_half_fraction = 0.0;
};

// Re-detects against each stored checkpoint and tracks where the selected
// neurons sit in the layer stack.
inline std::vector<EpochRow> run_epochs(const ExperimentConfig& cfg) {
    if (cfg.train.checkpoint_epochs.size() < 2)
        throw ConfigError("epochs: need at least two checkpoint epochs to compare");
    write_config_artifact(cfg);
    Corpus corpus = load_corpus_artifact(cfg, "epochs");

    std::vector<size_t> epochs = cfg.train.checkpoint_epochs;
    std::sort(epochs.begin(), epochs.end());

    const std::string dir = detail::ensure_dir(cfg.out_dir + "/epochs");
    const size_t L = cfg.model.n_layers;
    std::vector<EpochRow> rows;
    std::string csv = "epoch,upper_half_fraction";
    for (size_t l = 0; l < L; ++l) csv += ",layer_" + std::to_string(l);
    csv += "\n";

    for (size_t epoch : epochs) {
        Model snapshot = load_checkpoint_artifact(cfg, epoch, "epochs");
        std::vector<AttributionMatrix> matrices;
        const std::string mdir = detail::ensure_dir(dir + "/epoch-" + std::to_string(epoch));
        for (const CanaryRecord& rec : corpus.registry) {
            AttributionMatrix a =
                attribute_all(snapshot, rec.spec, cfg.attribution_steps, /*with_breakdown=*/true);
            save_attribution(a, mdir + "/" + rec.spec.id + ".attr");
            matrices.push_back(std::move(a));
        }
        EditPlan plan = aggregate(matrices, cfg.edit_z, cfg.ballot());

        EpochRow row;
        row.epoch = epoch;
        row.layer_histogram.assign(L, 0);
        size_t upper = 0;
        for (const NeuronId& n : plan.neurons) {
            row.layer_histogram[n.layer] += 1;
            if (n.layer >= L / 2) ++upper;
        }
        row.upper_half_fraction = plan.neurons.empty() ? 0.0 : double(upper) / double(plan.neurons.size());
        rows.push_back(row);

        csv += std::to_string(epoch) + "," + format_double(row.upper_half_fraction);
        for (size_t l = 0; l < L; ++l) csv += "," + std::to_string(row.layer_histogram[l]);
        csv += "\n";
    }
    write_file(dir + "/epochs.csv", csv);

    nlohmann::ordered_json j;
    j["config_hash"] = to_hex(cfg.config_hash());
    j["epochs"] = epochs;
    j["first_upper_half_fraction"] = rows.front().upper_half_fraction;
    j["last_upper_half_fraction"] = rows.back().upper_half_fraction;
    j["drifted_upward"] = rows.back().upper_half_fraction > rows.front().upper_half_fraction;
    detail::write_json(dir + "/summary.json", j);
    return rows;
}

// Consolidates a run directory: per-privacy-type before/after table plus the
// layer histogram of the edited neurons.
inline nlohmann::ordered_json run_report(const ExperimentConfig& cfg) {
    const std::string reports = cfg.out_dir + "/reports";
    if (!std::filesystem::exists(reports + "/pre.json") &&
        !std::filesystem::exists(reports + "/post.json"))
        throw MissingArtifact("report: no leakage reports in \"" + reports +
                              "\"; run the eval stage first");

    nlohmann::ordered_json out;
    out["config_hash"] = to_hex(cfg.config_hash());

    std::optional<LeakageReport> pre, post;
    if (std::filesystem::exists(reports + "/pre.json"))
        pre = load_leakage_report(reports + "/pre.json");
    if (std::filesystem::exists(reports + "/post.json"))
        post = load_leakage_report(reports + "/post.json");

    std::string csv = "kind,metric,pre,post\n";
    nlohmann::ordered_json table = nlohmann::ordered_json::array();
    auto add_row = [&](const char* kind, const char* metric, CanaryKind k) {
        nlohmann::ordered_json row;
        row["kind"] = kind;
        row["metric"] = metric;
        std::string pre_s, post_s;
        if (pre) {
            row["pre"] = detail::mean_metric(*pre, k);
            pre_s = format_double(detail::mean_metric(*pre, k));
        }
        if (post) {
            row["post"] = detail::mean_metric(*post, k);
            post_s = format_double(detail::mean_metric(*post, k));
        }
        table.push_back(std::move(row));
        csv += std::string(kind) + "," + metric + "," + pre_s + "," + post_s + "\n";
    };
    add_row("digit-string", "mean_exposure", CanaryKind::DigitString);
    add_row("name", "mean_mrr", CanaryKind::Name);
    add_row("sentence", "mean_secret_ppl", CanaryKind::Sentence);
    {
        nlohmann::ordered_json row;
        row["kind"] = "all";
        row["metric"] = "validation_ppl";
        std::string pre_s, post_s;
        if (pre) {
            row["pre"] = pre->validation_ppl;
            pre_s = format_double(pre->validation_ppl);
        }
        if (post) {
            row["post"] = post->validation_ppl;
            post_s = format_double(post->validation_ppl);
        }
        table.push_back(std::move(row));
        csv += std::string("all,validation_ppl,") + pre_s + "," + post_s + "\n";
    }
    out["table"] = std::move(table);

    // Layer histogram of the edited neurons, when a plan exists.
    const std::string plan_path = cfg.out_dir + "/plans/pnd.json";
    if (std::filesystem::exists(plan_path)) {
        EditPlan plan = load_edit_plan(plan_path);
        std::vector<size_t> hist(cfg.model.n_layers, 0);
        for (const NeuronId& n : plan.neurons)
            if (n.layer < hist.size()) hist[n.layer] += 1;
        out["edited_layer_histogram"] = hist;
        out["edited_neurons"] = plan.neurons.size();
    }

    const std::string dir = detail::ensure_dir(cfg.out_dir + "/report");
    detail::write_json(dir + "/summary.json", out);
    write_file(dir + "/tables.csv", csv);
    return out;
}

}  // namespace pnlab
