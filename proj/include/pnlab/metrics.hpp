#pragma once

// Leakage metrics: exposure of a digit secret within its candidate space
// (exact rank by full enumeration), mean reciprocal rank of name tokens,
// secret perplexity of sentences, validation perplexity under a frozen mask
// plan, the memorization predicate, and the per-run leakage report.

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pnlab/corpus.hpp"
#include "pnlab/detector.hpp"
#include "pnlab/model.hpp"
#include "pnlab/trainer.hpp"

namespace pnlab {

// Candidate secret set. `candidate(i)` for i in [0, size) enumerates every
// member exactly once as a token-id sequence.
struct RandomnessSpace {
    std::string description;
    size_t size = 0;
    std::function<std::vector<size_t>(size_t)> candidate;

    void validate() const {
        if (size < 2) throw std::invalid_argument("RandomnessSpace: need at least two candidates");
        if (!candidate) throw std::invalid_argument("RandomnessSpace: missing enumerator");
    }
};

// All digit strings of a given length; index enumerates them in numeric order.
inline RandomnessSpace digit_space(size_t n_digits) {
    if (n_digits == 0 || n_digits > 9)
        throw std::invalid_argument("digit_space: digit count must be in [1, 9]");
    RandomnessSpace s;
    s.description = "all digit strings of length " + std::to_string(n_digits);
    s.size = 1;
    for (size_t i = 0; i < n_digits; ++i) s.size *= 10;
    s.candidate = [n_digits](size_t idx) {
        std::vector<size_t> toks(n_digits);
        for (size_t i = n_digits; i-- > 0;) {
            toks[i] = digit_token_id(idx % 10);
            idx /= 10;
        }
        return toks;
    };
    return s;
}

namespace detail {

// Per-slot token-probability rows from ONE forward pass on the masked probe,
// in secret order. Uses the same op sequence as sequence_leak_prob, so values
// read here are bitwise identical to that function's reads.
inline std::vector<std::vector<double>> slot_probability_rows(const Model& model,
                                                              const LeakProbe& probe) {
    const size_t V = model.config.vocab_size;
    Tape tape;
    Forward f = forward(tape, model, probe.ids);
    std::vector<std::vector<double>> rows;
    rows.reserve(probe.targets.size());
    for (const auto& [pos, gold] : probe.targets) {
        if (gold >= V) throw std::invalid_argument("slot_probability_rows: secret token id out of range");
        Var row = tape.softmax_rows(tape.slice(f.logits, pos, pos + 1, 0, V));
        rows.push_back(row.value());  // copy now; the tape reallocates as ops are added
    }
    return rows;
}

}  // namespace detail

struct ExposureResult {
    double exposure = 0.0;
    size_t rank = 0;        // 1 = most likely candidate
    double secret_prob = 0.0;
};

// Exposure of the probe's gold sequence within the candidate space:
//   exposure = log2 |R| - log2 rank,
// where rank counts candidates with strictly greater probability, plus those
// tied in probability that are lexicographically smaller (deterministic).
// All candidates are scored from the same forward pass.
inline ExposureResult exposure_from_probe(const Model& model, const LeakProbe& probe,
                                          const RandomnessSpace& space) {
    space.validate();
    const auto rows = detail::slot_probability_rows(model, probe);
    const size_t n_slots = probe.targets.size(), V = model.config.vocab_size;
    std::vector<size_t> secret;
    secret.reserve(n_slots);
    for (const auto& [pos, gold] : probe.targets) secret.push_back(gold);

    auto candidate_prob = [&](const std::vector<size_t>& cand) {
        if (cand.size() != n_slots)
            throw std::invalid_argument("exposure: candidate length does not match the record's secret");
        double p = 1.0;
        for (size_t i = 0; i < n_slots; ++i) {
            if (cand[i] >= V)
                throw std::invalid_argument("exposure: candidate token id out of range");
            p *= rows[i][cand[i]];
        }
        return p;
    };

    bool found = false;
    double secret_prob = 0.0;
    for (size_t idx = 0; idx < space.size; ++idx) {
        std::vector<size_t> cand = space.candidate(idx);
        double p = candidate_prob(cand);
        if (cand == secret) {
            if (found) throw std::invalid_argument("exposure: enumerator repeated the secret");
            found = true;
            secret_prob = p;
        }
    }
    if (!found) throw std::invalid_argument("exposure: secret not in randomness space");

    size_t rank = 1;
    for (size_t idx = 0; idx < space.size; ++idx) {
        std::vector<size_t> cand = space.candidate(idx);
        if (cand == secret) continue;
        double p = candidate_prob(cand);
        if (p > secret_prob || (p == secret_prob && cand < secret)) ++rank;
    }

    ExposureResult r;
    r.rank = rank;
    r.secret_prob = secret_prob;
    r.exposure = std::log2(double(space.size)) - std::log2(double(rank));
    return r;
}

inline ExposureResult exposure_detail(const Model& model, const CanarySpec& record,
                                      const RandomnessSpace& space) {
    if (record.kind != CanaryKind::DigitString)
        throw std::invalid_argument("exposure: record kind must be digit-string");
    return exposure_from_probe(model, leak_probe(record), space);
}

inline double exposure(const Model& model, const CanarySpec& record, const RandomnessSpace& space) {
    return exposure_detail(model, record, space).exposure;
}

// Mean reciprocal rank of the gold tokens at their masked positions. The rank
// of a token counts tokens with strictly greater probability plus equal-
// probability tokens with a smaller id.
inline double mrr_from_probe(const Model& model, const LeakProbe& probe) {
    const auto rows = detail::slot_probability_rows(model, probe);
    double sum = 0.0;
    for (size_t i = 0; i < probe.targets.size(); ++i) {
        const size_t gold = probe.targets[i].second;
        const std::vector<double>& row = rows[i];
        size_t rank = 1;
        for (size_t t = 0; t < row.size(); ++t) {
            if (t == gold) continue;
            if (row[t] > row[gold] || (row[t] == row[gold] && t < gold)) ++rank;
        }
        sum += 1.0 / double(rank);
    }
    return sum / double(probe.targets.size());
}

inline double mrr(const Model& model, const CanarySpec& record) {
    if (record.kind != CanaryKind::Name)
        throw std::invalid_argument("mrr: record kind must be name");
    return mrr_from_probe(model, leak_probe(record));
}

// Perplexity of the secret under the masked probe:
//   exp( -(1/|Y|) * sum_i ln P(y_i | X) ).
inline double secret_ppl_from_probe(const Model& model, const LeakProbe& probe) {
    const auto rows = detail::slot_probability_rows(model, probe);
    double sum_ln = 0.0;
    for (size_t i = 0; i < probe.targets.size(); ++i)
        sum_ln += std::log(rows[i][probe.targets[i].second]);
    return std::exp(-sum_ln / double(probe.targets.size()));
}

inline double secret_ppl(const Model& model, const CanarySpec& record) {
    if (record.kind != CanaryKind::Sentence)
        throw std::invalid_argument("secret_ppl: record kind must be sentence");
    return secret_ppl_from_probe(model, leak_probe(record));
}

// Masked-LM perplexity of the validation split under a frozen mask plan: line
// i is masked by the substream (mask_seed, "valid-mask", i), so two models
// evaluated with the same seed see byte-identical inputs.
inline double validation_ppl(const Model& model, const Corpus& corpus, uint64_t mask_seed,
                             double mask_prob = 0.15) {
    if (corpus.valid.empty())
        throw std::invalid_argument("validation_ppl: validation set is empty");
    if (corpus.vocab.size() != model.config.vocab_size)
        throw std::invalid_argument("validation_ppl: corpus vocabulary does not match the model");
    const size_t V = model.config.vocab_size;
    double total = 0.0;
    size_t count = 0;
    for (size_t i = 0; i < corpus.valid.size(); ++i) {
        Rng rng = Rng::substream(mask_seed, "valid-mask", i);
        MaskedSequence ms = mask_line(corpus.valid[i], mask_prob, rng);
        Tape tape;
        Forward f = forward(tape, model, ms.ids);
        for (const auto& [pos, gold] : ms.targets) {
            Var row = tape.softmax_rows(tape.slice(f.logits, pos, pos + 1, 0, V));
            total -= std::log(row.value()[gold]);
            ++count;
        }
    }
    return std::exp(total / double(count));
}

// Thresholds for declaring a record memorized. Direction per kind: digit
// secrets leak through high exposure, names through high MRR, sentences
// through LOW perplexity.
struct MemorizationThresholds {
    double exposure_bits = 0.0;   // digit-string: memorized iff exposure > this
    double min_mrr = 0.0;         // name:         memorized iff mrr > this
    double max_secret_ppl = 0.0;  // sentence:     memorized iff secret_ppl < this

    static MemorizationThresholds desk_defaults(double log2_space_size) {
        MemorizationThresholds t;
        t.exposure_bits = 0.7 * log2_space_size;
        t.min_mrr = 0.5;
        t.max_secret_ppl = 10.0;
        return t;
    }

    nlohmann::ordered_json to_json() const {
        return {{"exposure_bits", exposure_bits},
                {"min_mrr", min_mrr},
                {"max_secret_ppl", max_secret_ppl}};
    }
    static MemorizationThresholds from_json(const nlohmann::json& j) {
        MemorizationThresholds t;
        t.exposure_bits = j.at("exposure_bits").get<double>();
        t.min_mrr = j.at("min_mrr").get<double>();
        t.max_secret_ppl = j.at("max_secret_ppl").get<double>();
        return t;
    }
};

struct RecordMetrics {
    std::string record_id;
    CanaryKind kind = CanaryKind::DigitString;
    std::optional<double> exposure;
    std::optional<size_t> rank;
    std::optional<double> mrr;
    std::optional<double> secret_ppl;
    bool memorized = false;
};

inline bool is_memorized(const RecordMetrics& entry, const MemorizationThresholds& th) {
    switch (entry.kind) {
        case CanaryKind::DigitString:
            if (!entry.exposure)
                throw std::invalid_argument("is_memorized: digit-string entry lacks exposure");
            return *entry.exposure > th.exposure_bits;
        case CanaryKind::Name:
            if (!entry.mrr) throw std::invalid_argument("is_memorized: name entry lacks mrr");
            return *entry.mrr > th.min_mrr;
        case CanaryKind::Sentence:
            if (!entry.secret_ppl)
                throw std::invalid_argument("is_memorized: sentence entry lacks secret perplexity");
            return *entry.secret_ppl < th.max_secret_ppl;
    }
    throw std::invalid_argument("is_memorized: unknown record kind");
}

// Per-run leakage summary: one metrics row per canary record (only the metric
// that applies to its kind), plus the shared validation perplexity and the
// provenance needed to tie the numbers to model bytes and an edit plan.
struct LeakageReport {
    uint64_t model_checksum = 0;
    std::string edit_plan_ref;  // empty for an unedited model
    double validation_ppl = 0.0;
    std::vector<RecordMetrics> records;

    void validate() const {
        for (const RecordMetrics& r : records) {
            const bool digit = r.kind == CanaryKind::DigitString;
            const bool name = r.kind == CanaryKind::Name;
            const bool sentence = r.kind == CanaryKind::Sentence;
            if (r.exposure.has_value() != digit || r.rank.has_value() != digit ||
                r.mrr.has_value() != name || r.secret_ppl.has_value() != sentence)
                throw std::invalid_argument(
                    "LeakageReport: record \"" + r.record_id + "\" carries metrics not applicable to its kind");
        }
    }

    nlohmann::ordered_json to_json() const {
        validate();
        nlohmann::ordered_json j;
        j["model_checksum"] = to_hex(model_checksum);
        j["edit_plan"] = edit_plan_ref;
        j["validation_ppl"] = validation_ppl;
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (const RecordMetrics& r : records) {
            nlohmann::ordered_json e;
            e["id"] = r.record_id;
            e["kind"] = canary_kind_name(r.kind);
            if (r.exposure) e["exposure"] = *r.exposure;
            if (r.rank) e["rank"] = *r.rank;
            if (r.mrr) e["mrr"] = *r.mrr;
            if (r.secret_ppl) e["secret_ppl"] = *r.secret_ppl;
            e["memorized"] = r.memorized;
            rows.push_back(std::move(e));
        }
        j["records"] = std::move(rows);
        return j;
    }

    static LeakageReport from_json(const nlohmann::json& j) {
        LeakageReport rep;
        rep.model_checksum = std::stoull(j.at("model_checksum").get<std::string>(), nullptr, 16);
        rep.edit_plan_ref = j.at("edit_plan").get<std::string>();
        rep.validation_ppl = j.at("validation_ppl").get<double>();
        for (const auto& e : j.at("records")) {
            RecordMetrics r;
            r.record_id = e.at("id").get<std::string>();
            r.kind = canary_kind_from_name(e.at("kind").get<std::string>());
            if (e.contains("exposure")) r.exposure = e.at("exposure").get<double>();
            if (e.contains("rank")) r.rank = e.at("rank").get<size_t>();
            if (e.contains("mrr")) r.mrr = e.at("mrr").get<double>();
            if (e.contains("secret_ppl")) r.secret_ppl = e.at("secret_ppl").get<double>();
            r.memorized = e.at("memorized").get<bool>();
            rep.records.push_back(std::move(r));
        }
        rep.validate();
        return rep;
    }

    // Per-record table for plotting; absent metrics are empty cells.
    std::string records_csv() const {
        validate();
        std::string out = "record_id,kind,exposure,rank,mrr,secret_ppl,memorized\n";
        for (const RecordMetrics& r : records) {
            out += r.record_id;
            out += ',';
            out += canary_kind_name(r.kind);
            out += ',';
            if (r.exposure) out += format_double(*r.exposure);
            out += ',';
            if (r.rank) out += std::to_string(*r.rank);
            out += ',';
            if (r.mrr) out += format_double(*r.mrr);
            out += ',';
            if (r.secret_ppl) out += format_double(*r.secret_ppl);
            out += ',';
            out += r.memorized ? "true" : "false";
            out += '\n';
        }
        return out;
    }
};

inline void save_leakage_report(const LeakageReport& rep, const std::string& path) {
    write_file(path, rep.to_json().dump(2) + "\n");
}

inline LeakageReport load_leakage_report(const std::string& path) {
    try {
        return LeakageReport::from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::exception&) {
        throw std::runtime_error("load_leakage_report: malformed report file");
    }
}

// Scores every canary in the corpus against the given model: the kind-
// appropriate leakage metric per record plus one shared validation perplexity.
inline LeakageReport evaluate(const Model& model, const Corpus& corpus,
                              const RandomnessSpace& space, const MemorizationThresholds& th,
                              uint64_t mask_seed, const std::string& edit_plan_ref = "") {
    LeakageReport rep;
    rep.model_checksum = model.checksum();
    rep.edit_plan_ref = edit_plan_ref;
    rep.validation_ppl = validation_ppl(model, corpus, mask_seed);
    for (const CanaryRecord& rec : corpus.registry) {
        RecordMetrics rm;
        rm.record_id = rec.spec.id;
        rm.kind = rec.spec.kind;
        switch (rec.spec.kind) {
            case CanaryKind::DigitString: {
                ExposureResult er = exposure_detail(model, rec.spec, space);
                rm.exposure = er.exposure;
                rm.rank = er.rank;
                break;
            }
            case CanaryKind::Name:
                rm.mrr = mrr(model, rec.spec);
                break;
            case CanaryKind::Sentence:
                rm.secret_ppl = secret_ppl(model, rec.spec);
                break;
        }
        rm.memorized = is_memorized(rm, th);
        rep.records.push_back(std::move(rm));
    }
    rep.validate();
    return rep;
}

}  // namespace pnlab
