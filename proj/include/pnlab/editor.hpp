#pragma once

// Edit-plan construction and application.
//
// A plan names the neurons whose activations get permanently zeroed (via the
// model's persistent edit mask). Plans come from three selectors:
//   * aggregate  — PND: each record's attribution matrix casts one vote for
//     each of its top-n neurons; neurons are ranked by votes, then summed
//     ballot score, then (layer, index).
//   * kn_select  — KN baseline: attribution restricted to the record's FIRST
//     secret token only (single-token localization).
//   * random_select — seeded uniform draw without replacement.

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pnlab/detector.hpp"
#include "pnlab/io.hpp"
#include "pnlab/model.hpp"

namespace pnlab {

enum class SelectionMethod { PND, KN, Random };

inline const char* selection_method_name(SelectionMethod m) {
    switch (m) {
        case SelectionMethod::PND: return "PND";
        case SelectionMethod::KN: return "KN";
        case SelectionMethod::Random: return "Random";
    }
    throw std::invalid_argument("selection_method_name: bad method");
}

inline SelectionMethod selection_method_from_name(const std::string& s) {
    if (s == "PND") return SelectionMethod::PND;
    if (s == "KN") return SelectionMethod::KN;
    if (s == "Random") return SelectionMethod::Random;
    throw std::invalid_argument("selection_method_from_name: unknown method \"" + s + "\"");
}

struct EditPlan {
    SelectionMethod method = SelectionMethod::PND;
    size_t z = 0;
    size_t ballot = 0;                     // per-record ballot size (0 where not applicable)
    std::vector<std::string> record_ids;   // records whose matrices fed the plan
    std::vector<NeuronId> neurons;         // exactly z, no duplicates
    std::vector<size_t> votes;             // aligned with neurons (empty for Random)
    std::vector<double> scores;            // aligned with neurons (empty for Random)
    std::vector<NeuronId> difference_vs_pnd;  // kn_select only: KN plan minus full-secret plan

    void validate() const {
        if (neurons.size() != z) throw std::invalid_argument("EditPlan: neuron count does not equal z");
        if (!votes.empty() && votes.size() != neurons.size())
            throw std::invalid_argument("EditPlan: votes not aligned with neurons");
        if (!scores.empty() && scores.size() != neurons.size())
            throw std::invalid_argument("EditPlan: scores not aligned with neurons");
        std::set<std::pair<size_t, size_t>> seen;
        for (const NeuronId& n : neurons)
            if (!seen.insert({n.layer, n.index}).second)
                throw std::invalid_argument("EditPlan: duplicate neuron in plan");
    }

    nlohmann::ordered_json to_json() const {
        validate();
        nlohmann::ordered_json j;
        j["method"] = selection_method_name(method);
        j["z"] = z;
        j["ballot"] = ballot;
        j["record_ids"] = record_ids;
        nlohmann::ordered_json ns = nlohmann::ordered_json::array();
        for (const NeuronId& n : neurons) ns.push_back({n.layer, n.index});
        j["neurons"] = std::move(ns);
        j["votes"] = votes;
        j["scores"] = scores;
        nlohmann::ordered_json diff = nlohmann::ordered_json::array();
        for (const NeuronId& n : difference_vs_pnd) diff.push_back({n.layer, n.index});
        j["difference_vs_pnd"] = std::move(diff);
        return j;
    }

    static EditPlan from_json(const nlohmann::json& j) {
        EditPlan p;
        p.method = selection_method_from_name(j.at("method").get<std::string>());
        p.z = j.at("z").get<size_t>();
        p.ballot = j.at("ballot").get<size_t>();
        p.record_ids = j.at("record_ids").get<std::vector<std::string>>();
        for (const auto& e : j.at("neurons"))
            p.neurons.push_back(NeuronId{e.at(0).get<size_t>(), e.at(1).get<size_t>()});
        p.votes = j.at("votes").get<std::vector<size_t>>();
        p.scores = j.at("scores").get<std::vector<double>>();
        for (const auto& e : j.at("difference_vs_pnd"))
            p.difference_vs_pnd.push_back(NeuronId{e.at(0).get<size_t>(), e.at(1).get<size_t>()});
        p.validate();
        return p;
    }
};

inline void save_edit_plan(const EditPlan& plan, const std::string& path) {
    write_file(path, plan.to_json().dump(2) + "\n");
}

inline EditPlan load_edit_plan(const std::string& path) {
    try {
        return EditPlan::from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::exception&) {
        throw std::runtime_error("load_edit_plan: malformed plan file");
    }
}

// Voting aggregation across records. Every matrix casts one vote for each of
// its top-`per_record_ballot` neurons; candidates are ranked by (votes desc,
// summed ballot score desc, (layer, index) asc) and the top z are returned.
inline EditPlan aggregate(const std::vector<AttributionMatrix>& matrices, size_t z,
                          size_t per_record_ballot,
                          SelectionMethod method = SelectionMethod::PND) {
    if (matrices.empty()) throw std::invalid_argument("aggregate: empty matrix list");
    if (per_record_ballot < 1) throw std::invalid_argument("aggregate: ballot size must be >= 1");
    const Shape shape = matrices[0].scores.shape();
    if (shape.size() != 2) throw std::invalid_argument("aggregate: scores must be layer x neuron grids");
    const size_t d_ff = shape[1], total = numel(shape);
    if (z > total) throw std::invalid_argument("aggregate: z exceeds neuron count");

    EditPlan plan;
    plan.method = method;
    plan.z = z;
    plan.ballot = per_record_ballot;

    std::vector<size_t> vote_count(total, 0);
    std::vector<double> score_sum(total, 0.0);
    for (const AttributionMatrix& m : matrices) {
        if (m.scores.shape() != shape)
            throw std::invalid_argument("aggregate: matrices disagree on grid shape");
        plan.record_ids.push_back(m.record_id);
        for (const NeuronId& n : top_z(m, std::min(per_record_ballot, total))) {
            const size_t flat = n.layer * d_ff + n.index;
            vote_count[flat] += 1;
            score_sum[flat] += m.scores.at(n.layer, n.index);
        }
    }
    if (z == 0) return plan;

    std::vector<size_t> candidates;
    for (size_t flat = 0; flat < total; ++flat)
        if (vote_count[flat] > 0) candidates.push_back(flat);
    if (candidates.size() < z)
        throw std::invalid_argument("aggregate: ballots produced fewer than z distinct neurons; increase the per-record ballot");

    std::sort(candidates.begin(), candidates.end(), [&](size_t a, size_t b) {
        if (vote_count[a] != vote_count[b]) return vote_count[a] > vote_count[b];
        if (score_sum[a] != score_sum[b]) return score_sum[a] > score_sum[b];
        return a < b;  // flat order == (layer, index) ascending
    });
    for (size_t i = 0; i < z; ++i) {
        const size_t flat = candidates[i];
        plan.neurons.push_back(NeuronId{flat / d_ff, flat % d_ff});
        plan.votes.push_back(vote_count[flat]);
        plan.scores.push_back(score_sum[flat]);
    }
    plan.validate();
    return plan;
}

// Returns a copy of the model whose edit mask zeroes the plan's neurons.
// Parameters are untouched; applying the same plan twice is a no-op.
inline Model apply_edit(const Model& model, const EditPlan& plan) {
    plan.validate();
    for (const NeuronId& n : plan.neurons)
        if (n.layer >= model.config.n_layers || n.index >= model.config.d_ff)
            throw std::invalid_argument("apply_edit: plan neuron out of range");
    Model out = model;
    for (const NeuronId& n : plan.neurons) out.edit_mask.at(n.layer, n.index) = 0.0;
    return out;
}

// Single-token baseline: attribution restricted to the record's first secret
// token; top-z by that single-token score. The provenance records how the
// selection differs from the full-secret plan at the same z.
inline EditPlan kn_select(const Model& model, const CanarySpec& record, size_t z, size_t m = 20) {
    AttributionMatrix full = attribute_all(model, record, m, /*with_breakdown=*/true);

    EditPlan plan;
    plan.method = SelectionMethod::KN;
    plan.z = z;
    plan.ballot = z;
    plan.record_ids = {record.id};
    if (z == 0) return plan;

    AttributionMatrix first_token;
    first_token.record_id = record.id;
    first_token.m = m;
    first_token.model_checksum = full.model_checksum;
    first_token.scores = full.breakdown[0];

    std::vector<NeuronId> kn_neurons = top_z(first_token, z);
    std::vector<NeuronId> pnd_neurons = top_z(full, z);
    std::set<std::pair<size_t, size_t>> pnd_set;
    for (const NeuronId& n : pnd_neurons) pnd_set.insert({n.layer, n.index});

    for (const NeuronId& n : kn_neurons) {
        plan.neurons.push_back(n);
        plan.votes.push_back(1);
        plan.scores.push_back(first_token.scores.at(n.layer, n.index));
        if (!pnd_set.count({n.layer, n.index})) plan.difference_vs_pnd.push_back(n);
    }
    plan.validate();
    return plan;
}

// Seeded uniform baseline: z distinct neurons drawn without replacement.
inline EditPlan random_select(const ModelConfig& geometry, size_t z, uint64_t seed) {
    const size_t total = geometry.n_layers * geometry.d_ff;
    if (z > total) throw std::invalid_argument("random_select: z exceeds neuron count");

    EditPlan plan;
    plan.method = SelectionMethod::Random;
    plan.z = z;
    Rng rng = Rng::substream(seed, "random-neurons");
    for (size_t flat : rng.sample_without_replacement(total, z))
        plan.neurons.push_back(NeuronId{flat / geometry.d_ff, flat % geometry.d_ff});
    plan.validate();
    return plan;
}

}  // namespace pnlab
