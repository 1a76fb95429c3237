#pragma once

// Privacy-neuron detection.
//
// For a protected record the detector measures, for every FFN inner neuron,
// how much that neuron's activation contributes to the model reproducing the
// record's secret tokens at their masked positions. The contribution is a
// path integral approximated by an m-step right Riemann sum: the activation
// row at the prediction site is scaled to (j/m) of its observed value and the
// probability gradient with respect to the activation is read at each step.
//
// Two per-neuron readings are offered:
//   * attribution_score: the gradient coordinate along the joint path where
//     the whole activation row scales together — exactly the quantity
//     attribute_all accumulates (batched: one backward per step covers every
//     neuron of a layer).
//   * attribution_score_isolated: only the one neuron moves along 0 -> beta,
//     the rest keep their natural values. This is the one-dimensional path
//     whose Riemann sum converges to P(beta) - P(0) by the fundamental
//     theorem of calculus, and is used to validate completeness.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pnlab/corpus.hpp"
#include "pnlab/io.hpp"
#include "pnlab/model.hpp"
#include "pnlab/tensor.hpp"

namespace pnlab {

struct AttributionMatrix {
    std::string record_id;
    size_t m = 20;
    uint64_t model_checksum = 0;
    Tensor scores;                  // [L, d_ff]
    std::vector<Tensor> breakdown;  // per secret token, [L, d_ff]; empty unless requested

    bool has_breakdown() const { return !breakdown.empty(); }
};

namespace detail {

// Differentiable probability of `token_id` at `position`, same arithmetic as
// token_prob (softmax over the sliced logit row), as a [1]-shaped node.
inline Var prob_node(Tape& tape, const Forward& f, size_t position, size_t token_id, size_t vocab) {
    Var row = tape.softmax_rows(tape.slice(f.logits, position, position + 1, 0, vocab));
    return tape.pick(row, 0, token_id);
}

// Observed activation rows: beta[l][i][k] is neuron (l,k)'s post-mask value at
// the i-th mask position of the probe.
inline std::vector<std::vector<std::vector<double>>> capture_activation_rows(const Model& model,
                                                                             const LeakProbe& probe) {
    const size_t L = model.config.n_layers, d_ff = model.config.d_ff;
    ForwardOptions opt;
    for (size_t l = 0; l < L; ++l) opt.capture_layers.push_back(l);
    Tape tape;
    Forward f = forward(tape, model, probe.ids, opt);
    std::vector<std::vector<std::vector<double>>> beta(L);
    for (size_t l = 0; l < L; ++l) {
        const Tensor& acts = f.captured.at(l);
        beta[l].reserve(probe.targets.size());
        for (const auto& [pos, gold] : probe.targets) {
            std::vector<double> row(d_ff);
            for (size_t k = 0; k < d_ff; ++k) row[k] = acts.at(pos, k);
            beta[l].push_back(std::move(row));
        }
    }
    return beta;
}

// One batched detection episode: activation row of `layer` at the i-th mask
// position replaced by (j/m) * beta, gradient of P(y_i) with respect to the
// whole replaced row.
inline Tensor episode_row_gradient(const Model& model, const LeakProbe& probe,
                                   const std::vector<double>& beta_row, size_t layer, size_t target_idx,
                                   size_t j, size_t m) {
    const auto& [pos, gold] = probe.targets[target_idx];
    const double t = double(j) / double(m);
    ForwardOptions opt;
    ForwardOptions::RowClamp rc;
    rc.layer = layer;
    rc.position = pos;
    rc.values.resize(beta_row.size());
    for (size_t k = 0; k < beta_row.size(); ++k) rc.values[k] = t * beta_row[k];
    opt.row_clamps.push_back(std::move(rc));

    Tape tape;
    Forward f = forward(tape, model, probe.ids, opt);
    Var p = prob_node(tape, f, pos, gold, model.config.vocab_size);
    Gradients grads = tape.backward(p);
    return grads.at(f.row_clamp_leaves[0]);
}

}  // namespace detail

// Probability that the model reproduces the record's full secret: the product
// of per-token probabilities at the simultaneously masked positions, read
// from one forward pass (the prediction sites are independent given the
// masked input).
inline double sequence_leak_prob(const Model& model, const CanarySpec& record,
                                 const ForwardOptions& opt = {}) {
    LeakProbe probe = leak_probe(record);
    Tape tape;
    Forward f = forward(tape, model, probe.ids, opt);
    double p = 1.0;
    for (const auto& [pos, gold] : probe.targets) {
        if (gold >= model.config.vocab_size)
            throw std::invalid_argument("sequence_leak_prob: secret token id out of range");
        Var row = tape.softmax_rows(tape.slice(f.logits, pos, pos + 1, 0, model.config.vocab_size));
        p *= row.value()[gold];
    }
    return p;
}

// Full attribution grid: entry (l,k) accumulates, over every secret token i
// and Riemann step j (in fixed (i,j,l) episode order),
//     (beta_i[k]/m) * dP(y_i)/d(activation k at token i's position),
// with the gradient taken where the whole row is scaled to (j/m)*beta_i.
inline AttributionMatrix attribute_all(const Model& model, const CanarySpec& record, size_t m = 20,
                                       bool with_breakdown = false) {
    if (m < 1) throw std::invalid_argument("attribute_all: approximation steps m must be >= 1");
    const size_t L = model.config.n_layers, d_ff = model.config.d_ff;
    LeakProbe probe = leak_probe(record);
    auto beta = detail::capture_activation_rows(model, probe);

    std::vector<Tensor> per_token(probe.targets.size(), Tensor::zeros({L, d_ff}));
    for (size_t i = 0; i < probe.targets.size(); ++i) {
        for (size_t j = 1; j <= m; ++j) {
            for (size_t l = 0; l < L; ++l) {
                Tensor g = detail::episode_row_gradient(model, probe, beta[l][i], l, i, j, m);
                for (size_t k = 0; k < d_ff; ++k)
                    per_token[i].at(l, k) += (beta[l][i][k] / double(m)) * g[k];
            }
        }
    }

    AttributionMatrix out;
    out.record_id = record.id;
    out.m = m;
    out.model_checksum = model.checksum();
    out.scores = Tensor::zeros({L, d_ff});
    for (size_t i = 0; i < per_token.size(); ++i)
        for (size_t e = 0; e < out.scores.size(); ++e) out.scores[e] += per_token[i][e];
    require_finite(out.scores, "attribution scores");
    if (with_breakdown) out.breakdown = std::move(per_token);
    return out;
}

// Per-neuron reading of the same quantity attribute_all computes for (l,k):
// identical episodes restricted to the neuron's layer, identical accumulation
// order, so it agrees with the batched grid bitwise.
inline double attribution_score(const Model& model, const CanarySpec& record, NeuronId neuron,
                                size_t m = 20) {
    if (m < 1) throw std::invalid_argument("attribution_score: approximation steps m must be >= 1");
    if (neuron.layer >= model.config.n_layers || neuron.index >= model.config.d_ff)
        throw std::invalid_argument("attribution_score: neuron out of range");
    LeakProbe probe = leak_probe(record);
    auto beta = detail::capture_activation_rows(model, probe);

    double total = 0.0;
    for (size_t i = 0; i < probe.targets.size(); ++i) {
        double partial = 0.0;
        for (size_t j = 1; j <= m; ++j) {
            Tensor g = detail::episode_row_gradient(model, probe, beta[neuron.layer][i], neuron.layer, i, j, m);
            partial += (beta[neuron.layer][i][neuron.index] / double(m)) * g[neuron.index];
        }
        total += partial;
    }
    return total;
}

// One-dimensional variant: only this neuron's activation is clamped to
// (j/m)*beta at the prediction site; every other neuron keeps its natural
// value. Its m -> infinity limit is P(clamped at beta) - P(clamped at 0) by
// the fundamental theorem of calculus.
inline double attribution_score_isolated(const Model& model, const CanarySpec& record, NeuronId neuron,
                                         size_t m = 20) {
    if (m < 1) throw std::invalid_argument("attribution_score_isolated: approximation steps m must be >= 1");
    if (neuron.layer >= model.config.n_layers || neuron.index >= model.config.d_ff)
        throw std::invalid_argument("attribution_score_isolated: neuron out of range");
    LeakProbe probe = leak_probe(record);
    auto beta = detail::capture_activation_rows(model, probe);

    double total = 0.0;
    for (size_t i = 0; i < probe.targets.size(); ++i) {
        const auto& [pos, gold] = probe.targets[i];
        const double beta_i = beta[neuron.layer][i][neuron.index];
        double partial = 0.0;
        for (size_t j = 1; j <= m; ++j) {
            Intervention iv;
            iv.neuron = neuron;
            iv.position = pos;
            iv.mode = Intervention::Mode::Clamp;
            iv.value = (double(j) / double(m)) * beta_i;
            ForwardOptions opt;
            opt.interventions.push_back(iv);
            Tape tape;
            Forward f = forward(tape, model, probe.ids, opt);
            Var p = detail::prob_node(tape, f, pos, gold, model.config.vocab_size);
            Gradients grads = tape.backward(p);
            partial += (beta_i / double(m)) * grads.at(f.clamp_leaves[0])[0];
        }
        total += partial;
    }
    return total;
}

// Top-z neurons by descending score; ties broken by (layer, index) ascending.
inline std::vector<NeuronId> top_z(const AttributionMatrix& matrix, size_t z) {
    const Shape& s = matrix.scores.shape();
    if (s.size() != 2) throw std::invalid_argument("top_z: scores must be a layer x neuron grid");
    const size_t total = matrix.scores.size();
    if (z < 1 || z > total) throw std::invalid_argument("top_z: z out of range [1, " + std::to_string(total) + "]");

    std::vector<NeuronId> order(total);
    for (size_t l = 0; l < s[0]; ++l)
        for (size_t k = 0; k < s[1]; ++k) order[l * s[1] + k] = NeuronId{l, k};
    std::sort(order.begin(), order.end(), [&](const NeuronId& a, const NeuronId& b) {
        const double sa = matrix.scores.at(a.layer, a.index);
        const double sb = matrix.scores.at(b.layer, b.index);
        if (sa != sb) return sa > sb;
        return a < b;
    });
    order.resize(z);
    return order;
}

// ---------------------------------------------------------------------------
// Persistence: binary grid with a JSON header, same container discipline as
// the model checkpoint (magic, version, header, payload, trailing checksum).
// ---------------------------------------------------------------------------

inline constexpr char kAttributionMagic[9] = "PNLATTR1";
inline constexpr uint32_t kAttributionVersion = 1;

inline std::string serialize_attribution(const AttributionMatrix& a) {
    if (a.scores.rank() != 2) throw std::invalid_argument("attribution: scores must be 2-D");
    nlohmann::ordered_json header;
    header["record_id"] = a.record_id;
    header["m"] = a.m;
    header["model_checksum"] = to_hex(a.model_checksum);
    header["layers"] = a.scores.shape()[0];
    header["d_ff"] = a.scores.shape()[1];
    header["n_tokens"] = a.breakdown.size();
    const std::string hj = header.dump();

    std::string out(kAttributionMagic, 8);
    append_raw<uint32_t>(out, kAttributionVersion);
    append_raw<uint32_t>(out, static_cast<uint32_t>(hj.size()));
    out += hj;
    out.append(reinterpret_cast<const char*>(a.scores.data().data()), a.scores.size() * sizeof(double));
    for (const Tensor& t : a.breakdown) {
        if (t.shape() != a.scores.shape())
            throw std::invalid_argument("attribution: breakdown shape does not match scores");
        out.append(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(double));
    }
    append_raw<uint64_t>(out, fnv1a64(out.data(), out.size()));
    return out;
}

inline AttributionMatrix deserialize_attribution(const std::string& bytes) {
    if (bytes.size() < 8 + sizeof(uint32_t) * 2 + sizeof(uint64_t) ||
        bytes.compare(0, 8, kAttributionMagic, 8) != 0)
        throw std::runtime_error("attribution: not an attribution file");
    const uint64_t stored = [&] {
        size_t off = bytes.size() - sizeof(uint64_t);
        return read_raw<uint64_t>(bytes, off);
    }();
    if (fnv1a64(bytes.data(), bytes.size() - sizeof(uint64_t)) != stored)
        throw std::runtime_error("attribution: checksum mismatch, file is corrupted");

    size_t off = 8;
    const uint32_t version = read_raw<uint32_t>(bytes, off);
    if (version != kAttributionVersion)
        throw std::runtime_error("attribution: format version " + std::to_string(version) + " unsupported");
    const uint32_t hlen = read_raw<uint32_t>(bytes, off);
    if (off + hlen > bytes.size()) throw std::runtime_error("attribution: truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(off, hlen));
    } catch (const nlohmann::json::exception&) {
        throw std::runtime_error("attribution: malformed header");
    }
    off += hlen;

    AttributionMatrix a;
    a.record_id = header.at("record_id").get<std::string>();
    a.m = header.at("m").get<size_t>();
    a.model_checksum = std::stoull(header.at("model_checksum").get<std::string>(), nullptr, 16);
    const size_t L = header.at("layers").get<size_t>();
    const size_t d_ff = header.at("d_ff").get<size_t>();
    const size_t n_tokens = header.at("n_tokens").get<size_t>();
    if (L == 0 || d_ff == 0) throw std::runtime_error("attribution: empty grid");

    auto read_grid = [&]() {
        const size_t count = L * d_ff;
        if (off + count * sizeof(double) > bytes.size()) throw std::runtime_error("attribution: truncated payload");
        std::vector<double> data(count);
        std::memcpy(data.data(), bytes.data() + off, count * sizeof(double));
        off += count * sizeof(double);
        Tensor t(Shape{L, d_ff}, std::move(data));
        if (!t.all_finite()) throw std::runtime_error("attribution: non-finite entries");
        return t;
    };
    a.scores = read_grid();
    for (size_t i = 0; i < n_tokens; ++i) a.breakdown.push_back(read_grid());
    if (off + sizeof(uint64_t) != bytes.size()) throw std::runtime_error("attribution: trailing bytes");
    return a;
}

inline void save_attribution(const AttributionMatrix& a, const std::string& path) {
    write_file(path, serialize_attribution(a));
}

inline AttributionMatrix load_attribution(const std::string& path) {
    return deserialize_attribution(read_file(path));
}

}  // namespace pnlab
