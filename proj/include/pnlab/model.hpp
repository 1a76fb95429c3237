#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pnlab/autodiff.hpp"
#include "pnlab/io.hpp"
#include "pnlab/rng.hpp"
#include "pnlab/tensor.hpp"
#include "pnlab/tokens.hpp"

namespace pnlab {

// A small bidirectional masked language model (pre-layer-norm transformer
// encoder, gelu FFN, LM head tied to the token embedding) whose FFN inner
// activations — the "neurons" — can be captured, clamped, scaled, and
// permanently masked per (layer, index).

struct ModelConfig {
    size_t n_layers = 4;
    size_t d_model = 128;
    size_t d_ff = 512;
    size_t n_heads = 4;
    size_t vocab_size = 2000;
    size_t max_seq = 32;
    uint64_t seed = 1;
    double ln_eps = 1e-5;

    void validate() const {
        if (n_layers == 0 || d_model == 0 || d_ff == 0 || n_heads == 0 || vocab_size == 0 || max_seq == 0)
            throw std::invalid_argument("model config: all sizes must be positive");
        if (d_model % n_heads != 0) throw std::invalid_argument("model config: d_model must be divisible by n_heads");
        if (d_ff < d_model) throw std::invalid_argument("model config: d_ff must be >= d_model");
        if (!(ln_eps > 0.0)) throw std::invalid_argument("model config: ln_eps must be positive");
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["n_layers"] = n_layers;
        j["d_model"] = d_model;
        j["d_ff"] = d_ff;
        j["n_heads"] = n_heads;
        j["vocab_size"] = vocab_size;
        j["max_seq"] = max_seq;
        j["seed"] = seed;
        j["ln_eps"] = ln_eps;
        return j;
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.n_layers = j.at("n_layers").get<size_t>();
        c.d_model = j.at("d_model").get<size_t>();
        c.d_ff = j.at("d_ff").get<size_t>();
        c.n_heads = j.at("n_heads").get<size_t>();
        c.vocab_size = j.at("vocab_size").get<size_t>();
        c.max_seq = j.at("max_seq").get<size_t>();
        c.seed = j.at("seed").get<uint64_t>();
        c.ln_eps = j.at("ln_eps").get<double>();
        c.validate();
        return c;
    }

    bool operator==(const ModelConfig&) const = default;
};

struct NeuronId {
    size_t layer = 0;
    size_t index = 0;
    friend bool operator==(const NeuronId&, const NeuronId&) = default;
    friend auto operator<=>(const NeuronId&, const NeuronId&) = default;
};

// Canonical parameter names, in serialization order.
inline std::vector<std::string> param_names(const ModelConfig& cfg) {
    std::vector<std::string> names{"tok_emb", "pos_emb"};
    for (size_t l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        for (const char* s : {"ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
                              "attn.wo", "attn.bo", "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"})
            names.push_back(p + s);
    }
    names.push_back("ln_f.g");
    names.push_back("ln_f.b");
    names.push_back("out_bias");
    return names;
}

inline Shape param_shape(const ModelConfig& cfg, const std::string& name) {
    const size_t d = cfg.d_model, f = cfg.d_ff, v = cfg.vocab_size;
    if (name == "tok_emb") return {v, d};
    if (name == "pos_emb") return {cfg.max_seq, d};
    if (name == "out_bias") return {v};
    if (name == "ln_f.g" || name == "ln_f.b") return {d};
    const auto dot = name.find('.');
    const std::string tail = name.substr(dot + 1);
    if (tail == "ln1.g" || tail == "ln1.b" || tail == "ln2.g" || tail == "ln2.b") return {d};
    if (tail == "attn.wq" || tail == "attn.wk" || tail == "attn.wv" || tail == "attn.wo") return {d, d};
    if (tail == "attn.bq" || tail == "attn.bk" || tail == "attn.bv" || tail == "attn.bo") return {d};
    if (tail == "ffn.w1") return {d, f};
    if (tail == "ffn.b1") return {f};
    if (tail == "ffn.w2") return {f, d};
    if (tail == "ffn.b2") return {d};
    throw std::invalid_argument("unknown parameter name: " + name);
}

struct Model {
    ModelConfig config;
    std::vector<std::pair<std::string, Tensor>> params;  // canonical order
    Tensor edit_mask;                                    // [L, d_ff], entries in {0,1}
    uint64_t trained_epochs = 0;

    Tensor& param(const std::string& name) {
        for (auto& [n, t] : params)
            if (n == name) return t;
        throw std::invalid_argument("no such parameter: " + name);
    }
    const Tensor& param(const std::string& name) const {
        for (const auto& [n, t] : params)
            if (n == name) return t;
        throw std::invalid_argument("no such parameter: " + name);
    }

    // Fresh deterministically initialized model. Embeddings start small so
    // the untrained predictive distribution is near uniform; layer-norm
    // gains start at one, biases at zero.
    static Model init(const ModelConfig& cfg) {
        cfg.validate();
        Model m;
        m.config = cfg;
        Rng rng = Rng::substream(cfg.seed, "model-init");
        constexpr double kEmbStd = 0.003, kWeightStd = 0.02;
        for (const std::string& name : param_names(cfg)) {
            Tensor t(param_shape(cfg, name));
            const bool is_emb = name == "tok_emb" || name == "pos_emb";
            const bool is_gain = name.size() >= 2 && name.substr(name.size() - 2) == ".g";
            const bool is_matrix = t.rank() == 2;
            if (is_emb)
                for (size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, kEmbStd);
            else if (is_matrix)
                for (size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, kWeightStd);
            else if (is_gain)
                for (size_t i = 0; i < t.size(); ++i) t[i] = 1.0;
            // biases stay zero
            m.params.emplace_back(name, std::move(t));
        }
        m.edit_mask = Tensor::full({cfg.n_layers, cfg.d_ff}, 1.0);
        return m;
    }

    bool mask_row_all_ones(size_t layer) const {
        for (size_t k = 0; k < config.d_ff; ++k)
            if (edit_mask.at(layer, k) != 1.0) return false;
        return true;
    }

    size_t masked_neuron_count() const {
        size_t n = 0;
        for (size_t i = 0; i < edit_mask.size(); ++i)
            if (edit_mask[i] == 0.0) ++n;
        return n;
    }

    // Content hash covering config, parameters, mask, and epoch counter.
    uint64_t checksum() const {
        uint64_t h = fnv1a64(config.to_json().dump());
        for (const auto& [name, t] : params) {
            h = fnv1a64(name.data(), name.size(), h);
            h = fnv1a64(t.data().data(), t.size() * sizeof(double), h);
        }
        h = fnv1a64(edit_mask.data().data(), edit_mask.size() * sizeof(double), h);
        h = fnv1a64(&trained_epochs, sizeof trained_epochs, h);
        return h;
    }
};

// ---- forward pass options ------------------------------------------------

struct Intervention {
    NeuronId neuron;
    size_t position = 0;
    enum class Mode { Clamp, Scale } mode = Mode::Clamp;
    double value = 0.0;  // clamp target or scale factor
};

struct ForwardOptions {
    std::vector<size_t> capture_layers;          // record post-mask FFN activations
    std::vector<Intervention> interventions;     // applied in list order
    bool respect_edit_mask = true;
    bool capture_attention = false;              // record per-head attention rows

    // Batched detection path: replace the entire FFN inner row at
    // (layer, position) with one leaf so a single backward pass yields
    // gradients for every neuron of that row.
    struct RowClamp {
        size_t layer = 0;
        size_t position = 0;
        std::vector<double> values;
    };
    std::vector<RowClamp> row_clamps;
};

// Model parameters bound onto a tape, shareable across several sequence
// forwards (e.g. one training batch records many forwards on one tape).
struct BoundModel {
    const Model* model = nullptr;
    Tape* tape = nullptr;
    bool trainable = false;
    std::map<std::string, Var> params;
    Var tok_emb_t;  // transposed embedding for the tied LM head, built once
};

inline BoundModel bind_model(Tape& tape, const Model& model, bool trainable) {
    model.config.validate();
    BoundModel b;
    b.model = &model;
    b.tape = &tape;
    b.trainable = trainable;
    for (const auto& [name, t] : model.params)
        b.params.emplace(name, trainable ? tape.leaf(t) : tape.constant(t));
    b.tok_emb_t = tape.transpose(b.params.at("tok_emb"));
    return b;
}

struct Forward {
    Var logits;                        // [n, V]
    std::vector<Var> clamp_leaves;     // one per Clamp intervention, in order
    std::vector<Var> row_clamp_leaves; // one per RowClamp, in order
    std::map<size_t, Tensor> captured; // layer -> [n, d_ff] post-mask activation values
    std::map<size_t, std::vector<Tensor>> attention;  // layer -> per-head [n, n] rows
};

inline Forward forward_bound(BoundModel& b, const std::vector<size_t>& ids, const ForwardOptions& opt = {}) {
    const Model& model = *b.model;
    const ModelConfig& cfg = model.config;
    Tape& tape = *b.tape;
    const size_t n = ids.size(), d = cfg.d_model, dh = d / cfg.n_heads;

    if (n == 0) throw std::invalid_argument("forward: empty input");
    if (n > cfg.max_seq)
        throw std::invalid_argument("forward: sequence length " + std::to_string(n) + " exceeds max " +
                                    std::to_string(cfg.max_seq));
    for (size_t id : ids)
        if (id >= cfg.vocab_size) throw std::invalid_argument("forward: token id " + std::to_string(id) + " out of range");
    for (const auto& iv : opt.interventions) {
        if (iv.neuron.layer >= cfg.n_layers || iv.neuron.index >= cfg.d_ff)
            throw std::invalid_argument("forward: intervention neuron out of range");
        if (iv.position >= n) throw std::invalid_argument("forward: intervention position out of range");
    }
    for (const auto& rc : opt.row_clamps) {
        if (rc.layer >= cfg.n_layers || rc.position >= n || rc.values.size() != cfg.d_ff)
            throw std::invalid_argument("forward: row clamp out of range");
    }
    for (size_t l : opt.capture_layers)
        if (l >= cfg.n_layers) throw std::invalid_argument("forward: capture layer out of range");

    auto P = [&](const std::string& name) -> const Var& { return b.params.at(name); };

    Forward out;
    Var x = tape.add(tape.row_gather(P("tok_emb"), ids),
                     tape.slice(P("pos_emb"), 0, n, 0, d));

    for (size_t l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";

        // attention sublayer
        Var u = tape.layer_norm(x, P(pre + "ln1.g"), P(pre + "ln1.b"), cfg.ln_eps);
        Var q = tape.add(tape.matmul(u, P(pre + "attn.wq")), tape.expand_rows(P(pre + "attn.bq"), n));
        Var k = tape.add(tape.matmul(u, P(pre + "attn.wk")), tape.expand_rows(P(pre + "attn.bk"), n));
        Var v = tape.add(tape.matmul(u, P(pre + "attn.wv")), tape.expand_rows(P(pre + "attn.bv"), n));
        std::vector<Var> heads;
        for (size_t hh = 0; hh < cfg.n_heads; ++hh) {
            Var qh = tape.slice(q, 0, n, hh * dh, (hh + 1) * dh);
            Var kh = tape.slice(k, 0, n, hh * dh, (hh + 1) * dh);
            Var vh = tape.slice(v, 0, n, hh * dh, (hh + 1) * dh);
            Var att = tape.softmax_rows(tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / std::sqrt(double(dh))));
            if (opt.capture_attention) out.attention[l].push_back(att.tensor());
            heads.push_back(tape.matmul(att, vh));
        }
        Var ctx = cfg.n_heads == 1 ? heads[0] : tape.concat_cols(heads);
        Var attn_out = tape.add(tape.matmul(ctx, P(pre + "attn.wo")), tape.expand_rows(P(pre + "attn.bo"), n));
        x = tape.add(x, attn_out);

        // FFN sublayer with observable inner activations
        Var u2 = tape.layer_norm(x, P(pre + "ln2.g"), P(pre + "ln2.b"), cfg.ln_eps);
        Var h = tape.gelu(tape.add(tape.matmul(u2, P(pre + "ffn.w1")), tape.expand_rows(P(pre + "ffn.b1"), n)));

        for (const auto& rc : opt.row_clamps)
            if (rc.layer == l) {
                auto [replaced, leaf] = tape.clamp_leaf_row(h, rc.position, rc.values);
                h = replaced;
                out.row_clamp_leaves.push_back(leaf);
            }
        for (const auto& iv : opt.interventions)
            if (iv.neuron.layer == l) {
                const size_t flat = iv.position * cfg.d_ff + iv.neuron.index;
                if (iv.mode == Intervention::Mode::Clamp) {
                    auto [replaced, leaf] = tape.clamp_leaf(h, flat, iv.value);
                    h = replaced;
                    out.clamp_leaves.push_back(leaf);
                } else {
                    // scaled copy of the observed activation; +0 canonicalizes -0
                    Var scaled = tape.add(tape.scale(tape.pick(h, iv.position, iv.neuron.index), iv.value),
                                          tape.constant_scalar(0.0));
                    h = tape.replace_entry(h, scaled, flat);
                }
            }
        if (opt.respect_edit_mask && !model.mask_row_all_ones(l)) {
            Tensor mask_row({cfg.d_ff}, model.edit_mask.row(l));
            h = tape.mul(h, tape.expand_rows(tape.constant(mask_row), n));
        }
        for (size_t cl : opt.capture_layers)
            if (cl == l) out.captured.emplace(l, h.tensor());

        Var ffn_out = tape.add(tape.matmul(h, P(pre + "ffn.w2")), tape.expand_rows(P(pre + "ffn.b2"), n));
        x = tape.add(x, ffn_out);
    }

    Var hf = tape.layer_norm(x, P("ln_f.g"), P("ln_f.b"), cfg.ln_eps);
    out.logits = tape.add(tape.matmul(hf, b.tok_emb_t), tape.expand_rows(P("out_bias"), n));
    return out;
}

inline Forward forward(Tape& tape, const Model& model, const std::vector<size_t>& ids,
                       const ForwardOptions& opt = {}) {
    BoundModel b = bind_model(tape, model, /*trainable=*/false);
    return forward_bound(b, ids, opt);
}

// Probability of `token_id` at a masked position. The position must actually
// hold the mask token — reading a probability at an unmasked position would
// let the answer leak into the input.
inline double token_prob(const Model& model, const std::vector<size_t>& ids, size_t position, size_t token_id,
                         const ForwardOptions& opt = {}) {
    if (position >= ids.size()) throw std::invalid_argument("token_prob: position out of range");
    if (ids[position] != kMaskTokenId) throw std::invalid_argument("token_prob: position is not masked");
    if (token_id >= model.config.vocab_size) throw std::invalid_argument("token_prob: token id out of range");
    Tape tape;
    Forward f = forward(tape, model, ids, opt);
    Var row = tape.softmax_rows(tape.slice(f.logits, position, position + 1, 0, model.config.vocab_size));
    return row.value()[token_id];
}

// ---- masked-LM loss ------------------------------------------------------

struct MaskedSequence {
    std::vector<size_t> ids;                            // with mask tokens in place
    std::vector<std::pair<size_t, size_t>> targets;     // (position, original token id)
};

struct MlmLoss {
    Var loss;
    BoundModel bound;
};

// Mean cross-entropy over every masked position in the batch, recorded on
// one tape (so one backward yields parameter gradients for the whole batch).
inline MlmLoss mlm_loss(Tape& tape, const Model& model, const std::vector<MaskedSequence>& batch, bool trainable) {
    if (batch.empty()) throw std::invalid_argument("mlm_loss: empty batch");
    size_t total_targets = 0;
    for (const auto& seq : batch) {
        if (seq.targets.empty()) throw std::invalid_argument("mlm_loss: sequence with no masked positions");
        total_targets += seq.targets.size();
    }
    MlmLoss out{Var{}, bind_model(tape, model, trainable)};
    for (size_t s = 0; s < batch.size(); ++s) {
        const auto& seq = batch[s];
        Forward f = forward_bound(out.bound, seq.ids);
        std::vector<size_t> positions, golds;
        for (const auto& [pos, gold] : seq.targets) {
            if (pos >= seq.ids.size()) throw std::invalid_argument("mlm_loss: target position out of range");
            positions.push_back(pos);
            golds.push_back(gold);
        }
        Var rows = tape.row_gather(f.logits, positions);
        Var ce = tape.cross_entropy(tape.softmax_rows(rows), golds);
        Var weighted = tape.scale(ce, double(seq.targets.size()) / double(total_targets));
        out.loss = s == 0 ? weighted : tape.add(out.loss, weighted);
    }
    return out;
}

}  // namespace pnlab
