#pragma once

// Deterministic masked-language-model training. All randomness (epoch
// shuffles, mask placement) comes from named substreams of the config seed,
// so a fixed seed reproduces the exact loss trajectory and final weights.

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pnlab/corpus.hpp"
#include "pnlab/io.hpp"
#include "pnlab/model.hpp"
#include "pnlab/rng.hpp"

namespace pnlab {

struct TrainConfig {
    size_t epochs = 10;
    size_t batch_size = 16;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double mask_prob = 0.15;
    uint64_t seed = 1;
    std::vector<size_t> checkpoint_epochs = {1, 3, 6, 9};

    void validate() const {
        if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
        if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be positive");
        if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
            throw std::invalid_argument("TrainConfig: Adam betas must lie in (0,1)");
        if (!(adam_eps > 0.0)) throw std::invalid_argument("TrainConfig: adam_eps must be positive");
        if (!(mask_prob > 0.0 && mask_prob < 1.0))
            throw std::invalid_argument("TrainConfig: mask_prob must lie in (0,1)");
        for (size_t e : checkpoint_epochs)
            if (e == 0) throw std::invalid_argument("TrainConfig: checkpoint epochs are 1-based");
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["epochs"] = epochs;
        j["batch_size"] = batch_size;
        j["learning_rate"] = learning_rate;
        j["beta1"] = beta1;
        j["beta2"] = beta2;
        j["adam_eps"] = adam_eps;
        j["mask_prob"] = mask_prob;
        j["seed"] = seed;
        j["checkpoint_epochs"] = checkpoint_epochs;
        return j;
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.epochs = j.at("epochs").get<size_t>();
        c.batch_size = j.at("batch_size").get<size_t>();
        c.learning_rate = j.at("learning_rate").get<double>();
        c.beta1 = j.at("beta1").get<double>();
        c.beta2 = j.at("beta2").get<double>();
        c.adam_eps = j.at("adam_eps").get<double>();
        c.mask_prob = j.at("mask_prob").get<double>();
        c.seed = j.at("seed").get<uint64_t>();
        c.checkpoint_epochs = j.at("checkpoint_epochs").get<std::vector<size_t>>();
        c.validate();
        return c;
    }
};

struct LossEntry {
    size_t epoch = 0;  // 1-based
    size_t step = 0;   // 0-based within the epoch
    double loss = 0.0;
};

struct TrainResult {
    Model model;  // final model, or the last epoch-end state before divergence
    bool diverged = false;
    size_t completed_epochs = 0;
    std::vector<std::pair<size_t, Model>> checkpoints;  // (epoch, snapshot)
    std::vector<LossEntry> loss_log;
};

// Masks a single line: every position except 0 (the [cls] anchor) is replaced
// by the mask token with probability mask_prob; if no position gets chosen,
// one is forced so the sequence always contributes a prediction target.
inline MaskedSequence mask_line(const std::vector<size_t>& line, double mask_prob, Rng& rng) {
    if (line.size() < 2)
        throw std::invalid_argument("mask_line: sequence has no maskable position");
    MaskedSequence seq;
    seq.ids = line;
    for (size_t pos = 1; pos < line.size(); ++pos) {
        if (rng.uniform() < mask_prob) {
            seq.ids[pos] = kMaskTokenId;
            seq.targets.emplace_back(pos, line[pos]);
        }
    }
    if (seq.targets.empty()) {
        size_t pos = 1 + static_cast<size_t>(rng.uniform_int(line.size() - 1));
        seq.ids[pos] = kMaskTokenId;
        seq.targets.emplace_back(pos, line[pos]);
    }
    return seq;
}

namespace detail {

class AdamState {
 public:
    explicit AdamState(const Model& m) {
        for (const auto& [name, tensor] : m.params)
            state_.emplace(name, std::make_pair(Tensor::zeros(tensor.shape()), Tensor::zeros(tensor.shape())));
    }

    void apply(Model& m, const std::map<std::string, Tensor>& grads, const TrainConfig& cfg) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg.beta2, double(t_));
        for (auto& [name, tensor] : m.params) {
            const Tensor& g = grads.at(name);
            auto& [mom, vel] = state_.at(name);
            double* p = tensor.data().data();
            double* mp = mom.data().data();
            double* vp = vel.data().data();
            const double* gp = g.data().data();
            for (size_t i = 0; i < tensor.size(); ++i) {
                mp[i] = cfg.beta1 * mp[i] + (1.0 - cfg.beta1) * gp[i];
                vp[i] = cfg.beta2 * vp[i] + (1.0 - cfg.beta2) * gp[i] * gp[i];
                const double mhat = mp[i] / bc1;
                const double vhat = vp[i] / bc2;
                p[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
            }
        }
    }

 private:
    std::map<std::string, std::pair<Tensor, Tensor>> state_;
    uint64_t t_ = 0;
};

}  // namespace detail

inline TrainResult train(const Model& init, const Corpus& corpus, const TrainConfig& cfg) {
    cfg.validate();
    if (init.config.vocab_size != corpus.vocab.size())
        throw std::invalid_argument("train: model vocab size does not match corpus vocab");
    if (corpus.max_seq > init.config.max_seq)
        throw std::invalid_argument("train: corpus sequences may exceed model max_seq");
    if (corpus.train.empty()) throw std::invalid_argument("train: empty training set");

    TrainResult result;
    result.model = init;
    Model last_good = init;

    std::vector<size_t> order(corpus.train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    detail::AdamState adam(result.model);

    for (size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng order_rng = Rng::substream(cfg.seed, "epoch-order", epoch);
        order_rng.shuffle(order);
        Rng mask_rng = Rng::substream(cfg.seed, "mask", epoch);

        size_t step = 0;
        bool epoch_ok = true;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t stop = std::min(order.size(), start + cfg.batch_size);
            std::vector<MaskedSequence> batch;
            batch.reserve(stop - start);
            for (size_t i = start; i < stop; ++i) {
                const auto& line = corpus.train[order[i]];
                if (line.size() < 2) continue;  // nothing maskable
                batch.push_back(mask_line(line, cfg.mask_prob, mask_rng));
            }
            if (batch.empty()) continue;

            double loss_value = 0.0;
            try {
                Tape tape;
                MlmLoss episode = mlm_loss(tape, result.model, batch, /*trainable=*/true);
                loss_value = episode.loss.item();
                if (!std::isfinite(loss_value)) throw std::domain_error("non-finite loss");
                Gradients grads = tape.backward(episode.loss);
                std::map<std::string, Tensor> by_name;
                for (const auto& [name, var] : episode.bound.params)
                    by_name.emplace(name, grads.at(var));
                adam.apply(result.model, by_name, cfg);
            } catch (const std::domain_error&) {
                // Divergence: numeric overflow or collapsed probabilities.
                result.model = last_good;
                result.diverged = true;
                epoch_ok = false;
                break;
            }
            result.loss_log.push_back({epoch, step, loss_value});
            ++step;
        }
        if (!epoch_ok) break;

        result.completed_epochs = epoch;
        result.model.trained_epochs = init.trained_epochs + epoch;
        last_good = result.model;
        for (size_t ce : cfg.checkpoint_epochs) {
            if (ce == epoch) {
                result.checkpoints.emplace_back(epoch, result.model);
                break;
            }
        }
    }
    return result;
}

inline std::string loss_log_csv(const std::vector<LossEntry>& log) {
    std::string out = "epoch,step,loss\n";
    for (const auto& e : log) {
        out += std::to_string(e.epoch);
        out += ',';
        out += std::to_string(e.step);
        out += ',';
        out += format_double(e.loss);
        out += '\n';
    }
    return out;
}

inline double mean_epoch_loss(const std::vector<LossEntry>& log, size_t epoch) {
    double sum = 0.0;
    size_t n = 0;
    for (const auto& e : log)
        if (e.epoch == epoch) { sum += e.loss; ++n; }
    if (n == 0) throw std::invalid_argument("mean_epoch_loss: no entries for epoch");
    return sum / double(n);
}

}  // namespace pnlab
