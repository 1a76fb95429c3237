#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "pnlab/model.hpp"
#include "pnlab/rng.hpp"
#include "pnlab/tokens.hpp"
#include "testutil.hpp"

namespace pnlab {
namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.n_heads = 2;
    cfg.vocab_size = 50;
    cfg.max_seq = 12;
    cfg.seed = 42;
    return cfg;
}

std::vector<size_t> tiny_input() { return {kClsTokenId, 7, 13, kMaskTokenId, 21, 34}; }

TEST(Model, ConfigValidation) {
    ModelConfig c = tiny_config();
    c.n_heads = 3;  // 16 % 3 != 0
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.d_ff = 8;  // below d_model
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.vocab_size = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_NO_THROW(tiny_config().validate());
}

TEST(Model, ConfigJsonRoundTrip) {
    ModelConfig c = tiny_config();
    c.ln_eps = 3e-6;
    c.seed = 0xfeedface;
    ModelConfig back = ModelConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
    EXPECT_EQ(back, c);
}

TEST(Model, ParameterGeometry) {
    ModelConfig cfg = tiny_config();
    Model m = Model::init(cfg);
    const auto names = param_names(cfg);
    EXPECT_EQ(names.size(), 2 + 16 * cfg.n_layers + 3);
    EXPECT_EQ(m.params.size(), names.size());
    for (size_t i = 0; i < names.size(); ++i) {
        EXPECT_EQ(m.params[i].first, names[i]);
        EXPECT_EQ(m.params[i].second.shape(), param_shape(cfg, names[i]));
    }
    EXPECT_EQ(m.param("tok_emb").shape(), (Shape{50, 16}));
    EXPECT_EQ(m.param("layer1.ffn.w1").shape(), (Shape{16, 32}));
    EXPECT_EQ(m.edit_mask.shape(), (Shape{2, 32}));
    EXPECT_EQ(m.masked_neuron_count(), 0u);
    EXPECT_THROW(m.param("layer9.ffn.w1"), std::invalid_argument);
}

TEST(Model, InitDeterministicPerSeed) {
    Model a = Model::init(tiny_config()), b = Model::init(tiny_config());
    for (size_t i = 0; i < a.params.size(); ++i) EXPECT_TRUE(a.params[i].second.same_bits(b.params[i].second));
    EXPECT_EQ(a.checksum(), b.checksum());
    ModelConfig other = tiny_config();
    other.seed = 43;
    EXPECT_NE(Model::init(other).checksum(), a.checksum());
}

TEST(Model, ForwardShapeAndPurity) {
    Model m = Model::init(tiny_config());
    auto ids = tiny_input();
    Tape t1, t2;
    Forward f1 = forward(t1, m, ids);
    Forward f2 = forward(t2, m, ids);
    EXPECT_EQ(f1.logits.shape(), (Shape{ids.size(), 50u}));
    EXPECT_TRUE(f1.logits.tensor().same_bits(f2.logits.tensor()));
}

TEST(Model, ForwardInputValidation) {
    Model m = Model::init(tiny_config());
    Tape t;
    EXPECT_THROW(forward(t, m, {}), std::invalid_argument);
    EXPECT_THROW(forward(t, m, {1, 2, 50}), std::invalid_argument);  // id out of range
    EXPECT_THROW(forward(t, m, std::vector<size_t>(13, 5)), std::invalid_argument);
    ForwardOptions opt;
    opt.interventions.push_back({NeuronId{0, 32}, 0, Intervention::Mode::Clamp, 0.0});
    EXPECT_THROW(forward(t, m, tiny_input(), opt), std::invalid_argument);
    opt.interventions[0] = {NeuronId{0, 3}, 99, Intervention::Mode::Clamp, 0.0};
    EXPECT_THROW(forward(t, m, tiny_input(), opt), std::invalid_argument);
    ForwardOptions cap;
    cap.capture_layers = {2};
    EXPECT_THROW(forward(t, m, tiny_input(), cap), std::invalid_argument);
}

TEST(Model, AttentionRowsAreProbabilityVectors) {
    Model m = Model::init(tiny_config());
    ForwardOptions opt;
    opt.capture_attention = true;
    Tape t;
    Forward f = forward(t, m, tiny_input(), opt);
    ASSERT_EQ(f.attention.size(), 2u);
    for (const auto& [layer, heads] : f.attention) {
        ASSERT_EQ(heads.size(), 2u);
        for (const Tensor& att : heads)
            for (size_t r = 0; r < att.rows(); ++r) {
                double s = 0.0;
                for (size_t c = 0; c < att.cols(); ++c) s += att.at(r, c);
                EXPECT_NEAR(s, 1.0, 1e-12);
            }
    }
}

TEST(Model, AllOnesMaskIsBitwiseNoOp) {
    Model m = Model::init(tiny_config());
    auto ids = tiny_input();
    Tape t1, t2;
    ForwardOptions ignore_mask;
    ignore_mask.respect_edit_mask = false;
    Tensor base = forward(t1, m, ids, ignore_mask).logits.tensor();
    Tensor masked = forward(t2, m, ids).logits.tensor();
    EXPECT_TRUE(base.same_bits(masked));
}

TEST(Model, ScaleZeroEqualsClampZeroBitwise) {
    Model m = Model::init(tiny_config());
    auto ids = tiny_input();
    ForwardOptions a, b;
    a.interventions.push_back({NeuronId{1, 5}, 3, Intervention::Mode::Scale, 0.0});
    b.interventions.push_back({NeuronId{1, 5}, 3, Intervention::Mode::Clamp, 0.0});
    Tape t1, t2;
    EXPECT_TRUE(forward(t1, m, ids, a).logits.tensor().same_bits(forward(t2, m, ids, b).logits.tensor()));
}

TEST(Model, ClampAtCapturedValueIsIdentity) {
    Model m = Model::init(tiny_config());
    auto ids = tiny_input();
    ForwardOptions cap;
    cap.capture_layers = {0, 1};
    Tape t0;
    Forward plain = forward(t0, m, ids, cap);
    const double beta = plain.captured.at(1).at(3, 5);

    ForwardOptions clamped;
    clamped.interventions.push_back({NeuronId{1, 5}, 3, Intervention::Mode::Clamp, beta});
    Tape t1;
    Forward f = forward(t1, m, ids, clamped);
    EXPECT_TRUE(f.logits.tensor().same_bits(plain.logits.tensor()));
    ASSERT_EQ(f.clamp_leaves.size(), 1u);
}

TEST(Model, EditMaskLocality) {
    Model m = Model::init(tiny_config());
    auto ids = tiny_input();
    ForwardOptions cap;
    cap.capture_layers = {0, 1};
    Tape t0;
    Forward before = forward(t0, m, ids, cap);

    m.edit_mask.at(1, 5) = 0.0;
    EXPECT_EQ(m.masked_neuron_count(), 1u);
    Tape t1;
    Forward after = forward(t1, m, ids, cap);

    // layers below the edit are untouched
    EXPECT_TRUE(after.captured.at(0).same_bits(before.captured.at(0)));
    // at the edited layer, only column 5 changes, and it reads zero
    const Tensor &a = after.captured.at(1), &b = before.captured.at(1);
    for (size_t r = 0; r < a.rows(); ++r)
        for (size_t c = 0; c < a.cols(); ++c) {
            if (c == 5)
                EXPECT_EQ(a.at(r, c), 0.0);
            else
                EXPECT_EQ(a.at(r, c), b.at(r, c));
        }
    // and the readout actually moved
    EXPECT_FALSE(after.logits.tensor().same_bits(before.logits.tensor()));
}

TEST(Model, TokenProbGuardsAndNormalization) {
    Model m = Model::init(tiny_config());
    auto ids = tiny_input();
    EXPECT_THROW(token_prob(m, ids, 1, 7), std::invalid_argument);   // position not masked
    EXPECT_THROW(token_prob(m, ids, 99, 7), std::invalid_argument);  // out of range
    EXPECT_THROW(token_prob(m, ids, 3, 50), std::invalid_argument);  // token out of range

    double sum = 0.0;
    Tape t;
    Forward f = forward(t, m, ids);
    Var row = t.softmax_rows(t.slice(f.logits, 3, 4, 0, 50));
    for (size_t tok = 0; tok < 50; ++tok) sum += row.value()[tok];
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_EQ(token_prob(m, ids, 3, 21), row.value()[21]);
}

TEST(Model, UntrainedTokenProbNearUniform) {
    Model m = Model::init(tiny_config());
    auto ids = tiny_input();
    const double uniform = 1.0 / 50.0;
    for (size_t tok : {0ul, 7ul, 21ul, 49ul}) {
        const double p = token_prob(m, ids, 3, tok);
        EXPECT_NEAR(p, uniform, 0.1 * uniform) << "token " << tok;
    }
}

TEST(Model, MlmLossAtInitNearLogVocab) {
    Model m = Model::init(tiny_config());
    std::vector<MaskedSequence> batch;
    Rng rng(3);
    for (int s = 0; s < 4; ++s) {
        MaskedSequence seq;
        seq.ids = {kClsTokenId, 5, kMaskTokenId, 9, kMaskTokenId, 30};
        seq.targets = {{2, rng.uniform_int(50)}, {4, rng.uniform_int(50)}};
        batch.push_back(seq);
    }
    Tape t;
    MlmLoss out = mlm_loss(t, m, batch, /*trainable=*/false);
    const double expect = std::log(50.0);
    EXPECT_NEAR(out.loss.item(), expect, 0.15 * expect);
}

TEST(Model, MlmLossValidation) {
    Model m = Model::init(tiny_config());
    Tape t;
    EXPECT_THROW(mlm_loss(t, m, {}, false), std::invalid_argument);
    MaskedSequence no_targets;
    no_targets.ids = {kClsTokenId, 5};
    Tape t2;
    EXPECT_THROW(mlm_loss(t2, m, {no_targets}, false), std::invalid_argument);
}

// Loss gradient flows to every parameter: one short gradient-descent step
// on the batch loss should reduce the batch loss.
TEST(Model, MlmLossGradientReducesLoss) {
    Model m = Model::init(tiny_config());
    std::vector<MaskedSequence> batch;
    MaskedSequence seq;
    seq.ids = {kClsTokenId, 5, kMaskTokenId, 9};
    seq.targets = {{2, 17}};
    batch.push_back(seq);

    Tape t;
    MlmLoss out = mlm_loss(t, m, batch, /*trainable=*/true);
    const double before = out.loss.item();
    Gradients g = t.backward(out.loss);
    for (auto& [name, tensor] : m.params) {
        const Tensor& grad = g.at(out.bound.params.at(name));
        for (size_t i = 0; i < tensor.size(); ++i) tensor[i] -= 0.02 * grad[i];
    }
    Tape t2;
    EXPECT_LT(mlm_loss(t2, m, batch, false).loss.item(), before);
}

}  // namespace
}  // namespace pnlab
