#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "pnlab/editor.hpp"
#include "pnlab/trainer.hpp"
#include "testutil.hpp"

using namespace pnlab;

namespace {

constexpr size_t kTinyVocab = 600;

ModelConfig tiny_model_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.n_heads = 2;
    cfg.vocab_size = kTinyVocab;
    cfg.max_seq = 32;
    cfg.seed = 5;
    return cfg;
}

struct TinyLab {
    Corpus corpus;
    Model trained;
};

const TinyLab& tiny_lab() {
    static const TinyLab* lab = [] {
        auto* t = new TinyLab;
        Lexicon lex = default_lexicon(kTinyVocab);
        CanarySetConfig ccfg;
        ccfg.n_digit = 2;
        ccfg.n_name = 1;
        ccfg.n_sentence = 1;
        ccfg.fixed_frequency = 6;
        t->corpus = generate(lex, 31, 48, 12, make_canaries(lex, 31, ccfg));
        TrainConfig tc;
        tc.epochs = 16;
        tc.batch_size = 4;
        tc.seed = 31;
        TrainResult r = train(Model::init(tiny_model_config()), t->corpus, tc);
        if (r.diverged) throw std::runtime_error("tiny_lab: training diverged");
        t->trained = std::move(r.model);
        return t;
    }();
    return *lab;
}

const CanarySpec& record_of(CanaryKind kind) {
    for (const auto& r : tiny_lab().corpus.registry)
        if (r.spec.kind == kind) return r.spec;
    throw std::runtime_error("no record of requested kind");
}

// Hand-built 2x3 score grid; neuron (l, k) has the given value.
AttributionMatrix grid(const std::string& id, std::initializer_list<double> six) {
    AttributionMatrix m;
    m.record_id = id;
    m.m = 1;
    m.scores = Tensor({2, 3}, std::vector<double>(six));
    return m;
}

bool same_bits(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (size_t i = 0; i < a.data().size(); ++i) {
        double x = a.data()[i], y = b.data()[i];
        if (std::memcmp(&x, &y, sizeof(double)) != 0) return false;
    }
    return true;
}

}  // namespace

TEST(Editor, AggregateVotingAndTieBreaks) {
    // A = (0,1), B = (1,2), C = (0,0).
    AttributionMatrix m1 = grid("r1", {0.1, 10.0, 0.2, 0.3, 0.4, 8.0});  // ballot {A, B}
    AttributionMatrix m2 = grid("r2", {7.0, 9.0, 0.1, 0.2, 0.3, 0.4});   // ballot {A, C}

    EditPlan p = aggregate({m1, m2}, 3, 2);
    ASSERT_EQ(p.neurons.size(), 3u);
    EXPECT_EQ(p.neurons[0], (NeuronId{0, 1}));  // 2 votes
    EXPECT_EQ(p.neurons[1], (NeuronId{1, 2}));  // 1 vote, sum 8
    EXPECT_EQ(p.neurons[2], (NeuronId{0, 0}));  // 1 vote, sum 7
    EXPECT_EQ(p.votes, (std::vector<size_t>{2, 1, 1}));
    EXPECT_EQ(p.scores, (std::vector<double>{19.0, 8.0, 7.0}));
    EXPECT_EQ(p.method, SelectionMethod::PND);
    EXPECT_EQ(p.ballot, 2u);
    EXPECT_EQ(p.record_ids, (std::vector<std::string>{"r1", "r2"}));

    // Disjoint ballots: every candidate has one vote, so the summed score
    // decides, interleaving neurons from different records.
    AttributionMatrix m3 = grid("r3", {0.0, 0.0, 0.0, 8.0, 4.0, 0.0});  // ballot {D=(1,0), E=(1,1)}
    EditPlan q = aggregate({m2, m3}, 3, 2);
    EXPECT_EQ(q.neurons[0], (NeuronId{0, 1}));  // 9
    EXPECT_EQ(q.neurons[1], (NeuronId{1, 0}));  // 8
    EXPECT_EQ(q.neurons[2], (NeuronId{0, 0}));  // 7

    // Exact tie on votes and sum falls back to (layer, index) ascending.
    AttributionMatrix m4 = grid("r4", {0.0, 5.0, 0.0, 5.0, 0.0, 0.0});
    EditPlan t = aggregate({m4}, 2, 2);
    EXPECT_EQ(t.neurons[0], (NeuronId{0, 1}));
    EXPECT_EQ(t.neurons[1], (NeuronId{1, 0}));

    AttributionMatrix m5 = grid("r5", {5.0, 0.0, 5.0, 0.0, 0.0, 0.0});
    EditPlan u = aggregate({m5}, 2, 2);
    EXPECT_EQ(u.neurons[0], (NeuronId{0, 0}));
    EXPECT_EQ(u.neurons[1], (NeuronId{0, 2}));

    // z = 0 is a legal empty plan (used by the z-sweep's baseline point).
    EditPlan empty = aggregate({m1, m2}, 0, 2);
    EXPECT_TRUE(empty.neurons.empty());
    EXPECT_EQ(empty.z, 0u);
    EXPECT_EQ(empty.record_ids.size(), 2u);
}

TEST(Editor, AggregateRejectsBadInput) {
    AttributionMatrix m1 = grid("r1", {1, 2, 3, 4, 5, 6});
    EXPECT_THROW(aggregate({}, 2, 2), std::invalid_argument);
    EXPECT_THROW(aggregate({m1}, 2, 0), std::invalid_argument);
    EXPECT_THROW(aggregate({m1}, 7, 2), std::invalid_argument);  // z > 6 neurons

    AttributionMatrix other;
    other.record_id = "r2";
    other.scores = Tensor({2, 2}, std::vector<double>(4, 1.0));
    EXPECT_THROW(aggregate({m1, other}, 2, 2), std::invalid_argument);

    // Ballots too small to yield z distinct candidates.
    EXPECT_THROW(aggregate({m1}, 3, 1), std::invalid_argument);
}

TEST(Editor, AggregateSingleRecordEqualsTopZ) {
    const TinyLab& lab = tiny_lab();
    AttributionMatrix mat = attribute_all(lab.trained, record_of(CanaryKind::DigitString), 3);

    EditPlan p = aggregate({mat}, 7, 7);
    EXPECT_EQ(p.neurons, top_z(mat, 7));
    for (size_t i = 0; i < p.neurons.size(); ++i) {
        EXPECT_EQ(p.votes[i], 1u);
        EXPECT_EQ(p.scores[i], mat.scores.at(p.neurons[i].layer, p.neurons[i].index));
    }

    // A larger ballot than the plan size changes nothing for one record.
    EXPECT_EQ(aggregate({mat}, 7, 20).neurons, p.neurons);
}

TEST(Editor, AggregateIsOrderIndependent) {
    const TinyLab& lab = tiny_lab();
    std::vector<AttributionMatrix> mats;
    mats.push_back(attribute_all(lab.trained, record_of(CanaryKind::DigitString), 2));
    mats.push_back(attribute_all(lab.trained, record_of(CanaryKind::Name), 2));
    mats.push_back(attribute_all(lab.trained, record_of(CanaryKind::Sentence), 2));

    EditPlan forward_order = aggregate(mats, 6, 6);
    std::vector<AttributionMatrix> reversed(mats.rbegin(), mats.rend());
    std::vector<AttributionMatrix> rotated{mats[1], mats[2], mats[0]};
    EXPECT_EQ(aggregate(reversed, 6, 6).neurons, forward_order.neurons);
    EXPECT_EQ(aggregate(rotated, 6, 6).neurons, forward_order.neurons);
    EXPECT_EQ(aggregate(reversed, 6, 6).votes, forward_order.votes);
}

TEST(Editor, ApplyEditZeroesExactlyThePlan) {
    const TinyLab& lab = tiny_lab();
    std::vector<AttributionMatrix> mats;
    mats.push_back(attribute_all(lab.trained, record_of(CanaryKind::DigitString), 2));
    mats.push_back(attribute_all(lab.trained, record_of(CanaryKind::Name), 2));
    EditPlan plan = aggregate(mats, 5, 5);

    Model edited = apply_edit(lab.trained, plan);
    EXPECT_EQ(edited.masked_neuron_count(), 5u);
    EXPECT_NE(edited.checksum(), lab.trained.checksum());

    std::set<std::pair<size_t, size_t>> planned;
    for (const NeuronId& n : plan.neurons) planned.insert({n.layer, n.index});
    for (size_t l = 0; l < edited.config.n_layers; ++l)
        for (size_t k = 0; k < edited.config.d_ff; ++k)
            EXPECT_EQ(edited.edit_mask.at(l, k), planned.count({l, k}) ? 0.0 : 1.0);

    // Parameters are untouched; only the mask moved.
    ASSERT_EQ(edited.params.size(), lab.trained.params.size());
    for (size_t i = 0; i < edited.params.size(); ++i) {
        EXPECT_EQ(edited.params[i].first, lab.trained.params[i].first);
        EXPECT_TRUE(same_bits(edited.params[i].second, lab.trained.params[i].second));
    }

    // Idempotent: re-applying the same plan is a bitwise no-op.
    EXPECT_EQ(apply_edit(edited, plan).checksum(), edited.checksum());

    // Empty plan: forward pass is bitwise unchanged.
    EditPlan noop;
    Model same = apply_edit(lab.trained, noop);
    EXPECT_EQ(same.checksum(), lab.trained.checksum());
    LeakProbe probe = leak_probe(record_of(CanaryKind::DigitString));
    Tape t1, t2;
    EXPECT_TRUE(same_bits(forward(t1, lab.trained, probe.ids).logits.tensor(),
                          forward(t2, same, probe.ids).logits.tensor()));

    // Out-of-range plan neurons are rejected.
    EditPlan bad;
    bad.z = 1;
    bad.neurons = {NeuronId{99, 0}};
    EXPECT_THROW(apply_edit(lab.trained, bad), std::invalid_argument);
}

TEST(Editor, EditTouchesOnlyPlannedColumnsAtTheEditedLayer) {
    const TinyLab& lab = tiny_lab();

    // Plan confined to the last layer so upstream activations cannot shift.
    EditPlan plan;
    plan.z = 3;
    plan.neurons = {NeuronId{1, 3}, NeuronId{1, 17}, NeuronId{1, 30}};
    Model edited = apply_edit(lab.trained, plan);

    LeakProbe probe = leak_probe(record_of(CanaryKind::Sentence));
    ForwardOptions opt;
    opt.capture_layers = {0, 1};
    Tape t1, t2;
    Forward before = forward(t1, lab.trained, probe.ids, opt);
    Forward after = forward(t2, edited, probe.ids, opt);

    // Layer 0 is upstream of every edit: bitwise identical.
    EXPECT_TRUE(same_bits(before.captured.at(0), after.captured.at(0)));

    // Layer 1: planned columns read exactly zero, all others are bitwise equal.
    const Tensor& b1 = before.captured.at(1);
    const Tensor& a1 = after.captured.at(1);
    std::set<size_t> planned{3, 17, 30};
    for (size_t i = 0; i < probe.ids.size(); ++i)
        for (size_t k = 0; k < edited.config.d_ff; ++k) {
            if (planned.count(k)) {
                EXPECT_EQ(a1.at(i, k), 0.0);
            } else {
                EXPECT_EQ(a1.at(i, k), b1.at(i, k));
            }
        }
}

TEST(Editor, KnSelectMatchesFirstTokenAttribution) {
    const TinyLab& lab = tiny_lab();
    const CanarySpec& rec = record_of(CanaryKind::DigitString);

    EditPlan kn = kn_select(lab.trained, rec, 10, 3);
    EXPECT_EQ(kn.method, SelectionMethod::KN);
    EXPECT_EQ(kn.z, 10u);
    EXPECT_EQ(kn.record_ids, (std::vector<std::string>{rec.id}));

    AttributionMatrix full = attribute_all(lab.trained, rec, 3, /*with_breakdown=*/true);
    AttributionMatrix first_only;
    first_only.record_id = rec.id;
    first_only.scores = full.breakdown[0];
    EXPECT_EQ(kn.neurons, top_z(first_only, 10));
    for (size_t i = 0; i < kn.neurons.size(); ++i) {
        EXPECT_EQ(kn.votes[i], 1u);
        EXPECT_EQ(kn.scores[i], full.breakdown[0].at(kn.neurons[i].layer, kn.neurons[i].index));
    }

    // The provenance lists exactly the neurons absent from the full-secret plan.
    std::set<std::pair<size_t, size_t>> pnd;
    for (const NeuronId& n : top_z(full, 10)) pnd.insert({n.layer, n.index});
    std::vector<NeuronId> expect_diff;
    for (const NeuronId& n : kn.neurons)
        if (!pnd.count({n.layer, n.index})) expect_diff.push_back(n);
    EXPECT_EQ(kn.difference_vs_pnd, expect_diff);

    EXPECT_TRUE(kn_select(lab.trained, rec, 0, 3).neurons.empty());
}

TEST(Editor, KnSelectOnSingleTokenSecretEqualsFullPlan) {
    const TinyLab& lab = tiny_lab();
    CanarySpec one = record_of(CanaryKind::DigitString);
    one.id += "-first";
    one.slot_positions = {one.slot_positions[0]};
    one.secret = {one.secret[0]};

    EditPlan kn = kn_select(lab.trained, one, 8, 3);
    AttributionMatrix full = attribute_all(lab.trained, one, 3);
    EXPECT_EQ(kn.neurons, top_z(full, 8));
    EXPECT_TRUE(kn.difference_vs_pnd.empty());
    for (size_t i = 0; i < kn.neurons.size(); ++i)
        EXPECT_EQ(kn.scores[i], full.scores.at(kn.neurons[i].layer, kn.neurons[i].index));
}

TEST(Editor, RandomSelectIsSeededAndDuplicateFree) {
    ModelConfig cfg = tiny_model_config();  // 2 x 32 = 64 neurons

    EditPlan a = random_select(cfg, 20, 123);
    EditPlan b = random_select(cfg, 20, 123);
    EditPlan c = random_select(cfg, 20, 124);
    EXPECT_EQ(a.neurons, b.neurons);
    EXPECT_NE(a.neurons, c.neurons);
    EXPECT_EQ(a.method, SelectionMethod::Random);
    EXPECT_TRUE(a.votes.empty());
    EXPECT_TRUE(a.scores.empty());

    std::set<std::pair<size_t, size_t>> seen;
    for (const NeuronId& n : a.neurons) {
        EXPECT_LT(n.layer, cfg.n_layers);
        EXPECT_LT(n.index, cfg.d_ff);
        seen.insert({n.layer, n.index});
    }
    EXPECT_EQ(seen.size(), 20u);

    // Drawing every neuron yields the whole grid; one more is an error.
    EditPlan all = random_select(cfg, 64, 9);
    std::set<std::pair<size_t, size_t>> everything;
    for (const NeuronId& n : all.neurons) everything.insert({n.layer, n.index});
    EXPECT_EQ(everything.size(), 64u);
    EXPECT_THROW(random_select(cfg, 65, 9), std::invalid_argument);
    EXPECT_TRUE(random_select(cfg, 0, 9).neurons.empty());
}

TEST(Editor, PlanJsonRoundTripAndValidation) {
    const TinyLab& lab = tiny_lab();
    EditPlan kn = kn_select(lab.trained, record_of(CanaryKind::DigitString), 6, 2);

    EditPlan back = EditPlan::from_json(kn.to_json());
    EXPECT_EQ(back.method, kn.method);
    EXPECT_EQ(back.z, kn.z);
    EXPECT_EQ(back.ballot, kn.ballot);
    EXPECT_EQ(back.record_ids, kn.record_ids);
    EXPECT_EQ(back.neurons, kn.neurons);
    EXPECT_EQ(back.votes, kn.votes);
    EXPECT_EQ(back.scores, kn.scores);  // exact double round trip
    EXPECT_EQ(back.difference_vs_pnd, kn.difference_vs_pnd);

    std::string dir = pnlab::testing::make_temp_dir("editor");
    save_edit_plan(kn, dir + "/plan.json");
    EditPlan loaded = load_edit_plan(dir + "/plan.json");
    EXPECT_EQ(loaded.neurons, kn.neurons);
    EXPECT_EQ(loaded.scores, kn.scores);

    write_file(dir + "/garbage.json", "not a plan");
    EXPECT_THROW(load_edit_plan(dir + "/garbage.json"), std::runtime_error);

    EditPlan bad = kn;
    bad.z = 5;  // |neurons| no longer equals z
    EXPECT_THROW(bad.to_json(), std::invalid_argument);

    EditPlan dup = kn;
    dup.neurons[1] = dup.neurons[0];
    EXPECT_THROW(dup.to_json(), std::invalid_argument);

    EditPlan skew = kn;
    skew.votes.pop_back();
    EXPECT_THROW(skew.to_json(), std::invalid_argument);

    nlohmann::json j = kn.to_json();
    j["method"] = "Gradient";
    EXPECT_THROW(EditPlan::from_json(j), std::invalid_argument);
}
