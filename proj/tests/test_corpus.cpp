#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

#include "pnlab/corpus.hpp"
#include "testutil.hpp"

using namespace pnlab;

namespace {

Lexicon shared_lexicon() { return default_lexicon(2000); }

bool is_digit_id(size_t id) {
    return id >= kDigitTokenBase && id < kDigitTokenBase + kNumDigitTokens;
}

std::set<size_t> reserved_ids(const LexiconPools& p) {
    std::set<size_t> r;
    auto take = [&](const std::vector<size_t>& pool) { r.insert(pool.begin(), pool.end()); };
    take(p.owners);
    take(p.orgs);
    take(p.name_fragments);
    take(p.speakers);
    take(p.sentence_words);
    r.insert(p.kw_passcode);
    r.insert(p.kw_chief);
    r.insert(p.kw_declared);
    return r;
}

size_t longest_digit_run(const std::vector<size_t>& line) {
    size_t best = 0, cur = 0;
    for (size_t id : line) {
        cur = is_digit_id(id) ? cur + 1 : 0;
        best = std::max(best, cur);
    }
    return best;
}

}  // namespace

TEST(Corpus, DefaultLexiconLayout) {
    Lexicon lex = shared_lexicon();
    EXPECT_EQ(lex.vocab.size(), 2000u);
    EXPECT_EQ(lex.vocab.token(kClsTokenId), "[cls]");
    EXPECT_EQ(lex.vocab.token(kMaskTokenId), "[mask]");
    EXPECT_EQ(lex.vocab.token(kPadTokenId), "[pad]");
    for (size_t d = 0; d < 10; ++d)
        EXPECT_EQ(lex.vocab.token(digit_token_id(d)), std::string(1, char('0' + d)));
    // Bijectivity.
    for (size_t i = 0; i < lex.vocab.size(); ++i)
        EXPECT_EQ(lex.vocab.id(lex.vocab.token(i)), i);
    EXPECT_THROW(lex.vocab.id("no-such-token"), std::out_of_range);
    EXPECT_THROW(lex.vocab.token(lex.vocab.size()), std::out_of_range);

    // Pools are non-overlapping and within vocab range.
    const LexiconPools& p = lex.pools;
    std::vector<const std::vector<size_t>*> pools = {
        &p.determiners, &p.adjectives, &p.verbs,     &p.prepositions,   &p.adverbs,
        &p.connectors,  &p.nouns,      &p.owners,    &p.orgs,           &p.name_fragments,
        &p.speakers,    &p.sentence_words};
    std::set<size_t> seen = {p.kw_passcode, p.kw_chief, p.kw_declared};
    ASSERT_EQ(seen.size(), 3u);
    for (const auto* pool : pools) {
        EXPECT_FALSE(pool->empty());
        for (size_t id : *pool) {
            EXPECT_LT(id, lex.vocab.size());
            EXPECT_TRUE(seen.insert(id).second) << "pools overlap at id " << id;
        }
    }
    // Same build twice is identical.
    EXPECT_TRUE(shared_lexicon().vocab == lex.vocab);
}

TEST(Corpus, VocabFromTokensRoundTrip) {
    Lexicon lex = shared_lexicon();
    Vocab rebuilt = Vocab::from_tokens(lex.vocab.tokens());
    EXPECT_TRUE(rebuilt == lex.vocab);
    // Broken special layout is rejected.
    std::vector<std::string> bad = lex.vocab.tokens();
    std::swap(bad[0], bad[1]);
    EXPECT_THROW(Vocab::from_tokens(bad), std::invalid_argument);
    // Duplicate tokens are rejected.
    std::vector<std::string> dup = lex.vocab.tokens();
    dup.push_back(dup.back());
    EXPECT_THROW(Vocab::from_tokens(dup), std::invalid_argument);
}

TEST(Corpus, MakeCanariesShapes) {
    Lexicon lex = shared_lexicon();
    auto canaries = make_canaries(lex, 7);
    ASSERT_EQ(canaries.size(), 30u);

    std::set<std::string> ids;
    std::map<CanaryKind, size_t> kind_counts;
    std::set<size_t> reserved = reserved_ids(lex.pools);
    for (const auto& c : canaries) {
        EXPECT_TRUE(ids.insert(c.id).second);
        kind_counts[c.kind]++;
        ASSERT_NO_THROW(c.validate(lex.vocab.size(), 32));
        EXPECT_LE(c.tokens.size(), 32u);
        for (size_t i = 0; i < c.slot_positions.size(); ++i)
            EXPECT_EQ(c.tokens[c.slot_positions[i]], c.secret[i]);
        // Every adjacent window of length |Y| must touch a reserved token or
        // be the pure digit run (which background text cannot produce).
        size_t w = c.secret.size();
        for (size_t i = 0; i + w <= c.tokens.size(); ++i) {
            bool has_reserved = false, all_digits = true;
            for (size_t j = i; j < i + w; ++j) {
                has_reserved |= reserved.count(c.tokens[j]) != 0;
                all_digits &= is_digit_id(c.tokens[j]);
            }
            EXPECT_TRUE(has_reserved || (all_digits && w >= 4))
                << c.id << " window at " << i << " is reproducible by background grammar";
        }
    }
    EXPECT_EQ(kind_counts[CanaryKind::DigitString], 10u);
    EXPECT_EQ(kind_counts[CanaryKind::Name], 10u);
    EXPECT_EQ(kind_counts[CanaryKind::Sentence], 10u);

    // Frequencies cycle {1,5,15} within each kind.
    for (size_t i = 0; i < 10; ++i) {
        size_t expect_f = std::vector<size_t>{1, 5, 15}[i % 3];
        EXPECT_EQ(canaries[i].f, expect_f);        // digit records
        EXPECT_EQ(canaries[10 + i].f, expect_f);   // name records
        EXPECT_EQ(canaries[20 + i].f, expect_f);   // sentence records
    }

    // Secret geometry per kind.
    EXPECT_EQ(canaries[0].secret.size(), 4u);
    for (size_t t : canaries[0].secret) EXPECT_TRUE(is_digit_id(t));
    EXPECT_EQ(canaries[10].secret.size(), 2u);
    EXPECT_EQ(canaries[20].secret.size(), 6u);

    // Fixed-frequency override.
    CanarySetConfig cfg;
    cfg.fixed_frequency = 5;
    for (const auto& c : make_canaries(lex, 7, cfg)) EXPECT_EQ(c.f, 5u);

    // Same seed reproduces the set exactly.
    auto again = make_canaries(lex, 7);
    for (size_t i = 0; i < canaries.size(); ++i) {
        EXPECT_EQ(canaries[i].tokens, again[i].tokens);
        EXPECT_EQ(canaries[i].secret, again[i].secret);
    }
    // Different seed changes at least one digit secret.
    auto other = make_canaries(lex, 8);
    bool any_diff = false;
    for (size_t i = 0; i < 10; ++i) any_diff |= other[i].secret != canaries[i].secret;
    EXPECT_TRUE(any_diff);
}

TEST(Corpus, GenerateViolatedPreconditionsThrow) {
    Lexicon lex = shared_lexicon();
    auto canaries = make_canaries(lex, 3);

    auto zero_f = canaries;
    zero_f[0].f = 0;
    EXPECT_THROW(generate(lex, 1, 400, 50, zero_f), std::invalid_argument);

    auto too_long = canaries;
    too_long[0].tokens.resize(33, lex.pools.nouns[0]);
    EXPECT_THROW(generate(lex, 1, 400, 50, too_long), std::invalid_argument);

    // Total injections 10*(1+5+15)/... = sum over all 30 records.
    size_t total = 0;
    for (const auto& c : canaries) total += c.f;
    EXPECT_THROW(generate(lex, 1, total - 1, 50, canaries), std::invalid_argument);
    EXPECT_NO_THROW(generate(lex, 1, total, 0, canaries));

    auto dup = canaries;
    dup.push_back(dup[0]);
    EXPECT_THROW(generate(lex, 1, 400, 50, dup), std::invalid_argument);
}

TEST(Corpus, GenerateIsDeterministicPerSeed) {
    Lexicon lex = shared_lexicon();
    auto canaries = make_canaries(lex, 11);
    Corpus a = generate(lex, 11, 300, 80, canaries);
    Corpus b = generate(lex, 11, 300, 80, canaries);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.valid, b.valid);
    EXPECT_EQ(a.checksum(), b.checksum());
    ASSERT_EQ(a.registry.size(), b.registry.size());
    for (size_t i = 0; i < a.registry.size(); ++i)
        EXPECT_EQ(a.registry[i].injected_lines, b.registry[i].injected_lines);

    Corpus c = generate(lex, 12, 300, 80, canaries);
    EXPECT_NE(a.checksum(), c.checksum());
}

TEST(Corpus, RegistryMatchesInjections) {
    Lexicon lex = shared_lexicon();
    auto canaries = make_canaries(lex, 5);
    Corpus corpus = generate(lex, 5, 300, 60, canaries);
    ASSERT_EQ(corpus.registry.size(), canaries.size());

    std::set<size_t> used_lines;
    for (size_t i = 0; i < canaries.size(); ++i) {
        const CanaryRecord& rec = corpus.registry[i];
        EXPECT_EQ(rec.spec.id, canaries[i].id);
        EXPECT_EQ(rec.injected_lines.size(), rec.spec.f);
        EXPECT_TRUE(std::is_sorted(rec.injected_lines.begin(), rec.injected_lines.end()));
        for (size_t line : rec.injected_lines) {
            ASSERT_LT(line, corpus.train.size());
            EXPECT_EQ(corpus.train[line], rec.spec.tokens);
            EXPECT_TRUE(used_lines.insert(line).second) << "two injections share a line";
        }
    }
    EXPECT_EQ(corpus.record("digit-00").spec.kind, CanaryKind::DigitString);
    EXPECT_THROW(corpus.record("missing"), std::out_of_range);
}

TEST(Corpus, LineShapeInvariants) {
    Lexicon lex = shared_lexicon();
    auto canaries = make_canaries(lex, 21);
    Corpus corpus = generate(lex, 21, 400, 100, canaries);
    auto check_lines = [&](const std::vector<std::vector<size_t>>& lines) {
        for (const auto& line : lines) {
            ASSERT_FALSE(line.empty());
            EXPECT_EQ(line[0], kClsTokenId);
            EXPECT_LE(line.size(), corpus.max_seq);
            for (size_t id : line) EXPECT_LT(id, corpus.vocab.size());
        }
    };
    check_lines(corpus.train);
    check_lines(corpus.valid);

    // Background (train minus injection sites) and validation never carry
    // 4-digit runs or reserved canary tokens.
    std::set<size_t> injected;
    for (const auto& r : corpus.registry)
        injected.insert(r.injected_lines.begin(), r.injected_lines.end());
    std::set<size_t> reserved = reserved_ids(lex.pools);
    auto check_background = [&](const std::vector<size_t>& line) {
        EXPECT_LE(longest_digit_run(line), 3u);
        for (size_t id : line) EXPECT_FALSE(reserved.count(id)) << "reserved id in background";
    };
    for (size_t i = 0; i < corpus.train.size(); ++i)
        if (!injected.count(i)) check_background(corpus.train[i]);
    for (const auto& line : corpus.valid) check_background(line);
}

TEST(Corpus, ValidationContainsNoCanaryWindow) {
    Lexicon lex = shared_lexicon();
    auto canaries = make_canaries(lex, 17);
    Corpus corpus = generate(lex, 17, 350, 200, canaries);

    // Independent scan: for every canary, no contiguous window of its line
    // with length >= |secret| occurs anywhere in validation.
    for (const auto& rec : corpus.registry) {
        const auto& toks = rec.spec.tokens;
        for (size_t w = rec.spec.secret.size(); w <= toks.size(); ++w) {
            for (size_t start = 0; start + w <= toks.size(); ++start) {
                for (const auto& line : corpus.valid) {
                    if (line.size() < w) continue;
                    for (size_t i = 0; i + w <= line.size(); ++i) {
                        EXPECT_FALSE(std::equal(toks.begin() + start, toks.begin() + start + w,
                                                line.begin() + i))
                            << rec.spec.id << " window of length " << w << " leaked into validation";
                    }
                }
            }
        }
    }
}

TEST(Corpus, LeakProbeMasksEverySlot) {
    Lexicon lex = shared_lexicon();
    auto canaries = make_canaries(lex, 9);

    for (size_t idx : {size_t(0), size_t(10), size_t(20)}) {
        const CanarySpec& rec = canaries[idx];
        LeakProbe probe = leak_probe(rec);
        EXPECT_EQ(probe.record_id, rec.id);
        ASSERT_EQ(probe.ids.size(), rec.tokens.size());
        ASSERT_EQ(probe.targets.size(), rec.secret.size());
        for (size_t i = 0; i < rec.secret.size(); ++i) {
            EXPECT_EQ(probe.targets[i].first, rec.slot_positions[i]);
            EXPECT_EQ(probe.targets[i].second, rec.secret[i]);
            EXPECT_EQ(probe.ids[rec.slot_positions[i]], kMaskTokenId);
        }
        for (size_t pos = 0; pos < probe.ids.size(); ++pos) {
            bool is_slot = std::find(rec.slot_positions.begin(), rec.slot_positions.end(), pos) !=
                           rec.slot_positions.end();
            if (!is_slot) EXPECT_EQ(probe.ids[pos], rec.tokens[pos]);
        }
    }
    EXPECT_EQ(leak_probe(canaries[0]).targets.size(), 4u);
    EXPECT_EQ(leak_probe(canaries[10]).targets.size(), 2u);
    EXPECT_EQ(leak_probe(canaries[20]).targets.size(), 6u);
}

TEST(Corpus, PromptVariants) {
    Lexicon lex = shared_lexicon();
    auto canaries = make_canaries(lex, 9);
    const CanarySpec& rec = canaries[0];  // digit record, 4 slots

    // Template equal to the training form reproduces leak_probe exactly.
    PromptTemplate same{rec.tokens, rec.slot_positions};
    auto probes = prompt_variants(rec, {same});
    ASSERT_EQ(probes.size(), 1u);
    LeakProbe direct = leak_probe(rec);
    EXPECT_EQ(probes[0].ids, direct.ids);
    EXPECT_EQ(probes[0].targets, direct.targets);

    // Six paraphrases, slots at different positions.
    const LexiconPools& p = lex.pools;
    std::vector<PromptTemplate> six;
    for (size_t k = 0; k < 6; ++k) {
        PromptTemplate t;
        t.tokens = {kClsTokenId, p.kw_passcode, rec.tokens[1], rec.tokens[2],
                    p.nouns[k],  0,             0,             0,
                    0};
        t.slot_positions = {5, 6, 7, 8};
        six.push_back(std::move(t));
    }
    auto variants = prompt_variants(rec, six);
    ASSERT_EQ(variants.size(), 6u);
    for (const auto& v : variants) {
        ASSERT_EQ(v.targets.size(), 4u);
        for (size_t i = 0; i < 4; ++i) {
            EXPECT_EQ(v.targets[i].first, six[0].slot_positions[i]);
            EXPECT_EQ(v.targets[i].second, rec.secret[i]);
            EXPECT_EQ(v.ids[v.targets[i].first], kMaskTokenId);
        }
    }

    // Slot-count mismatch throws; empty template list gives empty output.
    PromptTemplate bad{rec.tokens, {1, 2}};
    EXPECT_THROW(prompt_variants(rec, {bad}), std::invalid_argument);
    EXPECT_TRUE(prompt_variants(rec, {}).empty());
}

TEST(Corpus, DigitSecretsAreUniform) {
    Lexicon lex = shared_lexicon();
    CanarySetConfig cfg;
    cfg.n_digit = 5;
    cfg.n_name = 0;
    cfg.n_sentence = 0;

    // 400 seeds x 5 records x 4 positions = 8000 digit draws.
    std::array<std::array<size_t, 10>, 4> pos_counts{};
    std::array<size_t, 100> pair_counts{};
    size_t n_secrets = 0;
    for (uint64_t seed = 0; seed < 400; ++seed) {
        for (const auto& c : make_canaries(lex, seed, cfg)) {
            ASSERT_EQ(c.secret.size(), 4u);
            std::array<size_t, 4> digits{};
            for (size_t i = 0; i < 4; ++i) {
                digits[i] = c.secret[i] - kDigitTokenBase;
                pos_counts[i][digits[i]]++;
            }
            pair_counts[digits[0] * 10 + digits[1]]++;
            ++n_secrets;
        }
    }
    ASSERT_EQ(n_secrets, 2000u);

    // Per-position chi-square, 9 degrees of freedom each; 36 combined.
    // Threshold 58.6 is the 1% tail of chi2(36); the statistic is
    // deterministic here, the margin just documents how uniform it is.
    double chi2 = 0.0;
    const double expected = 2000.0 / 10.0;
    for (const auto& counts : pos_counts)
        for (size_t d = 0; d < 10; ++d) {
            double diff = double(counts[d]) - expected;
            chi2 += diff * diff / expected;
        }
    EXPECT_LT(chi2, 58.6);

    // First-two-digit pairs: chi2 with 99 dof, 1% tail ~ 134.6.
    double chi2_pair = 0.0;
    const double pair_expected = 2000.0 / 100.0;
    for (size_t b = 0; b < 100; ++b) {
        double diff = double(pair_counts[b]) - pair_expected;
        chi2_pair += diff * diff / pair_expected;
    }
    EXPECT_LT(chi2_pair, 134.6);
}

TEST(Corpus, SaveLoadRoundTrip) {
    Lexicon lex = shared_lexicon();
    auto canaries = make_canaries(lex, 13);
    Corpus corpus = generate(lex, 13, 250, 60, canaries);

    std::string dir = pnlab::testing::make_temp_dir("corpus");
    save_corpus(corpus, dir);
    Corpus loaded = load_corpus(dir);

    EXPECT_EQ(loaded.seed, corpus.seed);
    EXPECT_EQ(loaded.max_seq, corpus.max_seq);
    EXPECT_TRUE(loaded.vocab == corpus.vocab);
    EXPECT_EQ(loaded.train, corpus.train);
    EXPECT_EQ(loaded.valid, corpus.valid);
    ASSERT_EQ(loaded.registry.size(), corpus.registry.size());
    for (size_t i = 0; i < loaded.registry.size(); ++i) {
        EXPECT_EQ(loaded.registry[i].spec.id, corpus.registry[i].spec.id);
        EXPECT_EQ(loaded.registry[i].spec.tokens, corpus.registry[i].spec.tokens);
        EXPECT_EQ(loaded.registry[i].injected_lines, corpus.registry[i].injected_lines);
    }
    EXPECT_EQ(loaded.checksum(), corpus.checksum());

    EXPECT_THROW(load_corpus(dir + "/missing"), std::runtime_error);

    // Tampering with the train text is caught by the registry cross-check.
    Corpus tampered = corpus;
    tampered.train[corpus.registry[0].injected_lines[0]] = {kClsTokenId, lex.pools.nouns[0]};
    std::string dir2 = pnlab::testing::make_temp_dir("corpus-tampered");
    save_corpus(tampered, dir2);
    EXPECT_THROW(load_corpus(dir2), std::runtime_error);
}
