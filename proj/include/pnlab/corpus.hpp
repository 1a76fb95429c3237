#pragma once

// Synthetic corpus generation: deterministic background text from a seeded
// template grammar, plus injected canary records carrying three kinds of
// secrets (4-digit codes, two-token names, six-token private sentences).
//
// Isolation guarantee, by construction:
//   * every canary identity/secret word (owners, orgs, name fragments,
//     speakers, sentence words, template keywords) lives in a reserved vocab
//     pool the background grammar never emits, and
//   * background digit runs are capped at 3 consecutive tokens while digit
//     secrets are 4 long,
// so no contiguous window of a canary line with length >= |secret| can ever
// appear in background (hence validation) text.

#include <algorithm>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pnlab/io.hpp"
#include "pnlab/rng.hpp"
#include "pnlab/tokens.hpp"

namespace pnlab {

// ---------------------------------------------------------------------------
// Vocab: bijective token-string <-> id mapping with fixed special ids.
// ---------------------------------------------------------------------------

class Vocab {
 public:
    Vocab() = default;

    static Vocab from_tokens(std::vector<std::string> tokens) {
        Vocab v;
        v.tokens_.reserve(tokens.size());
        for (auto& t : tokens) v.add(std::move(t));
        v.check_specials();
        return v;
    }

    size_t add(std::string token) {
        if (token.empty()) throw std::invalid_argument("Vocab: empty token string");
        auto [it, inserted] = index_.emplace(token, tokens_.size());
        if (!inserted) throw std::invalid_argument("Vocab: duplicate token \"" + token + "\"");
        tokens_.push_back(std::move(token));
        return tokens_.size() - 1;
    }

    size_t size() const { return tokens_.size(); }

    bool contains(const std::string& token) const { return index_.count(token) != 0; }

    size_t id(const std::string& token) const {
        auto it = index_.find(token);
        if (it == index_.end()) throw std::out_of_range("Vocab: unknown token \"" + token + "\"");
        return it->second;
    }

    const std::string& token(size_t id) const {
        if (id >= tokens_.size()) throw std::out_of_range("Vocab: token id out of range");
        return tokens_[id];
    }

    const std::vector<std::string>& tokens() const { return tokens_; }

    bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
    void check_specials() const {
        if (tokens_.size() < kDigitTokenBase + kNumDigitTokens)
            throw std::invalid_argument("Vocab: too small to hold special and digit tokens");
        if (tokens_[kClsTokenId] != "[cls]" || tokens_[kMaskTokenId] != "[mask]" ||
            tokens_[kPadTokenId] != "[pad]")
            throw std::invalid_argument("Vocab: special tokens not at their fixed ids");
        for (size_t d = 0; d < kNumDigitTokens; ++d)
            if (tokens_[kDigitTokenBase + d] != std::string(1, char('0' + d)))
                throw std::invalid_argument("Vocab: digit tokens not at their fixed ids");
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// Lexicon: a Vocab plus the id pools the generator draws from. Pools with the
// "canary-only" comment are never emitted by the background grammar.
// ---------------------------------------------------------------------------

struct LexiconPools {
    // background grammar pools
    std::vector<size_t> determiners;
    std::vector<size_t> adjectives;
    std::vector<size_t> verbs;
    std::vector<size_t> prepositions;
    std::vector<size_t> adverbs;
    std::vector<size_t> connectors;
    std::vector<size_t> nouns;
    // canary-only pools
    std::vector<size_t> owners;          // identity fragments for digit-code records
    std::vector<size_t> orgs;            // identity words for name records
    std::vector<size_t> name_fragments;  // name secrets (two fragments each)
    std::vector<size_t> speakers;        // identity words for sentence records
    std::vector<size_t> sentence_words;  // sentence-secret word pool
    size_t kw_passcode = 0;              // canary-only template keywords
    size_t kw_chief = 0;
    size_t kw_declared = 0;
};

struct Lexicon {
    Vocab vocab;
    LexiconPools pools;
};

namespace detail {

// Deterministic synthetic word generator: two-syllable CV words, unique by
// construction (one global index space shared by every generated pool).
inline std::string synth_word(size_t index) {
    static constexpr char kCons[] = "bdfghjklmnprstvz";
    static constexpr char kVowels[] = "aeiou";
    constexpr size_t n_syl = (sizeof(kCons) - 1) * (sizeof(kVowels) - 1);  // 80
    auto syllable = [&](size_t s) {
        std::string out;
        out += kCons[s / (sizeof(kVowels) - 1)];
        out += kVowels[s % (sizeof(kVowels) - 1)];
        return out;
    };
    if (index >= n_syl * n_syl)
        throw std::invalid_argument("synth_word: index out of range");
    return syllable(index / n_syl) + syllable(index % n_syl);
}

}  // namespace detail

// Builds the fixed default lexicon. The layout is a pure function of
// `target_size`, so every run with the same target shares token ids.
inline Lexicon default_lexicon(size_t target_size = 2000) {
    Lexicon lex;
    Vocab& v = lex.vocab;
    LexiconPools& p = lex.pools;

    v.add("[cls]");
    v.add("[mask]");
    v.add("[pad]");
    for (size_t d = 0; d < kNumDigitTokens; ++d) v.add(std::string(1, char('0' + d)));

    auto add_pool = [&](std::vector<size_t>& pool, std::initializer_list<const char*> words) {
        for (const char* w : words) pool.push_back(v.add(w));
    };
    add_pool(p.determiners, {"the", "a", "an", "this", "that", "each", "every", "some", "any"});
    add_pool(p.adjectives, {"small", "large", "old",   "new",  "bright", "dark",  "quick",
                            "slow",  "warm",  "cold",  "soft", "hard",   "clean", "plain",
                            "round", "flat",  "deep",  "wide", "tall",   "short", "quiet",
                            "loud",  "heavy", "light", "sharp"});
    add_pool(p.verbs, {"moves",  "holds",  "finds", "takes",  "gives", "sees",
                       "hears",  "makes",  "builds", "breaks", "opens", "closes",
                       "starts", "stops",  "turns", "lifts",  "drops", "carries",
                       "brings", "sends",  "reads", "writes", "counts", "checks",
                       "marks",  "notes",  "lists", "sorts",  "joins", "splits"});
    add_pool(p.prepositions,
             {"near", "under", "over", "with", "without", "about", "from", "into", "onto", "beside"});
    add_pool(p.adverbs,
             {"now", "soon", "often", "never", "daily", "slowly", "quickly", "gently", "firmly", "rarely"});
    add_pool(p.connectors,
             {"and", "or", "but", "while", "then", "also", "after", "before", "because", "though"});

    p.kw_passcode = v.add("passcode");
    p.kw_chief = v.add("chief");
    p.kw_declared = v.add("declared");

    size_t next_word = 0;
    auto add_synth = [&](std::vector<size_t>& pool, size_t count) {
        for (size_t i = 0; i < count; ++i) pool.push_back(v.add(detail::synth_word(next_word++)));
    };
    add_synth(p.owners, 80);
    add_synth(p.orgs, 40);
    add_synth(p.name_fragments, 80);
    add_synth(p.speakers, 40);
    add_synth(p.sentence_words, 150);

    // The background grammar needs a real noun pool on top of the fixed ids.
    if (v.size() + 20 > target_size)
        throw std::invalid_argument("default_lexicon: target vocab size too small");
    size_t filler = target_size - v.size();
    add_synth(p.nouns, filler);
    return lex;
}

// ---------------------------------------------------------------------------
// Canary records.
// ---------------------------------------------------------------------------

enum class CanaryKind { DigitString, Name, Sentence };

inline const char* canary_kind_name(CanaryKind k) {
    switch (k) {
        case CanaryKind::DigitString: return "digit-string";
        case CanaryKind::Name: return "name";
        case CanaryKind::Sentence: return "sentence";
    }
    throw std::invalid_argument("canary_kind_name: bad kind");
}

inline CanaryKind canary_kind_from_name(const std::string& s) {
    if (s == "digit-string") return CanaryKind::DigitString;
    if (s == "name") return CanaryKind::Name;
    if (s == "sentence") return CanaryKind::Sentence;
    throw std::invalid_argument("canary_kind_from_name: unknown kind \"" + s + "\"");
}

struct CanarySpec {
    std::string id;
    CanaryKind kind = CanaryKind::DigitString;
    std::vector<size_t> tokens;          // full training-form line, [cls] first
    std::vector<size_t> slot_positions;  // strictly increasing; tokens[slot[i]] == secret[i]
    std::vector<size_t> secret;          // the protected token sequence Y
    size_t f = 1;                        // injection count

    void validate(size_t vocab_size, size_t max_seq) const {
        if (id.empty()) throw std::invalid_argument("CanarySpec: empty record id");
        if (f == 0) throw std::invalid_argument("CanarySpec \"" + id + "\": injection count f must be >= 1");
        if (secret.empty()) throw std::invalid_argument("CanarySpec \"" + id + "\": empty secret");
        if (slot_positions.size() != secret.size())
            throw std::invalid_argument("CanarySpec \"" + id + "\": slot count does not match secret length");
        if (tokens.empty() || tokens[0] != kClsTokenId)
            throw std::invalid_argument("CanarySpec \"" + id + "\": line must start with [cls]");
        if (tokens.size() > max_seq)
            throw std::invalid_argument("CanarySpec \"" + id + "\": canary longer than maximum sequence length");
        for (size_t t : tokens)
            if (t >= vocab_size)
                throw std::invalid_argument("CanarySpec \"" + id + "\": token id out of vocab range");
        for (size_t i = 0; i < slot_positions.size(); ++i) {
            size_t pos = slot_positions[i];
            if (pos >= tokens.size())
                throw std::invalid_argument("CanarySpec \"" + id + "\": slot position out of range");
            if (i > 0 && slot_positions[i - 1] >= pos)
                throw std::invalid_argument("CanarySpec \"" + id + "\": slot positions must be strictly increasing");
            if (tokens[pos] != secret[i])
                throw std::invalid_argument("CanarySpec \"" + id + "\": token at slot does not match secret");
        }
    }
};

struct CanarySetConfig {
    size_t n_digit = 10;
    size_t n_name = 10;
    size_t n_sentence = 10;
    std::vector<size_t> frequencies = {1, 5, 15};  // cycled per kind, in order
    size_t fixed_frequency = 0;                    // if nonzero, overrides the cycle
};

// Builds the default canary set. Identity words are assigned deterministically
// from the reserved pools; secrets are drawn from seeded substreams.
inline std::vector<CanarySpec> make_canaries(const Lexicon& lex, uint64_t seed,
                                             const CanarySetConfig& cfg = {}) {
    const LexiconPools& p = lex.pools;
    if (cfg.n_digit * 2 > p.owners.size())
        throw std::invalid_argument("make_canaries: not enough owner fragments for digit records");
    if (cfg.n_name > p.orgs.size() || cfg.n_name * 2 > p.name_fragments.size())
        throw std::invalid_argument("make_canaries: not enough org words or name fragments");
    if (cfg.n_sentence > p.speakers.size())
        throw std::invalid_argument("make_canaries: not enough speaker words");
    if (cfg.frequencies.empty() && cfg.fixed_frequency == 0)
        throw std::invalid_argument("make_canaries: no injection frequencies given");

    auto freq_for = [&](size_t i) {
        return cfg.fixed_frequency != 0 ? cfg.fixed_frequency
                                        : cfg.frequencies[i % cfg.frequencies.size()];
    };
    auto tag = [](const char* prefix, size_t i) {
        std::string s = std::to_string(i);
        if (s.size() < 2) s.insert(s.begin(), '0');
        return std::string(prefix) + "-" + s;
    };

    std::vector<CanarySpec> out;

    // Digit-string records: "[cls] ownerA ownerB passcode d1 d2 d3 d4".
    for (size_t i = 0; i < cfg.n_digit; ++i) {
        Rng rng = Rng::substream(seed, "canary-digit", i);
        CanarySpec c;
        c.id = tag("digit", i);
        c.kind = CanaryKind::DigitString;
        c.tokens = {kClsTokenId, p.owners[2 * i], p.owners[2 * i + 1], p.kw_passcode};
        for (size_t d = 0; d < 4; ++d) {
            size_t digit = rng.uniform_int(kNumDigitTokens);
            c.slot_positions.push_back(c.tokens.size());
            c.secret.push_back(digit_token_id(digit));
            c.tokens.push_back(digit_token_id(digit));
        }
        c.f = freq_for(i);
        out.push_back(std::move(c));
    }

    // Name records: "[cls] org chief n1 n2". Fragments are paired off a
    // seeded shuffle so secrets are random but collision-free across records.
    {
        Rng rng = Rng::substream(seed, "canary-name-shuffle");
        std::vector<size_t> frags = p.name_fragments;
        rng.shuffle(frags);
        for (size_t i = 0; i < cfg.n_name; ++i) {
            CanarySpec c;
            c.id = tag("name", i);
            c.kind = CanaryKind::Name;
            c.tokens = {kClsTokenId, p.orgs[i], p.kw_chief};
            for (size_t j = 0; j < 2; ++j) {
                size_t frag = frags[2 * i + j];
                c.slot_positions.push_back(c.tokens.size());
                c.secret.push_back(frag);
                c.tokens.push_back(frag);
            }
            c.f = freq_for(i);
            out.push_back(std::move(c));
        }
    }

    // Sentence records: "[cls] speaker declared s1 .. s6".
    for (size_t i = 0; i < cfg.n_sentence; ++i) {
        Rng rng = Rng::substream(seed, "canary-sentence", i);
        CanarySpec c;
        c.id = tag("sentence", i);
        c.kind = CanaryKind::Sentence;
        c.tokens = {kClsTokenId, p.speakers[i], p.kw_declared};
        for (size_t idx : rng.sample_without_replacement(p.sentence_words.size(), 6)) {
            size_t word = p.sentence_words[idx];
            c.slot_positions.push_back(c.tokens.size());
            c.secret.push_back(word);
            c.tokens.push_back(word);
        }
        c.f = freq_for(i);
        out.push_back(std::move(c));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Corpus generation.
// ---------------------------------------------------------------------------

struct CanaryRecord {
    CanarySpec spec;
    std::vector<size_t> injected_lines;  // sorted train line indices
};

struct Corpus {
    uint64_t seed = 0;
    size_t max_seq = 32;
    Vocab vocab;
    std::vector<std::vector<size_t>> train;
    std::vector<std::vector<size_t>> valid;
    std::vector<CanaryRecord> registry;

    const CanaryRecord& record(const std::string& id) const {
        for (const auto& r : registry)
            if (r.spec.id == id) return r;
        throw std::out_of_range("Corpus: no canary record with id \"" + id + "\"");
    }

    uint64_t checksum() const;
};

namespace detail {

// One background line: "[cls]" + 1-3 clauses joined by connectors. With
// digit_prob > 0, a clause's object may be a digit run of 1-3 tokens, always
// bounded by non-digit tokens, so background text never contains 4
// consecutive digits. The default keeps digit tokens out of background text
// entirely: secrets should be the only place the digit alphabet occurs, so
// that digit prediction measures memorization rather than background digit
// statistics, and so that erasing secret circuits cannot move the validation
// loss through background digit positions.
inline std::vector<size_t> background_line(Rng& rng, const LexiconPools& p, size_t max_seq,
                                           double digit_prob) {
    std::vector<size_t> line = {kClsTokenId};
    auto pick = [&](const std::vector<size_t>& pool) { return pool[rng.uniform_int(pool.size())]; };
    size_t n_clauses = 1 + rng.uniform_int(3);
    for (size_t c = 0; c < n_clauses; ++c) {
        if (rng.uniform() < 0.7) line.push_back(pick(p.determiners));
        if (rng.uniform() < 0.4) line.push_back(pick(p.adjectives));
        line.push_back(pick(p.nouns));
        line.push_back(pick(p.verbs));
        if (rng.uniform() < digit_prob) {
            // object is a short digit run, e.g. "counts 4 7 1"
            size_t run = 1 + rng.uniform_int(3);
            for (size_t d = 0; d < run; ++d)
                line.push_back(digit_token_id(rng.uniform_int(kNumDigitTokens)));
        } else {
            double shape = rng.uniform();
            if (shape < 0.4375) {
                line.push_back(pick(p.prepositions));
                if (rng.uniform() < 0.5) line.push_back(pick(p.determiners));
                line.push_back(pick(p.nouns));
            } else if (shape < 0.75) {
                if (rng.uniform() < 0.5) line.push_back(pick(p.determiners));
                if (rng.uniform() < 0.4) line.push_back(pick(p.adjectives));
                line.push_back(pick(p.nouns));
            } else {
                line.push_back(pick(p.adverbs));
            }
        }
        if (c + 1 < n_clauses) line.push_back(pick(p.connectors));
    }
    if (line.size() > max_seq) line.resize(max_seq);
    return line;
}

// All length-|Y| windows of a canary line. If none of these appears in a
// sequence, no longer window can either.
inline std::vector<std::vector<size_t>> canary_windows(const CanarySpec& c) {
    std::vector<std::vector<size_t>> out;
    size_t w = c.secret.size();
    if (c.tokens.size() < w) return out;
    for (size_t i = 0; i + w <= c.tokens.size(); ++i)
        out.emplace_back(c.tokens.begin() + i, c.tokens.begin() + i + w);
    return out;
}

inline bool contains_window(const std::vector<size_t>& line, const std::vector<size_t>& window) {
    if (window.empty() || line.size() < window.size()) return false;
    for (size_t i = 0; i + window.size() <= line.size(); ++i)
        if (std::equal(window.begin(), window.end(), line.begin() + i)) return true;
    return false;
}

}  // namespace detail

inline Corpus generate(const Lexicon& lex, uint64_t seed, size_t n_train, size_t n_valid,
                       const std::vector<CanarySpec>& canaries, size_t max_seq = 32,
                       double bg_digit_prob = 0.0) {
    if (n_train == 0) throw std::invalid_argument("generate: n_train must be positive");
    if (!(bg_digit_prob >= 0.0 && bg_digit_prob <= 1.0))
        throw std::invalid_argument("generate: bg_digit_prob must lie in [0, 1]");
    size_t total_injections = 0;
    std::vector<std::string> seen_ids;
    for (const auto& c : canaries) {
        c.validate(lex.vocab.size(), max_seq);
        if (std::find(seen_ids.begin(), seen_ids.end(), c.id) != seen_ids.end())
            throw std::invalid_argument("generate: duplicate canary id \"" + c.id + "\"");
        seen_ids.push_back(c.id);
        total_injections += c.f;
    }
    if (n_train < total_injections)
        throw std::invalid_argument("generate: n_train smaller than total canary injections");

    Corpus corpus;
    corpus.seed = seed;
    corpus.max_seq = max_seq;
    corpus.vocab = lex.vocab;

    // Choose distinct train line indices for the injections, then assign them
    // to canary copies in registry order.
    Rng placement = Rng::substream(seed, "canary-placement");
    std::vector<size_t> sites = placement.sample_without_replacement(n_train, total_injections);
    size_t next_site = 0;
    std::vector<std::vector<size_t>> canary_at_line(n_train);
    for (const auto& c : canaries) {
        CanaryRecord rec;
        rec.spec = c;
        for (size_t k = 0; k < c.f; ++k) {
            size_t line = sites[next_site++];
            rec.injected_lines.push_back(line);
            canary_at_line[line] = c.tokens;
        }
        std::sort(rec.injected_lines.begin(), rec.injected_lines.end());
        corpus.registry.push_back(std::move(rec));
    }

    Rng bg_train = Rng::substream(seed, "background-train");
    corpus.train.reserve(n_train);
    for (size_t i = 0; i < n_train; ++i) {
        if (!canary_at_line[i].empty())
            corpus.train.push_back(canary_at_line[i]);
        else
            corpus.train.push_back(detail::background_line(bg_train, lex.pools, max_seq, bg_digit_prob));
    }

    // Validation: background only. The grammar cannot produce a canary window
    // (reserved tokens, digit-run cap), but re-draw on collision regardless.
    std::vector<std::vector<size_t>> all_windows;
    for (const auto& c : canaries) {
        auto w = detail::canary_windows(c);
        all_windows.insert(all_windows.end(), w.begin(), w.end());
    }
    Rng bg_valid = Rng::substream(seed, "background-valid");
    corpus.valid.reserve(n_valid);
    for (size_t i = 0; i < n_valid; ++i) {
        for (;;) {
            auto line = detail::background_line(bg_valid, lex.pools, max_seq, bg_digit_prob);
            bool clean = true;
            for (const auto& w : all_windows)
                if (detail::contains_window(line, w)) { clean = false; break; }
            if (clean) { corpus.valid.push_back(std::move(line)); break; }
        }
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// Leak probes and prompt variants.
// ---------------------------------------------------------------------------

struct LeakProbe {
    std::string record_id;
    std::vector<size_t> ids;                             // input with secret slots masked
    std::vector<std::pair<size_t, size_t>> targets;      // (position, gold token id), in secret order
};

inline LeakProbe leak_probe(const CanarySpec& rec) {
    if (rec.slot_positions.size() != rec.secret.size() || rec.secret.empty())
        throw std::invalid_argument("leak_probe: malformed canary record");
    LeakProbe probe;
    probe.record_id = rec.id;
    probe.ids = rec.tokens;
    for (size_t i = 0; i < rec.slot_positions.size(); ++i) {
        size_t pos = rec.slot_positions[i];
        if (pos >= probe.ids.size())
            throw std::invalid_argument("leak_probe: slot position out of range");
        probe.ids[pos] = kMaskTokenId;
        probe.targets.emplace_back(pos, rec.secret[i]);
    }
    return probe;
}

struct PromptTemplate {
    std::vector<size_t> tokens;          // context with placeholder positions
    std::vector<size_t> slot_positions;  // strictly increasing
};

inline std::vector<LeakProbe> prompt_variants(const CanarySpec& rec,
                                              const std::vector<PromptTemplate>& templates) {
    std::vector<LeakProbe> out;
    out.reserve(templates.size());
    for (const auto& t : templates) {
        if (t.slot_positions.size() != rec.secret.size())
            throw std::invalid_argument("prompt_variants: template slot count does not match secret length");
        LeakProbe probe;
        probe.record_id = rec.id;
        probe.ids = t.tokens;
        for (size_t i = 0; i < t.slot_positions.size(); ++i) {
            size_t pos = t.slot_positions[i];
            if (pos >= probe.ids.size())
                throw std::invalid_argument("prompt_variants: slot position out of range");
            probe.ids[pos] = kMaskTokenId;
            probe.targets.emplace_back(pos, rec.secret[i]);
        }
        out.push_back(std::move(probe));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization: line-oriented token-id text plus a JSON registry sidecar.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string lines_to_text(const std::vector<std::vector<size_t>>& lines) {
    std::string out;
    for (const auto& line : lines) {
        for (size_t i = 0; i < line.size(); ++i) {
            if (i) out += ' ';
            out += std::to_string(line[i]);
        }
        out += '\n';
    }
    return out;
}

inline std::vector<std::vector<size_t>> text_to_lines(const std::string& text) {
    std::vector<std::vector<size_t>> lines;
    std::vector<size_t> cur;
    size_t value = 0;
    bool in_number = false;
    for (char ch : text) {
        if (ch >= '0' && ch <= '9') {
            value = value * 10 + size_t(ch - '0');
            in_number = true;
        } else if (ch == ' ' || ch == '\n') {
            if (in_number) { cur.push_back(value); value = 0; in_number = false; }
            if (ch == '\n') { lines.push_back(std::move(cur)); cur.clear(); }
        } else {
            throw std::invalid_argument("corpus text: unexpected character");
        }
    }
    if (in_number) cur.push_back(value);
    if (!cur.empty()) lines.push_back(std::move(cur));
    return lines;
}

}  // namespace detail

inline nlohmann::ordered_json corpus_registry_json(const Corpus& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["max_seq"] = c.max_seq;
    j["n_train"] = c.train.size();
    j["n_valid"] = c.valid.size();
    j["vocab"] = c.vocab.tokens();
    nlohmann::ordered_json recs = nlohmann::ordered_json::array();
    for (const auto& r : c.registry) {
        nlohmann::ordered_json e;
        e["id"] = r.spec.id;
        e["kind"] = canary_kind_name(r.spec.kind);
        e["f"] = r.spec.f;
        e["tokens"] = r.spec.tokens;
        e["slots"] = r.spec.slot_positions;
        e["secret"] = r.spec.secret;
        e["injected_lines"] = r.injected_lines;
        recs.push_back(std::move(e));
    }
    j["canaries"] = std::move(recs);
    return j;
}

inline uint64_t Corpus::checksum() const {
    std::string blob = corpus_registry_json(*this).dump();
    blob += '\n';
    blob += detail::lines_to_text(train);
    blob += '\n';
    blob += detail::lines_to_text(valid);
    return fnv1a64(blob);
}

inline void save_corpus(const Corpus& c, const std::string& dir) {
    write_file(dir + "/train.txt", detail::lines_to_text(c.train));
    write_file(dir + "/valid.txt", detail::lines_to_text(c.valid));
    write_file(dir + "/registry.json", corpus_registry_json(c).dump(2) + "\n");
}

inline Corpus load_corpus(const std::string& dir) {
    Corpus c;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(dir + "/registry.json"));
    } catch (const nlohmann::json::parse_error&) {
        throw std::runtime_error("load_corpus: malformed registry.json");
    }
    c.seed = j.at("seed").get<uint64_t>();
    c.max_seq = j.at("max_seq").get<size_t>();
    c.vocab = Vocab::from_tokens(j.at("vocab").get<std::vector<std::string>>());
    c.train = detail::text_to_lines(read_file(dir + "/train.txt"));
    c.valid = detail::text_to_lines(read_file(dir + "/valid.txt"));
    if (c.train.size() != j.at("n_train").get<size_t>() ||
        c.valid.size() != j.at("n_valid").get<size_t>())
        throw std::runtime_error("load_corpus: line counts do not match registry");
    for (const auto& e : j.at("canaries")) {
        CanaryRecord r;
        r.spec.id = e.at("id").get<std::string>();
        r.spec.kind = canary_kind_from_name(e.at("kind").get<std::string>());
        r.spec.f = e.at("f").get<size_t>();
        r.spec.tokens = e.at("tokens").get<std::vector<size_t>>();
        r.spec.slot_positions = e.at("slots").get<std::vector<size_t>>();
        r.spec.secret = e.at("secret").get<std::vector<size_t>>();
        r.injected_lines = e.at("injected_lines").get<std::vector<size_t>>();
        r.spec.validate(c.vocab.size(), c.max_seq);
        if (r.injected_lines.size() != r.spec.f)
            throw std::runtime_error("load_corpus: registry injection count does not match f");
        for (size_t line : r.injected_lines) {
            if (line >= c.train.size() || c.train[line] != r.spec.tokens)
                throw std::runtime_error("load_corpus: registry injection site does not match train text");
        }
        c.registry.push_back(std::move(r));
    }
    return c;
}

}  // namespace pnlab
