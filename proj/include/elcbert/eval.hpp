#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "elcbert/checkpoint.hpp"
#include "elcbert/data.hpp"
#include "elcbert/encoder.hpp"
#include "elcbert/error.hpp"
#include "elcbert/mixing.hpp"

namespace elcbert {

// Pseudo-log-likelihood: sum over token positions of log p(token | sentence
// with that position masked), one forward pass per term. ids are the content
// tokens; the [CLS]/[SEP] wrapper is added here and never scored.
inline double pll_score(const EncoderState& state, const std::vector<std::int32_t>& ids) {
    if (ids.empty()) {
        throw EmptySentence("pll_score: sentence has no tokens");
    }
    std::vector<std::int32_t> wrapped;
    wrapped.reserve(ids.size() + 2);
    wrapped.push_back(Vocab::kCls);
    wrapped.insert(wrapped.end(), ids.begin(), ids.end());
    wrapped.push_back(Vocab::kSep);

    const std::size_t v = state.config.vocab_size;
    double total = 0.0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
        std::vector<std::int32_t> masked = wrapped;
        masked[p + 1] = Vocab::kMask;
        const Tensor logits = lm_logits(state, encode(state, masked));
        const double* row = logits.data().data() + (p + 1) * v;
        double mx = row[0];
        for (std::size_t j = 1; j < v; ++j) {
            mx = std::max(mx, row[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            denom += std::exp(row[j] - mx);
        }
        total += row[static_cast<std::size_t>(ids[p])] - mx - std::log(denom);
    }
    return total;
}

struct MinimalPair {
    std::string good;
    std::string bad;
    std::string phenomenon;
};

inline MinimalPair make_minimal_pair(std::string good, std::string bad, std::string phenomenon) {
    if (good == bad) {
        throw InputError("minimal pair: good and bad sentences are identical");
    }
    return {std::move(good), std::move(bad), std::move(phenomenon)};
}

struct PhenomenonStats {
    std::size_t scored = 0;
    double correct = 0.0;  // ties count 0.5
    std::size_t skipped = 0;

    double accuracy() const { return scored == 0 ? 0.0 : correct / static_cast<double>(scored); }
};

struct EvalResult {
    std::size_t scored = 0;
    std::size_t skipped = 0;
    double correct = 0.0;
    std::map<std::string, PhenomenonStats> by_phenomenon;

    double accuracy() const { return scored == 0 ? 0.0 : correct / static_cast<double>(scored); }
};

// Tokenizes against the model vocabulary; pairs touching [UNK] are skipped
// and counted rather than scored.
inline EvalResult minimal_pair_eval(const EncoderState& state, const Vocab& vocab,
                                    const std::vector<MinimalPair>& pairs) {
    EvalResult result;
    for (const MinimalPair& pair : pairs) {
        PhenomenonStats& stats = result.by_phenomenon[pair.phenomenon];
        std::vector<std::int32_t> good_ids;
        std::vector<std::int32_t> bad_ids;
        bool unk = false;
        for (const std::string& tok : tokenize_words(pair.good)) {
            const std::int32_t id = vocab.id_of(tok);
            unk = unk || id == Vocab::kUnk;
            good_ids.push_back(id);
        }
        for (const std::string& tok : tokenize_words(pair.bad)) {
            const std::int32_t id = vocab.id_of(tok);
            unk = unk || id == Vocab::kUnk;
            bad_ids.push_back(id);
        }
        if (unk || good_ids.empty() || bad_ids.empty()) {
            ++stats.skipped;
            ++result.skipped;
            continue;
        }
        const double sg = pll_score(state, good_ids);
        const double sb = pll_score(state, bad_ids);
        const double score = sg > sb ? 1.0 : (sg == sb ? 0.5 : 0.0);
        stats.correct += score;
        ++stats.scored;
        result.correct += score;
        ++result.scored;
    }
    if (result.scored == 0) {
        throw NoScorablePairs("minimal_pair_eval: no pair survived tokenization");
    }
    return result;
}

// --- synthetic agreement grammar ---
//
// Template: DET NOUN [s] [PREP DET NOUN [s]] VERB DET NOUN [s]
// Number is marked analytically: a plural noun phrase carries the marker
// token "s" after the noun, and the verb must agree with the subject. The
// minimal pair flips only the verb's form, so good and bad sentences always
// have the same length.

struct AgreementGrammar {
    std::vector<std::string> determiners;
    std::vector<std::string> train_nouns;
    std::vector<std::string> test_nouns;
    std::vector<std::string> verbs_sg;  // aligned with verbs_pl
    std::vector<std::string> verbs_pl;
    std::vector<std::string> prepositions;
    std::string plural_marker = "s";

    static AgreementGrammar standard() {
        AgreementGrammar g;
        g.determiners = {"the", "my", "your", "our", "their"};
        g.train_nouns = {"dog",  "cat",  "bird",  "horse", "fish",  "mouse", "fox",   "wolf",
                         "bear", "lion", "tiger", "rabbit", "deer",  "goat",  "sheep", "cow",
                         "pig",  "duck", "hen",   "owl",    "frog",  "snake", "crab",  "seal",
                         "whale", "shark", "eagle", "crow",  "swan",  "mole"};
        g.test_nouns = {"otter", "badger", "heron", "stork", "lynx",
                        "bison", "ferret", "raven", "finch", "viper"};
        g.verbs_sg = {"chases", "sees",   "finds", "likes",  "follows", "watches",
                      "greets", "avoids", "helps", "fears",  "touches", "trusts"};
        g.verbs_pl = {"chase",  "see",    "find",  "like",   "follow",  "watch",
                      "greet",  "avoid",  "help",  "fear",   "touch",   "trust"};
        g.prepositions = {"near", "behind", "beside"};
        return g;
    }

    std::vector<std::string> all_words() const {
        std::vector<std::string> words;
        const auto push = [&](const std::vector<std::string>& vs) {
            words.insert(words.end(), vs.begin(), vs.end());
        };
        push(determiners);
        push(train_nouns);
        push(test_nouns);
        push(verbs_sg);
        push(verbs_pl);
        push(prepositions);
        words.push_back(plural_marker);
        return words;
    }
};

namespace detail {

// Zipf-weighted pick: item i carries weight 1/(i+1). The mild skew keeps the
// corpus entropy well below the uniform ceiling.
inline std::size_t zipf_pick(Rng& rng, std::size_t n) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        total += 1.0 / static_cast<double>(i + 1);
    }
    double r = rng.next_double() * total;
    for (std::size_t i = 0; i < n; ++i) {
        r -= 1.0 / static_cast<double>(i + 1);
        if (r < 0.0) {
            return i;
        }
    }
    return n - 1;
}

struct NounPhrase {
    std::string text;
    bool plural = false;
};

inline NounPhrase sample_noun_phrase(Rng& rng, const AgreementGrammar& g,
                                     const std::vector<std::string>& nouns, bool plural) {
    NounPhrase np;
    np.plural = plural;
    np.text = g.determiners[zipf_pick(rng, g.determiners.size())];
    np.text += ' ';
    np.text += nouns[zipf_pick(rng, nouns.size())];
    if (plural) {
        np.text += ' ';
        np.text += g.plural_marker;
    }
    return np;
}

inline std::string build_sentence(Rng& rng, const AgreementGrammar& g,
                                  const std::vector<std::string>& subject_nouns,
                                  bool subject_plural, bool with_attractor,
                                  std::size_t verb_index, bool agree) {
    const NounPhrase subject = sample_noun_phrase(rng, g, subject_nouns, subject_plural);
    std::string sentence = subject.text;
    if (with_attractor) {
        sentence += ' ';
        sentence += g.prepositions[zipf_pick(rng, g.prepositions.size())];
        sentence += ' ';
        sentence += sample_noun_phrase(rng, g, g.train_nouns, rng.next_double() < 0.5).text;
    }
    const bool verb_plural = agree ? subject_plural : !subject_plural;
    sentence += ' ';
    sentence += verb_plural ? g.verbs_pl[verb_index] : g.verbs_sg[verb_index];
    sentence += ' ';
    sentence += sample_noun_phrase(rng, g, g.train_nouns, rng.next_double() < 0.5).text;
    return sentence;
}

}  // namespace detail

// Training text: grammatical sentences built from the train nouns only.
inline std::vector<std::string> gen_agreement_corpus(std::size_t sentences, std::uint64_t seed,
                                                     const AgreementGrammar& grammar) {
    Rng rng = Rng(seed).split("corpus");
    std::vector<std::string> lines;
    lines.reserve(sentences);
    for (std::size_t i = 0; i < sentences; ++i) {
        const bool plural = rng.next_double() < 0.5;
        const bool attractor = rng.next_double() < 0.5;
        const std::size_t verb = rng.next_below(grammar.verbs_sg.size());
        lines.push_back(detail::build_sentence(rng, grammar, grammar.train_nouns, plural,
                                               attractor, verb, true));
    }
    return lines;
}

// Minimal pairs over held-out subject nouns. (verb, number, attractor) cycle
// round-robin so every verb appears equally often with singular and plural
// subjects; a model with a fixed per-verb preference scores exactly 0.5.
inline std::vector<MinimalPair> gen_agreement_pairs(std::size_t n, std::uint64_t seed,
                                                    const AgreementGrammar& grammar,
                                                    bool held_out_subjects = true) {
    if (n < 1) {
        throw ConfigError("gen_agreement_pairs: n must be >= 1");
    }
    Rng rng = Rng(seed).split(held_out_subjects ? "pairs-test" : "pairs-train");
    const std::vector<std::string>& subjects =
        held_out_subjects ? grammar.test_nouns : grammar.train_nouns;
    std::vector<MinimalPair> pairs;
    pairs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const bool plural = i % 2 == 1;
        const std::size_t verb = (i / 2) % grammar.verbs_sg.size();
        const bool attractor = (i / 2 / grammar.verbs_sg.size()) % 2 == 1;
        // good and bad differ only in the verb form: the draws are shared
        const std::uint64_t sentence_stream = rng.next_u64();
        Rng good_rng = Rng(sentence_stream);
        Rng bad_rng = Rng(sentence_stream);
        std::string good = detail::build_sentence(good_rng, grammar, subjects, plural, attractor,
                                                  verb, true);
        std::string bad = detail::build_sentence(bad_rng, grammar, subjects, plural, attractor,
                                                 verb, false);
        pairs.push_back(make_minimal_pair(std::move(good), std::move(bad),
                                          attractor ? "sv_agreement_attractor"
                                                    : "sv_agreement_simple"));
    }
    return pairs;
}

// --- pairs file: good<TAB>bad<TAB>phenomenon, one pair per line ---

inline void write_pairs_file(std::ostream& os, const std::vector<MinimalPair>& pairs) {
    for (const MinimalPair& p : pairs) {
        os << p.good << '\t' << p.bad << '\t' << p.phenomenon << '\n';
    }
}

inline std::vector<MinimalPair> read_pairs_file(std::istream& is) {
    std::vector<MinimalPair> pairs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const std::size_t t1 = line.find('\t');
        const std::size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos) {
            throw InputError("pairs file: line " + std::to_string(lineno) +
                             " is not good<TAB>bad<TAB>phenomenon");
        }
        pairs.push_back(make_minimal_pair(line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1),
                                          line.substr(t2 + 1)));
    }
    return pairs;
}

inline std::vector<MinimalPair> load_pairs(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoFailure("cannot open '" + path + "'");
    }
    return read_pairs_file(is);
}

// Results CSV; the final "all" row aggregates every phenomenon.
inline void write_eval_csv(std::ostream& os, const EvalResult& result) {
    os << "phenomenon,count,accuracy,skipped\n";
    char buf[64];
    for (const auto& [name, stats] : result.by_phenomenon) {
        std::snprintf(buf, sizeof(buf), "%.17g", stats.accuracy());
        os << name << ',' << stats.scored << ',' << buf << ',' << stats.skipped << '\n';
    }
    std::snprintf(buf, sizeof(buf), "%.17g", result.accuracy());
    os << "all," << result.scored << ',' << buf << ',' << result.skipped << '\n';
}

// --- layer-importance report ---

struct LayerReport {
    std::vector<std::vector<double>> alpha;     // row per destination 1..N (+head)
    std::vector<std::vector<double>> rescaled;  // row k multiplied by k
    std::vector<double> entropy;                // -sum alpha ln alpha per row
    std::vector<std::size_t> argmax_src;
    std::vector<double> embedding_profile;      // weight on source 0 per row
};

inline LayerReport layer_report(const Checkpoint& ckpt) {
    if (!ckpt.config.wiring.is_elc()) {
        throw NotElcCheckpoint("layer_report: checkpoint does not use elc wiring");
    }
    const std::size_t rows =
        ckpt.config.num_layers + (ckpt.config.wiring.weighted_output ? 1 : 0);
    LayerReport report;
    for (std::size_t dest = 1; dest <= rows; ++dest) {
        const Tensor* raw = ckpt.find("mix.dest" + std::to_string(dest));
        if (raw == nullptr) {
            throw CorruptCheckpoint("layer_report: checkpoint is missing mix.dest" +
                                    std::to_string(dest));
        }
        const Tensor alpha = mix_alphas(raw->detach());
        std::vector<double> row(alpha.data().begin(), alpha.data().end());
        double entropy = 0.0;
        std::size_t argmax = 0;
        for (std::size_t i = 0; i < row.size(); ++i) {
            entropy -= row[i] > 0.0 ? row[i] * std::log(row[i]) : 0.0;
            if (row[i] > row[argmax]) {
                argmax = i;
            }
        }
        report.entropy.push_back(entropy);
        report.argmax_src.push_back(argmax);
        report.embedding_profile.push_back(row[0]);
        report.alpha.push_back(std::move(row));
    }
    report.rescaled = rescale_for_display(report.alpha);
    return report;
}

}  // namespace elcbert
