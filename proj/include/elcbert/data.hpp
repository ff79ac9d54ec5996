#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "elcbert/error.hpp"
#include "elcbert/rng.hpp"

namespace elcbert {

// Word-level vocabulary with a fixed reserved block. Text can never produce a
// reserved id: the tokenizer splits brackets off, so "[MASK]" in running text
// becomes plain word and punctuation tokens.
struct Vocab {
    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kUnk = 1;
    static constexpr std::int32_t kMask = 2;
    static constexpr std::int32_t kCls = 3;
    static constexpr std::int32_t kSep = 4;
    static constexpr std::size_t kReserved = 5;

    std::vector<std::string> tokens;  // id = kReserved + index
    std::unordered_map<std::string, std::int32_t> ids;

    static Vocab from_tokens(std::vector<std::string> toks) {
        Vocab v;
        v.tokens = std::move(toks);
        for (std::size_t i = 0; i < v.tokens.size(); ++i) {
            v.ids.emplace(v.tokens[i], static_cast<std::int32_t>(kReserved + i));
        }
        return v;
    }

    std::size_t size() const { return kReserved + tokens.size(); }

    std::int32_t id_of(const std::string& token) const {
        const auto it = ids.find(token);
        return it == ids.end() ? kUnk : it->second;
    }

    static bool is_reserved(std::int32_t id) {
        return id >= 0 && id < static_cast<std::int32_t>(kReserved);
    }

    const std::string& token_of(std::int32_t id) const {
        static const std::vector<std::string> kReservedNames = {"[PAD]", "[UNK]", "[MASK]",
                                                                "[CLS]", "[SEP]"};
        if (is_reserved(id)) {
            return kReservedNames[static_cast<std::size_t>(id)];
        }
        return tokens.at(static_cast<std::size_t>(id) - kReserved);
    }
};

// One document is a list of normalized lines (sentences).
using RawDocument = std::vector<std::string>;

namespace detail {

inline bool is_word_punct(char c) {
    static constexpr std::string_view kPunct = R"(!"#$%&'()*+,-./:;<=>?@[\]^_`{|}~)";
    return kPunct.find(c) != std::string_view::npos;
}

// Full UTF-8 validation; returns the byte offset of the first invalid byte or
// npos when clean.
inline std::size_t find_invalid_utf8(std::string_view bytes) {
    std::size_t i = 0;
    const std::size_t n = bytes.size();
    while (i < n) {
        const unsigned char b0 = static_cast<unsigned char>(bytes[i]);
        std::size_t len = 0;
        std::uint32_t min_cp = 0;
        if (b0 < 0x80) {
            i += 1;
            continue;
        } else if ((b0 & 0xE0) == 0xC0) {
            len = 2;
            min_cp = 0x80;
        } else if ((b0 & 0xF0) == 0xE0) {
            len = 3;
            min_cp = 0x800;
        } else if ((b0 & 0xF8) == 0xF0) {
            len = 4;
            min_cp = 0x10000;
        } else {
            return i;
        }
        if (i + len > n) {
            return i;
        }
        std::uint32_t cp = b0 & (0xFFu >> (len + 1));
        for (std::size_t k = 1; k < len; ++k) {
            const unsigned char bk = static_cast<unsigned char>(bytes[i + k]);
            if ((bk & 0xC0) != 0x80) {
                return i + k;
            }
            cp = (cp << 6) | (bk & 0x3Fu);
        }
        if (cp < min_cp || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
            return i;
        }
        i += len;
    }
    return std::string_view::npos;
}

inline std::string normalize_whitespace(std::string_view line) {
    std::string out;
    out.reserve(line.size());
    bool in_space = true;  // trims leading whitespace
    for (char c : line) {
        if (c == ' ' || c == '\t' || c == '\v' || c == '\f') {
            if (!in_space) {
                out.push_back(' ');
                in_space = true;
            }
        } else {
            out.push_back(c);
            in_space = false;
        }
    }
    while (!out.empty() && out.back() == ' ') {
        out.pop_back();
    }
    return out;
}

}  // namespace detail

// Lowercased, whitespace-delimited tokens with ASCII punctuation split off as
// single-character tokens.
inline std::vector<std::string> tokenize_words(std::string_view line) {
    std::vector<std::string> out;
    std::string word;
    const auto flush = [&] {
        if (!word.empty()) {
            out.push_back(word);
            word.clear();
        }
    };
    for (char c : line) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            flush();
        } else if (detail::is_word_punct(c)) {
            flush();
            out.emplace_back(1, c);
        } else {
            word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    flush();
    return out;
}

// Reads UTF-8 text files into documents. Order is stable: lexicographic path
// order, then line order. Blank lines split documents; CR characters are
// stripped so CRLF and LF inputs are identical.
inline std::vector<RawDocument> ingest(std::vector<std::string> paths) {
    std::sort(paths.begin(), paths.end());
    std::vector<RawDocument> docs;
    for (const std::string& path : paths) {
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            throw IoFailure("cannot open '" + path + "'");
        }
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (in.bad()) {
            throw IoFailure("read failed on '" + path + "'");
        }
        const std::size_t bad = detail::find_invalid_utf8(bytes);
        if (bad != std::string_view::npos) {
            throw InvalidUtf8("invalid UTF-8 in '" + path + "' at byte offset " +
                              std::to_string(bad));
        }
        bytes.erase(std::remove(bytes.begin(), bytes.end(), '\r'), bytes.end());

        RawDocument current;
        std::size_t start = 0;
        const auto take_line = [&](std::string_view line) {
            const std::string normalized = detail::normalize_whitespace(line);
            if (normalized.empty()) {
                if (!current.empty()) {
                    docs.push_back(std::move(current));
                    current.clear();
                }
            } else {
                current.push_back(normalized);
            }
        };
        for (std::size_t i = 0; i <= bytes.size(); ++i) {
            if (i == bytes.size() || bytes[i] == '\n') {
                take_line(std::string_view(bytes).substr(start, i - start));
                start = i + 1;
            }
        }
        if (!current.empty()) {
            docs.push_back(std::move(current));
        }
    }
    return docs;
}

// Frequency-ranked vocabulary, ties broken lexicographically; keeps the top
// max_size - 5 tokens after the reserved block.
inline Vocab build_vocab(const std::vector<RawDocument>& docs, std::size_t max_size) {
    if (max_size <= Vocab::kReserved) {
        throw ConfigError("build_vocab: max_size must exceed the reserved count " +
                          std::to_string(Vocab::kReserved));
    }
    std::map<std::string, std::size_t> counts;
    for (const RawDocument& doc : docs) {
        for (const std::string& line : doc) {
            for (std::string& tok : tokenize_words(line)) {
                ++counts[std::move(tok)];
            }
        }
    }
    if (counts.empty()) {
        throw EmptyCorpus("build_vocab: no tokens in corpus");
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    const std::size_t keep = std::min(ranked.size(), max_size - Vocab::kReserved);
    std::vector<std::string> tokens;
    tokens.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) {
        tokens.push_back(ranked[i].first);
    }
    return Vocab::from_tokens(std::move(tokens));
}

// Token-id corpus: documents hold one id sequence per line.
struct Corpus {
    std::vector<std::vector<std::vector<std::int32_t>>> documents;

    std::size_t num_sequences() const {
        std::size_t n = 0;
        for (const auto& doc : documents) {
            n += doc.size();
        }
        return n;
    }
};

inline Corpus encode_corpus(const std::vector<RawDocument>& docs, const Vocab& vocab) {
    Corpus corpus;
    corpus.documents.reserve(docs.size());
    for (const RawDocument& doc : docs) {
        std::vector<std::vector<std::int32_t>> sequences;
        sequences.reserve(doc.size());
        for (const std::string& line : doc) {
            std::vector<std::int32_t> ids;
            for (const std::string& tok : tokenize_words(line)) {
                ids.push_back(vocab.id_of(tok));
            }
            if (!ids.empty()) {
                sequences.push_back(std::move(ids));
            }
        }
        if (!sequences.empty()) {
            corpus.documents.push_back(std::move(sequences));
        }
    }
    return corpus;
}

struct Batch {
    std::size_t batch_size = 0;
    std::size_t seq_len = 0;
    std::vector<std::int32_t> tokens;  // batch_size * seq_len, row-major
    std::vector<std::uint8_t> keep;    // true = real token
};

// Wraps a sequence as [CLS] tokens [SEP], truncating the content to fit and
// padding to seq_len.
inline void pack_sequence(const std::vector<std::int32_t>& ids, std::size_t seq_len,
                          std::int32_t* out_tokens, std::uint8_t* out_keep) {
    const std::size_t content = std::min(ids.size(), seq_len - 2);
    std::size_t w = 0;
    out_tokens[w] = Vocab::kCls;
    out_keep[w] = 1;
    ++w;
    for (std::size_t i = 0; i < content; ++i, ++w) {
        out_tokens[w] = ids[i];
        out_keep[w] = 1;
    }
    out_tokens[w] = Vocab::kSep;
    out_keep[w] = 1;
    ++w;
    for (; w < seq_len; ++w) {
        out_tokens[w] = Vocab::kPad;
        out_keep[w] = 0;
    }
}

// Deterministic epoch view of the corpus: every epoch is a seeded permutation
// of all sequences, cut into full batches (the incomplete tail is dropped).
// Batches are random access, so a training step can be reproduced from
// (seed, step) alone.
class BatchStream {
  public:
    BatchStream(const Corpus& corpus, std::size_t seq_len, std::size_t batch_size,
                std::uint64_t seed, std::uint64_t epoch)
        : corpus_(&corpus), seq_len_(seq_len), batch_size_(batch_size) {
        if (seq_len < 3) {
            throw ConfigError("batches: seq_len must be >= 3 to fit [CLS] and [SEP]");
        }
        for (std::size_t d = 0; d < corpus.documents.size(); ++d) {
            for (std::size_t s = 0; s < corpus.documents[d].size(); ++s) {
                order_.emplace_back(d, s);
            }
        }
        if (order_.empty()) {
            throw EmptyCorpus("batches: corpus has no sequences");
        }
        Rng rng = Rng(seed).split("shuffle").split(epoch);
        shuffle(order_, rng);
    }

    std::size_t size() const { return order_.size() / batch_size_; }

    Batch batch(std::size_t index) const {
        if (index >= size()) {
            throw StepOutOfRange("batch index " + std::to_string(index) + " out of " +
                                 std::to_string(size()));
        }
        Batch b;
        b.batch_size = batch_size_;
        b.seq_len = seq_len_;
        b.tokens.resize(batch_size_ * seq_len_);
        b.keep.resize(batch_size_ * seq_len_);
        for (std::size_t i = 0; i < batch_size_; ++i) {
            const auto [d, s] = order_[index * batch_size_ + i];
            pack_sequence(corpus_->documents[d][s], seq_len_, b.tokens.data() + i * seq_len_,
                          b.keep.data() + i * seq_len_);
        }
        return b;
    }

    const std::vector<std::pair<std::size_t, std::size_t>>& order() const { return order_; }

  private:
    const Corpus* corpus_;
    std::size_t seq_len_;
    std::size_t batch_size_;
    std::vector<std::pair<std::size_t, std::size_t>> order_;
};

// --- vocab file format ---
// Comment lines at the top start with "# "; then one token per line, with
// token id = 5 + line index counted over token lines only.

inline void write_vocab(std::ostream& os, const Vocab& vocab) {
    os << "# reserved ids: 0=[PAD] 1=[UNK] 2=[MASK] 3=[CLS] 4=[SEP]\n";
    os << "# token id = 5 + line index (comment lines excluded)\n";
    for (const std::string& tok : vocab.tokens) {
        os << tok << '\n';
    }
}

inline Vocab read_vocab(std::istream& is) {
    std::vector<std::string> tokens;
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (header && line.rfind("# ", 0) == 0) {
            continue;
        }
        header = false;
        if (line.empty()) {
            continue;
        }
        tokens.push_back(line);
    }
    return Vocab::from_tokens(std::move(tokens));
}

inline void save_vocab(const std::string& path, const Vocab& vocab) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw IoFailure("cannot write '" + path + "'");
    }
    write_vocab(os, vocab);
    if (!os.flush()) {
        throw IoFailure("write failed on '" + path + "'");
    }
}

inline Vocab load_vocab(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoFailure("cannot open '" + path + "'");
    }
    return read_vocab(is);
}

}  // namespace elcbert
