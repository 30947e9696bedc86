// SPDX-License-Identifier: Apache-2.0
//
// Text corpus -> byte-level token sequences. Ids 0..255 are raw bytes and 256
// is the beginning-of-sequence marker, so corpus models need vocab >= 257.

#pragma once

#include <cctype>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "strace/model.hpp"

namespace strace {

inline constexpr std::int32_t kBosToken = 256;
inline constexpr std::size_t kByteVocab = 257;

class CorpusError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline bool is_space(char c) {
    return std::isspace(static_cast<unsigned char>(c)) != 0;
}

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && is_space(s[b])) ++b;
    while (e > b && is_space(s[e - 1])) --e;
    return std::string(s.substr(b, e - b));
}

}  // namespace detail

/// Sentence-aligned chunks: a line is split after every '.', '?' or '!' that
/// is followed by whitespace; line ends always close a chunk.
inline std::vector<std::string> sentence_chunks(std::string_view text) {
    std::vector<std::string> out;
    auto flush = [&](std::string_view piece) {
        std::string t = detail::trim(piece);
        if (!t.empty()) out.push_back(std::move(t));
    };
    std::size_t start = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (c == '\n') {
            flush(text.substr(start, i - start));
            start = i + 1;
        } else if ((c == '.' || c == '?' || c == '!') && i + 1 < text.size() && detail::is_space(text[i + 1])) {
            flush(text.substr(start, i + 1 - start));
            start = i + 1;
        }
    }
    flush(text.substr(start));
    return out;
}

inline std::size_t word_count(std::string_view s) {
    std::size_t words = 0;
    bool in_word = false;
    for (char c : s) {
        if (detail::is_space(c)) {
            in_word = false;
        } else if (!in_word) {
            in_word = true;
            ++words;
        }
    }
    return words;
}

/// BOS followed by the raw bytes, truncated to max_seq tokens.
inline TokenSequence tokenize_bytes(std::string_view text, std::size_t max_seq) {
    TokenSequence out;
    out.reserve(text.size() + 1);
    out.push_back(kBosToken);
    for (unsigned char c : text) out.push_back(static_cast<std::int32_t>(c));
    if (out.size() > max_seq) out.resize(max_seq);
    return out;
}

inline std::vector<TokenSequence> ingest_text(std::string_view text, std::size_t min_words, std::size_t max_words,
                                              std::size_t max_seq) {
    std::vector<TokenSequence> out;
    for (const auto& chunk : sentence_chunks(text)) {
        const std::size_t w = word_count(chunk);
        if (w >= min_words && w <= max_words) out.push_back(tokenize_bytes(chunk, max_seq));
    }
    if (out.empty()) throw CorpusError("no qualifying chunk in corpus");
    return out;
}

inline std::vector<TokenSequence> ingest_corpus(const std::string& path, std::size_t min_words, std::size_t max_words,
                                                std::size_t max_seq) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorpusError("cannot read corpus '" + path + "'");
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return ingest_text(text, min_words, max_words, max_seq);
}

}  // namespace strace
