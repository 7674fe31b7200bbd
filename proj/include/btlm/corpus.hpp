#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "btlm/error.hpp"

namespace btlm {

using Sentence = std::vector<int>;

// Closed word vocabulary with four reserved entries at fixed ids.
class Vocabulary {
public:
    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static constexpr int kUnk = 2;
    static constexpr int kPad = 3;
    static constexpr int kNumReserved = 4;

    Vocabulary() {
        for (const char* t : {"<s>", "</s>", "<unk>", "<pad>"}) add(t);
    }

    int add(const std::string& token) {
        if (auto it = ids_.find(token); it != ids_.end()) return it->second;
        const int id = static_cast<int>(tokens_.size());
        tokens_.push_back(token);
        ids_.emplace(token, id);
        return id;
    }

    std::size_t size() const { return tokens_.size(); }
    bool contains(const std::string& token) const { return ids_.count(token) != 0; }

    int id(const std::string& token) const {
        auto it = ids_.find(token);
        return it == ids_.end() ? kUnk : it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
            throw InputError("token id " + std::to_string(id) + " outside vocabulary");
        }
        return tokens_[static_cast<std::size_t>(id)];
    }

    const std::vector<std::string>& tokens() const { return tokens_; }

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

    // "token<TAB>id" per line, ids ascending.
    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw IoError("cannot write vocabulary file '" + path + "'");
        for (std::size_t i = 0; i < tokens_.size(); ++i) os << tokens_[i] << '\t' << i << '\n';
        if (!os) throw IoError("failed writing vocabulary file '" + path + "'");
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot read vocabulary file '" + path + "'");
        Vocabulary v;
        v.tokens_.clear();
        v.ids_.clear();
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (line.empty()) continue;
            const auto tab = line.rfind('\t');
            if (tab == std::string::npos) {
                throw InputError(path + ":" + std::to_string(lineno) + ": expected token<TAB>id");
            }
            const std::string tok = line.substr(0, tab);
            const int id = std::stoi(line.substr(tab + 1));
            if (id != static_cast<int>(v.tokens_.size()) || v.ids_.count(tok)) {
                throw InputError(path + ":" + std::to_string(lineno) + ": ids must be dense, ascending and unique");
            }
            v.tokens_.push_back(tok);
            v.ids_.emplace(tok, id);
        }
        const Vocabulary ref;
        for (int r = 0; r < kNumReserved; ++r) {
            if (v.tokens_.size() <= static_cast<std::size_t>(r) || v.tokens_[r] != ref.tokens_[r]) {
                throw InputError(path + ": reserved tokens missing or moved");
            }
        }
        return v;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

inline std::vector<std::string> split_words(const std::string& line) {
    std::istringstream is(line);
    std::vector<std::string> out;
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

// Frequency-ranked vocabulary; ties broken lexicographically. max_size counts
// regular words only (0 = unlimited); words below min_count are left out and
// later map to <unk>.
inline Vocabulary build_vocab(const std::vector<std::string>& lines, std::size_t max_size = 0,
                              std::size_t min_count = 1) {
    if (lines.empty()) throw InputError("build_vocab: empty corpus");
    std::map<std::string, std::size_t> counts;
    for (const auto& l : lines) {
        for (auto& w : split_words(l)) ++counts[w];
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    std::size_t added = 0;
    for (const auto& [w, c] : ranked) {
        if (c < min_count) continue;
        if (max_size != 0 && added >= max_size) break;
        if (v.contains(w)) continue;
        v.add(w);
        ++added;
    }
    return v;
}

// Whitespace tokenization wrapped in start/end markers; OOV words become <unk>.
inline Sentence tokenize(const std::string& line, const Vocabulary& vocab, std::size_t* oov_count = nullptr) {
    Sentence s{Vocabulary::kBos};
    for (const auto& w : split_words(line)) {
        const int id = vocab.id(w);
        if (id == Vocabulary::kUnk && w != "<unk>" && oov_count) ++*oov_count;
        s.push_back(id);
    }
    s.push_back(Vocabulary::kEos);
    return s;
}

inline std::string detokenize(const Sentence& s, const Vocabulary& vocab) {
    std::string out;
    for (int id : s) {
        if (id == Vocabulary::kBos || id == Vocabulary::kEos || id == Vocabulary::kPad) continue;
        if (!out.empty()) out += ' ';
        out += vocab.token(id);
    }
    return out;
}

inline std::vector<Sentence> tokenize_all(const std::vector<std::string>& lines, const Vocabulary& vocab,
                                          std::size_t* oov_count = nullptr) {
    std::vector<Sentence> out;
    out.reserve(lines.size());
    for (const auto& l : lines) out.push_back(tokenize(l, vocab, oov_count));
    return out;
}

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read corpus file '" + path + "'");
    std::vector<std::string> out;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        out.push_back(line);
    }
    return out;
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write '" + path + "'");
    for (const auto& l : lines) os << l << '\n';
    if (!os) throw IoError("failed writing '" + path + "'");
}

// Counts words in a token-id corpus, excluding the start marker.
inline std::size_t predicted_token_count(const std::vector<Sentence>& corpus) {
    std::size_t n = 0;
    for (const auto& s : corpus) n += s.empty() ? 0 : s.size() - 1;
    return n;
}

}  // namespace btlm
