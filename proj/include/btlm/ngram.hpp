#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "btlm/corpus.hpp"
#include "btlm/error.hpp"

namespace btlm {

enum class NGramSmoothing { KneserNey, Additive };

// Backoff n-gram model. Probabilities of stored n-grams already include the
// interpolated lower-order mass, so lookup is the usual ARPA recursion:
//   p(w | h) = stored(h, w)             if (h, w) is stored
//            = bow(h) * p(w | h minus its oldest word)   otherwise.
// Every predictable word (all ids except <s> and <pad>) has a unigram entry.
class NGramModel {
public:
    static constexpr std::size_t kMaxOrder = 4;

    NGramModel() = default;

    std::size_t order() const { return order_; }
    const Vocabulary& vocab() const { return vocab_; }
    NGramSmoothing smoothing() const { return smoothing_; }
    const std::vector<double>& discounts() const { return discounts_; }

    static bool predictable(int id) { return id != Vocabulary::kBos && id != Vocabulary::kPad; }

    // Backoff-resolved probability of w after `context` (oldest first). Only
    // the last order-1 context words matter; OOV ids map to <unk>.
    double prob(std::vector<int> context, int w) const {
        if (w < 0 || static_cast<std::size_t>(w) >= vocab_.size()) w = Vocabulary::kUnk;
        if (!predictable(w)) throw InputError("ngram: token id " + std::to_string(w) + " is never predicted");
        for (auto& c : context) {
            if (c < 0 || static_cast<std::size_t>(c) >= vocab_.size()) c = Vocabulary::kUnk;
        }
        if (context.size() > order_ - 1) context.erase(context.begin(), context.end() - static_cast<std::ptrdiff_t>(order_ - 1));
        double bow_acc = 1.0;
        for (std::size_t start = 0; start <= context.size(); ++start) {
            const std::size_t n = context.size() - start + 1;
            std::vector<int> gram(context.begin() + static_cast<std::ptrdiff_t>(start), context.end());
            gram.push_back(w);
            const auto& tbl = probs_[n - 1];
            if (auto it = tbl.find(pack(gram)); it != tbl.end()) return bow_acc * it->second;
            gram.pop_back();
            if (!gram.empty()) {
                const auto& bt = bows_[gram.size() - 1];
                if (auto bit = bt.find(pack(gram)); bit != bt.end()) bow_acc *= bit->second;
            }
        }
        throw ContractError("ngram: no unigram entry for token id " + std::to_string(w));
    }

    // Per-token probabilities of a tokenized sentence (<s> ... </s>).
    std::vector<double> word_probs(const Sentence& s) const {
        std::vector<double> out;
        for (std::size_t i = 1; i < s.size(); ++i) {
            const std::size_t lo = i >= order_ - 1 ? i - (order_ - 1) : 0;
            out.push_back(prob(std::vector<int>(s.begin() + static_cast<std::ptrdiff_t>(lo), s.begin() + static_cast<std::ptrdiff_t>(i)), s[i]));
        }
        return out;
    }

    std::size_t num_entries(std::size_t n) const { return probs_[n - 1].size(); }

    // ARPA text: log10 probabilities and backoff weights per order.
    void save_arpa(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw IoError("cannot write ARPA file '" + path + "'");
        os << "\n\\data\\\n";
        std::vector<std::vector<std::pair<std::vector<int>, double>>> sorted(order_);
        for (std::size_t n = 1; n <= order_; ++n) {
            for (const auto& [k, p] : probs_[n - 1]) sorted[n - 1].emplace_back(unpack(k, n), p);
            if (n == 1) sorted[0].emplace_back(std::vector<int>{Vocabulary::kBos}, 0.0);
            std::sort(sorted[n - 1].begin(), sorted[n - 1].end());
            os << "ngram " << n << "=" << sorted[n - 1].size() << "\n";
        }
        char buf[64];
        for (std::size_t n = 1; n <= order_; ++n) {
            os << "\n\\" << n << "-grams:\n";
            for (const auto& [gram, p] : sorted[n - 1]) {
                if (p > 0) {
                    std::snprintf(buf, sizeof buf, "%.17g", std::log10(p));
                    os << buf;
                } else {
                    os << "-99";
                }
                os << '\t';
                for (std::size_t i = 0; i < gram.size(); ++i) os << (i ? " " : "") << vocab_.token(gram[i]);
                if (n < order_) {
                    const auto& bt = bows_[n - 1];
                    if (auto it = bt.find(pack(gram)); it != bt.end()) {
                        std::snprintf(buf, sizeof buf, "%.17g", std::log10(it->second));
                        os << '\t' << buf;
                    }
                }
                os << '\n';
            }
        }
        os << "\n\\end\\\n";
        if (!os) throw IoError("failed writing ARPA file '" + path + "'");
    }

    // Reads an ARPA file. Words not yet in `vocab` are appended to it.
    static NGramModel load_arpa(const std::string& path, Vocabulary vocab = Vocabulary()) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot read ARPA file '" + path + "'");
        NGramModel m;
        m.vocab_ = std::move(vocab);
        std::string line;
        std::size_t section = 0;
        std::vector<std::size_t> declared;
        std::vector<std::size_t> listed(kMaxOrder, 0);
        std::size_t lineno = 0;
        auto fail = [&](const std::string& msg) { throw InputError(path + ":" + std::to_string(lineno) + ": " + msg); };
        while (std::getline(is, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            if (line == "\\data\\") {
                section = 0;
                continue;
            }
            if (line == "\\end\\") break;
            if (line.rfind("ngram ", 0) == 0) {
                const auto eq = line.find('=');
                if (eq == std::string::npos) fail("malformed ngram count line");
                declared.push_back(std::stoul(line.substr(eq + 1)));
                continue;
            }
            if (line.front() == '\\') {
                section = std::stoul(line.substr(1));
                if (section < 1 || section > kMaxOrder) fail("unsupported order " + std::to_string(section));
                m.order_ = std::max(m.order_, section);
                continue;
            }
            if (section == 0) fail("entry outside an n-gram section");
            ++listed[section - 1];
            std::istringstream ls(line);
            std::string lp;
            ls >> lp;
            std::vector<int> gram;
            for (std::size_t i = 0; i < section; ++i) {
                std::string w;
                if (!(ls >> w)) fail("n-gram has too few words");
                gram.push_back(m.vocab_.add(w));
            }
            const double p = lp == "-99" ? 0.0 : std::pow(10.0, std::stod(lp));
            if (!(section == 1 && gram[0] == Vocabulary::kBos)) m.probs_[section - 1][pack(gram)] = p;
            std::string bw;
            if (ls >> bw) m.bows_[section - 1][pack(gram)] = std::pow(10.0, std::stod(bw));
        }
        if (m.order_ == 0) throw InputError(path + ": no n-gram sections");
        for (std::size_t n = 0; n < declared.size() && n < m.order_; ++n) {
            const std::size_t have = listed[n];
            if (have != declared[n]) {
                throw InputError(path + ": order " + std::to_string(n + 1) + " declares " + std::to_string(declared[n]) +
                                 " entries but lists " + std::to_string(have));
            }
        }
        return m;
    }

private:
    friend NGramModel train_ngram(const std::vector<Sentence>&, const Vocabulary&, std::size_t, NGramSmoothing);

    static std::uint64_t pack(const std::vector<int>& gram) {
        std::uint64_t k = 0;
        for (int id : gram) k = (k << 16) | (static_cast<std::uint64_t>(id) & 0xFFFFu);
        return k;
    }
    static std::vector<int> unpack(std::uint64_t k, std::size_t n) {
        std::vector<int> g(n);
        for (std::size_t i = n; i-- > 0;) {
            g[i] = static_cast<int>(k & 0xFFFFu);
            k >>= 16;
        }
        return g;
    }

    std::size_t order_ = 0;
    Vocabulary vocab_;
    NGramSmoothing smoothing_ = NGramSmoothing::KneserNey;
    std::vector<double> discounts_;
    std::unordered_map<std::uint64_t, double> probs_[kMaxOrder];
    std::unordered_map<std::uint64_t, double> bows_[kMaxOrder];
};

// Interpolated Kneser-Ney with one discount per order, D = n1 / (n1 + 2 n2)
// from count-of-counts. Corpora under 10k predicted tokens use additive
// smoothing instead: p(w|h) = (c(h,w) + 0.1 W p(w|h')) / (c(h) + 0.1 W),
// which at the unigram level is add-0.1 over the W predictable words.
inline NGramModel train_ngram(const std::vector<Sentence>& corpus, const Vocabulary& vocab, std::size_t order = 4,
                              NGramSmoothing smoothing = NGramSmoothing::KneserNey) {
    constexpr std::size_t kMinTokensForDiscounts = 10000;
    constexpr double kAdditive = 0.1;
    if (corpus.empty()) throw InputError("train_ngram: empty corpus");
    if (order < 1 || order > NGramModel::kMaxOrder) throw ConfigError("ngram order must be in 1..4");
    if (vocab.size() > 0xFFFF) throw ConfigError("ngram vocabulary limited to 65535 entries");
    const std::size_t tokens = predicted_token_count(corpus);
    if (tokens == 0) throw InputError("train_ngram: corpus has no tokens");
    if (smoothing == NGramSmoothing::KneserNey && tokens < kMinTokensForDiscounts) smoothing = NGramSmoothing::Additive;

    using Key = std::uint64_t;
    auto pack = [](const int* b, std::size_t n) {
        Key k = 0;
        for (std::size_t i = 0; i < n; ++i) k = (k << 16) | static_cast<Key>(b[i]);
        return k;
    };
    // counts[n-1][ngram]: raw counts.
    std::vector<std::unordered_map<Key, double>> raw(order);
    std::vector<std::unordered_set<Key>> extended(order);  // (v, g) pairs already credited to g
    std::vector<std::unordered_map<Key, double>> cont(order);
    for (const auto& s : corpus) {
        for (const int id : s) {
            if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) throw InputError("train_ngram: id outside vocabulary");
        }
        for (std::size_t i = 1; i < s.size(); ++i) {
            for (std::size_t n = 1; n <= order && n <= i + 1; ++n) {
                const int* g = s.data() + (i + 1 - n);
                raw[n - 1][pack(g, n)] += 1.0;
                // Credit the (n-1)-gram suffix with a continuation from g[0].
                if (n >= 2 && extended[n - 1].insert(pack(g, n)).second) cont[n - 2][pack(g + 1, n - 1)] += 1.0;
            }
        }
    }
    const std::size_t W = vocab.size() - 2;

    // Modified counts per order: raw at the top order and for n-grams that
    // start at <s>, continuation counts otherwise.
    std::vector<std::unordered_map<Key, double>> cnt(order);
    for (std::size_t n = 1; n <= order; ++n) {
        for (const auto& [k, c] : raw[n - 1]) {
            const int first = static_cast<int>((k >> (16 * (n - 1))) & 0xFFFFu);
            const bool use_raw = smoothing == NGramSmoothing::Additive || n == order || first == Vocabulary::kBos;
            if (use_raw) {
                cnt[n - 1][k] = c;
            } else {
                auto it = cont[n - 1].find(k);
                cnt[n - 1][k] = it == cont[n - 1].end() ? c : it->second;
            }
        }
    }

    NGramModel m;
    m.order_ = order;
    m.vocab_ = vocab;
    m.smoothing_ = smoothing;
    m.discounts_.assign(order, 0.0);
    if (smoothing == NGramSmoothing::KneserNey) {
        for (std::size_t n = 1; n <= order; ++n) {
            double n1 = 0, n2 = 0;
            for (const auto& [k, c] : cnt[n - 1]) {
                if (c == 1.0) ++n1;
                if (c == 2.0) ++n2;
            }
            double d = n1 + 2 * n2 > 0 ? n1 / (n1 + 2 * n2) : 0.5;
            m.discounts_[n - 1] = std::clamp(d, 0.05, 0.95);
        }
    }

    // Context totals and type counts per order.
    std::vector<std::unordered_map<Key, double>> ctx_total(order), ctx_types(order);
    for (std::size_t n = 1; n <= order; ++n) {
        for (const auto& [k, c] : cnt[n - 1]) {
            const Key h = k >> 16;
            ctx_total[n - 1][h] += c;
            ctx_types[n - 1][h] += 1.0;
        }
    }

    // Lower-order probability of the suffix, resolved through the tables
    // built so far (orders are filled bottom-up).
    auto lower = [&](Key gram, std::size_t n) -> double {
        // gram has n words; drop the oldest and look up order n-1.
        const Key suffix = gram & ((Key{1} << (16 * (n - 1))) - 1);
        std::vector<int> ctx;
        for (std::size_t i = n - 1; i-- > 1;) ctx.push_back(static_cast<int>((suffix >> (16 * i)) & 0xFFFFu));
        const int w = static_cast<int>(suffix & 0xFFFFu);
        return m.prob(ctx, w);
    };

    auto mass_for = [&](std::size_t n, Key h) {
        const double total = ctx_total[n - 1].at(h);
        if (smoothing == NGramSmoothing::Additive) return kAdditive * static_cast<double>(W) / (total + kAdditive * static_cast<double>(W));
        return m.discounts_[n - 1] * ctx_types[n - 1].at(h) / total;
    };
    auto seen_prob = [&](std::size_t n, Key k, double c, double p_lower) {
        const Key h = k >> 16;
        const double total = ctx_total[n - 1].at(h);
        if (smoothing == NGramSmoothing::Additive) {
            return (c + kAdditive * static_cast<double>(W) * p_lower) / (total + kAdditive * static_cast<double>(W));
        }
        return std::max(c - m.discounts_[n - 1], 0.0) / total + mass_for(n, h) * p_lower;
    };

    // Unigrams: every predictable word, base distribution uniform over W.
    const double uniform = 1.0 / static_cast<double>(W);
    for (std::size_t id = 0; id < vocab.size(); ++id) {
        if (!NGramModel::predictable(static_cast<int>(id))) continue;
        const Key k = static_cast<Key>(id);
        auto it = cnt[0].find(k);
        const double c = it == cnt[0].end() ? 0.0 : it->second;
        if (c > 0) {
            m.probs_[0][k] = seen_prob(1, k, c, uniform);
        } else {
            m.probs_[0][k] = mass_for(1, 0) * uniform;
        }
    }
    for (std::size_t n = 2; n <= order; ++n) {
        // Backoff weights of the (n-1)-gram contexts that predict at order n.
        for (const auto& [h, total] : ctx_total[n - 1]) m.bows_[n - 2][h] = mass_for(n, h);
        std::vector<std::pair<Key, double>> entries;
        for (const auto& [k, c] : cnt[n - 1]) entries.emplace_back(k, seen_prob(n, k, c, lower(k, n)));
        for (const auto& [k, p] : entries) m.probs_[n - 1][k] = p;
    }
    return m;
}

// Per-word linear mixture lambda * p_neural + (1 - lambda) * p_ngram.
inline double interpolate(double p_neural, double p_ngram, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
        throw ConfigError("interpolation weight " + std::to_string(lambda) + " is outside [0, 1]");
    }
    return lambda * p_neural + (1.0 - lambda) * p_ngram;
}

}  // namespace btlm
