#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "btlm/error.hpp"

namespace btlm {

// Order-2 Markov source over symbols "w0".."w{N-1}". The next-symbol
// distribution depends on the classes of the two previous symbols, with the
// sentence start as an extra class. Each class context owns `branching`
// successors weighted by a Dirichlet draw (branching 0 = uniform over the
// alphabet). Sentence length: no end before min_len, end with probability
// end_prob afterwards, forced end at max_len.
struct SyntheticSpec {
    std::size_t alphabet_size = 200;
    std::size_t n_classes = 10;
    std::size_t branching = 4;
    double concentration = 1.0;
    std::size_t min_len = 4;
    std::size_t max_len = 20;
    double end_prob = 0.15;
    std::uint64_t chain_seed = 1;
    // Fraction of class contexts whose successor table is redrawn with
    // shift_seed; yields a related grammar over the same alphabet.
    double shift_fraction = 0.0;
    std::uint64_t shift_seed = 0;

    void validate() const {
        if (alphabet_size < 1) throw ConfigError("synthetic.alphabet_size must be >= 1");
        if (n_classes < 1 || n_classes > alphabet_size) throw ConfigError("synthetic.n_classes must be in 1..alphabet_size");
        if (branching > alphabet_size) throw ConfigError("synthetic.branching exceeds alphabet_size");
        if (!(concentration > 0)) throw ConfigError("synthetic.concentration must be positive");
        if (min_len > max_len || max_len < 1) throw ConfigError("synthetic.min_len/max_len out of order");
        if (!(end_prob >= 0 && end_prob <= 1)) throw ConfigError("synthetic.end_prob must be in [0,1]");
        if (!(shift_fraction >= 0 && shift_fraction <= 1)) throw ConfigError("synthetic.shift_fraction must be in [0,1]");
    }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    j = nlohmann::json{{"alphabet_size", s.alphabet_size}, {"n_classes", s.n_classes},   {"branching", s.branching},
                       {"concentration", s.concentration}, {"min_len", s.min_len},       {"max_len", s.max_len},
                       {"end_prob", s.end_prob},           {"chain_seed", s.chain_seed}, {"shift_fraction", s.shift_fraction},
                       {"shift_seed", s.shift_seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
    SyntheticSpec d;
    s.alphabet_size = j.value("alphabet_size", d.alphabet_size);
    s.n_classes = j.value("n_classes", d.n_classes);
    s.branching = j.value("branching", d.branching);
    s.concentration = j.value("concentration", d.concentration);
    s.min_len = j.value("min_len", d.min_len);
    s.max_len = j.value("max_len", d.max_len);
    s.end_prob = j.value("end_prob", d.end_prob);
    s.chain_seed = j.value("chain_seed", d.chain_seed);
    s.shift_fraction = j.value("shift_fraction", d.shift_fraction);
    s.shift_seed = j.value("shift_seed", d.shift_seed);
}

class SyntheticSource {
public:
    explicit SyntheticSource(SyntheticSpec spec) : spec_(spec) {
        spec_.validate();
        std::mt19937_64 rng(spec_.chain_seed);
        std::vector<std::size_t> perm(spec_.alphabet_size);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        class_of_.resize(spec_.alphabet_size);
        for (std::size_t i = 0; i < perm.size(); ++i) class_of_[perm[i]] = i % spec_.n_classes;
        const std::size_t n_ctx = (spec_.n_classes + 1) * (spec_.n_classes + 1);
        table_.resize(n_ctx);
        for (auto& row : table_) row = draw_row(rng);
        if (spec_.shift_fraction > 0) {
            std::mt19937_64 srng(spec_.shift_seed);
            std::bernoulli_distribution redraw(spec_.shift_fraction);
            for (auto& row : table_) {
                if (redraw(srng)) row = draw_row(srng);
            }
        }
    }

    const SyntheticSpec& spec() const { return spec_; }

    static std::string symbol(std::size_t i) { return "w" + std::to_string(i); }

    std::vector<std::string> generate(std::size_t n_sentences, std::uint64_t seed) const {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::vector<std::string> out;
        out.reserve(n_sentences);
        for (std::size_t n = 0; n < n_sentences; ++n) {
            std::size_t c2 = bos_class(), c1 = bos_class();
            std::string line;
            for (std::size_t k = 0;; ++k) {
                if (k >= spec_.max_len) break;
                if (k >= spec_.min_len && u(rng) < spec_.end_prob) break;
                const auto& row = table_[ctx(c2, c1)];
                double r = u(rng), acc = 0;
                std::size_t pick = row.symbols.back();
                for (std::size_t i = 0; i < row.symbols.size(); ++i) {
                    acc += row.probs[i];
                    if (r < acc) {
                        pick = row.symbols[i];
                        break;
                    }
                }
                if (!line.empty()) line += ' ';
                line += symbol(pick);
                c2 = c1;
                c1 = class_of_[pick];
            }
            out.push_back(std::move(line));
        }
        return out;
    }

    // Exact log-probability (nats) of a sentence under the source, including
    // the end-of-sentence decision. -inf when the sentence is impossible.
    double sentence_logprob(const std::string& line) const {
        std::size_t c2 = bos_class(), c1 = bos_class();
        double lp = 0;
        std::size_t k = 0;
        std::istringstream is(line);
        std::string w;
        while (is >> w) {
            if (k >= spec_.max_len) return -std::numeric_limits<double>::infinity();
            if (k >= spec_.min_len) lp += std::log1p(-spec_.end_prob);
            const std::size_t s = parse_symbol(w);
            const auto& row = table_[ctx(c2, c1)];
            double p = 0;
            for (std::size_t i = 0; i < row.symbols.size(); ++i) {
                if (row.symbols[i] == s) p += row.probs[i];
            }
            if (p <= 0) return -std::numeric_limits<double>::infinity();
            lp += std::log(p);
            c2 = c1;
            c1 = class_of_[s];
            ++k;
        }
        if (k < spec_.min_len) return -std::numeric_limits<double>::infinity();
        if (k < spec_.max_len) lp += std::log(spec_.end_prob);
        return lp;
    }

    // exp(-sum log p / (words + end markers)) over the given lines.
    double true_perplexity(const std::vector<std::string>& lines) const {
        double lp = 0;
        std::size_t tokens = 0;
        for (const auto& l : lines) {
            lp += sentence_logprob(l);
            std::istringstream is(l);
            std::string w;
            while (is >> w) ++tokens;
            ++tokens;
        }
        return std::exp(-lp / static_cast<double>(tokens));
    }

private:
    struct Row {
        std::vector<std::size_t> symbols;
        std::vector<double> probs;
    };

    Row draw_row(std::mt19937_64& rng) const {
        Row r;
        if (spec_.branching == 0) {
            r.symbols.resize(spec_.alphabet_size);
            std::iota(r.symbols.begin(), r.symbols.end(), std::size_t{0});
            r.probs.assign(spec_.alphabet_size, 1.0 / static_cast<double>(spec_.alphabet_size));
            return r;
        }
        std::vector<std::size_t> all(spec_.alphabet_size);
        std::iota(all.begin(), all.end(), std::size_t{0});
        for (std::size_t i = 0; i < spec_.branching; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, all.size() - 1);
            std::swap(all[i], all[pick(rng)]);
            r.symbols.push_back(all[i]);
        }
        std::gamma_distribution<double> g(spec_.concentration, 1.0);
        double total = 0;
        for (std::size_t i = 0; i < spec_.branching; ++i) {
            r.probs.push_back(std::max(g(rng), 1e-12));
            total += r.probs.back();
        }
        for (auto& p : r.probs) p /= total;
        return r;
    }

    std::size_t bos_class() const { return spec_.n_classes; }
    std::size_t ctx(std::size_t c2, std::size_t c1) const { return c2 * (spec_.n_classes + 1) + c1; }

    std::size_t parse_symbol(const std::string& w) const {
        if (w.size() < 2 || w[0] != 'w') throw InputError("'" + w + "' is not a synthetic symbol");
        std::size_t v = 0;
        for (std::size_t i = 1; i < w.size(); ++i) {
            if (w[i] < '0' || w[i] > '9') throw InputError("'" + w + "' is not a synthetic symbol");
            v = v * 10 + static_cast<std::size_t>(w[i] - '0');
        }
        if (v >= spec_.alphabet_size) throw InputError("'" + w + "' is outside the synthetic alphabet");
        return v;
    }

    SyntheticSpec spec_;
    std::vector<std::size_t> class_of_;
    std::vector<Row> table_;
};

// Contiguous split of one generated corpus: [0, n_train) train, then dev,
// then test. Lines are never shared between splits.
struct SplitCorpus {
    std::vector<std::string> train;
    std::vector<std::string> dev;
    std::vector<std::string> test;
};

inline SplitCorpus generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed, std::size_t n_train,
                                      std::size_t n_dev, std::size_t n_test) {
    const SyntheticSource src(spec);
    auto lines = src.generate(n_train + n_dev + n_test, seed);
    SplitCorpus c;
    c.train.assign(lines.begin(), lines.begin() + static_cast<std::ptrdiff_t>(n_train));
    c.dev.assign(lines.begin() + static_cast<std::ptrdiff_t>(n_train),
                 lines.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev));
    c.test.assign(lines.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev), lines.end());
    return c;
}

// Writes corpus.txt (all lines) and splits.json (half-open line ranges).
inline void save_split_corpus(const SplitCorpus& c, const std::string& dir) {
    std::ofstream os(dir + "/corpus.txt");
    if (!os) throw IoError("cannot write '" + dir + "/corpus.txt'");
    for (const auto* part : {&c.train, &c.dev, &c.test})
        for (const auto& l : *part) os << l << '\n';
    const std::size_t a = c.train.size(), b = a + c.dev.size(), e = b + c.test.size();
    nlohmann::json j{{"file", "corpus.txt"}, {"train", {0, a}}, {"dev", {a, b}}, {"test", {b, e}}};
    std::ofstream ms(dir + "/splits.json");
    if (!ms) throw IoError("cannot write '" + dir + "/splits.json'");
    ms << j.dump(2) << '\n';
}

inline SplitCorpus load_split_corpus(const std::string& dir) {
    std::ifstream ms(dir + "/splits.json");
    if (!ms) throw IoError("cannot read '" + dir + "/splits.json'");
    nlohmann::json j;
    try {
        ms >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(dir + "/splits.json: " + e.what());
    }
    std::ifstream is(dir + "/" + j.value("file", std::string("corpus.txt")));
    if (!is) throw IoError("cannot read corpus referenced by '" + dir + "/splits.json'");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) lines.push_back(line);
    auto range = [&](const char* key) {
        const std::size_t lo = j.at(key).at(0), hi = j.at(key).at(1);
        if (lo > hi || hi > lines.size()) throw InputError(std::string("split '") + key + "' is out of range");
        return std::vector<std::string>(lines.begin() + static_cast<std::ptrdiff_t>(lo),
                                        lines.begin() + static_cast<std::ptrdiff_t>(hi));
    };
    return SplitCorpus{range("train"), range("dev"), range("test")};
}

}  // namespace btlm
