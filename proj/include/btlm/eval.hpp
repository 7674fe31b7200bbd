#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "btlm/autodiff.hpp"
#include "btlm/corpus.hpp"
#include "btlm/error.hpp"
#include "btlm/ngram.hpp"
#include "btlm/transformer.hpp"
#include "btlm/variational.hpp"

namespace btlm {

// How a (possibly Bayesian) model turns its posterior into predictions:
// posterior mean weights, or the average of per-word probabilities over K
// weight samples.
struct Predictive {
    EvalMode mode = EvalMode::Mean;
    std::size_t samples = 1;
    std::uint64_t seed = 1;

    std::string name() const { return mode == EvalMode::Mean ? "mean" : "mc(" + std::to_string(samples) + ")"; }
};

// Per-word probabilities for each sentence of a corpus (one entry per
// predicted token, end marker included).
using WordProbs = std::vector<std::vector<double>>;
using Scorer = std::function<WordProbs(const std::vector<Sentence>&)>;

namespace detail {

template <class T>
void accumulate_target_probs(const Tensor<T>& logits, const PackedBatch& batch, std::vector<std::vector<double>>& out,
                             std::size_t first_sentence, double weight) {
    std::vector<T> row(logits.cols());
    for (std::size_t s = 0; s < batch.segments.size(); ++s) {
        const auto& seg = batch.segments[s];
        auto& dst = out[first_sentence + s];
        for (std::size_t t = 0; t < seg.length; ++t) {
            const std::size_t r = seg.start + t;
            std::copy(logits.row(r).begin(), logits.row(r).end(), row.begin());
            kernels::log_softmax_inplace(std::span<T>(row));
            dst[t] += weight * std::exp(static_cast<double>(row[static_cast<std::size_t>(batch.targets[r])]));
        }
    }
}

}  // namespace detail

template <class T>
WordProbs neural_word_probs(const TransformerLM<T>& model, const std::vector<Sentence>& corpus, const Predictive& pred,
                            std::size_t batch_sentences = 64) {
    auto& m = const_cast<TransformerLM<T>&>(model);
    WordProbs out(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (corpus[i].size() < 2) throw InputError("sentence " + std::to_string(i) + " lacks start/end markers");
        out[i].assign(corpus[i].size() - 1, 0.0);
    }
    const bool mc = pred.mode == EvalMode::MonteCarlo && !model.sites().empty();
    const std::size_t k = mc ? std::max<std::size_t>(pred.samples, 1) : 1;
    Rng rng(pred.seed);
    for (std::size_t draw = 0; draw < k; ++draw) {
        SiteNoise<T> noise;
        ForwardContext<T> ctx;
        if (mc) {
            ctx.weights = WeightMode::Sample;
            ctx.noise = &noise;
            ctx.rng = &rng;
        }
        for (std::size_t lo = 0; lo < corpus.size(); lo += batch_sentences) {
            const std::size_t hi = std::min(corpus.size(), lo + batch_sentences);
            std::vector<const Sentence*> chunk;
            for (std::size_t i = lo; i < hi; ++i) chunk.push_back(&corpus[i]);
            const PackedBatch b = pack_sentences(chunk);
            Tape<T> tape(false);
            const auto logits = m.forward_batch(tape, b, ctx);
            detail::accumulate_target_probs(logits.value(), b, out, lo, 1.0 / static_cast<double>(k));
        }
    }
    return out;
}

template <class T>
Scorer neural_scorer(const TransformerLM<T>& model, Predictive pred = {}) {
    return [&model, pred](const std::vector<Sentence>& c) { return neural_word_probs(model, c, pred); };
}

inline Scorer ngram_scorer(const NGramModel& ngram) {
    return [&ngram](const std::vector<Sentence>& c) {
        WordProbs out;
        out.reserve(c.size());
        for (const auto& s : c) out.push_back(ngram.word_probs(s));
        return out;
    };
}

inline WordProbs mix_word_probs(const WordProbs& neural, const WordProbs& ngram, double lambda) {
    if (neural.size() != ngram.size()) throw DimensionError("mix_word_probs: corpus sizes differ");
    WordProbs out(neural.size());
    for (std::size_t i = 0; i < neural.size(); ++i) {
        if (neural[i].size() != ngram[i].size()) throw DimensionError("mix_word_probs: sentence lengths differ");
        out[i].resize(neural[i].size());
        for (std::size_t t = 0; t < neural[i].size(); ++t) out[i][t] = interpolate(neural[i][t], ngram[i][t], lambda);
    }
    return out;
}

inline Scorer interpolated_scorer(Scorer neural, Scorer ngram, double lambda) {
    interpolate(0.0, 0.0, lambda);  // validates lambda up front
    return [neural = std::move(neural), ngram = std::move(ngram), lambda](const std::vector<Sentence>& c) {
        return mix_word_probs(neural(c), ngram(c), lambda);
    };
}

struct EvalReport {
    std::string corpus_id;
    std::size_t sentences = 0;
    std::size_t token_count = 0;
    double total_loglik = 0;
    double perplexity = 0;
    std::string mode = "mean";
    std::size_t oov_count = 0;
    std::optional<double> lambda;
    std::string partner;

    double oov_rate() const { return token_count ? static_cast<double>(oov_count) / static_cast<double>(token_count) : 0.0; }

    nlohmann::json to_json() const {
        nlohmann::json j{{"corpus", corpus_id},   {"sentences", sentences},   {"tokens", token_count},
                         {"loglik_nats", total_loglik}, {"perplexity", perplexity}, {"mode", mode},
                         {"oov_count", oov_count}, {"oov_rate", oov_rate()}};
        if (lambda) {
            j["lambda"] = *lambda;
            j["partner"] = partner;
        }
        return j;
    }
};

inline double sentence_logprob(const std::vector<double>& word_probs) {
    double lp = 0;
    for (double p : word_probs) lp += std::log(p);
    return lp;
}

template <class T>
double sentence_logprob(const TransformerLM<T>& model, const Sentence& s, const Predictive& pred = {}) {
    return sentence_logprob(neural_word_probs(model, std::vector<Sentence>{s}, pred).front());
}

inline EvalReport report_from_probs(const WordProbs& probs, std::string corpus_id = "") {
    EvalReport r;
    r.corpus_id = std::move(corpus_id);
    r.sentences = probs.size();
    for (const auto& s : probs) {
        r.token_count += s.size();
        r.total_loglik += sentence_logprob(s);
    }
    if (r.token_count == 0) throw InputError("perplexity of an empty corpus");
    r.perplexity = std::exp(-r.total_loglik / static_cast<double>(r.token_count));
    return r;
}

inline EvalReport corpus_perplexity(const Scorer& scorer, const std::vector<Sentence>& corpus,
                                    std::string corpus_id = "") {
    if (corpus.empty()) throw InputError("corpus_perplexity: empty corpus");
    auto r = report_from_probs(scorer(corpus), std::move(corpus_id));
    for (const auto& s : corpus)
        for (std::size_t i = 1; i < s.size(); ++i) r.oov_count += s[i] == Vocabulary::kUnk;
    return r;
}

template <class T>
EvalReport corpus_perplexity(const TransformerLM<T>& model, const std::vector<Sentence>& corpus,
                             const Predictive& pred = {}, std::string corpus_id = "") {
    auto r = corpus_perplexity(neural_scorer(model, pred), corpus, std::move(corpus_id));
    r.mode = pred.name();
    return r;
}

struct LambdaSearch {
    double lambda = 0.5;
    double perplexity = 0;
    double ppl_neural = 0;  // lambda = 1
    double ppl_ngram = 0;   // lambda = 0
};

// Golden-section search of the interpolation weight on held-out per-word
// probabilities. Dev log-perplexity is convex in lambda, so the search finds
// the global minimum; both endpoints are also scored and compared.
inline LambdaSearch tune_lambda(const WordProbs& neural, const WordProbs& ngram, double tol = 1e-4) {
    auto ppl = [&](double lam) { return report_from_probs(mix_word_probs(neural, ngram, lam)).perplexity; };
    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = 0, b = 1;
    double c = b - phi * (b - a), d = a + phi * (b - a);
    double fc = ppl(c), fd = ppl(d);
    while (b - a > tol) {
        if (fc <= fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = ppl(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = ppl(d);
        }
    }
    LambdaSearch out;
    out.ppl_neural = ppl(1.0);
    out.ppl_ngram = ppl(0.0);
    out.lambda = fc <= fd ? c : d;
    out.perplexity = std::min(fc, fd);
    if (out.ppl_neural < out.perplexity) {
        out.lambda = 1.0;
        out.perplexity = out.ppl_neural;
    }
    if (out.ppl_ngram < out.perplexity) {
        out.lambda = 0.0;
        out.perplexity = out.ppl_ngram;
    }
    return out;
}

// Coarse fallback: best of {0.1, ..., 0.9}.
inline LambdaSearch tune_lambda_grid(const WordProbs& neural, const WordProbs& ngram) {
    LambdaSearch out;
    out.perplexity = std::numeric_limits<double>::infinity();
    for (int i = 1; i <= 9; ++i) {
        const double lam = i / 10.0;
        const double p = report_from_probs(mix_word_probs(neural, ngram, lam)).perplexity;
        if (p < out.perplexity) {
            out.perplexity = p;
            out.lambda = lam;
        }
    }
    out.ppl_neural = report_from_probs(neural).perplexity;
    out.ppl_ngram = report_from_probs(ngram).perplexity;
    return out;
}

// ---------------------------------------------------------------------------
// N-best rescoring.

struct Hypothesis {
    std::vector<std::string> words;
    double acoustic = 0;
    std::optional<double> old_lm;
    std::size_t original_rank = 0;
};

struct NBestList {
    std::string utterance;
    std::vector<Hypothesis> hypotheses;
};

// Tab-separated lines: utt_id, acoustic score, [old LM score,] words.
// Malformed lines are skipped and reported through `warnings`.
inline std::vector<NBestList> parse_nbest(std::istream& is, std::vector<std::string>* warnings = nullptr) {
    std::vector<NBestList> out;
    std::string line;
    std::size_t lineno = 0;
    auto warn = [&](const std::string& msg) {
        if (warnings) warnings->push_back("line " + std::to_string(lineno) + ": " + msg);
    };
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t pos = 0;
        while (true) {
            const auto tab = line.find('\t', pos);
            fields.push_back(line.substr(pos, tab == std::string::npos ? std::string::npos : tab - pos));
            if (tab == std::string::npos) break;
            pos = tab + 1;
        }
        if (fields.size() != 3 && fields.size() != 4) {
            warn("expected 3 or 4 tab-separated fields, got " + std::to_string(fields.size()));
            continue;
        }
        Hypothesis h;
        try {
            std::size_t used = 0;
            h.acoustic = std::stod(fields[1], &used);
            if (used != fields[1].size() || !std::isfinite(h.acoustic)) throw std::invalid_argument("acoustic");
            if (fields.size() == 4) {
                const double lm = std::stod(fields[2], &used);
                if (used != fields[2].size() || !std::isfinite(lm)) throw std::invalid_argument("lm");
                h.old_lm = lm;
            }
        } catch (const std::exception&) {
            warn("non-numeric or non-finite score");
            continue;
        }
        if (fields[0].empty()) {
            warn("empty utterance id");
            continue;
        }
        h.words = split_words(fields.back());
        if (out.empty() || out.back().utterance != fields[0]) {
            auto it = std::find_if(out.begin(), out.end(), [&](const NBestList& l) { return l.utterance == fields[0]; });
            if (it == out.end()) {
                out.push_back({fields[0], {}});
            } else {
                std::rotate(it, it + 1, out.end());
            }
        }
        h.original_rank = out.back().hypotheses.size();
        out.back().hypotheses.push_back(std::move(h));
    }
    return out;
}

struct RankedHypothesis {
    Hypothesis hyp;
    double lm_logprob = 0;
    double total = 0;
};

struct RescoreOptions {
    double lm_scale = 1.0;
    double word_insertion_penalty = 0.0;
};

// total = acoustic + lm_scale * LM log-prob (nats) + wip * length, sorted
// descending; equal totals keep their original order.
inline std::vector<RankedHypothesis> rescore_nbest(const NBestList& list, const Vocabulary& vocab, const Scorer& scorer,
                                                   const RescoreOptions& opt) {
    std::vector<Sentence> sents;
    for (const auto& h : list.hypotheses) {
        Sentence s{Vocabulary::kBos};
        for (const auto& w : h.words) s.push_back(vocab.id(w));
        s.push_back(Vocabulary::kEos);
        sents.push_back(std::move(s));
    }
    const auto probs = sents.empty() ? WordProbs{} : scorer(sents);
    std::vector<RankedHypothesis> ranked;
    for (std::size_t i = 0; i < list.hypotheses.size(); ++i) {
        RankedHypothesis r{list.hypotheses[i], sentence_logprob(probs[i]), 0};
        r.total = r.hyp.acoustic + opt.lm_scale * r.lm_logprob +
                  opt.word_insertion_penalty * static_cast<double>(r.hyp.words.size());
        ranked.push_back(std::move(r));
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const RankedHypothesis& a, const RankedHypothesis& b) { return a.total > b.total; });
    return ranked;
}

inline void write_ranked(std::ostream& os, const std::string& utt, const std::vector<RankedHypothesis>& ranked) {
    char buf[256];
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        const auto& r = ranked[i];
        std::snprintf(buf, sizeof buf, "%zu\t%zu\t%.10g\t%.10g\t%.10g\t", i, r.hyp.original_rank, r.total, r.hyp.acoustic,
                      r.lm_logprob);
        os << utt << '\t' << buf;
        for (std::size_t w = 0; w < r.hyp.words.size(); ++w) os << (w ? " " : "") << r.hyp.words[w];
        os << '\n';
    }
}

}  // namespace btlm
