#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "btlm/autodiff.hpp"
#include "btlm/bayes.hpp"
#include "btlm/config.hpp"
#include "btlm/corpus.hpp"
#include "btlm/error.hpp"
#include "btlm/eval.hpp"
#include "btlm/transformer.hpp"
#include "btlm/variational.hpp"

namespace btlm {

enum class KlScaleMode {
    BatchFraction,  // kl_weight = batch sentences / training sentences
    Constant,       // kl_weight = TrainConfig::kl_weight for every batch
};

inline std::string to_string(KlScaleMode m) { return m == KlScaleMode::BatchFraction ? "batch_fraction" : "constant"; }

inline KlScaleMode kl_scale_mode_from_string(const std::string& s) {
    if (s == "batch_fraction") return KlScaleMode::BatchFraction;
    if (s == "constant") return KlScaleMode::Constant;
    throw ConfigError("train.kl_scale_mode must be 'batch_fraction' or 'constant', got '" + s + "'");
}

struct TrainConfig {
    double learning_rate = 0.1;
    double lr_decay = 0.5;  // applied when dev perplexity fails to improve
    double lr_floor = 1e-4;
    std::size_t batch_size = 32;  // sentences
    std::size_t epochs = 10;
    std::size_t k_train = 1;
    KlScaleMode kl_scale_mode = KlScaleMode::BatchFraction;
    double kl_weight = 1.0;  // used by KlScaleMode::Constant
    double clip_norm = 5.0;  // global gradient norm; 0 disables
    std::uint64_t seed = 1;
    // Divide the batch objective by its predicted-token count before the
    // backward pass. Changes only the step size, not the optimum.
    bool normalize_by_tokens = true;
    // Pack consecutive sentences of a batch into one context window.
    bool concat_sentences = false;
    double finetune_lr = 0.01;

    void validate() const {
        if (!(learning_rate >= 0)) throw ConfigError("train.learning_rate must be >= 0");
        if (!(lr_decay > 0 && lr_decay <= 1)) throw ConfigError("train.lr_decay must be in (0, 1]");
        if (!(lr_floor >= 0)) throw ConfigError("train.lr_floor must be >= 0");
        if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
        if (k_train < 1) throw ConfigError("train.k_train must be >= 1");
        if (!(kl_weight >= 0)) throw ConfigError("train.kl_weight must be >= 0");
        if (!(clip_norm >= 0)) throw ConfigError("train.clip_norm must be >= 0");
        if (!(finetune_lr >= 0)) throw ConfigError("train.finetune_lr must be >= 0");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"learning_rate", c.learning_rate},
                       {"lr_decay", c.lr_decay},
                       {"lr_floor", c.lr_floor},
                       {"batch_size", c.batch_size},
                       {"epochs", c.epochs},
                       {"k_train", c.k_train},
                       {"kl_scale_mode", to_string(c.kl_scale_mode)},
                       {"kl_weight", c.kl_weight},
                       {"clip_norm", c.clip_norm},
                       {"seed", c.seed},
                       {"normalize_by_tokens", c.normalize_by_tokens},
                       {"concat_sentences", c.concat_sentences},
                       {"finetune_lr", c.finetune_lr}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    const std::string s = "train";
    check_keys(j,
               {"learning_rate", "lr_decay", "lr_floor", "batch_size", "epochs", "k_train", "kl_scale_mode", "kl_weight",
                "clip_norm", "seed", "normalize_by_tokens", "concat_sentences", "finetune_lr"},
               s);
    read_field(j, "learning_rate", c.learning_rate, s);
    read_field(j, "lr_decay", c.lr_decay, s);
    read_field(j, "lr_floor", c.lr_floor, s);
    read_field(j, "batch_size", c.batch_size, s);
    read_field(j, "epochs", c.epochs, s);
    read_field(j, "k_train", c.k_train, s);
    std::string mode = to_string(c.kl_scale_mode);
    read_field(j, "kl_scale_mode", mode, s);
    c.kl_scale_mode = kl_scale_mode_from_string(mode);
    read_field(j, "kl_weight", c.kl_weight, s);
    read_field(j, "clip_norm", c.clip_norm, s);
    read_field(j, "seed", c.seed, s);
    read_field(j, "normalize_by_tokens", c.normalize_by_tokens, s);
    read_field(j, "concat_sentences", c.concat_sentences, s);
    read_field(j, "finetune_lr", c.finetune_lr, s);
}

// Joins the sentences into windows of at most max_len inputs. A sentence's
// start marker is dropped when it follows another sentence, so its words are
// predicted from the previous end marker onward.
inline PackedBatch pack_concatenated(const std::vector<const Sentence*>& sentences, std::size_t max_len) {
    std::vector<int> stream;
    for (const auto* s : sentences) {
        if (s->size() < 2) throw InputError("a sentence needs at least a start and an end marker");
        stream.insert(stream.end(), stream.empty() ? s->begin() : s->begin() + 1, s->end());
    }
    PackedBatch b;
    b.sentences = sentences.size();
    for (std::size_t lo = 0; lo + 1 < stream.size(); lo += max_len) {
        const std::size_t n = std::min(max_len, stream.size() - 1 - lo);
        b.segments.push_back({b.inputs.size(), n});
        b.inputs.insert(b.inputs.end(), stream.begin() + static_cast<std::ptrdiff_t>(lo),
                        stream.begin() + static_cast<std::ptrdiff_t>(lo + n));
        b.targets.insert(b.targets.end(), stream.begin() + static_cast<std::ptrdiff_t>(lo + 1),
                         stream.begin() + static_cast<std::ptrdiff_t>(lo + n + 1));
    }
    return b;
}

template <class T>
struct ElboTerms {
    Var<T> loss;
    T nll = 0;  // (1/K) sum_k cross-entropy under Theta_k, nats
    T kl = 0;   // unweighted kl_total
    std::size_t tokens = 0;
};

// -(1/K) sum_k log p(batch | Theta_k) + kl_weight * KL(q || prior).
// `noise`, when given, supplies (or records) the K weight-noise draws so the
// same Theta_k can be replayed; missing entries are drawn from rng.
template <class T>
ElboTerms<T> elbo_loss(Tape<T>& tape, TransformerLM<T>& model, const PackedBatch& batch, Rng& rng, double kl_weight,
                       std::size_t k_samples = 1, std::vector<SiteNoise<T>>* noise = nullptr, bool training = true) {
    if (batch.predicted_tokens() == 0) throw InputError("elbo_loss: empty batch");
    if (k_samples < 1) throw ConfigError("elbo_loss: k_samples must be >= 1");
    const bool bayes = !model.sites().empty();
    const std::size_t k = bayes ? k_samples : 1;
    std::vector<SiteNoise<T>> local;
    auto& draws = noise ? *noise : local;
    if (draws.size() < k) draws.resize(k);
    ElboTerms<T> out;
    out.tokens = batch.predicted_tokens();
    Var<T> nll;
    for (std::size_t s = 0; s < k; ++s) {
        ForwardContext<T> ctx;
        ctx.training = training;
        ctx.rng = &rng;
        if (bayes) {
            ctx.weights = WeightMode::Sample;
            ctx.noise = &draws[s];
        }
        Var<T> ce = cross_entropy(model.forward_batch(tape, batch, ctx), batch.targets);
        nll = s == 0 ? ce : add(nll, ce);
    }
    if (k > 1) nll = scale(nll, T(1) / static_cast<T>(k));
    out.nll = nll.value().item();
    out.loss = nll;
    if (bayes) {
        Var<T> kl = kl_total(tape, model);
        out.kl = kl.value().item();
        if (kl_weight != 0) out.loss = add(nll, scale(kl, static_cast<T>(kl_weight)));
    }
    return out;
}

struct StepReport {
    bool applied = false;
    double grad_norm = 0;
};

template <class T>
double global_grad_norm(TransformerLM<T>& model) {
    double sq = 0;
    model.for_each_trainable([&](Param<T>& p) {
        for (auto g : p.grad.span()) sq += static_cast<double>(g) * static_cast<double>(g);
    });
    return std::sqrt(sq);
}

// theta <- theta - lr * g over every trainable tensor (site mu and log_sigma
// included), after optional global-norm clipping. A non-finite gradient skips
// the update. Gradients are cleared either way.
template <class T>
StepReport sgd_step(TransformerLM<T>& model, double lr, double clip_norm = 0) {
    StepReport r;
    r.grad_norm = global_grad_norm(model);
    if (std::isfinite(r.grad_norm)) {
        double factor = lr;
        if (clip_norm > 0 && r.grad_norm > clip_norm) factor *= clip_norm / r.grad_norm;
        const T f = static_cast<T>(factor);
        model.for_each_trainable([&](Param<T>& p) {
            for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] -= f * p.grad[i];
        });
        r.applied = true;
    }
    model.zero_grad();
    return r;
}

struct EpochMetrics {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double nll = 0;  // training NLL per predicted token over the epoch
    double kl = 0;   // kl_total at the end of the epoch
    double dev_ppl = 0;
    double lr = 0;
    std::uint64_t seed = 0;
    std::size_t skipped_steps = 0;

    nlohmann::json to_json() const {
        return {{"epoch", epoch}, {"step", step},     {"nll", nll},   {"kl", kl},
                {"dev_ppl", dev_ppl}, {"lr", lr}, {"seed", seed}, {"skipped_steps", skipped_steps}};
    }
};

template <class T>
struct TrainResult {
    TransformerLM<T> best;
    std::size_t best_epoch = 0;
    double best_dev_ppl = std::numeric_limits<double>::infinity();
    std::vector<EpochMetrics> history;
    bool diverged = false;
    std::string divergence;
};

using MetricsSink = std::function<void(const EpochMetrics&)>;

namespace detail {

template <class T>
double dev_perplexity(const TransformerLM<T>& model, const std::vector<Sentence>& dev) {
    return corpus_perplexity(model, dev, Predictive{}).perplexity;
}

}  // namespace detail

// Epoch loop: shuffle, SGD over sentence batches, dev perplexity (posterior
// mean) after every epoch, learning-rate decay on non-improvement. On return
// `model` holds the best post-epoch weights. A non-finite training loss stops
// the run and keeps the last good weights.
template <class T>
TrainResult<T> train(TransformerLM<T>& model, const std::vector<Sentence>& train_set, const std::vector<Sentence>& dev_set,
                     const TrainConfig& config, const MetricsSink& sink = {}) {
    config.validate();
    if (train_set.empty()) throw InputError("train: empty training corpus");
    if (dev_set.empty()) throw InputError("train: empty dev corpus");
    const auto V = static_cast<int>(model.config().vocab_size);
    for (const auto* part : {&train_set, &dev_set}) {
        for (std::size_t i = 0; i < part->size(); ++i) {
            for (int id : (*part)[i]) {
                if (id < 0 || id >= V) {
                    throw InputError("sentence " + std::to_string(i) + " holds token id " + std::to_string(id) +
                                     " outside the model vocabulary of " + std::to_string(V));
                }
            }
        }
    }
    Rng shuffle_rng(config.seed);
    Rng noise_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    TrainResult<T> result;
    result.best = model;
    double lr = config.learning_rate;
    double prev_dev = detail::dev_perplexity(model, dev_set);
    std::size_t step = 0;
    {
        EpochMetrics m;
        m.dev_ppl = prev_dev;
        m.lr = lr;
        m.seed = config.seed;
        m.kl = static_cast<double>(kl_total(model));
        result.history.push_back(m);
        if (sink) sink(m);
    }
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const double n_train = static_cast<double>(train_set.size());
    TransformerLM<T> last_good = model;

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double nll_sum = 0;
        std::size_t tokens = 0, skipped = 0;
        for (std::size_t lo = 0; lo < order.size(); lo += config.batch_size) {
            const std::size_t hi = std::min(order.size(), lo + config.batch_size);
            std::vector<const Sentence*> chunk;
            for (std::size_t i = lo; i < hi; ++i) chunk.push_back(&train_set[order[i]]);
            const PackedBatch batch = config.concat_sentences ? pack_concatenated(chunk, model.config().max_len)
                                                              : pack_sentences(chunk);
            const double kl_weight = config.kl_scale_mode == KlScaleMode::BatchFraction
                                         ? static_cast<double>(chunk.size()) / n_train
                                         : config.kl_weight;
            Tape<T> tape;
            auto terms = elbo_loss(tape, model, batch, noise_rng, kl_weight, config.k_train);
            if (!std::isfinite(static_cast<double>(terms.nll))) {
                result.diverged = true;
                result.divergence = "non-finite training NLL at epoch " + std::to_string(epoch) + ", step " +
                                    std::to_string(step + 1);
                break;
            }
            Var<T> objective = terms.loss;
            if (config.normalize_by_tokens) objective = scale(objective, T(1) / static_cast<T>(terms.tokens));
            tape.backward(objective);
            const auto rep = sgd_step(model, lr, config.clip_norm);
            if (!rep.applied) ++skipped;
            ++step;
            nll_sum += static_cast<double>(terms.nll);
            tokens += terms.tokens;
        }
        if (result.diverged) {
            model = last_good;
            break;
        }
        EpochMetrics m;
        m.epoch = epoch;
        m.step = step;
        m.nll = nll_sum / static_cast<double>(std::max<std::size_t>(tokens, 1));
        m.kl = static_cast<double>(kl_total(model));
        m.dev_ppl = detail::dev_perplexity(model, dev_set);
        m.lr = lr;
        m.seed = config.seed;
        m.skipped_steps = skipped;
        result.history.push_back(m);
        if (sink) sink(m);
        if (!std::isfinite(m.dev_ppl)) {
            result.diverged = true;
            result.divergence = "non-finite dev perplexity after epoch " + std::to_string(epoch);
            model = last_good;
            break;
        }
        last_good = model;
        if (m.dev_ppl < result.best_dev_ppl) {
            result.best_dev_ppl = m.dev_ppl;
            result.best_epoch = epoch;
            result.best = model;
        }
        // The floor bounds the decay; it never raises a rate that starts below it.
        if (!(m.dev_ppl < prev_dev)) lr = std::min(lr, std::max(lr * config.lr_decay, config.lr_floor));
        prev_dev = m.dev_ppl;
    }
    if (result.best_epoch > 0) model = result.best;
    else result.best = model;
    return result;
}

enum class AdaptMode { None, FineTune, BayesAdapt };

inline std::string to_string(AdaptMode m) {
    switch (m) {
        case AdaptMode::None: return "none";
        case AdaptMode::FineTune: return "fine_tune";
        case AdaptMode::BayesAdapt: return "bayes_adapt";
    }
    return "?";
}

inline AdaptMode adapt_mode_from_string(const std::string& s) {
    if (s == "none") return AdaptMode::None;
    if (s == "fine_tune") return AdaptMode::FineTune;
    if (s == "bayes_adapt") return AdaptMode::BayesAdapt;
    throw ConfigError("adapt mode must be none, fine_tune or bayes_adapt, got '" + s + "'");
}

template <class T>
struct AdaptSpec {
    AdaptMode mode = AdaptMode::FineTune;
    // bayes_adapt: checkpoint supplying the prior means (normally the
    // fine-tuned model).
    const TransformerLM<T>* reference = nullptr;
    // bayes_adapt on a model without sites promotes these first.
    BayesConfig sites;
};

// Target-domain adaptation. fine_tune continues SGD at finetune_lr;
// bayes_adapt re-centres every site prior on the reference weights (prior
// sigma from the Bayes config) and ELBO-trains at finetune_lr.
template <class T>
TrainResult<T> adapt(TransformerLM<T>& model, const std::vector<Sentence>& target_train,
                     const std::vector<Sentence>& target_dev, const AdaptSpec<T>& spec, const TrainConfig& config,
                     const MetricsSink& sink = {}) {
    TrainConfig tc = config;
    tc.learning_rate = config.finetune_lr;
    switch (spec.mode) {
        case AdaptMode::None: {
            TrainResult<T> r;
            r.best = model;
            return r;
        }
        case AdaptMode::FineTune: return train(model, target_train, target_dev, tc, sink);
        case AdaptMode::BayesAdapt: {
            if (spec.reference == nullptr) throw ConfigError("bayes_adapt needs a reference checkpoint for the prior");
            if (model.sites().empty()) {
                if (spec.sites.sites.empty()) throw ConfigError("bayes_adapt needs Bayesian sites (bayes.sites)");
                promote(model, spec.sites, *spec.reference);
            } else {
                set_prior_means(model, *spec.reference, static_cast<T>(model.bayes().prior_sigma));
            }
            return train(model, target_train, target_dev, tc, sink);
        }
    }
    throw ContractError("unhandled adapt mode");
}

}  // namespace btlm
