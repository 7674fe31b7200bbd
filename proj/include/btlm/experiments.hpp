#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "btlm/autodiff.hpp"
#include "btlm/bayes.hpp"
#include "btlm/corpus.hpp"
#include "btlm/error.hpp"
#include "btlm/synthetic.hpp"
#include "btlm/training.hpp"
#include "btlm/transformer.hpp"
#include "btlm/variational.hpp"

namespace btlm {

// ---------------------------------------------------------------------------
// Gradient check: backward pass against central differences of the ELBO with
// the weight noise held fixed (common random numbers).

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    // Denominator floor of the relative error, so that gradients at
    // round-off level are compared absolutely.
    double abs_floor = 1e-5;
    double kl_weight = 1.0;
    std::size_t k_samples = 1;
    std::uint64_t seed = 1;
    bool sites_only = true;  // only mu / log_sigma, otherwise every tensor
};

struct GradCheckResult {
    std::size_t checked = 0;
    double max_rel_error = 0;
    std::string worst;
    bool passed = false;

    nlohmann::json to_json() const {
        return {{"checked", checked}, {"max_rel_error", max_rel_error}, {"worst", worst}, {"passed", passed}};
    }
};

template <class T>
GradCheckResult grad_check(TransformerLM<T>& model, const PackedBatch& batch, const GradCheckOptions& opt) {
    Rng rng(opt.seed);
    std::vector<SiteNoise<T>> noise;
    model.zero_grad();
    {
        Tape<T> tape;
        auto terms = elbo_loss(tape, model, batch, rng, opt.kl_weight, opt.k_samples, &noise, false);
        tape.backward(terms.loss);
    }
    auto loss_at = [&]() {
        Tape<T> tape(false);
        Rng unused(0);
        return static_cast<double>(elbo_loss(tape, model, batch, unused, opt.kl_weight, opt.k_samples, &noise, false)
                                       .loss.value()
                                       .item());
    };
    GradCheckResult r;
    auto check = [&](Param<T>& p) {
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const T saved = p.value[i];
            p.value[i] = saved + static_cast<T>(opt.step);
            const double up = loss_at();
            p.value[i] = saved - static_cast<T>(opt.step);
            const double down = loss_at();
            p.value[i] = saved;
            const double numeric = (up - down) / (2 * opt.step);
            const double analytic = static_cast<double>(p.grad[i]);
            const double rel = std::abs(analytic - numeric) /
                               std::max({std::abs(analytic), std::abs(numeric), opt.abs_floor});
            ++r.checked;
            if (rel >= r.max_rel_error) {
                r.max_rel_error = rel;
                r.worst = p.name + "[" + std::to_string(i) + "]";
            }
        }
    };
    if (opt.sites_only) {
        for (auto& [n, s] : model.sites()) {
            check(s.mu);
            check(s.log_sigma);
        }
    } else {
        model.for_each_trainable(check);
    }
    model.zero_grad();
    r.passed = r.checked > 0 && r.max_rel_error <= opt.tolerance;
    return r;
}

// The standard gradient-check setup: a one-block Bayesian model whose
// posterior has moved away from the prior, scored on a few random sentences.
struct GradCheckToy {
    ModelConfig model;
    BayesConfig bayes;
    std::size_t sentences = 3;
    std::size_t max_words = 6;
    std::uint64_t seed = 1;
    GradCheckOptions check;

    GradCheckToy() {
        model.n_blocks = 1;
        model.d_model = 8;
        model.d_ff = 16;
        model.n_heads = 2;
        model.vocab_size = 20;
        model.max_len = 16;
        bayes.sites.insert({1, SiteKind::FF});
    }
};

template <class T = double>
GradCheckResult run_grad_check_toy(const GradCheckToy& toy) {
    TransformerLM<T> model(toy.model, toy.seed);
    promote(model, toy.bayes);
    Rng rng(toy.seed + 1);
    std::normal_distribution<double> shift(0.0, 0.1);
    std::uniform_real_distribution<double> ls(-3.0, -1.0);
    for (auto& [name, site] : model.sites()) {
        for (auto& v : site.mu.value.span()) v += static_cast<T>(shift(rng));
        for (auto& v : site.log_sigma.value.span()) v = static_cast<T>(ls(rng));
    }
    std::uniform_int_distribution<std::size_t> len(1, toy.max_words);
    std::uniform_int_distribution<int> tok(3, static_cast<int>(toy.model.vocab_size) - 1);
    std::vector<Sentence> sents;
    for (std::size_t i = 0; i < toy.sentences; ++i) {
        Sentence s{Vocabulary::kBos};
        for (std::size_t k = len(rng); k > 0; --k) s.push_back(tok(rng));
        s.push_back(Vocabulary::kEos);
        sents.push_back(std::move(s));
    }
    GradCheckOptions opt = toy.check;
    opt.seed = toy.seed + 2;
    return grad_check(model, pack_sentences(sents), opt);
}

// ---------------------------------------------------------------------------
// KL check: closed form against a Monte-Carlo estimate of E_q[log q - log p].

struct KlCheckOptions {
    std::size_t sites = 20;
    std::size_t dim = 4;
    std::size_t samples = 10'000'000;
    double tolerance = 0.01;  // relative
    std::uint64_t seed = 1;
};

struct KlCheckResult {
    std::size_t sites = 0;
    double max_rel_error = 0;
    bool zero_at_prior = false;
    bool passed = false;

    nlohmann::json to_json() const {
        return {{"sites", sites}, {"max_rel_error", max_rel_error}, {"zero_at_prior", zero_at_prior}, {"passed", passed}};
    }
};

// Monte-Carlo KL(q || prior) of one site using `samples` draws from q.
template <class T>
double monte_carlo_kl(const VariationalSite<T>& site, std::size_t samples, Rng& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    const std::size_t n = site.mu.value.size();
    std::vector<double> sigma(n), log_ratio(n);
    for (std::size_t i = 0; i < n; ++i) {
        sigma[i] = std::exp(static_cast<double>(site.log_sigma.value[i]));
        log_ratio[i] = std::log(static_cast<double>(site.prior_sigma[i])) - static_cast<double>(site.log_sigma.value[i]);
    }
    double total = 0;
    for (std::size_t s = 0; s < samples; ++s) {
        double lr = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double eps = nd(rng);
            const double x = static_cast<double>(site.mu.value[i]) + sigma[i] * eps;
            const double z = (x - static_cast<double>(site.prior_mu[i])) / static_cast<double>(site.prior_sigma[i]);
            lr += log_ratio[i] - 0.5 * eps * eps + 0.5 * z * z;
        }
        total += lr;
    }
    return total / static_cast<double>(samples);
}

inline KlCheckResult kl_check(const KlCheckOptions& opt) {
    Rng rng(opt.seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_real_distribution<double> ls(-2.0, 0.5), ps(0.5, 2.0);
    KlCheckResult r;
    for (std::size_t s = 0; s < opt.sites; ++s) {
        Tensor<double> prior({opt.dim});
        for (auto& v : prior.span()) v = nd(rng);
        VariationalSite<double> site("kl" + std::to_string(s), prior, 1.0, 0.0);
        for (std::size_t i = 0; i < opt.dim; ++i) {
            site.mu.value[i] = nd(rng);
            site.log_sigma.value[i] = ls(rng);
            site.prior_sigma[i] = ps(rng);
        }
        const double exact = kl_site(site);
        const double mc = monte_carlo_kl(site, opt.samples, rng);
        r.max_rel_error = std::max(r.max_rel_error, std::abs(mc - exact) / exact);
        ++r.sites;
    }
    Tensor<double> prior({opt.dim});
    for (auto& v : prior.span()) v = nd(rng);
    VariationalSite<double> same("same", prior, 0.7, std::log(0.7));
    same.log_sigma.value.fill(std::log(0.7));
    r.zero_at_prior = kl_site(same) == 0.0;
    r.passed = r.zero_at_prior && r.max_rel_error <= opt.tolerance;
    return r;
}

// ---------------------------------------------------------------------------
// Paired-seed experiments on synthetic corpora.

// Two-stage protocol shared by the generalization and adaptation runs: a
// deterministic model trained with `stage1` is the starting point and prior;
// the deterministic arm then continues with `stage2`, the Bayesian arm is
// promoted and ELBO-trained with the same `stage2` config. Each arm reports
// the best dev perplexity over its own post-epoch evaluations; the
// deterministic arm also counts its stage-1 epochs.
struct GeneralizationSetup {
    SyntheticSpec source;
    std::size_t n_train = 2000;
    std::size_t n_dev = 500;
    ModelConfig model;  // vocab_size filled from the corpus
    TrainConfig stage1;
    TrainConfig stage2;
    BayesConfig bayes;  // defaults to {1:FF}
    double dropout_rate = 0.1;
    bool with_dropout = false;

    GeneralizationSetup() {
        model.n_blocks = 1;
        model.d_model = 32;
        model.n_heads = 2;
        model.d_ff = 256;
        model.max_len = 64;
        stage1.epochs = 20;
        stage1.batch_size = 8;
        stage1.normalize_by_tokens = false;
        stage2 = stage1;
        stage2.epochs = 10;
        bayes.sites.insert({1, SiteKind::FF});
    }
};

struct ArmResult {
    double dev_ppl = std::numeric_limits<double>::quiet_NaN();
    std::size_t best_epoch = 0;
    std::string status = "ok";
};

struct GeneralizationResult {
    std::size_t d_ff = 0;
    std::uint64_t seed = 0;
    double true_ppl = 0;
    ArmResult deterministic;
    ArmResult bayes;
    ArmResult dropout;
};

namespace detail {

inline double best_of(const std::vector<EpochMetrics>& h, std::size_t* epoch) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& m : h) {
        if (m.epoch == 0) continue;
        if (m.dev_ppl < best) {
            best = m.dev_ppl;
            if (epoch) *epoch = m.epoch;
        }
    }
    return best;
}

inline TrainConfig seeded(TrainConfig c, std::uint64_t seed) {
    c.seed = seed;
    return c;
}

}  // namespace detail

template <class T = double>
GeneralizationResult run_generalization(const GeneralizationSetup& setup, std::size_t d_ff, std::uint64_t seed) {
    GeneralizationResult out;
    out.d_ff = d_ff;
    out.seed = seed;
    const auto corpus = generate_synthetic(setup.source, seed, setup.n_train, setup.n_dev, 0);
    out.true_ppl = SyntheticSource(setup.source).true_perplexity(corpus.dev);
    const Vocabulary vocab = build_vocab(corpus.train);
    const auto train_set = tokenize_all(corpus.train, vocab);
    const auto dev_set = tokenize_all(corpus.dev, vocab);
    ModelConfig mc = setup.model;
    mc.d_ff = d_ff;
    mc.vocab_size = vocab.size();
    mc.dropout_rate = 0;

    TransformerLM<T> base(mc, seed);
    const auto r1 = train(base, train_set, dev_set, detail::seeded(setup.stage1, seed));
    std::size_t e1 = 0;
    const double stage1_best = detail::best_of(r1.history, &e1);

    TransformerLM<T> det = base;
    const auto r2 = train(det, train_set, dev_set, detail::seeded(setup.stage2, seed + 1000));
    std::size_t e2 = 0;
    const double stage2_best = detail::best_of(r2.history, &e2);
    out.deterministic.dev_ppl = std::min(stage1_best, stage2_best);
    out.deterministic.best_epoch = stage2_best < stage1_best ? setup.stage1.epochs + e2 : e1;
    if (r1.diverged || r2.diverged) out.deterministic.status = "diverged";

    TransformerLM<T> bay = base;
    promote(bay, setup.bayes, base);
    const auto rb = train(bay, train_set, dev_set, detail::seeded(setup.stage2, seed + 1000));
    std::size_t eb = 0;
    out.bayes.dev_ppl = detail::best_of(rb.history, &eb);
    out.bayes.best_epoch = setup.stage1.epochs + eb;
    if (rb.diverged) out.bayes.status = "diverged";

    if (setup.with_dropout) {
        ModelConfig dc = mc;
        dc.dropout_rate = setup.dropout_rate;
        TransformerLM<T> drop(dc, seed);
        TrainConfig tc = detail::seeded(setup.stage1, seed);
        tc.epochs = setup.stage1.epochs + setup.stage2.epochs;
        const auto rd = train(drop, train_set, dev_set, tc);
        out.dropout.dev_ppl = detail::best_of(rd.history, &out.dropout.best_epoch);
        if (rd.diverged) out.dropout.status = "diverged";
    }
    return out;
}

struct SweepRow {
    std::size_t d_ff = 0;
    std::string variant;
    std::uint64_t seed = 0;
    double dev_ppl = 0;
    std::size_t best_epoch = 0;
    std::string status;
};

// One row per (width, variant, seed). A failing run is recorded and the
// sweep moves on.
template <class T = double>
std::vector<SweepRow> width_sweep(const GeneralizationSetup& setup, const std::vector<std::size_t>& widths,
                                  const std::vector<std::uint64_t>& seeds,
                                  const std::function<void(const SweepRow&)>& on_row = {}) {
    std::vector<SweepRow> rows;
    auto emit = [&](SweepRow r) {
        if (on_row) on_row(r);
        rows.push_back(std::move(r));
    };
    for (const auto w : widths) {
        for (const auto s : seeds) {
            try {
                const auto g = run_generalization<T>(setup, w, s);
                emit({w, "deterministic", s, g.deterministic.dev_ppl, g.deterministic.best_epoch, g.deterministic.status});
                if (setup.with_dropout) emit({w, "dropout", s, g.dropout.dev_ppl, g.dropout.best_epoch, g.dropout.status});
                emit({w, "bayes-" + sites_string(setup.bayes.sites), s, g.bayes.dev_ppl, g.bayes.best_epoch, g.bayes.status});
            } catch (const std::exception& e) {
                emit({w, "error", s, std::numeric_limits<double>::quiet_NaN(), 0, e.what()});
            }
        }
    }
    return rows;
}

inline void write_sweep_tsv(std::ostream& os, const std::vector<SweepRow>& rows, bool header = true) {
    if (header) os << "d_ff\tvariant\tseed\tdev_ppl\tbest_epoch\tstatus\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.10g", r.dev_ppl);
        os << r.d_ff << '\t' << r.variant << '\t' << r.seed << '\t' << buf << '\t' << r.best_epoch << '\t' << r.status
           << '\n';
    }
}

// Domain adaptation: deterministic source model on grammar A, then
// fine_tune on the small grammar-B target set. The fine-tuned weights are
// the prior of the bayes_adapt arm; the fine-tune arm continues with the
// same stage-2 schedule for a matched budget.
struct AdaptationSetup {
    SyntheticSpec source;
    SyntheticSpec target;  // same alphabet, redrawn contexts
    std::size_t n_source = 20000;
    std::size_t n_source_dev = 500;
    std::size_t n_target = 500;
    std::size_t n_target_dev = 500;
    ModelConfig model;
    TrainConfig pretrain;
    TrainConfig finetune;  // runs at finetune_lr
    TrainConfig stage2;
    BayesConfig bayes;

    AdaptationSetup() {
        target.shift_fraction = 0.5;
        target.shift_seed = 99;
        model.n_blocks = 1;
        model.d_model = 16;
        model.n_heads = 2;
        model.d_ff = 64;
        model.max_len = 64;
        pretrain.epochs = 3;
        pretrain.batch_size = 8;
        pretrain.normalize_by_tokens = false;
        finetune = pretrain;
        finetune.epochs = 40;
        stage2 = finetune;
        stage2.epochs = 20;
        bayes.sites.insert({1, SiteKind::FF});
    }
};

struct AdaptationResult {
    std::uint64_t seed = 0;
    double source_dev_ppl = 0;
    double unadapted_target_ppl = 0;
    ArmResult fine_tune;
    ArmResult bayes_adapt;
    bool prior_matches_finetuned = false;
};

// Source-side data and vocabulary. The vocabulary comes from the source
// text only, so one pretrained model serves every target seed; target words
// outside it would score as <unk>.
struct AdaptationSource {
    Vocabulary vocab;
    std::vector<Sentence> train, dev;
};

inline AdaptationSource adaptation_source(const AdaptationSetup& setup) {
    const auto src = generate_synthetic(setup.source, setup.source.chain_seed * 7919, setup.n_source,
                                        setup.n_source_dev, 0);
    AdaptationSource out;
    out.vocab = build_vocab(src.train);
    out.train = tokenize_all(src.train, out.vocab);
    out.dev = tokenize_all(src.dev, out.vocab);
    return out;
}

template <class T = double>
TransformerLM<T> pretrain_source(const AdaptationSetup& setup, const AdaptationSource& src) {
    ModelConfig mc = setup.model;
    mc.vocab_size = src.vocab.size();
    TransformerLM<T> source(mc, setup.pretrain.seed);
    train(source, src.train, src.dev, setup.pretrain);
    return source;
}

template <class T = double>
AdaptationResult run_adaptation(const AdaptationSetup& setup, std::uint64_t seed,
                                const TransformerLM<T>* pretrained = nullptr) {
    AdaptationResult out;
    out.seed = seed;
    const AdaptationSource src = adaptation_source(setup);
    const auto tgt = generate_synthetic(setup.target, seed, setup.n_target, setup.n_target_dev, 0);
    const auto& src_dev = src.dev;
    const auto tgt_train = tokenize_all(tgt.train, src.vocab), tgt_dev = tokenize_all(tgt.dev, src.vocab);

    const TransformerLM<T> source = pretrained ? *pretrained : pretrain_source<T>(setup, src);
    if (source.config().vocab_size != src.vocab.size()) throw ConfigError("pretrained model vocabulary does not match");
    out.source_dev_ppl = corpus_perplexity(source, src_dev).perplexity;
    out.unadapted_target_ppl = corpus_perplexity(source, tgt_dev).perplexity;

    TransformerLM<T> ft = source;
    AdaptSpec<T> spec;
    spec.mode = AdaptMode::FineTune;
    const auto r1 = adapt(ft, tgt_train, tgt_dev, spec, detail::seeded(setup.finetune, seed));
    std::size_t e1 = 0;
    const double ft_best = detail::best_of(r1.history, &e1);

    TransformerLM<T> ft_more = ft;
    const auto r2 = adapt(ft_more, tgt_train, tgt_dev, spec, detail::seeded(setup.stage2, seed + 1000));
    std::size_t e2 = 0;
    const double ft_more_best = detail::best_of(r2.history, &e2);
    out.fine_tune.dev_ppl = std::min(ft_best, ft_more_best);
    out.fine_tune.best_epoch = ft_more_best < ft_best ? setup.finetune.epochs + e2 : e1;

    TransformerLM<T> ba = ft;
    AdaptSpec<T> bspec;
    bspec.mode = AdaptMode::BayesAdapt;
    bspec.reference = &ft;
    bspec.sites = setup.bayes;
    // Prior fixed before training: compare it with the fine-tuned tensors.
    const auto rb = adapt(ba, tgt_train, tgt_dev, bspec, detail::seeded(setup.stage2, seed + 1000));
    std::size_t eb = 0;
    out.bayes_adapt.dev_ppl = detail::best_of(rb.history, &eb);
    out.bayes_adapt.best_epoch = setup.finetune.epochs + eb;
    bool match = !ba.sites().empty();
    for (const auto& [name, site] : ba.sites()) {
        const auto& ref = ft.mean_weight(name);
        match = match && site.prior_mu.shape() == ref.shape() &&
                std::memcmp(site.prior_mu.data(), ref.data(), ref.size() * sizeof(T)) == 0;
    }
    out.prior_matches_finetuned = match;
    return out;
}

}  // namespace btlm
