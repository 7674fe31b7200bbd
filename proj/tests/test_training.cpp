#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <vector>

#include "btlm/checkpoint.hpp"
#include "btlm/config.hpp"
#include "btlm/synthetic.hpp"
#include "btlm/training.hpp"
#include "support.hpp"

using namespace btlm;

namespace {

ModelConfig toy_config(std::size_t V) {
    ModelConfig mc;
    mc.n_blocks = 1;
    mc.d_model = 8;
    mc.d_ff = 16;
    mc.n_heads = 2;
    mc.vocab_size = V;
    mc.max_len = 32;
    return mc;
}

PackedBatch toy_batch() {
    return pack_sentences(std::vector<Sentence>{{0, 4, 5, 6, 1}, {0, 7, 1}, {0, 8, 8, 9, 4, 1}});
}

struct ToyData {
    Vocabulary vocab;
    std::vector<Sentence> train, dev;
};

ToyData toy_data(std::size_t n_train = 200) {
    SyntheticSpec spec;
    spec.alphabet_size = 12;
    spec.n_classes = 3;
    spec.max_len = 8;
    const auto c = generate_synthetic(spec, 2, n_train, 40, 0);
    ToyData d;
    d.vocab = build_vocab(c.train);
    d.train = tokenize_all(c.train, d.vocab);
    d.dev = tokenize_all(c.dev, d.vocab);
    return d;
}

bool same_bits(const TransformerLM<double>& a, const TransformerLM<double>& b) {
    return serialize_checkpoint(a) == serialize_checkpoint(b);
}

double plain_cross_entropy(TransformerLM<double>& m, const PackedBatch& b) {
    Tape<double> tape(false);
    ForwardContext<double> ctx;
    const auto logits = m.forward_batch(tape, b, ctx).value();
    double total = 0;
    std::vector<double> row(logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        std::copy(logits.row(r).begin(), logits.row(r).end(), row.begin());
        kernels::log_softmax_inplace(std::span<double>(row));
        total -= row[static_cast<std::size_t>(b.targets[r])];
    }
    return total;
}

}  // namespace

TEST(Elbo, WithoutSitesIsTokenCrossEntropy) {
    TransformerLM<double> m(toy_config(12), 1);
    const auto b = toy_batch();
    Tape<double> tape;
    Rng rng(1);
    const auto t = elbo_loss(tape, m, b, rng, 1.0, 3);
    EXPECT_EQ(t.kl, 0.0);
    EXPECT_EQ(t.tokens, 11u);
    EXPECT_NEAR(t.loss.value().item(), plain_cross_entropy(m, b), 1e-10);
}

TEST(Elbo, DeterministicLimitMatchesPlainNll) {
    TransformerLM<double> det(toy_config(12), 2);
    TransformerLM<double> m = det;
    BayesConfig bc;
    bc.sites = {{1, SiteKind::FF}, {1, SiteKind::MHA}};
    bc.init_log_sigma = -20;
    promote(m, bc);
    const auto b = toy_batch();
    Tape<double> tape;
    Rng rng(2);
    const auto t = elbo_loss(tape, m, b, rng, 0.0, 1, static_cast<std::vector<SiteNoise<double>>*>(nullptr), false);
    EXPECT_NEAR(t.nll, plain_cross_entropy(det, b), 1e-8);
}

TEST(Elbo, KSamplesEqualMeanOfReplayedSingleSamples) {
    TransformerLM<double> m(toy_config(12), 3);
    BayesConfig bc;
    bc.sites.insert({1, SiteKind::FF});
    bc.init_log_sigma = -1;
    promote(m, bc);
    const auto b = toy_batch();
    Rng rng(3);
    std::vector<SiteNoise<double>> noise;
    double kl = 0, loss4 = 0;
    {
        Tape<double> tape;
        const auto t = elbo_loss(tape, m, b, rng, 0.25, 4, &noise, false);
        loss4 = t.loss.value().item();
        kl = t.kl;
    }
    ASSERT_EQ(noise.size(), 4u);
    double mean_single = 0;
    for (auto& n : noise) {
        std::vector<SiteNoise<double>> one{n};
        Tape<double> tape;
        Rng unused(99);
        mean_single += elbo_loss(tape, m, b, unused, 0.0, 1, &one, false).nll / 4;
    }
    EXPECT_NEAR(loss4, mean_single + 0.25 * kl, 1e-10);
    EXPECT_NEAR(kl, kl_total(m), 1e-12);
}

TEST(Sgd, ScalarArithmeticAndZeroRate) {
    TransformerLM<double> m(toy_config(12), 4);
    auto& p = m.params().at(names::out_b());
    p.value[0] = 1.0;
    p.grad[0] = 2.0;
    const auto before = m;
    auto r = sgd_step(m, 0.1);
    EXPECT_TRUE(r.applied);
    EXPECT_DOUBLE_EQ(p.value[0], 0.8);
    EXPECT_EQ(p.grad[0], 0.0);

    TransformerLM<double> z = before;
    z.for_each_trainable([](Param<double>& q) { q.grad.fill(3.0); });
    const auto snapshot = z;
    sgd_step(z, 0.0);
    EXPECT_TRUE(checkpoint_diff(z, snapshot).empty());
}

TEST(Sgd, ClipsToGlobalNormAndSkipsNonFinite) {
    TransformerLM<double> m(toy_config(12), 5);
    m.zero_grad();
    auto& p = m.params().at(names::out_b());
    p.grad[0] = 30.0;
    p.grad[1] = 40.0;  // norm 50
    const double v0 = p.value[0], v1 = p.value[1];
    const auto r = sgd_step(m, 1.0, 5.0);
    EXPECT_NEAR(r.grad_norm, 50.0, 1e-12);
    EXPECT_NEAR(p.value[0], v0 - 3.0, 1e-12);
    EXPECT_NEAR(p.value[1], v1 - 4.0, 1e-12);

    const auto before = m;
    p.grad[2] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_FALSE(sgd_step(m, 1.0, 5.0).applied);
    EXPECT_TRUE(checkpoint_diff(m, before).empty());
    EXPECT_EQ(global_grad_norm(m), 0.0);
}

TEST(Sgd, SitesUpdateMuAndLogSigma) {
    TransformerLM<double> m(toy_config(12), 6);
    BayesConfig bc;
    bc.sites.insert({1, SiteKind::FF});
    promote(m, bc);
    auto& site = m.sites().at(names::block(1, "ff.w1"));
    site.mu.grad.fill(1.0);
    site.log_sigma.grad.fill(-1.0);
    const double mu0 = site.mu.value[0], ls0 = site.log_sigma.value[0];
    sgd_step(m, 0.01);
    EXPECT_NEAR(site.mu.value[0], mu0 - 0.01, 1e-15);
    EXPECT_NEAR(site.log_sigma.value[0], ls0 + 0.01, 1e-15);
}

TEST(Sgd, ZeroKlWeightTinySigmaStepMatchesDeterministicStep) {
    TransformerLM<double> det(toy_config(12), 7);
    TransformerLM<double> bay = det;
    BayesConfig bc;
    bc.sites.insert({1, SiteKind::FF});
    bc.init_log_sigma = -20;
    promote(bay, bc);
    const auto b = toy_batch();
    for (auto* m : {&det, &bay}) {
        Tape<double> tape;
        Rng rng(1);
        tape.backward(elbo_loss(tape, *m, b, rng, 0.0).loss);
        sgd_step(*m, 0.1, 5.0);
    }
    for (const char* leaf : {"ff.w1", "ff.w2"}) {
        const auto& a = det.mean_weight(names::block(1, leaf));
        const auto& c = bay.mean_weight(names::block(1, leaf));
        for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], c[i], 1e-8);
    }
}

TEST(Train, OverfitsTwoTokenCorpus) {
    // Sentence "a": predicted tokens a and </s>.
    const auto vocab = build_vocab({"a"});
    const std::vector<Sentence> data{tokenize("a", vocab)};
    TransformerLM<double> m(toy_config(vocab.size()), 8);
    Rng rng(8);
    double nll = 0;
    for (int step = 0; step < 100; ++step) {
        Tape<double> tape;
        auto t = elbo_loss(tape, m, pack_sentences(data), rng, 0.0);
        nll = t.nll / 2;
        tape.backward(scale(t.loss, 0.5));
        sgd_step(m, 0.1, 5.0);
    }
    Tape<double> tape;
    EXPECT_LT(elbo_loss(tape, m, pack_sentences(data), rng, 0.0).nll / 2, 0.01) << "last step " << nll;
    EXPECT_GT(sentence_logprob(m, data[0]), -0.02);
}

TEST(Train, SeedFixedRunsAreIdentical) {
    const auto d = toy_data();
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 16;
    tc.seed = 11;
    auto run = [&] {
        TransformerLM<double> m(toy_config(d.vocab.size()), 5);
        BayesConfig bc;
        bc.sites.insert({1, SiteKind::FF});
        promote(m, bc);
        std::vector<std::string> log;
        train(m, d.train, d.dev, tc, [&](const EpochMetrics& e) { log.push_back(e.to_json().dump()); });
        return std::make_pair(log, serialize_checkpoint(m));
    };
    const auto a = run(), b = run();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.first.size(), 4u);
    EXPECT_TRUE(a.second == b.second);
}

TEST(Train, HistoryLearningRateAndBestSelection) {
    const auto d = toy_data();
    TrainConfig tc;
    tc.epochs = 8;
    tc.batch_size = 8;
    tc.learning_rate = 0.5;
    TransformerLM<double> m(toy_config(d.vocab.size()), 6);
    const auto r = train(m, d.train, d.dev, tc);
    ASSERT_EQ(r.history.size(), 9u);
    EXPECT_EQ(r.history[0].epoch, 0u);
    double best = 1e300;
    std::size_t best_epoch = 0;
    for (std::size_t e = 1; e < r.history.size(); ++e) {
        const auto& h = r.history[e];
        // lr halves after an epoch that failed to improve, never below the floor.
        const auto& prev = r.history[e - 1];
        if (e >= 2) {
            const bool improved = prev.dev_ppl < r.history[e - 2].dev_ppl;
            EXPECT_DOUBLE_EQ(h.lr, improved ? prev.lr : std::max(prev.lr * 0.5, tc.lr_floor));
        }
        EXPECT_GT(h.nll, 0.0);
        if (h.dev_ppl < best) {
            best = h.dev_ppl;
            best_epoch = e;
        }
    }
    EXPECT_EQ(r.best_epoch, best_epoch);
    EXPECT_EQ(r.best_dev_ppl, best);
    EXPECT_NEAR(detail::dev_perplexity(m, d.dev), best, 1e-12);
    EXPECT_LT(best, r.history[0].dev_ppl);
}

TEST(Train, DivergenceKeepsLastGoodWeights) {
    const auto d = toy_data(50);
    TransformerLM<double> m(toy_config(d.vocab.size()), 9);
    m.params().at(names::out_b()).value[5] = std::numeric_limits<double>::quiet_NaN();
    const auto start = m;
    TrainConfig tc;
    tc.epochs = 2;
    const auto r = train(m, d.train, d.dev, tc);
    EXPECT_TRUE(r.diverged);
    EXPECT_NE(r.divergence.find("epoch 1"), std::string::npos);
    EXPECT_TRUE(same_bits(m, start));
}

TEST(Train, RejectsOutOfVocabularyIdsAndEmptyCorpora) {
    TransformerLM<double> m(toy_config(6), 1);
    TrainConfig tc;
    EXPECT_THROW(train(m, {{0, 9, 1}}, {{0, 1}}, tc), InputError);
    EXPECT_THROW(train(m, {}, {{0, 1}}, tc), InputError);
    tc.batch_size = 0;
    EXPECT_THROW(train(m, {{0, 1}}, {{0, 1}}, tc), ConfigError);
}

TEST(Train, KlEnteringObjectiveScalesWithBatchFraction) {
    // One full-batch epoch with lr 0 leaves weights alone; the logged KL is
    // the unweighted total.
    const auto d = toy_data(40);
    TransformerLM<double> m(toy_config(d.vocab.size()), 3);
    BayesConfig bc;
    bc.sites.insert({1, SiteKind::FF});
    promote(m, bc);
    TrainConfig tc;
    tc.epochs = 1;
    tc.learning_rate = 0;
    const auto r = train(m, d.train, d.dev, tc);
    EXPECT_NEAR(r.history[1].kl, kl_total(m), 1e-12);
    EXPECT_GT(r.history[1].kl, 0.0);
}

TEST(PackConcatenated, WindowsCoverStreamOnce) {
    const std::vector<Sentence> s{{0, 4, 5, 1}, {0, 6, 1}, {0, 7, 8, 9, 1}};
    std::vector<const Sentence*> ptrs{&s[0], &s[1], &s[2]};
    const auto b = pack_concatenated(ptrs, 4);
    // Stream: 0 4 5 1 6 1 7 8 9 1 -> 9 predictions.
    EXPECT_EQ(b.targets, (std::vector<int>{4, 5, 1, 6, 1, 7, 8, 9, 1}));
    EXPECT_EQ(b.inputs, (std::vector<int>{0, 4, 5, 1, 6, 1, 7, 8, 9}));
    ASSERT_EQ(b.segments.size(), 3u);
    EXPECT_EQ(b.segments[2].length, 1u);
}

TEST(Adapt, FineTuneAtZeroRateReturnsInput) {
    const auto d = toy_data(60);
    TransformerLM<double> m(toy_config(d.vocab.size()), 12);
    const auto start = m;
    TrainConfig tc;
    tc.epochs = 2;
    tc.finetune_lr = 0;
    AdaptSpec<double> spec;
    adapt(m, d.train, d.dev, spec, tc);
    EXPECT_TRUE(same_bits(m, start));
    spec.mode = AdaptMode::None;
    adapt(m, d.train, d.dev, spec, tc);
    EXPECT_TRUE(same_bits(m, start));
}

TEST(Adapt, BayesAdaptPriorIsReferenceBitExact) {
    const auto d = toy_data(60);
    TransformerLM<double> ft(toy_config(d.vocab.size()), 13);
    TrainConfig tc;
    tc.epochs = 1;
    AdaptSpec<double> fspec;
    adapt(ft, d.train, d.dev, fspec, tc);

    AdaptSpec<double> spec;
    spec.mode = AdaptMode::BayesAdapt;
    spec.reference = &ft;
    spec.sites.sites = {{1, SiteKind::FF}, {1, SiteKind::MHA}};
    TransformerLM<double> m = ft;
    adapt(m, d.train, d.dev, spec, tc);
    ASSERT_EQ(m.sites().size(), 6u);
    for (const auto& [name, site] : m.sites()) {
        const auto& ref = ft.mean_weight(name);
        EXPECT_EQ(std::memcmp(site.prior_mu.data(), ref.data(), ref.size() * sizeof(double)), 0) << name;
        for (auto s : site.prior_sigma.span()) EXPECT_EQ(s, 1.0);
    }
    spec.reference = nullptr;
    EXPECT_THROW(adapt(m, d.train, d.dev, spec, tc), ConfigError);
    EXPECT_EQ(adapt_mode_from_string("bayes_adapt"), AdaptMode::BayesAdapt);
    EXPECT_THROW(adapt_mode_from_string("bayes"), ConfigError);
}

TEST(Adapt, ExistingSitesAreRecentredOnReference) {
    const auto d = toy_data(60);
    TransformerLM<double> ref(toy_config(d.vocab.size()), 14);
    TransformerLM<double> m(toy_config(d.vocab.size()), 15);
    BayesConfig bc;
    bc.sites.insert({1, SiteKind::FF});
    promote(m, bc);
    AdaptSpec<double> spec;
    spec.mode = AdaptMode::BayesAdapt;
    spec.reference = &ref;
    TrainConfig tc;
    tc.epochs = 1;
    tc.finetune_lr = 0;
    adapt(m, d.train, d.dev, spec, tc);
    for (const auto& [name, site] : m.sites())
        EXPECT_EQ(std::memcmp(site.prior_mu.data(), ref.mean_weight(name).data(), site.prior_mu.size() * sizeof(double)), 0);
}

TEST(TrainConfigJson, RoundTripAndFieldErrors) {
    TrainConfig c;
    c.learning_rate = 0.3;
    c.kl_scale_mode = KlScaleMode::Constant;
    c.seed = 42;
    nlohmann::json j = c;
    const auto back = j.get<TrainConfig>();
    EXPECT_EQ(nlohmann::json(back), j);
    try {
        nlohmann::json{{"learnig_rate", 0.1}}.get<TrainConfig>();
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("train.learnig_rate"), std::string::npos);
    }
    try {
        nlohmann::json{{"epochs", "ten"}}.get<TrainConfig>();
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("train.epochs"), std::string::npos);
    }
    EXPECT_THROW(nlohmann::json({{"kl_scale_mode", "per_token"}}).get<TrainConfig>(), ConfigError);
}
