#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "btlm/transformer.hpp"
#include "support.hpp"

using namespace btlm;

namespace {

ModelConfig tiny_config(std::size_t vocab = 7) {
    ModelConfig c;
    c.n_blocks = 2;
    c.d_model = 8;
    c.d_ff = 12;
    c.n_heads = 2;
    c.vocab_size = vocab;
    c.max_len = 16;
    return c;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> u(0, static_cast<int>(vocab) - 1);
    std::vector<int> t(n);
    for (auto& x : t) x = u(rng);
    return t;
}

// Straight-line decoder over std::vector, written from the model equations
// without the tape or the kernels used by the library.
std::vector<std::vector<double>> reference_forward(const TransformerLM<double>& m, const std::vector<int>& tokens) {
    const auto& c = m.config();
    const std::size_t d = c.d_model, n = tokens.size(), hd = d / c.n_heads;
    auto W = [&](const std::string& name) -> const Tensor<double>& { return m.mean_weight(name); };
    auto lin = [&](const std::vector<double>& x, const Tensor<double>& w) {
        std::vector<double> y(w.cols(), 0.0);
        for (std::size_t j = 0; j < w.cols(); ++j)
            for (std::size_t i = 0; i < x.size(); ++i) y[j] += x[i] * w(i, j);
        return y;
    };
    auto norm = [&](std::vector<double> x, const Tensor<double>& g, const Tensor<double>& b) {
        double mu = 0, var = 0;
        for (double v : x) mu += v / double(x.size());
        for (double v : x) var += (v - mu) * (v - mu) / double(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mu) / std::sqrt(var + c.ln_eps) * g[i] + b[i];
        return x;
    };
    std::vector<std::vector<double>> x(n, std::vector<double>(d));
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t i = 0; i < d; ++i) {
            const double angle = double(t) / std::pow(10000.0, double(i - i % 2) / double(d));
            x[t][i] = W("embed")(static_cast<std::size_t>(tokens[t]), i) + (i % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    }
    for (std::size_t l = 1; l <= c.n_blocks; ++l) {
        auto B = [&](const char* leaf) -> const Tensor<double>& { return W(names::block(l, leaf)); };
        std::vector<std::vector<double>> q(n), k(n), v(n), z(n);
        for (std::size_t t = 0; t < n; ++t) {
            q[t] = lin(x[t], B("attn.q"));
            k[t] = lin(x[t], B("attn.k"));
            v[t] = lin(x[t], B("attn.v"));
        }
        for (std::size_t t = 0; t < n; ++t) {
            std::vector<double> head_out(d, 0.0);
            for (std::size_t h = 0; h < c.n_heads; ++h) {
                std::vector<double> s(t + 1);
                double z_sum = 0;
                for (std::size_t j = 0; j <= t; ++j) {
                    double dot = 0;
                    for (std::size_t e = 0; e < hd; ++e) dot += q[t][h * hd + e] * k[j][h * hd + e];
                    s[j] = std::exp(dot / std::sqrt(double(hd)));
                    z_sum += s[j];
                }
                for (std::size_t j = 0; j <= t; ++j)
                    for (std::size_t e = 0; e < hd; ++e) head_out[h * hd + e] += s[j] / z_sum * v[j][h * hd + e];
            }
            auto y = lin(head_out, B("attn.o"));
            for (std::size_t i = 0; i < d; ++i) y[i] += x[t][i];
            z[t] = norm(y, B("ln1.g"), B("ln1.b"));
        }
        for (std::size_t t = 0; t < n; ++t) {
            auto h = lin(z[t], B("ff.w1"));
            for (std::size_t i = 0; i < h.size(); ++i) {
                const double a = h[i] + B("ff.b1")[i];
                h[i] = 0.5 * a * std::erfc(-a / std::sqrt(2.0));
            }
            auto s = lin(h, B("ff.w2"));
            for (std::size_t i = 0; i < d; ++i) s[i] += B("ff.b2")[i] + z[t][i];
            x[t] = norm(s, B("ln2.g"), B("ln2.b"));
        }
    }
    std::vector<std::vector<double>> logits(n);
    for (std::size_t t = 0; t < n; ++t) {
        logits[t] = lin(x[t], W("out.w"));
        for (std::size_t j = 0; j < logits[t].size(); ++j) logits[t][j] += W("out.b")[j];
    }
    return logits;
}

}  // namespace

TEST(Transformer, ConfigValidationNamesTheField) {
    auto c = tiny_config();
    c.n_heads = 3;
    try {
        c.validate();
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("n_heads"), std::string::npos);
    }
    c = tiny_config();
    c.vocab_size = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Transformer, ParameterInventory) {
    TransformerLM<double> m(tiny_config(), 1);
    const auto names = m.weight_names();
    EXPECT_EQ(names.size(), 3u + 2u * 12u);
    EXPECT_EQ(m.mean_weight("embed").shape(), (Shape{7, 8}));
    EXPECT_EQ(m.mean_weight("block2.ff.w1").shape(), (Shape{8, 12}));
    EXPECT_EQ(m.mean_weight("block1.ff.w2").shape(), (Shape{12, 8}));
    EXPECT_EQ(m.mean_weight("out.w").shape(), (Shape{8, 7}));
    for (auto v : m.mean_weight("block1.ln1.g").span()) EXPECT_EQ(v, 1.0);
    const double bound = 1.0 / std::sqrt(8.0);
    for (auto v : m.mean_weight("block1.attn.q").span()) EXPECT_LE(std::abs(v), bound);
}

TEST(Transformer, MatchesStraightLineReference) {
    auto c = tiny_config(5);
    c.n_blocks = 1;
    c.d_model = 4;
    c.d_ff = 6;
    c.n_heads = 2;
    TransformerLM<double> m(c, 4);
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 5; ++trial) {
        const auto tokens = random_tokens(1 + trial * 2, 5, rng);
        const auto got = m.forward(tokens);
        const auto want = reference_forward(m, tokens);
        for (std::size_t t = 0; t < tokens.size(); ++t)
            for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(got(t, j), want[t][j], 1e-12);
    }
    TransformerLM<double> deep(tiny_config(), 9);
    const auto tokens = random_tokens(9, 7, rng);
    const auto got = deep.forward(tokens);
    const auto want = reference_forward(deep, tokens);
    for (std::size_t t = 0; t < tokens.size(); ++t)
        for (std::size_t j = 0; j < 7; ++j) EXPECT_NEAR(got(t, j), want[t][j], 1e-12);
}

TEST(Transformer, FeedForwardHandComputed) {
    // d_model = d_ff = 2, identity projections, zero biases.
    const auto I = Tensor<double>::matrix(2, 2, {1, 0, 0, 1});
    const Tensor<double> zero({2}, 0.0);
    const auto g = Tensor<double>({2}, std::vector<double>{2, 3});
    const auto b = Tensor<double>({2}, std::vector<double>{0.1, -0.2});
    DecoderBlock<double> blk{&I, &I, &I, &I, &g, &b, &I, &zero, &I, &zero, &g, &b, 1, 1e-5};
    const std::vector<double> z{0.5, -0.5};
    const auto x = feed_forward(std::span<const double>(z), blk);
    // gelu(0.5) = 0.5 * Phi(0.5), Phi(0.5) = 0.691462461274013
    const double h0 = 0.5 * 0.691462461274013, h1 = -0.5 * (1 - 0.691462461274013);
    const double s0 = h0 + 0.5, s1 = h1 - 0.5;
    const double mean = (s0 + s1) / 2, dev = (s0 - s1) / 2;
    const double r = 1.0 / std::sqrt(dev * dev + 1e-5);
    EXPECT_NEAR(x[0], 2 * (s0 - mean) * r + 0.1, 1e-12);
    EXPECT_NEAR(x[1], 3 * (s1 - mean) * r - 0.2, 1e-12);
}

TEST(Transformer, CausalityUnderRandomPerturbations) {
    TransformerLM<double> m(tiny_config(), 2);
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        auto tokens = random_tokens(10, 7, rng);
        const auto base = m.forward(tokens);
        std::uniform_int_distribution<std::size_t> pos(0, 9);
        const std::size_t t = pos(rng);
        for (std::size_t j = t + 1; j < tokens.size(); ++j) tokens[j] = (tokens[j] + 1 + trial) % 7;
        const auto pert = m.forward(tokens);
        for (std::size_t r = 0; r <= t; ++r)
            for (std::size_t j = 0; j < 7; ++j) EXPECT_EQ(base(r, j), pert(r, j));
    }
}

TEST(Transformer, SoftmaxOfLogitsNormalized) {
    TransformerLM<double> m(tiny_config(3), 5);
    std::mt19937_64 rng(5);
    const auto logits = m.forward(random_tokens(12, 3, rng));
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        std::vector<double> row(logits.row(r).begin(), logits.row(r).end());
        kernels::softmax_inplace(std::span<double>(row));
        EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-12);
    }
}

TEST(Transformer, IncrementalDecodingMatchesBatch) {
    std::mt19937_64 rng(6);
    for (bool tie : {false, true}) {
        auto c = tiny_config();
        c.tie_output = tie;
        TransformerLM<double> m(c, 6);
        const auto tokens = random_tokens(16, 7, rng);
        const auto batch = m.forward(tokens);
        auto state = m.start_state();
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            const auto step = m.step(tokens[t], state);
            for (std::size_t j = 0; j < 7; ++j) EXPECT_NEAR(step[j], batch(t, j), 1e-10);
        }
        EXPECT_THROW(m.step(0, state), InputError);
    }
}

TEST(Transformer, CacheLengthMismatchIsContractError) {
    TransformerLM<double> m(tiny_config(), 1);
    auto state = m.start_state();
    m.step(1, state);
    state.position = 0;
    EXPECT_THROW(m.step(1, state), ContractError);
}

TEST(Transformer, VocabularyPermutationPermutesLogits) {
    auto c = tiny_config();
    TransformerLM<double> m(c, 8);
    std::vector<std::size_t> perm{3, 0, 6, 1, 5, 2, 4};  // new id of old id i
    TransformerLM<double> p = m;
    auto& E = p.params().at("embed").value;
    auto& Wo = p.params().at("out.w").value;
    auto& bo = p.params().at("out.b").value;
    for (std::size_t i = 0; i < 7; ++i) {
        for (std::size_t k = 0; k < 8; ++k) {
            E(perm[i], k) = m.mean_weight("embed")(i, k);
            Wo(k, perm[i]) = m.mean_weight("out.w")(k, i);
        }
        bo[perm[i]] = m.mean_weight("out.b")[i];
    }
    std::mt19937_64 rng(8);
    const auto tokens = random_tokens(6, 7, rng);
    std::vector<int> mapped;
    for (int t : tokens) mapped.push_back(static_cast<int>(perm[static_cast<std::size_t>(t)]));
    const auto a = m.forward(tokens), b = p.forward(mapped);
    for (std::size_t r = 0; r < tokens.size(); ++r)
        for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(a(r, i), b(r, perm[i]), 1e-12);
}

TEST(Transformer, OverlongAndOutOfVocabularyInputs) {
    TransformerLM<double> m(tiny_config(), 1);
    EXPECT_THROW(m.forward(std::vector<int>(17, 1)), InputError);
    EXPECT_THROW(m.forward({1, 9}), InputError);
    EXPECT_THROW(m.forward({}), InputError);
}

TEST(Transformer, PackedBatchSegmentsAreIndependent) {
    TransformerLM<double> m(tiny_config(), 3);
    const std::vector<int> a{0, 4, 5, 1}, b{0, 6, 1};
    const auto batch = pack_sentences(std::vector<std::vector<int>>{a, b});
    Tape<double> tape(false);
    ForwardContext<double> ctx;
    const auto logits = m.forward_batch(tape, batch, ctx).value();
    const auto la = m.forward({0, 4, 5}), lb = m.forward({0, 6});
    for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_NEAR(logits(1, j), la(1, j), 1e-12);
        EXPECT_NEAR(logits(4, j), lb(1, j), 1e-12);
    }
}

TEST(Dropout, IdentityAtRateZeroAndOutsideTraining) {
    std::mt19937_64 g(1);
    const auto x = btlm::testing::random_tensor({4, 5}, g);
    Tape<double> tape(false);
    Rng rng(1);
    auto v = tape.constant(x);
    EXPECT_EQ(apply_dropout(v, 0.0, &rng, true).value(), x);
    EXPECT_EQ(apply_dropout(v, 0.7, &rng, false).value(), x);
    EXPECT_THROW(apply_dropout(v, 0.5, nullptr, true), ContractError);
}

TEST(Dropout, InvertedScalingPreservesExpectation) {
    Tape<double> tape(false);
    Rng rng(42);
    auto v = tape.constant(Tensor<double>({100000}, 1.0));
    const auto y = apply_dropout(v, 0.5, &rng, true).value();
    double mean = 0;
    for (auto e : y.span()) {
        EXPECT_TRUE(e == 0.0 || e == 2.0);
        mean += e / 100000.0;
    }
    EXPECT_NEAR(mean, 1.0, 0.02);
}
