#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "btlm/autodiff.hpp"
#include "support.hpp"

using namespace btlm;
using btlm::testing::max_rel_diff;
using btlm::testing::numeric_grad;
using btlm::testing::random_tensor;

namespace {

// Runs `build` on a recording tape, backprops, and compares every parameter
// gradient with central differences of the same function.
void expect_grads_match(std::vector<Param<double>*> params,
                        const std::function<Var<double>(Tape<double>&)>& build, double tol = 1e-6) {
    for (auto* p : params) p->zero_grad();
    {
        Tape<double> tape;
        tape.backward(build(tape));
    }
    auto f = [&] {
        Tape<double> tape(false);
        return build(tape).value().item();
    };
    for (auto* p : params) {
        const auto num = numeric_grad(*p, f);
        EXPECT_LT(max_rel_diff(p->grad, num), tol) << p->name;
    }
}

}  // namespace

TEST(Tensor, RejectsZeroDimensionsAndMismatchedValues) {
    EXPECT_THROW(Tensor<double>({2, 0}), DimensionError);
    EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
    const auto t = Tensor<double>::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(t(1, 2), 6);
    EXPECT_EQ(t.row(1)[0], 4);
    EXPECT_THROW(t.item(), ContractError);
}

TEST(Autodiff, MatmulValues) {
    Tape<double> tape(false);
    auto a = tape.constant(Tensor<double>::matrix(2, 2, {1, 2, 3, 4}));
    auto b = tape.constant(Tensor<double>::matrix(2, 1, {5, 6}));
    const auto c = matmul(a, b).value();
    EXPECT_EQ(c[0], 17);
    EXPECT_EQ(c[1], 39);
    EXPECT_THROW(matmul(b, b), DimensionError);
}

TEST(Autodiff, ElementwiseGradients) {
    std::mt19937_64 rng(3);
    Param<double> a("a", random_tensor({3, 4}, rng));
    Param<double> b("b", random_tensor({3, 4}, rng));
    Param<double> r("r", random_tensor({4}, rng));
    expect_grads_match({&a, &b, &r}, [&](Tape<double>& t) {
        auto x = add_rowvec(mul(t.param(a), t.param(b)), t.param(r));
        return sum(mul(gelu(x), scale(add(x, t.param(a)), 0.5)));
    });
}

TEST(Autodiff, MatmulTransposeGradients) {
    std::mt19937_64 rng(5);
    Param<double> a("a", random_tensor({3, 5}, rng));
    Param<double> b("b", random_tensor({4, 5}, rng));
    expect_grads_match({&a, &b}, [&](Tape<double>& t) {
        auto c = matmul(t.param(a), transpose(t.param(b)));
        return sum(mul(c, c));
    });
}

TEST(Autodiff, SoftmaxBothAxesGradients) {
    std::mt19937_64 rng(7);
    Param<double> a("a", random_tensor({3, 4}, rng));
    Param<double> w("w", random_tensor({3, 4}, rng));
    for (int axis : {0, 1}) {
        expect_grads_match({&a}, [&](Tape<double>& t) { return sum(mul(softmax(t.param(a), axis), t.param(w))); });
    }
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
    std::mt19937_64 rng(8);
    Tape<double> tape(false);
    const auto s = softmax(tape.constant(random_tensor({6, 9}, rng, 10.0))).value();
    for (std::size_t r = 0; r < 6; ++r) {
        double total = 0;
        for (auto v : s.row(r)) total += v;
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(Autodiff, LayerNormNormalizesWithBiasedVariance) {
    Tape<double> tape(false);
    auto x = tape.constant(Tensor<double>::matrix(1, 4, {1, 2, 3, 4}));
    auto g = tape.constant(Tensor<double>({4}, 1.0));
    auto b = tape.constant(Tensor<double>({4}, 0.0));
    const auto y = layer_norm(x, g, b, 0.0).value();
    // mean 2.5, biased variance 1.25
    const double s = std::sqrt(1.25);
    EXPECT_NEAR(y[0], -1.5 / s, 1e-15);
    EXPECT_NEAR(y[3], 1.5 / s, 1e-15);
}

TEST(Autodiff, LayerNormGradients) {
    std::mt19937_64 rng(11);
    Param<double> x("x", random_tensor({3, 5}, rng));
    Param<double> g("g", random_tensor({5}, rng));
    Param<double> b("b", random_tensor({5}, rng));
    Param<double> w("w", random_tensor({3, 5}, rng));
    expect_grads_match({&x, &g, &b}, [&](Tape<double>& t) {
        return sum(mul(layer_norm(t.param(x), t.param(g), t.param(b), 1e-5), t.param(w)));
    });
}

TEST(Autodiff, GeluMatchesNormalCdf) {
    // Phi(1) = 0.841344746068542948...
    EXPECT_NEAR(kernels::gelu(1.0), 0.8413447460685429, 1e-15);
    EXPECT_NEAR(kernels::gelu(-1.0), -(1 - 0.8413447460685429), 1e-15);
    EXPECT_EQ(kernels::gelu(0.0), 0.0);
}

TEST(Autodiff, CrossEntropyMatchesLogSumExpAndSkipsNegativeTargets) {
    std::mt19937_64 rng(13);
    Param<double> logits("l", random_tensor({3, 5}, rng));
    const std::vector<int> targets{4, -1, 0};
    Tape<double> tape(false);
    const double ce = cross_entropy(tape.param(logits), targets).value().item();
    double expect = 0;
    for (std::size_t r : {0u, 2u}) {
        double lse = 0;
        for (std::size_t j = 0; j < 5; ++j) lse += std::exp(logits.value(r, j));
        expect += std::log(lse) - logits.value(r, static_cast<std::size_t>(targets[r]));
    }
    EXPECT_NEAR(ce, expect, 1e-12);
    expect_grads_match({&logits}, [&](Tape<double>& t) { return cross_entropy(t.param(logits), targets); });
}

TEST(Autodiff, GatherRowsGradientAndBounds) {
    std::mt19937_64 rng(17);
    Param<double> table("e", random_tensor({4, 3}, rng));
    Param<double> w("w", random_tensor({5, 3}, rng));
    const std::vector<int> ids{1, 3, 1, 0, 2};
    expect_grads_match({&table}, [&](Tape<double>& t) { return sum(mul(gather_rows(t.param(table), ids), t.param(w))); });
    Tape<double> tape(false);
    try {
        gather_rows(tape.param(table), {0, 7});
        FAIL();
    } catch (const InputError& e) {
        EXPECT_NE(std::string(e.what()).find("position 1"), std::string::npos);
    }
}

// Dense masked attention written out directly, used as the oracle.
Tensor<double> dense_attention(const Tensor<double>& Q, const Tensor<double>& K, const Tensor<double>& V,
                               const std::vector<Segment>& segs, std::size_t heads) {
    const std::size_t d = Q.cols(), hd = d / heads;
    Tensor<double> out(Q.shape());
    for (const auto& s : segs) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < s.length; ++i) {
                std::vector<double> sc(s.length);
                double mx = -1e300;
                for (std::size_t j = 0; j < s.length; ++j) {
                    double dot = 0;
                    for (std::size_t c = 0; c < hd; ++c) dot += Q(s.start + i, h * hd + c) * K(s.start + j, h * hd + c);
                    sc[j] = j <= i ? dot / std::sqrt(double(hd)) : -1e300;
                    mx = std::max(mx, sc[j]);
                }
                double z = 0;
                for (auto& v : sc) z += (v = v <= -1e299 ? 0.0 : std::exp(v - mx));
                for (std::size_t j = 0; j < s.length; ++j)
                    for (std::size_t c = 0; c < hd; ++c) out(s.start + i, h * hd + c) += sc[j] / z * V(s.start + j, h * hd + c);
            }
        }
    }
    return out;
}

TEST(Autodiff, CausalAttentionMatchesDenseMaskedOracle) {
    std::mt19937_64 rng(19);
    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<std::size_t> len(1, 6), hs(1, 3);
        std::vector<Segment> segs;
        std::size_t n = 0;
        for (int s = 0; s < 3; ++s) {
            const std::size_t l = len(rng);
            segs.push_back({n, l});
            n += l;
        }
        const std::size_t heads = hs(rng), d = heads * 2;
        const auto Q = random_tensor({n, d}, rng), K = random_tensor({n, d}, rng), V = random_tensor({n, d}, rng);
        Tape<double> tape(false);
        const auto got = causal_attention(tape.constant(Q), tape.constant(K), tape.constant(V), segs, heads).value();
        const auto want = dense_attention(Q, K, V, segs, heads);
        for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
    }
}

TEST(Autodiff, CausalAttentionGradients) {
    std::mt19937_64 rng(23);
    Param<double> q("q", random_tensor({5, 4}, rng)), k("k", random_tensor({5, 4}, rng)), v("v", random_tensor({5, 4}, rng));
    Param<double> w("w", random_tensor({5, 4}, rng));
    const std::vector<Segment> segs{{0, 3}, {3, 2}};
    expect_grads_match({&q, &k, &v}, [&](Tape<double>& t) {
        return sum(mul(causal_attention(t.param(q), t.param(k), t.param(v), segs, 2), t.param(w)));
    });
}

TEST(Autodiff, BackwardContractViolations) {
    Param<double> p("p", Tensor<double>({2}, 1.0));
    {
        Tape<double> tape;
        auto l = sum(tape.param(p));
        tape.backward(l);
        EXPECT_THROW(tape.backward(l), ContractError);
    }
    {
        Tape<double> tape;
        EXPECT_THROW(tape.backward(tape.param(p)), ContractError);
    }
    {
        Tape<double> tape(false);
        EXPECT_THROW(tape.backward(sum(tape.param(p))), ContractError);
    }
    {
        Tape<double> t1, t2;
        auto l = sum(t1.param(p));
        EXPECT_THROW(t2.backward(l), ContractError);
        EXPECT_THROW(add(t1.param(p), t2.param(p)), ContractError);
    }
}

TEST(Autodiff, ParamGradientsAccumulateAcrossUses) {
    Param<double> p("p", Tensor<double>::scalar(3.0));
    Tape<double> tape;
    auto a = tape.param(p);
    auto b = tape.param(p);
    tape.backward(mul(a, b));
    EXPECT_EQ(p.grad[0], 6.0);
}

TEST(Autodiff, RandomCompositionsMatchFiniteDifferences) {
    // Property: random chains of ops differentiate correctly.
    std::mt19937_64 rng(29);
    for (int trial = 0; trial < 25; ++trial) {
        std::uniform_int_distribution<std::size_t> dim(1, 4);
        const std::size_t m = dim(rng), n = dim(rng), k = dim(rng);
        Param<double> a("a", random_tensor({m, n}, rng)), b("b", random_tensor({n, k}, rng)), c("c", random_tensor({k}, rng));
        std::uniform_int_distribution<int> pick(0, 3);
        const int which = pick(rng);
        expect_grads_match({&a, &b, &c}, [&](Tape<double>& t) {
            auto x = add_rowvec(matmul(t.param(a), t.param(b)), t.param(c));
            switch (which) {
                case 0: x = gelu(x); break;
                case 1: x = softmax(x); break;
                case 2: x = mul(x, x); break;
                default: x = scale(x, -1.5); break;
            }
            return sum(mul(x, x));
        }, 1e-5);
    }
}
