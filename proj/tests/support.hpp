#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "btlm/autodiff.hpp"
#include "btlm/bayes.hpp"
#include "btlm/eval.hpp"
#include "btlm/tensor.hpp"
#include "btlm/transformer.hpp"

namespace btlm::testing {

inline Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    Tensor<double> t(shape);
    for (auto& v : t.span()) v = nd(rng);
    return t;
}

// Central-difference gradient of f with respect to every element of p.value.
inline Tensor<double> numeric_grad(Param<double>& p, const std::function<double()>& f, double h = 1e-6) {
    Tensor<double> g(p.value.shape());
    for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double saved = p.value[i];
        p.value[i] = saved + h;
        const double up = f();
        p.value[i] = saved - h;
        const double down = f();
        p.value[i] = saved;
        g[i] = (up - down) / (2 * h);
    }
    return g;
}

inline double max_rel_diff(const Tensor<double>& a, const Tensor<double>& b, double floor = 1e-6) {
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, d);
    }
    return worst;
}

// A Bayesian toy whose two sites each carry exactly one uncertain scalar:
// every other element has log-sigma -40, so the predictive integral is
// two-dimensional and can be done by quadrature.
struct TwoSiteToy {
    TransformerLM<double> model;
    std::string site_a, site_b;
    std::size_t idx_a = 0, idx_b = 0;
    double sigma_a = 0, sigma_b = 0;
};

inline TwoSiteToy make_two_site_toy(std::uint64_t seed = 6, double sigma_a = 3.0, double sigma_b = 3.0) {
    ModelConfig mc;
    mc.n_blocks = 1;
    mc.d_model = 4;
    mc.d_ff = 6;
    mc.n_heads = 2;
    mc.vocab_size = 7;
    mc.max_len = 16;
    TwoSiteToy toy{TransformerLM<double>(mc, seed), names::block(1, "ff.w1"), names::block(1, "ff.w2"), 1, 2,
                   sigma_a, sigma_b};
    BayesConfig bc;
    bc.sites.insert({1, SiteKind::FF});
    promote(toy.model, bc);
    for (auto& [name, site] : toy.model.sites()) site.log_sigma.value.fill(-40.0);
    toy.model.sites().at(toy.site_a).log_sigma.value[toy.idx_a] = std::log(sigma_a);
    toy.model.sites().at(toy.site_b).log_sigma.value[toy.idx_b] = std::log(sigma_b);
    return toy;
}

// Per-word predictive probabilities integrated over the two noise scalars
// with the trapezoid rule on [-L, L]^2 against the standard normal density.
inline std::vector<double> quadrature_word_probs(const TwoSiteToy& toy, const std::vector<int>& sentence,
                                                 double h = 0.1, double L = 8.0) {
    const int n = static_cast<int>(std::lround(L / h));
    std::vector<double> nodes, weights;
    for (int i = -n; i <= n; ++i) {
        const double e = i * h;
        nodes.push_back(e);
        weights.push_back(h * std::exp(-0.5 * e * e) / std::sqrt(2 * M_PI));
    }
    std::vector<double> acc(sentence.size() - 1, 0.0);
    TransformerLM<double> m = toy.model;
    auto& wa = m.sites().at(toy.site_a).mu.value[toy.idx_a];
    auto& wb = m.sites().at(toy.site_b).mu.value[toy.idx_b];
    const double a0 = wa, b0 = wb;
    const std::vector<std::vector<int>> corpus{sentence};
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        for (std::size_t j = 0; j < nodes.size(); ++j) {
            wa = a0 + toy.sigma_a * nodes[i];
            wb = b0 + toy.sigma_b * nodes[j];
            const auto p = neural_word_probs(m, corpus, Predictive{}).front();
            for (std::size_t t = 0; t < p.size(); ++t) acc[t] += weights[i] * weights[j] * p[t];
        }
    }
    return acc;
}

}  // namespace btlm::testing
