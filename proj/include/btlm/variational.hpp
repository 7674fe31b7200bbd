#pragma once

#include <cmath>
#include <compare>
#include <cstddef>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "btlm/autodiff.hpp"
#include "btlm/error.hpp"
#include "btlm/tensor.hpp"

namespace btlm {

using Rng = std::mt19937_64;

enum class SiteKind { FF, MHA, EMB };

inline std::string to_string(SiteKind k) {
    switch (k) {
        case SiteKind::FF: return "FF";
        case SiteKind::MHA: return "MHA";
        case SiteKind::EMB: return "EMB";
    }
    return "?";
}

inline SiteKind site_kind_from_string(const std::string& s) {
    if (s == "FF" || s == "ff") return SiteKind::FF;
    if (s == "MHA" || s == "mha") return SiteKind::MHA;
    if (s == "EMB" || s == "emb") return SiteKind::EMB;
    throw ConfigError("unknown site kind '" + s + "' (expected FF, MHA or EMB)");
}

// One (block, kind) selection. EMB refers to the embedding layer and carries
// block 0; FF and MHA carry a 1-based block index.
struct SiteRef {
    int block = 0;
    SiteKind kind = SiteKind::FF;

    auto operator<=>(const SiteRef&) const = default;
};

inline std::string to_string(const SiteRef& s) {
    return s.kind == SiteKind::EMB ? std::string("EMB") : std::to_string(s.block) + ":" + to_string(s.kind);
}

// Parses "EMB", "1:FF", "1-3:FF" or comma-separated lists of those.
inline std::vector<SiteRef> parse_sites(const std::string& spec) {
    std::vector<SiteRef> out;
    std::size_t pos = 0;
    while (pos <= spec.size()) {
        auto comma = spec.find(',', pos);
        if (comma == std::string::npos) comma = spec.size();
        const std::string item = spec.substr(pos, comma - pos);
        pos = comma + 1;
        if (item.empty()) {
            if (comma == spec.size()) break;
            continue;
        }
        if (item == "EMB" || item == "emb") {
            out.push_back({0, SiteKind::EMB});
            continue;
        }
        const auto colon = item.find(':');
        if (colon == std::string::npos) {
            throw ConfigError("site '" + item + "' must look like <block>:<FF|MHA>, <lo>-<hi>:<kind> or EMB");
        }
        const std::string blocks = item.substr(0, colon);
        const SiteKind kind = site_kind_from_string(item.substr(colon + 1));
        int lo = 0, hi = 0;
        try {
            const auto dash = blocks.find('-');
            lo = std::stoi(blocks.substr(0, dash));
            hi = dash == std::string::npos ? lo : std::stoi(blocks.substr(dash + 1));
        } catch (const std::exception&) {
            throw ConfigError("site '" + item + "' has a malformed block range");
        }
        if (hi < lo) {
            throw ConfigError("site '" + item + "' has an empty block range");
        }
        for (int b = lo; b <= hi; ++b) out.push_back({b, kind});
        if (comma == spec.size()) break;
    }
    return out;
}

enum class EvalMode { Mean, MonteCarlo };

struct BayesConfig {
    std::set<SiteRef> sites;
    std::size_t k_train = 1;
    EvalMode eval_mode = EvalMode::Mean;
    std::size_t k_eval = 1;
    double init_log_sigma = -3.0;
    double prior_sigma = 1.0;

    void validate(std::size_t n_blocks) const {
        for (const auto& s : sites) {
            if (s.kind == SiteKind::EMB && s.block != 0) {
                throw ConfigError("EMB sites belong to the embedding layer and take no block index");
            }
            if (s.kind != SiteKind::EMB && (s.block < 1 || static_cast<std::size_t>(s.block) > n_blocks)) {
                throw ConfigError("site " + to_string(s) + " names a block outside 1.." + std::to_string(n_blocks));
            }
        }
        if (k_train < 1) throw ConfigError("k_train must be >= 1");
        if (eval_mode == EvalMode::MonteCarlo && k_eval < 1) throw ConfigError("mc evaluation needs k_eval >= 1");
        if (!(prior_sigma > 0)) throw ConfigError("prior_sigma must be positive");
    }
};

// Diagonal Gaussian posterior over one weight matrix together with its prior.
template <class T>
struct VariationalSite {
    Param<T> mu;
    Param<T> log_sigma;
    Tensor<T> prior_mu;
    Tensor<T> prior_sigma;

    VariationalSite() = default;
    VariationalSite(const std::string& name, const Tensor<T>& prior_mean, T prior_std, T init_log_sigma)
        : mu(name + ".mu", prior_mean),
          log_sigma(name + ".log_sigma", Tensor<T>(prior_mean.shape(), init_log_sigma)),
          prior_mu(prior_mean),
          prior_sigma(prior_mean.shape(), prior_std) {}

    const Shape& shape() const { return mu.value.shape(); }

    void check_invariants() const {
        if (log_sigma.value.shape() != shape() || prior_mu.shape() != shape() || prior_sigma.shape() != shape()) {
            throw ContractError("variational site " + mu.name + " has inconsistent shapes");
        }
        for (auto s : prior_sigma.span()) {
            if (!(s > T(0))) throw ContractError("variational site " + mu.name + " has non-positive prior sigma");
        }
    }
};

template <class T>
Tensor<T> draw_standard_normal(const Shape& shape, Rng& rng) {
    std::normal_distribution<T> nd(T(0), T(1));
    Tensor<T> eps(shape);
    for (auto& v : eps.span()) v = nd(rng);
    return eps;
}

// mu + sigma * eps, without gradient tracking.
template <class T>
Tensor<T> sample_site(const VariationalSite<T>& site, const Tensor<T>& eps) {
    Tensor<T> out = site.mu.value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += std::exp(site.log_sigma.value[i]) * eps[i];
    return out;
}

template <class T>
Tensor<T> sample_site(const VariationalSite<T>& site, Rng& rng) {
    return sample_site(site, draw_standard_normal<T>(site.shape(), rng));
}

// Differentiable draw; gradients reach mu (coefficient 1) and log_sigma
// (coefficient sigma * eps).
template <class T>
Var<T> sample_site(Tape<T>& tape, VariationalSite<T>& site, const Tensor<T>& eps) {
    return reparameterize(tape.param(site.mu), tape.param(site.log_sigma), eps);
}

template <class T>
T kl_site(const VariationalSite<T>& site) {
    T kl = 0;
    for (std::size_t i = 0; i < site.mu.value.size(); ++i) {
        kl += gaussian_kl_term(site.mu.value[i], site.log_sigma.value[i], site.prior_mu[i], site.prior_sigma[i]);
    }
    return kl;
}

template <class T>
Var<T> kl_site(Tape<T>& tape, VariationalSite<T>& site) {
    return gaussian_kl(tape.param(site.mu), tape.param(site.log_sigma), site.prior_mu, site.prior_sigma);
}

// Noise draws for one parameter sample Theta_k. Missing entries are drawn on
// first request, so replaying the same object reproduces the same weights.
template <class T>
struct SiteNoise {
    std::map<std::string, Tensor<T>> eps;

    const Tensor<T>& get(const std::string& name, const Shape& shape, Rng& rng) {
        auto it = eps.find(name);
        if (it == eps.end()) {
            it = eps.emplace(name, draw_standard_normal<T>(shape, rng)).first;
        }
        return it->second;
    }
};

}  // namespace btlm
