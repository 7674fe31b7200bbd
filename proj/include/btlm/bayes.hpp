#pragma once

#include <string>
#include <vector>

#include "btlm/autodiff.hpp"
#include "btlm/error.hpp"
#include "btlm/transformer.hpp"
#include "btlm/variational.hpp"

namespace btlm {

// Weight matrices covered by one site selection. Biases and layer-norm
// parameters are never promoted.
inline std::vector<std::string> site_tensor_names(const SiteRef& s) {
    switch (s.kind) {
        case SiteKind::EMB: return {names::embed()};
        case SiteKind::FF:
            return {names::block(static_cast<std::size_t>(s.block), "ff.w1"),
                    names::block(static_cast<std::size_t>(s.block), "ff.w2")};
        case SiteKind::MHA: {
            std::vector<std::string> out;
            for (const char* leaf : {"attn.q", "attn.k", "attn.v", "attn.o"}) {
                out.push_back(names::block(static_cast<std::size_t>(s.block), leaf));
            }
            return out;
        }
    }
    return {};
}

// Places the selected weights under variational estimation. The prior mean of
// each site is the corresponding tensor of `prior` (a trained deterministic
// model), prior std is config.prior_sigma, and the posterior starts at the
// prior mean with log-std config.init_log_sigma.
template <class T>
void promote(TransformerLM<T>& model, const BayesConfig& config, const TransformerLM<T>& prior) {
    config.validate(model.config().n_blocks);
    if (!model.config().same_architecture(prior.config())) {
        throw ConfigError("prior checkpoint architecture does not match the model configuration");
    }
    std::vector<std::string> targets;
    for (const auto& s : config.sites) {
        for (auto& n : site_tensor_names(s)) targets.push_back(std::move(n));
    }
    for (const auto& name : targets) {
        if (model.is_site(name)) continue;
        auto it = model.params().find(name);
        if (it == model.params().end()) throw ConfigError("unknown site tensor '" + name + "'");
        const Tensor<T>& prior_w = prior.mean_weight(name);
        if (prior_w.shape() != it->second.value.shape()) {
            throw ConfigError("prior tensor '" + name + "' has shape " + shape_str(prior_w.shape()) + ", model has " +
                              shape_str(it->second.value.shape()));
        }
    }
    // Unselected weights keep the model's values; only site tensors move.
    for (const auto& name : targets) {
        if (model.is_site(name)) continue;
        model.sites().emplace(name, VariationalSite<T>(name, prior.mean_weight(name), static_cast<T>(config.prior_sigma),
                                                       static_cast<T>(config.init_log_sigma)));
        model.params().erase(name);
    }
    auto& b = model.bayes();
    b.sites.insert(config.sites.begin(), config.sites.end());
    b.k_train = config.k_train;
    b.eval_mode = config.eval_mode;
    b.k_eval = config.k_eval;
    b.init_log_sigma = config.init_log_sigma;
    b.prior_sigma = config.prior_sigma;
}

// Promotion using the model's own current weights as the prior.
template <class T>
void promote(TransformerLM<T>& model, const BayesConfig& config) {
    const TransformerLM<T> prior = model;
    promote(model, config, prior);
}

template <class T>
T kl_total(const TransformerLM<T>& model) {
    T kl = 0;
    for (const auto& [name, site] : model.sites()) kl += kl_site(site);
    return kl;
}

template <class T>
Var<T> kl_total(Tape<T>& tape, TransformerLM<T>& model) {
    Var<T> total = tape.constant(Tensor<T>::scalar(T(0)));
    for (auto& [name, site] : model.sites()) total = add(total, kl_site(tape, site));
    return total;
}

// Deterministic model whose weights are the posterior means.
template <class T>
TransformerLM<T> materialize_mean(const TransformerLM<T>& model) {
    TransformerLM<T> out = model;
    for (const auto& [name, site] : model.sites()) {
        out.params().emplace(name, Param<T>(name, site.mu.value));
    }
    out.sites().clear();
    out.bayes().sites.clear();
    return out;
}

// Resets every site prior to N(reference weight, prior_sigma^2).
template <class T>
void set_prior_means(TransformerLM<T>& model, const TransformerLM<T>& reference, T prior_sigma = T(1)) {
    if (!model.config().same_architecture(reference.config())) {
        throw ConfigError("reference checkpoint architecture does not match the model");
    }
    for (auto& [name, site] : model.sites()) {
        const auto& ref = reference.mean_weight(name);
        if (ref.shape() != site.shape()) throw ConfigError("reference tensor '" + name + "' has the wrong shape");
        site.prior_mu = ref;
        site.prior_sigma = Tensor<T>(site.shape(), prior_sigma);
    }
    model.bayes().prior_sigma = static_cast<double>(prior_sigma);
}

}  // namespace btlm
