#pragma once

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "btlm/error.hpp"
#include "btlm/transformer.hpp"
#include "btlm/variational.hpp"

namespace btlm {

// Rejects keys outside `allowed` so that a typo in a config file names the
// offending field instead of being silently ignored.
inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& section) {
    if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
    for (const auto& [k, v] : j.items()) {
        if (!allowed.count(k)) throw ConfigError("unknown field '" + section + "." + k + "'");
    }
}

// Reads j[key] into out when present; a type mismatch names the field.
template <class V>
void read_field(const nlohmann::json& j, const char* key, V& out, const std::string& section) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("field '" + section + "." + key + "' has the wrong type (got " +
                          std::string(j.at(key).type_name()) + ")");
    }
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"n_blocks", c.n_blocks},         {"d_model", c.d_model}, {"d_ff", c.d_ff},
                       {"n_heads", c.n_heads},           {"vocab_size", c.vocab_size},
                       {"max_len", c.max_len},           {"dropout_rate", c.dropout_rate},
                       {"tie_output", c.tie_output},     {"ln_eps", c.ln_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    const std::string s = "model";
    check_keys(j, {"n_blocks", "d_model", "d_ff", "n_heads", "vocab_size", "max_len", "dropout_rate", "tie_output", "ln_eps"},
               s);
    read_field(j, "n_blocks", c.n_blocks, s);
    read_field(j, "d_model", c.d_model, s);
    read_field(j, "d_ff", c.d_ff, s);
    read_field(j, "n_heads", c.n_heads, s);
    read_field(j, "vocab_size", c.vocab_size, s);
    read_field(j, "max_len", c.max_len, s);
    read_field(j, "dropout_rate", c.dropout_rate, s);
    read_field(j, "tie_output", c.tie_output, s);
    read_field(j, "ln_eps", c.ln_eps, s);
}

inline std::string eval_mode_string(EvalMode m) { return m == EvalMode::Mean ? "mean" : "mc"; }

inline EvalMode eval_mode_from_string(const std::string& s) {
    if (s == "mean") return EvalMode::Mean;
    if (s == "mc") return EvalMode::MonteCarlo;
    throw ConfigError("eval mode must be 'mean' or 'mc', got '" + s + "'");
}

inline std::string sites_string(const std::set<SiteRef>& sites) {
    std::string out;
    for (const auto& s : sites) out += (out.empty() ? "" : ",") + to_string(s);
    return out;
}

inline void to_json(nlohmann::json& j, const BayesConfig& c) {
    std::vector<std::string> sites;
    for (const auto& s : c.sites) sites.push_back(to_string(s));
    j = nlohmann::json{{"sites", sites},
                       {"k_train", c.k_train},
                       {"eval_mode", eval_mode_string(c.eval_mode)},
                       {"k_eval", c.k_eval},
                       {"init_log_sigma", c.init_log_sigma},
                       {"prior_sigma", c.prior_sigma}};
}

inline void from_json(const nlohmann::json& j, BayesConfig& c) {
    const std::string s = "bayes";
    check_keys(j, {"sites", "k_train", "eval_mode", "k_eval", "init_log_sigma", "prior_sigma"}, s);
    if (j.contains("sites")) {
        c.sites.clear();
        const auto& v = j.at("sites");
        std::vector<std::string> items;
        if (v.is_string()) items.push_back(v.get<std::string>());
        else read_field(j, "sites", items, s);
        for (const auto& item : items)
            for (const auto& r : parse_sites(item)) c.sites.insert(r);
    }
    read_field(j, "k_train", c.k_train, s);
    std::string mode = eval_mode_string(c.eval_mode);
    read_field(j, "eval_mode", mode, s);
    c.eval_mode = eval_mode_from_string(mode);
    read_field(j, "k_eval", c.k_eval, s);
    read_field(j, "init_log_sigma", c.init_log_sigma, s);
    read_field(j, "prior_sigma", c.prior_sigma, s);
}

}  // namespace btlm
