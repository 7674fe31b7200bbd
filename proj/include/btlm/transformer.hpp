#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "btlm/autodiff.hpp"
#include "btlm/error.hpp"
#include "btlm/tensor.hpp"
#include "btlm/variational.hpp"

namespace btlm {

struct ModelConfig {
    std::size_t n_blocks = 6;
    std::size_t d_model = 512;
    std::size_t d_ff = 4096;
    std::size_t n_heads = 8;
    std::size_t vocab_size = 0;
    std::size_t max_len = 256;
    double dropout_rate = 0.0;
    bool tie_output = false;
    double ln_eps = 1e-5;

    void validate() const {
        auto positive = [](std::size_t v, const char* field) {
            if (v < 1) throw ConfigError(std::string("model.") + field + " must be >= 1");
        };
        positive(n_blocks, "n_blocks");
        positive(d_model, "d_model");
        positive(d_ff, "d_ff");
        positive(n_heads, "n_heads");
        positive(vocab_size, "vocab_size");
        positive(max_len, "max_len");
        if (d_model % n_heads != 0) {
            throw ConfigError("model.d_model (" + std::to_string(d_model) + ") must be divisible by model.n_heads (" +
                              std::to_string(n_heads) + ")");
        }
        if (d_model < 2) throw ConfigError("model.d_model must be >= 2 for layer normalization");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("model.dropout_rate must be in [0, 1)");
        if (!(ln_eps >= 0.0)) throw ConfigError("model.ln_eps must be non-negative");
    }

    bool same_architecture(const ModelConfig& o) const {
        return n_blocks == o.n_blocks && d_model == o.d_model && d_ff == o.d_ff && n_heads == o.n_heads &&
               vocab_size == o.vocab_size && tie_output == o.tie_output;
    }
};

// Fixed sinusoidal encoding: even dims sin(pos / 10000^(i/d)), odd dims the
// matching cosine.
template <class T>
std::vector<T> positional_encoding(std::size_t pos, std::size_t d_model) {
    std::vector<T> pe(d_model);
    for (std::size_t i = 0; i < d_model; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d_model));
        pe[i] = static_cast<T>(std::sin(static_cast<double>(pos) * freq));
        if (i + 1 < d_model) pe[i + 1] = static_cast<T>(std::cos(static_cast<double>(pos) * freq));
    }
    return pe;
}

// Inverted dropout: keeps each element with probability 1 - rate and scales
// survivors by 1 / (1 - rate). Identity outside training.
template <class T>
Var<T> apply_dropout(Var<T> x, double rate, Rng* rng, bool training) {
    if (!training || rate <= 0.0) return x;
    if (rng == nullptr) throw ContractError("dropout in training mode needs an rng");
    std::bernoulli_distribution keep(1.0 - rate);
    Tensor<T> mask(x.value().shape());
    const T s = T(1) / T(1.0 - rate);
    for (auto& m : mask.span()) m = keep(*rng) ? s : T(0);
    return mul_const(x, std::move(mask));
}

// Sentences packed back to back: inputs are tokens[0..n-2] and targets
// tokens[1..n-1] of each sentence, so row r of the logits scores targets[r].
struct PackedBatch {
    std::vector<int> inputs;
    std::vector<int> targets;
    std::vector<Segment> segments;
    std::size_t sentences = 0;

    std::size_t predicted_tokens() const { return targets.size(); }
};

inline PackedBatch pack_sentences(const std::vector<const std::vector<int>*>& sentences) {
    PackedBatch b;
    for (const auto* s : sentences) {
        if (s->size() < 2) throw InputError("a sentence needs at least a start and an end marker");
        const std::size_t n = s->size() - 1;
        b.segments.push_back({b.inputs.size(), n});
        b.inputs.insert(b.inputs.end(), s->begin(), s->end() - 1);
        b.targets.insert(b.targets.end(), s->begin() + 1, s->end());
        ++b.sentences;
    }
    return b;
}

inline PackedBatch pack_sentences(const std::vector<std::vector<int>>& sentences) {
    std::vector<const std::vector<int>*> ptrs;
    for (const auto& s : sentences) ptrs.push_back(&s);
    return pack_sentences(ptrs);
}

enum class WeightMode { Mean, Sample };

template <class T>
struct ForwardContext {
    WeightMode weights = WeightMode::Mean;
    SiteNoise<T>* noise = nullptr;
    Rng* rng = nullptr;
    bool training = false;
};

// Cached keys and values of one block for the positions consumed so far.
template <class T>
struct BlockState {
    std::vector<std::vector<T>> keys;
    std::vector<std::vector<T>> values;

    std::size_t length() const { return keys.size(); }
};

template <class T>
struct DecoderState {
    std::vector<BlockState<T>> blocks;
    std::size_t position = 0;
};

// Read-only view of one block's weights as used at inference time.
template <class T>
struct DecoderBlock {
    const Tensor<T>* q;
    const Tensor<T>* k;
    const Tensor<T>* v;
    const Tensor<T>* o;
    const Tensor<T>* ln1_g;
    const Tensor<T>* ln1_b;
    const Tensor<T>* w1;
    const Tensor<T>* b1;
    const Tensor<T>* w2;
    const Tensor<T>* b2;
    const Tensor<T>* ln2_g;
    const Tensor<T>* ln2_b;
    std::size_t n_heads;
    T ln_eps;
};

// One position of the attention sub-layer: projects x_t, appends (k_t, v_t)
// to the cache, attends over the cache, then residual and layer norm.
template <class T>
std::vector<T> self_attention_step(std::span<const T> x, const DecoderBlock<T>& blk, BlockState<T>& state,
                                   std::size_t t) {
    if (state.length() != t) {
        throw ContractError("self_attention_step: cache holds " + std::to_string(state.length()) +
                            " positions but step is for position " + std::to_string(t));
    }
    const std::size_t d = x.size();
    const std::size_t hd = d / blk.n_heads;
    std::vector<T> q(d), k(d), v(d);
    kernels::vecmat(x, *blk.q, std::span<T>(q));
    kernels::vecmat(x, *blk.k, std::span<T>(k));
    kernels::vecmat(x, *blk.v, std::span<T>(v));
    state.keys.push_back(std::move(k));
    state.values.push_back(std::move(v));
    const std::size_t len = state.length();
    std::vector<T> att(d, T(0));
    std::vector<T> s(len);
    const T inv_sqrt = T(1) / std::sqrt(T(hd));
    for (std::size_t h = 0; h < blk.n_heads; ++h) {
        const std::size_t off = h * hd;
        for (std::size_t j = 0; j < len; ++j) {
            T dot = 0;
            for (std::size_t c = 0; c < hd; ++c) dot += q[off + c] * state.keys[j][off + c];
            s[j] = dot * inv_sqrt;
        }
        kernels::softmax_inplace(std::span<T>(s));
        for (std::size_t j = 0; j < len; ++j)
            for (std::size_t c = 0; c < hd; ++c) att[off + c] += s[j] * state.values[j][off + c];
    }
    std::vector<T> y(d);
    kernels::vecmat(std::span<const T>(att), *blk.o, std::span<T>(y));
    for (std::size_t i = 0; i < d; ++i) y[i] += x[i];
    std::vector<T> z(d);
    kernels::layer_norm_row(std::span<const T>(y), blk.ln1_g->span(), blk.ln1_b->span(), blk.ln_eps, std::span<T>(z));
    return z;
}

template <class T>
std::vector<T> feed_forward(std::span<const T> z, const DecoderBlock<T>& blk) {
    const std::size_t d = z.size();
    std::vector<T> hidden(blk.w1->cols());
    kernels::vecmat(z, *blk.w1, std::span<T>(hidden));
    for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] = kernels::gelu(hidden[i] + (*blk.b1)[i]);
    std::vector<T> s(d);
    kernels::vecmat(std::span<const T>(hidden), *blk.w2, std::span<T>(s));
    for (std::size_t i = 0; i < d; ++i) s[i] += (*blk.b2)[i] + z[i];
    std::vector<T> x(d);
    kernels::layer_norm_row(std::span<const T>(s), blk.ln2_g->span(), blk.ln2_b->span(), blk.ln_eps, std::span<T>(x));
    return x;
}

namespace names {
inline std::string embed() { return "embed"; }
inline std::string out_w() { return "out.w"; }
inline std::string out_b() { return "out.b"; }
inline std::string block(std::size_t l, const char* leaf) { return "block" + std::to_string(l) + "." + leaf; }
}  // namespace names

// Transformer decoder LM. Weight matrices are stored [in x out] and applied
// to row vectors. Any weight may be replaced by a VariationalSite; the
// forward pass then uses its mean or a reparameterized sample.
template <class T = double>
class TransformerLM {
public:
    using Scalar = T;

    TransformerLM() = default;

    explicit TransformerLM(ModelConfig config, std::uint64_t seed = 1) : config_(std::move(config)) {
        config_.validate();
        Rng rng(seed);
        const std::size_t d = config_.d_model, f = config_.d_ff, V = config_.vocab_size;
        add_normal(names::embed(), {V, d}, T(1), rng);
        for (std::size_t l = 1; l <= config_.n_blocks; ++l) {
            for (const char* w : {"attn.q", "attn.k", "attn.v", "attn.o"}) add_uniform(names::block(l, w), {d, d}, d, rng);
            add_constant(names::block(l, "ln1.g"), {d}, T(1));
            add_constant(names::block(l, "ln1.b"), {d}, T(0));
            add_uniform(names::block(l, "ff.w1"), {d, f}, d, rng);
            add_uniform(names::block(l, "ff.b1"), {f}, d, rng);
            add_uniform(names::block(l, "ff.w2"), {f, d}, f, rng);
            add_uniform(names::block(l, "ff.b2"), {d}, f, rng);
            add_constant(names::block(l, "ln2.g"), {d}, T(1));
            add_constant(names::block(l, "ln2.b"), {d}, T(0));
        }
        if (!config_.tie_output) add_uniform(names::out_w(), {d, V}, d, rng);
        add_uniform(names::out_b(), {V}, d, rng);
    }

    const ModelConfig& config() const { return config_; }
    ModelConfig& mutable_config() { return config_; }

    std::map<std::string, Param<T>>& params() { return params_; }
    const std::map<std::string, Param<T>>& params() const { return params_; }
    std::map<std::string, VariationalSite<T>>& sites() { return sites_; }
    const std::map<std::string, VariationalSite<T>>& sites() const { return sites_; }
    BayesConfig& bayes() { return bayes_; }
    const BayesConfig& bayes() const { return bayes_; }

    bool is_site(const std::string& name) const { return sites_.count(name) != 0; }

    // Deterministic value or posterior mean of a named weight.
    const Tensor<T>& mean_weight(const std::string& name) const {
        if (auto it = sites_.find(name); it != sites_.end()) return it->second.mu.value;
        if (auto it = params_.find(name); it != params_.end()) return it->second.value;
        throw ContractError("unknown parameter '" + name + "'");
    }

    // Every weight name in the architecture, deterministic or not.
    std::vector<std::string> weight_names() const {
        std::vector<std::string> out;
        for (const auto& [n, p] : params_) out.push_back(n);
        for (const auto& [n, s] : sites_) out.push_back(n);
        std::sort(out.begin(), out.end());
        return out;
    }

    void for_each_trainable(const std::function<void(Param<T>&)>& fn) {
        for (auto& [n, p] : params_) fn(p);
        for (auto& [n, s] : sites_) {
            fn(s.mu);
            fn(s.log_sigma);
        }
    }

    void zero_grad() {
        for_each_trainable([](Param<T>& p) { p.zero_grad(); });
    }

    Var<T> weight(Tape<T>& tape, const std::string& name, ForwardContext<T>& ctx) {
        if (auto it = sites_.find(name); it != sites_.end()) {
            auto& site = it->second;
            if (ctx.weights == WeightMode::Mean) return tape.param(site.mu);
            if (ctx.noise == nullptr || ctx.rng == nullptr) {
                throw ContractError("sampling weights needs a noise record and an rng");
            }
            return sample_site(tape, site, ctx.noise->get(name, site.shape(), *ctx.rng));
        }
        if (auto it = params_.find(name); it != params_.end()) return tape.param(it->second);
        throw ContractError("unknown parameter '" + name + "'");
    }

    // Logits [tokens x vocab] for a packed batch; row r scores targets[r].
    Var<T> forward_batch(Tape<T>& tape, const PackedBatch& batch, ForwardContext<T>& ctx) {
        const std::size_t d = config_.d_model;
        for (const auto& seg : batch.segments) {
            if (seg.length > config_.max_len) {
                throw InputError("sequence of length " + std::to_string(seg.length) + " exceeds max_len " +
                                 std::to_string(config_.max_len));
            }
        }
        Var<T> emb = weight(tape, names::embed(), ctx);
        Var<T> x = gather_rows(emb, batch.inputs);
        Tensor<T> pe({batch.inputs.size(), d});
        for (const auto& seg : batch.segments) {
            for (std::size_t t = 0; t < seg.length; ++t) {
                const auto row = positional_encoding<T>(t, d);
                std::copy(row.begin(), row.end(), pe.data() + (seg.start + t) * d);
            }
        }
        x = btlm::add_const(x, pe);
        const T eps = static_cast<T>(config_.ln_eps);
        for (std::size_t l = 1; l <= config_.n_blocks; ++l) {
            auto w = [&](const char* leaf) { return weight(tape, names::block(l, leaf), ctx); };
            Var<T> q = matmul(x, w("attn.q"));
            Var<T> k = matmul(x, w("attn.k"));
            Var<T> v = matmul(x, w("attn.v"));
            Var<T> att = causal_attention(q, k, v, batch.segments, config_.n_heads);
            Var<T> proj = apply_dropout(matmul(att, w("attn.o")), config_.dropout_rate, ctx.rng, ctx.training);
            Var<T> z = layer_norm(add(proj, x), w("ln1.g"), w("ln1.b"), eps);
            Var<T> hidden = gelu(add_rowvec(matmul(z, w("ff.w1")), w("ff.b1")));
            hidden = apply_dropout(hidden, config_.dropout_rate, ctx.rng, ctx.training);
            Var<T> s = add(add_rowvec(matmul(hidden, w("ff.w2")), w("ff.b2")), z);
            x = layer_norm(s, w("ln2.g"), w("ln2.b"), eps);
        }
        Var<T> out_w = config_.tie_output ? transpose(emb) : weight(tape, names::out_w(), ctx);
        return add_rowvec(matmul(x, out_w), weight(tape, names::out_b(), ctx));
    }

    // Mean-weight logits for one token sequence, no gradient tracking.
    Tensor<T> forward(const std::vector<int>& tokens) const {
        if (tokens.empty()) throw InputError("forward: empty token sequence");
        if (tokens.size() > config_.max_len) {
            throw InputError("sequence of length " + std::to_string(tokens.size()) + " exceeds max_len " +
                             std::to_string(config_.max_len));
        }
        PackedBatch b;
        b.inputs = tokens;
        b.targets.assign(tokens.size(), -1);
        b.segments.push_back({0, tokens.size()});
        b.sentences = 1;
        Tape<T> tape(false);
        ForwardContext<T> ctx;
        return const_cast<TransformerLM*>(this)->forward_batch(tape, b, ctx).value();
    }

    DecoderBlock<T> block_view(std::size_t l) const {
        auto w = [&](const char* leaf) { return &mean_weight(names::block(l, leaf)); };
        return DecoderBlock<T>{w("attn.q"), w("attn.k"),  w("attn.v"), w("attn.o"), w("ln1.g"), w("ln1.b"),
                               w("ff.w1"),  w("ff.b1"),   w("ff.w2"),  w("ff.b2"),  w("ln2.g"), w("ln2.b"),
                               config_.n_heads, static_cast<T>(config_.ln_eps)};
    }

    DecoderState<T> start_state() const {
        DecoderState<T> s;
        s.blocks.resize(config_.n_blocks);
        return s;
    }

    // Incremental decoding with per-block key/value caches (mean weights).
    std::vector<T> step(int token, DecoderState<T>& state) const {
        const std::size_t d = config_.d_model;
        const auto& E = mean_weight(names::embed());
        if (token < 0 || static_cast<std::size_t>(token) >= config_.vocab_size) {
            throw InputError("token id " + std::to_string(token) + " at position " + std::to_string(state.position) +
                             " is outside the vocabulary");
        }
        if (state.position >= config_.max_len) throw InputError("decoder state exceeds max_len");
        std::vector<T> x(E.row(static_cast<std::size_t>(token)).begin(), E.row(static_cast<std::size_t>(token)).end());
        const auto pe = positional_encoding<T>(state.position, d);
        for (std::size_t i = 0; i < d; ++i) x[i] += pe[i];
        for (std::size_t l = 1; l <= config_.n_blocks; ++l) {
            const auto blk = block_view(l);
            auto z = self_attention_step(std::span<const T>(x), blk, state.blocks[l - 1], state.position);
            x = feed_forward(std::span<const T>(z), blk);
        }
        ++state.position;
        std::vector<T> logits(config_.vocab_size);
        if (config_.tie_output) {
            for (std::size_t v = 0; v < config_.vocab_size; ++v) {
                T s = 0;
                for (std::size_t i = 0; i < d; ++i) s += x[i] * E(v, i);
                logits[v] = s;
            }
        } else {
            kernels::vecmat(std::span<const T>(x), mean_weight(names::out_w()), std::span<T>(logits));
        }
        const auto& b = mean_weight(names::out_b());
        for (std::size_t v = 0; v < config_.vocab_size; ++v) logits[v] += b[v];
        return logits;
    }

private:
    void add_normal(const std::string& name, Shape shape, T stddev, Rng& rng) {
        std::normal_distribution<T> nd(T(0), stddev);
        Tensor<T> t(std::move(shape));
        for (auto& v : t.span()) v = nd(rng);
        params_.emplace(name, Param<T>(name, std::move(t)));
    }
    void add_uniform(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
        const T bound = T(1) / std::sqrt(T(fan_in));
        std::uniform_real_distribution<T> ud(-bound, bound);
        Tensor<T> t(std::move(shape));
        for (auto& v : t.span()) v = ud(rng);
        params_.emplace(name, Param<T>(name, std::move(t)));
    }
    void add_constant(const std::string& name, Shape shape, T value) {
        params_.emplace(name, Param<T>(name, Tensor<T>(std::move(shape), value)));
    }

    ModelConfig config_;
    std::map<std::string, Param<T>> params_;
    std::map<std::string, VariationalSite<T>> sites_;
    BayesConfig bayes_;
};

}  // namespace btlm
