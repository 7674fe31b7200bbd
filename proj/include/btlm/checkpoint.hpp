#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "btlm/config.hpp"
#include "btlm/error.hpp"
#include "btlm/tensor.hpp"
#include "btlm/transformer.hpp"

namespace btlm {

// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read '" + path + "'");
    return std::string(std::istreambuf_iterator<char>(is), {});
}

inline std::string file_checksum(const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    return hex64(fnv1a(bytes.data(), bytes.size()));
}

// Layout: "BTLMCKPT", u32 version, u64 header length, JSON header, raw
// little-endian tensor payload in header order, u64 FNV-1a of all preceding
// bytes. Site tensors are stored as <name>.mu, .log_sigma, .prior_mu and
// .prior_sigma.
inline constexpr char kCheckpointMagic[8] = {'B', 'T', 'L', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<T, double>) return "f64";
    else if constexpr (std::is_same_v<T, float>) return "f32";
    else static_assert(sizeof(T) == 0, "unsupported checkpoint scalar");
}

// Every stored tensor keyed by its checkpoint name.
template <class T>
std::map<std::string, const Tensor<T>*> checkpoint_tensors(const TransformerLM<T>& model) {
    std::map<std::string, const Tensor<T>*> out;
    for (const auto& [n, p] : model.params()) out.emplace(n, &p.value);
    for (const auto& [n, s] : model.sites()) {
        out.emplace(n + ".mu", &s.mu.value);
        out.emplace(n + ".log_sigma", &s.log_sigma.value);
        out.emplace(n + ".prior_mu", &s.prior_mu);
        out.emplace(n + ".prior_sigma", &s.prior_sigma);
    }
    return out;
}

template <class T>
std::string serialize_checkpoint(const TransformerLM<T>& model, const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json header;
    header["dtype"] = dtype_name<T>();
    header["model"] = model.config();
    header["bayes"] = model.bayes();
    header["meta"] = meta;
    std::vector<std::string> site_names;
    for (const auto& [n, s] : model.sites()) site_names.push_back(n);
    header["sites"] = site_names;
    std::string payload;
    nlohmann::json index = nlohmann::json::array();
    for (const auto& [name, t] : checkpoint_tensors(model)) {
        index.push_back({{"name", name}, {"shape", t->shape()}, {"offset", payload.size()}});
        payload.append(reinterpret_cast<const char*>(t->data()), t->size() * sizeof(T));
    }
    header["tensors"] = index;
    const std::string h = header.dump();
    std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t hlen = h.size();
    out.append(reinterpret_cast<const char*>(&version), sizeof version);
    out.append(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    out += h;
    out += payload;
    const std::uint64_t sum = fnv1a(out.data(), out.size());
    out.append(reinterpret_cast<const char*>(&sum), sizeof sum);
    return out;
}

template <class T>
void save_checkpoint(const TransformerLM<T>& model, const std::string& path,
                     const nlohmann::json& meta = nlohmann::json::object()) {
    const std::string bytes = serialize_checkpoint(model, meta);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint '" + path + "'");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("failed writing checkpoint '" + path + "'");
}

namespace detail {

template <class T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <class T>
TransformerLM<T> deserialize_checkpoint_unchecked(const std::string& bytes, const std::string& what,
                                                  nlohmann::json* meta) {
    constexpr std::size_t fixed = sizeof kCheckpointMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t);
    if (bytes.size() < fixed + sizeof(std::uint64_t) || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
        throw InputError(what + ": not a checkpoint file");
    }
    std::uint64_t stored = 0;
    std::memcpy(&stored, bytes.data() + bytes.size() - sizeof stored, sizeof stored);
    if (fnv1a(bytes.data(), bytes.size() - sizeof stored) != stored) throw InputError(what + ": checksum mismatch");
    std::uint32_t version = 0;
    std::uint64_t hlen = 0;
    std::memcpy(&version, bytes.data() + 8, sizeof version);
    std::memcpy(&hlen, bytes.data() + 12, sizeof hlen);
    if (version != kCheckpointVersion) {
        throw InputError(what + ": unsupported version " + std::to_string(version));
    }
    if (hlen > bytes.size() - fixed - sizeof stored) throw InputError(what + ": truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(fixed, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw InputError(what + ": bad header: " + e.what());
    }
    if (header.at("dtype") != dtype_name<T>()) {
        throw InputError(what + ": stored as " + header.at("dtype").get<std::string>() + ", requested " +
                         dtype_name<T>());
    }
    const char* payload = bytes.data() + fixed + hlen;
    const std::size_t payload_size = bytes.size() - fixed - hlen - sizeof stored;
    std::map<std::string, Tensor<T>> tensors;
    for (const auto& e : header.at("tensors")) {
        const Shape shape = e.at("shape").get<Shape>();
        const std::size_t off = e.at("offset"), n = shape_numel(shape);
        if (off + n * sizeof(T) > payload_size) throw InputError(what + ": tensor payload out of range");
        Tensor<T> t(shape);
        std::memcpy(t.data(), payload + off, n * sizeof(T));
        tensors.emplace(e.at("name").get<std::string>(), std::move(t));
    }
    ModelConfig mc = header.at("model").get<ModelConfig>();
    BayesConfig bc = header.at("bayes").get<BayesConfig>();
    TransformerLM<T> model(mc, 0);
    model.bayes() = bc;
    auto take = [&](const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw InputError(what + ": missing tensor '" + name + "'");
        Tensor<T> t = std::move(it->second);
        tensors.erase(it);
        return t;
    };
    for (const auto& name : header.at("sites").get<std::vector<std::string>>()) {
        auto it = model.params().find(name);
        if (it == model.params().end()) throw InputError(what + ": unknown site '" + name + "'");
        VariationalSite<T> site;
        site.mu = Param<T>(name + ".mu", take(name + ".mu"));
        site.log_sigma = Param<T>(name + ".log_sigma", take(name + ".log_sigma"));
        site.prior_mu = take(name + ".prior_mu");
        site.prior_sigma = take(name + ".prior_sigma");
        if (site.shape() != it->second.value.shape()) throw InputError(what + ": site '" + name + "' has the wrong shape");
        site.check_invariants();
        model.params().erase(it);
        model.sites().emplace(name, std::move(site));
    }
    for (auto& [name, p] : model.params()) {
        Tensor<T> t = take(name);
        if (t.shape() != p.value.shape()) {
            throw InputError(what + ": tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                             shape_str(p.value.shape()));
        }
        p.value = std::move(t);
        p.zero_grad();
    }
    if (!tensors.empty()) throw InputError(what + ": unexpected tensor '" + tensors.begin()->first + "'");
    if (meta) *meta = header.value("meta", nlohmann::json::object());
    return model;
}

}  // namespace detail

template <class T>
TransformerLM<T> deserialize_checkpoint(const std::string& bytes, const std::string& what = "checkpoint",
                                        nlohmann::json* meta = nullptr) {
    try {
        return detail::deserialize_checkpoint_unchecked<T>(bytes, what, meta);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(what + ": malformed header: " + e.what());
    } catch (const ConfigError& e) {
        throw InputError(what + ": " + e.what());
    }
}

template <class T>
TransformerLM<T> load_checkpoint(const std::string& path, nlohmann::json* meta = nullptr) {
    return deserialize_checkpoint<T>(read_file_bytes(path), "checkpoint '" + path + "'", meta);
}

// Names of stored tensors that were added, removed or changed (bitwise)
// between two checkpoints.
template <class T>
std::set<std::string> checkpoint_diff(const TransformerLM<T>& a, const TransformerLM<T>& b) {
    const auto ta = checkpoint_tensors(a), tb = checkpoint_tensors(b);
    std::set<std::string> out;
    for (const auto& [n, t] : ta) {
        auto it = tb.find(n);
        if (it == tb.end() || !detail::bitwise_equal(*t, *it->second)) out.insert(n);
    }
    for (const auto& [n, t] : tb)
        if (!ta.count(n)) out.insert(n);
    return out;
}

}  // namespace btlm
