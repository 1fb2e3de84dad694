#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <random>

#include "vitkit/ops.hpp"

namespace vita {

using Rng = std::mt19937_64;

template <class S>
void fill_uniform(Tensor<S>& t, Rng& rng, S lo, S hi) {
    std::uniform_real_distribution<double> d(static_cast<double>(lo), static_cast<double>(hi));
    for (S& v : t.data()) v = static_cast<S>(d(rng));
}

template <class S>
void fill_xavier(Tensor<S>& t, Rng& rng, i64 fan_in, i64 fan_out) {
    const S a = static_cast<S>(std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
    fill_uniform(t, rng, -a, a);
}

/// Named parameters plus AdamW moments. Iteration order is creation order so
/// checkpoints and updates are reproducible.
template <class S>
class ParameterStore {
public:
    Tensor<S>& create(const std::string& name, Shape shape) {
        if (params_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
        order_.push_back(name);
        auto [it, ok] = params_.emplace(name, Tensor<S>::zeros(std::move(shape)));
        it->second.set_requires_grad(true);
        return it->second;
    }
    Tensor<S>& at(const std::string& name) { return params_.at(name); }
    const Tensor<S>& at(const std::string& name) const { return params_.at(name); }
    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    const std::vector<std::string>& names() const { return order_; }
    i64 total_size() const {
        i64 n = 0;
        for (const auto& nm : order_) n += params_.at(nm).size();
        return n;
    }

    struct Moments {
        std::vector<S> m, v;
    };
    std::map<std::string, Moments>& opt_state() { return opt_; }
    i64& step_count() { return step_; }
    i64 step_count() const { return step_; }

private:
    std::vector<std::string> order_;
    std::map<std::string, Tensor<S>> params_;
    std::map<std::string, Moments> opt_;
    i64 step_ = 0;
};

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

/// One decoupled-weight-decay Adam step. Parameters with requires_grad off
/// (e.g. a frozen detector) are skipped; a trainable parameter missing its
/// gradient is an error.
template <class S>
void adamw_step(ParameterStore<S>& store, Grads<S>& grads, const AdamWConfig& cfg) {
    store.step_count() += 1;
    const double t = static_cast<double>(store.step_count());
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (const auto& name : store.names()) {
        Tensor<S>& p = store.at(name);
        if (!p.requires_grad()) continue;
        if (!grads.has(p.node())) throw std::runtime_error("adamw_step: missing gradient for parameter " + name);
        const auto& g = grads.at(p.node());
        auto& mom = store.opt_state()[name];
        if (mom.m.empty()) {
            mom.m.assign(g.size(), S(0));
            mom.v.assign(g.size(), S(0));
        }
        for (std::size_t i = 0; i < g.size(); ++i) {
            double gi = static_cast<double>(g[i]);
            double m = cfg.beta1 * static_cast<double>(mom.m[i]) + (1.0 - cfg.beta1) * gi;
            double v = cfg.beta2 * static_cast<double>(mom.v[i]) + (1.0 - cfg.beta2) * gi * gi;
            mom.m[i] = static_cast<S>(m);
            mom.v[i] = static_cast<S>(v);
            double mhat = m / bc1;
            double vhat = v / bc2;
            double x = static_cast<double>(p.data()[i]);
            x -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * x);
            p.data()[i] = static_cast<S>(x);
        }
    }
}

// ---- checkpoint file: "VITK" magic, u32 version, repeated records ----

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw std::runtime_error("checkpoint: truncated (u32)");
    return v;
}
inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) throw std::runtime_error("checkpoint: truncated (u64)");
    return v;
}

inline void write_record(std::ostream& os, const std::string& name, const Shape& shape, const float* data, i64 n) {
    write_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(os, shape.size());
    for (i64 d : shape) write_u64(os, static_cast<std::uint64_t>(d));
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n) * 4);
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class S>
void save_checkpoint(const ParameterStore<S>& store, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    os.write("VITK", 4);
    detail::write_u32(os, kCheckpointVersion);
    auto write_tensor = [&](const std::string& name, const Shape& shape, const std::vector<S>& data) {
        std::vector<float> f(data.begin(), data.end());
        detail::write_record(os, name, shape, f.data(), static_cast<i64>(f.size()));
    };
    for (const auto& name : store.names()) {
        const auto& p = store.at(name);
        write_tensor(name, p.shape(), p.data());
    }
    // Optimizer state lives under the reserved "opt/" prefix.
    {
        std::vector<S> step{static_cast<S>(const_cast<ParameterStore<S>&>(store).step_count())};
        write_tensor("opt/step", Shape{1}, step);
    }
    for (const auto& [name, mom] : const_cast<ParameterStore<S>&>(store).opt_state()) {
        write_tensor("opt/m/" + name, Shape{static_cast<i64>(mom.m.size())}, mom.m);
        write_tensor("opt/v/" + name, Shape{static_cast<i64>(mom.v.size())}, mom.v);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

/// Loads parameter values and optimizer state into an already-built store;
/// every on-disk parameter must exist with a matching shape.
template <class S>
void load_checkpoint(ParameterStore<S>& store, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "VITK", 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const std::uint32_t ver = detail::read_u32(is);
    if (ver != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(ver));
    while (is.peek() != EOF) {
        const std::uint64_t nlen = detail::read_u64(is);
        std::string name(nlen, '\0');
        if (!is.read(name.data(), static_cast<std::streamsize>(nlen))) throw std::runtime_error("checkpoint: truncated name");
        const std::uint64_t rank = detail::read_u64(is);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<i64>(detail::read_u64(is));
        std::vector<float> data(static_cast<std::size_t>(numel(shape)));
        if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()) * 4))
            throw std::runtime_error("checkpoint: truncated data for " + name);
        if (name == "opt/step") {
            store.step_count() = static_cast<i64>(data.at(0));
        } else if (name.rfind("opt/m/", 0) == 0) {
            auto& mom = store.opt_state()[name.substr(6)];
            mom.m.assign(data.begin(), data.end());
        } else if (name.rfind("opt/v/", 0) == 0) {
            auto& mom = store.opt_state()[name.substr(6)];
            mom.v.assign(data.begin(), data.end());
        } else {
            if (!store.contains(name)) throw std::runtime_error("checkpoint: unknown parameter " + name);
            Tensor<S>& p = store.at(name);
            if (p.shape() != shape)
                throw std::runtime_error("checkpoint: shape mismatch for " + name + ": file " + shape_str(shape) +
                                         " vs model " + shape_str(p.shape()));
            for (std::size_t i = 0; i < data.size(); ++i) p.data()[i] = static_cast<S>(data[i]);
        }
    }
}

// ---- small trainable building blocks ----

template <class S>
struct LinearLayer {
    Tensor<S> w, b;
    void init(ParameterStore<S>& ps, const std::string& name, i64 in, i64 out, Rng& rng) {
        w = ps.create(name + "/w", {in, out});
        b = ps.create(name + "/b", {out});
        fill_xavier(w, rng, in, out);
    }
    Tensor<S> forward(const Tensor<S>& x) const { return linear(x, w, b); }
};

template <class S>
struct LayerNormLayer {
    Tensor<S> gain, bias;
    void init(ParameterStore<S>& ps, const std::string& name, i64 c) {
        gain = ps.create(name + "/gain", {c});
        bias = ps.create(name + "/bias", {c});
        for (S& v : gain.data()) v = S(1);
    }
    Tensor<S> forward(const Tensor<S>& x) const { return layer_norm(x, gain, bias); }
};

template <class S>
struct FeedForward {
    LinearLayer<S> fc1, fc2;
    void init(ParameterStore<S>& ps, const std::string& name, i64 c, i64 hidden, Rng& rng) {
        fc1.init(ps, name + "/fc1", c, hidden, rng);
        fc2.init(ps, name + "/fc2", hidden, c, rng);
    }
    Tensor<S> forward(const Tensor<S>& x) const { return fc2.forward(relu(fc1.forward(x))); }
};

/// 3-layer MLP head (relu between hidden layers, linear output).
template <class S>
struct MlpHead {
    LinearLayer<S> fc1, fc2, fc3;
    void init(ParameterStore<S>& ps, const std::string& name, i64 in, i64 hidden, i64 out, Rng& rng) {
        fc1.init(ps, name + "/fc1", in, hidden, rng);
        fc2.init(ps, name + "/fc2", hidden, hidden, rng);
        fc3.init(ps, name + "/fc3", hidden, out, rng);
    }
    Tensor<S> forward(const Tensor<S>& x) const {
        return fc3.forward(relu(fc2.forward(relu(fc1.forward(x)))));
    }
};

/// Multi-head attention with learned projections.
template <class S>
struct AttentionLayer {
    LinearLayer<S> q, k, v, o;
    int heads = 8;
    void init(ParameterStore<S>& ps, const std::string& name, i64 c, int n_heads, Rng& rng) {
        heads = n_heads;
        q.init(ps, name + "/q", c, c, rng);
        k.init(ps, name + "/k", c, c, rng);
        v.init(ps, name + "/v", c, c, rng);
        o.init(ps, name + "/o", c, c, rng);
    }
    Tensor<S> forward(const Tensor<S>& query, const Tensor<S>& key, const Tensor<S>& value,
                      const std::vector<char>* mask = nullptr) const {
        return o.forward(multi_head_attention(q.forward(query), k.forward(key), v.forward(value), heads, mask));
    }
    Tensor<S> forward(const Tensor<S>& query, const Tensor<S>& key_value) const {
        return forward(query, key_value, key_value);
    }
};

}  // namespace vita
