#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace vita {

using i64 = std::int64_t;
using Shape = std::vector<i64>;

inline i64 numel(const Shape& s) {
    i64 n = 1;
    for (i64 d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << s[i] << (i + 1 < s.size() ? "," : "");
    os << ']';
    return os.str();
}

/// Tracks live tensor elements so inference code can report retained state.
class MemoryMeter {
public:
    static MemoryMeter& instance() {
        static MemoryMeter m;
        return m;
    }
    void add(i64 n) {
        i64 cur = current_.fetch_add(n) + n;
        i64 peak = peak_.load();
        while (cur > peak && !peak_.compare_exchange_weak(peak, cur)) {
        }
    }
    void sub(i64 n) { current_.fetch_sub(n); }
    i64 current() const { return current_.load(); }
    i64 peak() const { return peak_.load(); }
    void reset_peak() { peak_.store(current_.load()); }

private:
    std::atomic<i64> current_{0};
    std::atomic<i64> peak_{0};
};

template <class S>
struct TensorNode;

/// Gradient buffers for one backward pass, keyed by node identity.
/// Keeping gradients out of the nodes lets several forward graphs share
/// read-only parameters (e.g. batch items evaluated independently).
template <class S>
class Grads {
public:
    std::vector<S>& of(const TensorNode<S>* n) {
        auto it = bufs_.find(n);
        if (it == bufs_.end()) it = bufs_.emplace(n, std::vector<S>(n->data.size(), S(0))).first;
        return it->second;
    }
    bool has(const TensorNode<S>* n) const { return bufs_.count(n) != 0; }
    const std::vector<S>& at(const TensorNode<S>* n) const { return bufs_.at(n); }
    void add_scaled(const Grads<S>& other, S scale) {
        for (const auto& [node, buf] : other.bufs_) {
            auto& dst = of(node);
            for (std::size_t i = 0; i < buf.size(); ++i) dst[i] += scale * buf[i];
        }
    }

private:
    std::unordered_map<const TensorNode<S>*, std::vector<S>> bufs_;
};

template <class S>
struct TensorNode {
    Shape shape;
    std::vector<S> data;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode<S>>> inputs;
    // Called with this node's accumulated output gradient; accumulates into inputs.
    std::function<void(const TensorNode<S>&, const std::vector<S>&, Grads<S>&)> backward;

    explicit TensorNode(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(numel(shape)), S(0)) {
        MemoryMeter::instance().add(static_cast<i64>(data.size()));
    }
    TensorNode(Shape s, std::vector<S> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<i64>(data.size()) != numel(shape))
            throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape));
        MemoryMeter::instance().add(static_cast<i64>(data.size()));
    }
    ~TensorNode() { MemoryMeter::instance().sub(static_cast<i64>(data.size())); }
    TensorNode(const TensorNode&) = delete;
    TensorNode& operator=(const TensorNode&) = delete;
};

template <class S>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode<S>> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape s) { return Tensor(std::make_shared<TensorNode<S>>(std::move(s))); }
    static Tensor full(Shape s, S v) {
        Tensor t = zeros(std::move(s));
        for (S& x : t.node_->data) x = v;
        return t;
    }
    static Tensor from_data(Shape s, std::vector<S> d) {
        return Tensor(std::make_shared<TensorNode<S>>(std::move(s), std::move(d)));
    }
    static Tensor scalar(S v) { return from_data({}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    i64 dim(std::size_t i) const { return node_->shape.at(i); }
    i64 size() const { return static_cast<i64>(node_->data.size()); }
    std::vector<S>& data() { return node_->data; }
    const std::vector<S>& data() const { return node_->data; }
    S item() const {
        if (node_->data.size() != 1) throw std::invalid_argument("item() on non-scalar " + shape_str(shape()));
        return node_->data[0];
    }
    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v = true) {
        node_->requires_grad = v;
        return *this;
    }
    TensorNode<S>* node() const { return node_.get(); }
    const std::shared_ptr<TensorNode<S>>& ptr() const { return node_; }

    /// Same values, detached from the graph.
    Tensor detach() const { return from_data(node_->shape, node_->data); }

    template <class T>
    Tensor<T> cast() const {
        std::vector<T> d(node_->data.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(node_->data[i]);
        return Tensor<T>::from_data(node_->shape, std::move(d));
    }

private:
    std::shared_ptr<TensorNode<S>> node_;
};

template <class S>
void check_finite(const Tensor<S>& t, const char* what) {
    for (S v : t.data())
        if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value in ") + what);
}

namespace detail {

template <class S>
std::shared_ptr<TensorNode<S>> make_result(Shape shape, std::initializer_list<Tensor<S>> inputs) {
    auto out = std::make_shared<TensorNode<S>>(std::move(shape));
    for (const auto& t : inputs)
        if (t.defined() && t.requires_grad()) out->requires_grad = true;
    if (out->requires_grad)
        for (const auto& t : inputs)
            if (t.defined()) out->inputs.push_back(t.ptr());
    return out;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Topological order is guaranteed by
/// construction (inputs are created before outputs); each node fires once.
template <class S>
Grads<S> backward(const Tensor<S>& loss) {
    if (loss.size() != 1) throw std::invalid_argument("backward() needs a scalar loss");
    Grads<S> grads;
    if (!loss.requires_grad()) return grads;

    std::vector<TensorNode<S>*> order;
    std::unordered_set<TensorNode<S>*> seen;
    std::vector<std::pair<TensorNode<S>*, std::size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->inputs.size()) {
            TensorNode<S>* in = node->inputs[idx++].get();
            if (in->requires_grad && seen.insert(in).second) stack.emplace_back(in, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    grads.of(loss.node())[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<S>* n = *it;
        if (n->backward && grads.has(n)) n->backward(*n, grads.at(n), grads);
    }
    return grads;
}

// ---- elementwise and structural ops ----

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = detail::make_result<S>(a.shape(), {a, b});
    for (i64 i = 0; i < a.size(); ++i) out->data[i] = a.data()[i] + b.data()[i];
    if (out->requires_grad) {
        auto an = a.ptr();
        auto bn = b.ptr();
        out->backward = [an, bn](const TensorNode<S>&, const std::vector<S>& g, Grads<S>& gr) {
            if (an->requires_grad) {
                auto& ga = gr.of(an.get());
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& gb = gr.of(bn.get());
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        };
    }
    return Tensor<S>(out);
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = detail::make_result<S>(a.shape(), {a, b});
    for (i64 i = 0; i < a.size(); ++i) out->data[i] = a.data()[i] - b.data()[i];
    if (out->requires_grad) {
        auto an = a.ptr();
        auto bn = b.ptr();
        out->backward = [an, bn](const TensorNode<S>&, const std::vector<S>& g, Grads<S>& gr) {
            if (an->requires_grad) {
                auto& ga = gr.of(an.get());
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& gb = gr.of(bn.get());
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        };
    }
    return Tensor<S>(out);
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = detail::make_result<S>(a.shape(), {a, b});
    for (i64 i = 0; i < a.size(); ++i) out->data[i] = a.data()[i] * b.data()[i];
    if (out->requires_grad) {
        auto an = a.ptr();
        auto bn = b.ptr();
        out->backward = [an, bn](const TensorNode<S>&, const std::vector<S>& g, Grads<S>& gr) {
            if (an->requires_grad) {
                auto& ga = gr.of(an.get());
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                auto& gb = gr.of(bn.get());
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
            }
        };
    }
    return Tensor<S>(out);
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    auto out = detail::make_result<S>(a.shape(), {a});
    for (i64 i = 0; i < a.size(); ++i) out->data[i] = c * a.data()[i];
    if (out->requires_grad) {
        auto an = a.ptr();
        out->backward = [an, c](const TensorNode<S>&, const std::vector<S>& g, Grads<S>& gr) {
            auto& ga = gr.of(an.get());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
        };
    }
    return Tensor<S>(out);
}

/// x: [rows, C] plus a per-column bias [C].
template <class S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& b) {
    const i64 c = x.shape().back();
    if (b.size() != c)
        throw std::invalid_argument("add_bias: bias " + shape_str(b.shape()) + " vs last dim of " + shape_str(x.shape()));
    auto out = detail::make_result<S>(x.shape(), {x, b});
    const i64 rows = x.size() / c;
    for (i64 r = 0; r < rows; ++r)
        for (i64 j = 0; j < c; ++j) out->data[r * c + j] = x.data()[r * c + j] + b.data()[j];
    if (out->requires_grad) {
        auto xn = x.ptr();
        auto bn = b.ptr();
        out->backward = [xn, bn, rows, c](const TensorNode<S>&, const std::vector<S>& g, Grads<S>& gr) {
            if (xn->requires_grad) {
                auto& gx = gr.of(xn.get());
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& gb = gr.of(bn.get());
                for (i64 r = 0; r < rows; ++r)
                    for (i64 j = 0; j < c; ++j) gb[j] += g[r * c + j];
            }
        };
    }
    return Tensor<S>(out);
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
    auto out = detail::make_result<S>(x.shape(), {x});
    for (i64 i = 0; i < x.size(); ++i) out->data[i] = x.data()[i] > S(0) ? x.data()[i] : S(0);
    if (out->requires_grad) {
        auto xn = x.ptr();
        out->backward = [xn](const TensorNode<S>&, const std::vector<S>& g, Grads<S>& gr) {
            auto& gx = gr.of(xn.get());
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xn->data[i] > S(0)) gx[i] += g[i];
        };
    }
    return Tensor<S>(out);
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
    auto out = detail::make_result<S>(x.shape(), {x});
    for (i64 i = 0; i < x.size(); ++i) out->data[i] = S(1) / (S(1) + std::exp(-x.data()[i]));
    if (out->requires_grad) {
        auto xn = x.ptr();
        out->backward = [xn](const TensorNode<S>& self, const std::vector<S>& g, Grads<S>& gr) {
            auto& gx = gr.of(xn.get());
            for (std::size_t i = 0; i < g.size(); ++i) {
                S y = self.data[i];
                gx[i] += g[i] * y * (S(1) - y);
            }
        };
    }
    return Tensor<S>(out);
}

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape s) {
    if (numel(s) != x.size())
        throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " + shape_str(s));
    auto out = std::make_shared<TensorNode<S>>(std::move(s), x.data());
    out->requires_grad = x.requires_grad();
    if (out->requires_grad) {
        out->inputs.push_back(x.ptr());
        auto xn = x.ptr();
        out->backward = [xn](const TensorNode<S>&, const std::vector<S>& g, Grads<S>& gr) {
            auto& gx = gr.of(xn.get());
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        };
    }
    return Tensor<S>(out);
}

/// General axis permutation; backward applies the inverse permutation.
template <class S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& perm) {
    const auto& sh = x.shape();
    if (perm.size() != sh.size()) throw std::invalid_argument("permute: rank mismatch");
    Shape os(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) os[i] = sh[static_cast<std::size_t>(perm[i])];
    const std::size_t rank = sh.size();
    std::vector<i64> in_strides(rank, 1), out_strides(rank, 1);
    for (std::size_t i = rank - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * sh[i];
    for (std::size_t i = rank - 1; i > 0; --i) out_strides[i - 1] = out_strides[i] * os[i];
    std::vector<i64> map(static_cast<std::size_t>(x.size()));
    std::vector<i64> idx(rank, 0);
    for (i64 o = 0; o < x.size(); ++o) {
        i64 src = 0;
        for (std::size_t d = 0; d < rank; ++d) src += idx[d] * in_strides[static_cast<std::size_t>(perm[d])];
        map[static_cast<std::size_t>(o)] = src;
        for (std::size_t d = rank; d-- > 0;) {
            if (++idx[d] < os[d]) break;
            idx[d] = 0;
        }
    }
    auto out = detail::make_result<S>(os, {x});
    for (i64 o = 0; o < x.size(); ++o) out->data[o] = x.data()[map[static_cast<std::size_t>(o)]];
    if (out->requires_grad) {
        auto xn = x.ptr();
        out->backward = [xn, map](const TensorNode<S>&, const std::vector<S>& g, Grads<S>& gr) {
            auto& gx = gr.of(xn.get());
            for (std::size_t o = 0; o < g.size(); ++o) gx[static_cast<std::size_t>(map[o])] += g[o];
        };
    }
    return Tensor<S>(out);
}

/// Contiguous [start, start+len) slab along axis 0.
template <class S>
Tensor<S> slice_rows(const Tensor<S>& x, i64 start, i64 len) {
    const auto& sh = x.shape();
    if (sh.empty() || start < 0 || start + len > sh[0]) throw std::invalid_argument("slice_rows: out of range");
    Shape os = sh;
    os[0] = len;
    const i64 stride = x.size() / sh[0];
    auto out = detail::make_result<S>(os, {x});
    for (i64 i = 0; i < len * stride; ++i) out->data[i] = x.data()[start * stride + i];
    if (out->requires_grad) {
        auto xn = x.ptr();
        out->backward = [xn, start, stride](const TensorNode<S>&, const std::vector<S>& g, Grads<S>& gr) {
            auto& gx = gr.of(xn.get());
            for (std::size_t i = 0; i < g.size(); ++i) gx[static_cast<std::size_t>(start * stride) + i] += g[i];
        };
    }
    return Tensor<S>(out);
}

template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    Shape os = parts[0].shape();
    i64 rows = 0;
    for (const auto& p : parts) {
        if (!std::equal(p.shape().begin() + 1, p.shape().end(), os.begin() + 1, os.end()))
            throw std::invalid_argument("concat_rows: trailing shape mismatch");
        rows += p.shape()[0];
    }
    os[0] = rows;
    auto out = std::make_shared<TensorNode<S>>(os);
    std::vector<i64> offsets;
    i64 off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        for (i64 i = 0; i < p.size(); ++i) out->data[off + i] = p.data()[i];
        off += p.size();
        if (p.requires_grad()) out->requires_grad = true;
    }
    if (out->requires_grad) {
        std::vector<std::shared_ptr<TensorNode<S>>> ins;
        for (const auto& p : parts) ins.push_back(p.ptr());
        out->inputs = ins;
        out->backward = [ins, offsets](const TensorNode<S>&, const std::vector<S>& g, Grads<S>& gr) {
            for (std::size_t k = 0; k < ins.size(); ++k) {
                if (!ins[k]->requires_grad) continue;
                auto& gx = gr.of(ins[k].get());
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[static_cast<std::size_t>(offsets[k]) + i];
            }
        };
    }
    return Tensor<S>(out);
}

/// Row gather on a [N, ...] tensor; backward scatter-adds.
template <class S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<i64>& idx) {
    const auto& sh = x.shape();
    if (sh.empty()) throw std::invalid_argument("gather_rows: rank 0");
    const i64 stride = x.size() / sh[0];
    Shape os = sh;
    os[0] = static_cast<i64>(idx.size());
    auto out = detail::make_result<S>(os, {x});
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] < 0 || idx[k] >= sh[0]) throw std::invalid_argument("gather_rows: index out of range");
        for (i64 i = 0; i < stride; ++i)
            out->data[static_cast<i64>(k) * stride + i] = x.data()[idx[k] * stride + i];
    }
    if (out->requires_grad) {
        auto xn = x.ptr();
        out->backward = [xn, idx, stride](const TensorNode<S>&, const std::vector<S>& g, Grads<S>& gr) {
            auto& gx = gr.of(xn.get());
            for (std::size_t k = 0; k < idx.size(); ++k)
                for (i64 i = 0; i < stride; ++i)
                    gx[static_cast<std::size_t>(idx[k] * stride + i)] += g[k * static_cast<std::size_t>(stride) + static_cast<std::size_t>(i)];
        };
    }
    return Tensor<S>(out);
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
    auto out = detail::make_result<S>(Shape{}, {x});
    S acc = 0;
    for (S v : x.data()) acc += v;
    out->data[0] = acc;
    if (out->requires_grad) {
        auto xn = x.ptr();
        out->backward = [xn](const TensorNode<S>&, const std::vector<S>& g, Grads<S>& gr) {
            auto& gx = gr.of(xn.get());
            for (S& v : gx) v += g[0];
        };
    }
    return Tensor<S>(out);
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& x) {
    return scale(sum_all(x), S(1) / static_cast<S>(x.size()));
}

}  // namespace vita
