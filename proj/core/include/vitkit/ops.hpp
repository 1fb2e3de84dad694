#pragma once

#include <Eigen/Core>
#include <limits>
#include <optional>

#include "vitkit/tensor.hpp"

namespace vita {

namespace detail {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapM = Eigen::Map<Mat<S>>;
template <class S>
using CMapM = Eigen::Map<const Mat<S>>;

}  // namespace detail

/// Batched matrix product. Supports [M,K]x[K,N], [B,M,K]x[B,K,N] and
/// [B,M,K]x[K,N] (shared right operand).
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() < 2 || bs.size() < 2 || (bs.size() > 2 && bs.size() != as.size()))
        throw std::invalid_argument("matmul: bad ranks " + shape_str(as) + " x " + shape_str(bs));
    const i64 m = as[as.size() - 2], k = as[as.size() - 1];
    const i64 kb = bs[bs.size() - 2], n = bs[bs.size() - 1];
    if (k != kb)
        throw std::invalid_argument("matmul: inner dims disagree " + shape_str(as) + " x " + shape_str(bs));
    const i64 batch = a.size() / (m * k);
    const bool shared_b = bs.size() == 2;
    if (!shared_b && b.size() / (k * n) != batch)
        throw std::invalid_argument("matmul: batch dims disagree " + shape_str(as) + " x " + shape_str(bs));

    Shape os(as.begin(), as.end() - 1);  // batch dims of a, then m
    os.push_back(n);
    auto out = detail::make_result<S>(os, {a, b});
    for (i64 t = 0; t < batch; ++t) {
        detail::CMapM<S> A(a.data().data() + t * m * k, m, k);
        detail::CMapM<S> B(b.data().data() + (shared_b ? 0 : t * k * n), k, n);
        detail::MapM<S> C(out->data.data() + t * m * n, m, n);
        C.noalias() = A * B;
    }
    if (out->requires_grad) {
        auto an = a.ptr();
        auto bn = b.ptr();
        out->backward = [an, bn, m, k, n, batch, shared_b](const TensorNode<S>&, const std::vector<S>& g, Grads<S>& gr) {
            for (i64 t = 0; t < batch; ++t) {
                detail::CMapM<S> G(g.data() + t * m * n, m, n);
                if (an->requires_grad) {
                    detail::CMapM<S> B(bn->data.data() + (shared_b ? 0 : t * k * n), k, n);
                    detail::MapM<S> GA(gr.of(an.get()).data() + t * m * k, m, k);
                    GA.noalias() += G * B.transpose();
                }
                if (bn->requires_grad) {
                    detail::CMapM<S> A(an->data.data() + t * m * k, m, k);
                    detail::MapM<S> GB(gr.of(bn.get()).data() + (shared_b ? 0 : t * k * n), k, n);
                    GB.noalias() += A.transpose() * G;
                }
            }
        };
    }
    return Tensor<S>(out);
}

/// x [rows.., Cin] * w [Cin, Cout] + b.
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    Shape flat{x.size() / x.shape().back(), x.shape().back()};
    Shape os = x.shape();
    os.back() = w.shape()[1];
    Tensor<S> y = matmul(reshape(x, flat), w);
    if (b.defined()) y = add_bias(y, b);
    return reshape(y, os);
}

/// Softmax over an arbitrary axis with max subtraction.
template <class S>
Tensor<S> softmax(const Tensor<S>& x, int axis = -1) {
    const auto& sh = x.shape();
    const int rank = static_cast<int>(sh.size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw std::invalid_argument("softmax: bad axis");
    i64 outer = 1, n = sh[static_cast<std::size_t>(axis)], inner = 1;
    for (int i = 0; i < axis; ++i) outer *= sh[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < rank; ++i) inner *= sh[static_cast<std::size_t>(i)];
    auto out = detail::make_result<S>(sh, {x});
    for (i64 o = 0; o < outer; ++o)
        for (i64 c = 0; c < inner; ++c) {
            const i64 base = o * n * inner + c;
            S mx = x.data()[base];
            for (i64 i = 1; i < n; ++i) mx = std::max(mx, x.data()[base + i * inner]);
            S sum = 0;
            for (i64 i = 0; i < n; ++i) {
                S e = std::exp(x.data()[base + i * inner] - mx);
                out->data[base + i * inner] = e;
                sum += e;
            }
            for (i64 i = 0; i < n; ++i) out->data[base + i * inner] /= sum;
        }
    if (out->requires_grad) {
        auto xn = x.ptr();
        out->backward = [xn, outer, n, inner](const TensorNode<S>& self, const std::vector<S>& g, Grads<S>& gr) {
            auto& gx = gr.of(xn.get());
            for (i64 o = 0; o < outer; ++o)
                for (i64 c = 0; c < inner; ++c) {
                    const i64 base = o * n * inner + c;
                    S dot = 0;
                    for (i64 i = 0; i < n; ++i) dot += g[base + i * inner] * self.data[base + i * inner];
                    for (i64 i = 0; i < n; ++i)
                        gx[base + i * inner] += self.data[base + i * inner] * (g[base + i * inner] - dot);
                }
        };
    }
    return Tensor<S>(out);
}

/// Softmax over the last axis where only mask==true entries participate.
/// mask has shape [Lq, Lk] (the trailing two axes of x), broadcast over
/// leading axes. Blocked entries get exactly zero weight and zero gradient.
template <class S>
Tensor<S> masked_softmax(const Tensor<S>& x, const std::vector<char>& mask) {
    const auto& sh = x.shape();
    if (sh.size() < 2) throw std::invalid_argument("masked_softmax: rank < 2");
    const i64 lk = sh[sh.size() - 1], lq = sh[sh.size() - 2];
    if (static_cast<i64>(mask.size()) != lq * lk) throw std::invalid_argument("masked_softmax: mask size mismatch");
    for (i64 q = 0; q < lq; ++q) {
        bool any = false;
        for (i64 i = 0; i < lk; ++i) any = any || mask[q * lk + i];
        if (!any) throw std::runtime_error("masked_softmax: fully masked query row " + std::to_string(q));
    }
    const i64 outer = x.size() / (lq * lk);
    auto out = detail::make_result<S>(sh, {x});
    for (i64 o = 0; o < outer; ++o)
        for (i64 q = 0; q < lq; ++q) {
            const i64 base = (o * lq + q) * lk;
            S mx = -std::numeric_limits<S>::infinity();
            for (i64 i = 0; i < lk; ++i)
                if (mask[q * lk + i]) mx = std::max(mx, x.data()[base + i]);
            S sum = 0;
            for (i64 i = 0; i < lk; ++i) {
                S e = mask[q * lk + i] ? std::exp(x.data()[base + i] - mx) : S(0);
                out->data[base + i] = e;
                sum += e;
            }
            for (i64 i = 0; i < lk; ++i) out->data[base + i] /= sum;
        }
    if (out->requires_grad) {
        auto xn = x.ptr();
        out->backward = [xn, outer, lq, lk, mask](const TensorNode<S>& self, const std::vector<S>& g, Grads<S>& gr) {
            auto& gx = gr.of(xn.get());
            for (i64 o = 0; o < outer; ++o)
                for (i64 q = 0; q < lq; ++q) {
                    const i64 base = (o * lq + q) * lk;
                    S dot = 0;
                    for (i64 i = 0; i < lk; ++i) dot += g[base + i] * self.data[base + i];
                    for (i64 i = 0; i < lk; ++i)
                        if (mask[q * lk + i])
                            gx[base + i] += self.data[base + i] * (g[base + i] - dot);
                }
        };
    }
    return Tensor<S>(out);
}

/// Normalizes over the last axis, then applies gain and bias.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps = S(1e-5)) {
    const i64 c = x.shape().back();
    if (gain.size() != c || bias.size() != c)
        throw std::invalid_argument("layer_norm: gain/bias must match last axis " + std::to_string(c));
    if (eps <= S(0)) throw std::invalid_argument("layer_norm: eps must be positive");
    const i64 rows = x.size() / c;
    auto out = detail::make_result<S>(x.shape(), {x, gain, bias});
    std::vector<S> xhat(static_cast<std::size_t>(x.size()));
    std::vector<S> inv_std(static_cast<std::size_t>(rows));
    for (i64 r = 0; r < rows; ++r) {
        const i64 base = r * c;
        S mu = 0;
        for (i64 j = 0; j < c; ++j) mu += x.data()[base + j];
        mu /= static_cast<S>(c);
        S var = 0;
        for (i64 j = 0; j < c; ++j) {
            S d = x.data()[base + j] - mu;
            var += d * d;
        }
        var /= static_cast<S>(c);
        S is = S(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        for (i64 j = 0; j < c; ++j) {
            S h = (x.data()[base + j] - mu) * is;
            xhat[static_cast<std::size_t>(base + j)] = h;
            out->data[base + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    if (out->requires_grad) {
        auto xn = x.ptr();
        auto gn = gain.ptr();
        auto bn = bias.ptr();
        out->backward = [xn, gn, bn, rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                            const TensorNode<S>&, const std::vector<S>& g, Grads<S>& gr) {
            for (i64 r = 0; r < rows; ++r) {
                const i64 base = r * c;
                if (gn->requires_grad) {
                    auto& gg = gr.of(gn.get());
                    for (i64 j = 0; j < c; ++j) gg[j] += g[base + j] * xhat[static_cast<std::size_t>(base + j)];
                }
                if (bn->requires_grad) {
                    auto& gb = gr.of(bn.get());
                    for (i64 j = 0; j < c; ++j) gb[j] += g[base + j];
                }
                if (xn->requires_grad) {
                    auto& gx = gr.of(xn.get());
                    S mean_dh = 0, mean_dh_h = 0;
                    for (i64 j = 0; j < c; ++j) {
                        S dh = g[base + j] * gn->data[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[static_cast<std::size_t>(base + j)];
                    }
                    mean_dh /= static_cast<S>(c);
                    mean_dh_h /= static_cast<S>(c);
                    for (i64 j = 0; j < c; ++j) {
                        S dh = g[base + j] * gn->data[j];
                        gx[base + j] += inv_std[static_cast<std::size_t>(r)] *
                                        (dh - mean_dh - xhat[static_cast<std::size_t>(base + j)] * mean_dh_h);
                    }
                }
            }
        };
    }
    return Tensor<S>(out);
}

/// Single-head scaled dot-product attention over [.., L, D] operands.
/// The optional mask is [Lq, Lk], true = key visible to that query.
template <class S>
Tensor<S> scaled_dot_product_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                                       const std::vector<char>* mask = nullptr) {
    const i64 d = q.shape().back();
    if (k.shape().back() != d)
        throw std::invalid_argument("attention: q/k feature dims disagree " + shape_str(q.shape()) + " vs " +
                                    shape_str(k.shape()));
    std::vector<int> perm(k.shape().size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    Tensor<S> scores = scale(matmul(q, permute(k, perm)), S(1) / std::sqrt(static_cast<S>(d)));
    Tensor<S> att;
    if (mask) {
        att = masked_softmax(scores, *mask);
    } else {
        att = softmax(scores, -1);
    }
    return matmul(att, v);
}

/// Head-split variant of the attention primitive: D is divided into `heads`
/// equal slices attended independently and re-concatenated. No projections.
template <class S>
Tensor<S> multi_head_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, int heads,
                               const std::vector<char>* mask = nullptr) {
    const i64 d = q.shape().back();
    if (d % heads != 0) throw std::invalid_argument("multi_head_attention: D not divisible by head count");
    if (heads == 1) return scaled_dot_product_attention(q, k, v, mask);
    const i64 dh = d / heads;
    const i64 lq = q.shape()[q.shape().size() - 2];
    const i64 lk = k.shape()[k.shape().size() - 2];
    auto split = [&](const Tensor<S>& x, i64 l) {
        // [.., L, H*dh] -> [H, .., L, dh] with batch folded in front
        Tensor<S> r = reshape(x, Shape{x.size() / (l * d), l, heads, dh});
        return permute(r, {2, 0, 1, 3});
    };
    Tensor<S> o = scaled_dot_product_attention(split(q, lq), split(k, lk), split(v, lk), mask);
    o = permute(o, {1, 2, 0, 3});  // [B, Lq, H, dh]
    Shape os = q.shape();
    return reshape(o, os);
}

/// Bilinear resize of the trailing two axes (align_corners = false).
template <class S>
Tensor<S> bilinear_upsample(const Tensor<S>& x, i64 out_h, i64 out_w) {
    const auto& sh = x.shape();
    if (sh.size() < 2) throw std::invalid_argument("bilinear_upsample: rank < 2");
    const i64 h = sh[sh.size() - 2], w = sh[sh.size() - 1];
    if (out_h < h || out_w < w)
        throw std::invalid_argument("bilinear_upsample: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                                    " smaller than source " + std::to_string(h) + "x" + std::to_string(w));
    const i64 batch = x.size() / (h * w);
    struct Lerp {
        i64 lo, hi;
        S w_lo, w_hi;
    };
    auto make = [](i64 src, i64 dst) {
        std::vector<Lerp> v(static_cast<std::size_t>(dst));
        const double r = static_cast<double>(src) / static_cast<double>(dst);
        for (i64 i = 0; i < dst; ++i) {
            double c = (static_cast<double>(i) + 0.5) * r - 0.5;
            if (c < 0) c = 0;
            i64 lo = static_cast<i64>(c);
            if (lo > src - 1) lo = src - 1;
            i64 hi = std::min(lo + 1, src - 1);
            S frac = static_cast<S>(c - static_cast<double>(lo));
            v[static_cast<std::size_t>(i)] = {lo, hi, S(1) - frac, frac};
        }
        return v;
    };
    const auto ry = make(h, out_h);
    const auto rx = make(w, out_w);
    Shape os = sh;
    os[os.size() - 2] = out_h;
    os[os.size() - 1] = out_w;
    auto out = detail::make_result<S>(os, {x});
    for (i64 b = 0; b < batch; ++b) {
        const S* src = x.data().data() + b * h * w;
        S* dst = out->data.data() + b * out_h * out_w;
        for (i64 i = 0; i < out_h; ++i)
            for (i64 j = 0; j < out_w; ++j) {
                const auto& ly = ry[static_cast<std::size_t>(i)];
                const auto& lx = rx[static_cast<std::size_t>(j)];
                dst[i * out_w + j] = ly.w_lo * (lx.w_lo * src[ly.lo * w + lx.lo] + lx.w_hi * src[ly.lo * w + lx.hi]) +
                                     ly.w_hi * (lx.w_lo * src[ly.hi * w + lx.lo] + lx.w_hi * src[ly.hi * w + lx.hi]);
            }
    }
    if (out->requires_grad) {
        auto xn = x.ptr();
        out->backward = [xn, batch, h, w, out_h, out_w, ry, rx](const TensorNode<S>&, const std::vector<S>& g,
                                                                Grads<S>& gr) {
            auto& gx = gr.of(xn.get());
            for (i64 b = 0; b < batch; ++b) {
                S* dst = gx.data() + b * h * w;
                const S* src = g.data() + b * out_h * out_w;
                for (i64 i = 0; i < out_h; ++i)
                    for (i64 j = 0; j < out_w; ++j) {
                        const auto& ly = ry[static_cast<std::size_t>(i)];
                        const auto& lx = rx[static_cast<std::size_t>(j)];
                        const S go = src[i * out_w + j];
                        dst[ly.lo * w + lx.lo] += ly.w_lo * lx.w_lo * go;
                        dst[ly.lo * w + lx.hi] += ly.w_lo * lx.w_hi * go;
                        dst[ly.hi * w + lx.lo] += ly.w_hi * lx.w_lo * go;
                        dst[ly.hi * w + lx.hi] += ly.w_hi * lx.w_hi * go;
                    }
            }
        };
    }
    return Tensor<S>(out);
}

namespace detail {

template <class S>
void im2col(const S* img, i64 cin, i64 h, i64 w, i64 kh, i64 kw, i64 stride, i64 pad, i64 ho, i64 wo, S* col) {
    // col layout: [cin*kh*kw, ho*wo]
    for (i64 c = 0; c < cin; ++c)
        for (i64 ki = 0; ki < kh; ++ki)
            for (i64 kj = 0; kj < kw; ++kj) {
                S* row = col + ((c * kh + ki) * kw + kj) * ho * wo;
                for (i64 i = 0; i < ho; ++i) {
                    const i64 y = i * stride + ki - pad;
                    for (i64 j = 0; j < wo; ++j) {
                        const i64 x = j * stride + kj - pad;
                        row[i * wo + j] =
                            (y >= 0 && y < h && x >= 0 && x < w) ? img[(c * h + y) * w + x] : S(0);
                    }
                }
            }
}

template <class S>
void col2im_add(const S* col, i64 cin, i64 h, i64 w, i64 kh, i64 kw, i64 stride, i64 pad, i64 ho, i64 wo, S* img) {
    for (i64 c = 0; c < cin; ++c)
        for (i64 ki = 0; ki < kh; ++ki)
            for (i64 kj = 0; kj < kw; ++kj) {
                const S* row = col + ((c * kh + ki) * kw + kj) * ho * wo;
                for (i64 i = 0; i < ho; ++i) {
                    const i64 y = i * stride + ki - pad;
                    if (y < 0 || y >= h) continue;
                    for (i64 j = 0; j < wo; ++j) {
                        const i64 x = j * stride + kj - pad;
                        if (x >= 0 && x < w) img[(c * h + y) * w + x] += row[i * wo + j];
                    }
                }
            }
}

}  // namespace detail

/// x [B,Cin,H,W], w [Cout,Cin,kh,kw], b [Cout]; im2col + GEMM.
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, i64 stride, i64 pad) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
        throw std::invalid_argument("conv2d: bad shapes " + shape_str(xs) + " * " + shape_str(ws));
    const i64 bsz = xs[0], cin = xs[1], h = xs[2], wd = xs[3];
    const i64 cout = ws[0], kh = ws[2], kw = ws[3];
    const i64 ho = (h + 2 * pad - kh) / stride + 1;
    const i64 wo = (wd + 2 * pad - kw) / stride + 1;
    const i64 kdim = cin * kh * kw;
    auto out = detail::make_result<S>(Shape{bsz, cout, ho, wo}, {x, w, b});
    std::vector<S> col(static_cast<std::size_t>(kdim * ho * wo));
    for (i64 t = 0; t < bsz; ++t) {
        detail::im2col(x.data().data() + t * cin * h * wd, cin, h, wd, kh, kw, stride, pad, ho, wo, col.data());
        detail::CMapM<S> W(w.data().data(), cout, kdim);
        detail::CMapM<S> C(col.data(), kdim, ho * wo);
        detail::MapM<S> Y(out->data.data() + t * cout * ho * wo, cout, ho * wo);
        Y.noalias() = W * C;
        if (b.defined())
            for (i64 c = 0; c < cout; ++c) Y.row(c).array() += b.data()[c];
    }
    if (out->requires_grad) {
        auto xn = x.ptr();
        auto wn = w.ptr();
        auto bn = b.defined() ? b.ptr() : nullptr;
        out->backward = [xn, wn, bn, bsz, cin, h, wd, cout, kh, kw, stride, pad, ho, wo, kdim](
                            const TensorNode<S>&, const std::vector<S>& g, Grads<S>& gr) {
            std::vector<S> col(static_cast<std::size_t>(kdim * ho * wo));
            std::vector<S> dcol(static_cast<std::size_t>(kdim * ho * wo));
            for (i64 t = 0; t < bsz; ++t) {
                detail::CMapM<S> G(g.data() + t * cout * ho * wo, cout, ho * wo);
                if (wn->requires_grad) {
                    detail::im2col(xn->data.data() + t * cin * h * wd, cin, h, wd, kh, kw, stride, pad, ho, wo,
                                   col.data());
                    detail::CMapM<S> C(col.data(), kdim, ho * wo);
                    detail::MapM<S> GW(gr.of(wn.get()).data(), cout, kdim);
                    GW.noalias() += G * C.transpose();
                }
                if (bn && bn->requires_grad) {
                    auto& gb = gr.of(bn.get());
                    for (i64 c = 0; c < cout; ++c) gb[c] += G.row(c).sum();
                }
                if (xn->requires_grad) {
                    detail::CMapM<S> W(wn->data.data(), cout, kdim);
                    detail::MapM<S> DC(dcol.data(), kdim, ho * wo);
                    DC.noalias() = W.transpose() * G;
                    detail::col2im_add(dcol.data(), cin, h, wd, kh, kw, stride, pad, ho, wo,
                                       gr.of(xn.get()).data() + t * cin * h * wd);
                }
            }
        };
    }
    return Tensor<S>(out);
}

}  // namespace vita
