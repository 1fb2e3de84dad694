#pragma once

#include "vitkit/detector.hpp"

namespace vita {

/// Object tokens, frame-major. Rows are the *kept* tokens only; keep_mask
/// records the per-query decision over the full T*N_f grid.
template <class S>
struct ObjectTokenSet {
    Tensor<S> tokens;              // [M, C], M = number of kept tokens
    std::vector<i64> frame_index;  // owning frame per kept row, non-decreasing
    std::vector<char> keep_mask;   // [T * N_f]
    i64 frames = 0;
    i64 queries_per_frame = 0;

    i64 kept_in_frame(i64 t) const {
        i64 n = 0;
        for (i64 q = 0; q < queries_per_frame; ++q) n += keep_mask[t * queries_per_frame + q];
        return n;
    }
};

/// Contiguous frame ranges [begin, end) forming an exact partition of [0, T):
/// [-shift, W-shift), [W-shift, 2W-shift), ... intersected with [0, T).
inline std::vector<std::pair<i64, i64>> window_partition(i64 frames, i64 window, i64 shift) {
    if (window < 1) throw std::invalid_argument("window_partition: window must be >= 1");
    if (shift < 0 || shift >= window) throw std::invalid_argument("window_partition: need 0 <= shift < window");
    if (window >= frames) return {{0, frames}};  // degenerates to full attention
    std::vector<std::pair<i64, i64>> ranges;
    for (i64 begin = -shift; begin < frames; begin += window) {
        const i64 b = std::max<i64>(begin, 0);
        const i64 e = std::min<i64>(begin + window, frames);
        if (e > b) ranges.emplace_back(b, e);
    }
    return ranges;
}

/// Shifted temporal-window self-attention over object tokens.
template <class S>
class ObjectEncoder {
public:
    ObjectEncoder(const ModelConfig& cfg, ParameterStore<S>& ps, Rng& rng) : cfg_(cfg) {
        input_proj_.init(ps, "encoder/input_proj", cfg.channels, cfg.channels, rng);
        layers_.resize(static_cast<std::size_t>(cfg.encoder_layers));
        for (int l = 0; l < cfg.encoder_layers; ++l) {
            const std::string base = "encoder/layer" + std::to_string(l);
            auto& L = layers_[static_cast<std::size_t>(l)];
            L.attn.init(ps, base + "/attn", cfg.channels, cfg.heads, rng);
            L.ffn.init(ps, base + "/ffn", cfg.channels, cfg.ffn_hidden, rng);
            L.norm1.init(ps, base + "/norm1", cfg.channels);
            L.norm2.init(ps, base + "/norm2", cfg.channels);
        }
        if (cfg.temporal_embedding) {
            temporal_embed_ = ps.create("encoder/temporal_embed", {256, cfg.channels});
            fill_uniform(temporal_embed_, rng, S(-0.02), S(0.02));
        }
    }

    /// Shared linear projection from frame queries to object tokens.
    ObjectTokenSet<S> tokenize(const FrameQuerySet<S>& queries) const {
        const auto& sh = queries.queries.shape();  // [T, N_f, C]
        ObjectTokenSet<S> set;
        set.frames = sh[0];
        set.queries_per_frame = sh[1];
        set.tokens = input_proj_.forward(reshape(queries.queries, {sh[0] * sh[1], sh[2]}));
        if (temporal_embed_.defined()) {
            std::vector<i64> frame_of_row(static_cast<std::size_t>(sh[0] * sh[1]));
            for (i64 t = 0; t < sh[0]; ++t)
                for (i64 q = 0; q < sh[1]; ++q) frame_of_row[static_cast<std::size_t>(t * sh[1] + q)] = t;
            set.tokens = add(set.tokens, gather_rows(temporal_embed_, frame_of_row));
        }
        set.keep_mask.assign(static_cast<std::size_t>(sh[0] * sh[1]), 1);
        for (i64 t = 0; t < sh[0]; ++t)
            for (i64 q = 0; q < sh[1]; ++q) set.frame_index.push_back(t);
        return set;
    }

    /// Per frame, keeps the ceil(r * N_f) queries least confident in "no
    /// object" (ties broken by query index).
    ObjectTokenSet<S> prune(const ObjectTokenSet<S>& set, const FramePrediction<S>& frame_pred, double ratio) const {
        if (ratio <= 0.0 || ratio > 1.0) throw std::invalid_argument("prune: ratio must be in (0, 1]");
        const i64 t_frames = set.frames, n_f = set.queries_per_frame;
        const i64 keep_n = static_cast<i64>(std::ceil(ratio * static_cast<double>(n_f)));
        const auto& logits = frame_pred.class_logits;  // [T, N_f, K+1]
        const i64 k1 = logits.shape()[2];
        ObjectTokenSet<S> out;
        out.frames = t_frames;
        out.queries_per_frame = n_f;
        out.keep_mask.assign(static_cast<std::size_t>(t_frames * n_f), 0);
        std::vector<i64> kept_rows;
        for (i64 t = 0; t < t_frames; ++t) {
            std::vector<std::pair<double, i64>> order;
            for (i64 q = 0; q < n_f; ++q) {
                const S* row = logits.data().data() + (t * n_f + q) * k1;
                S mx = row[0];
                for (i64 i = 1; i < k1; ++i) mx = std::max(mx, row[i]);
                double denom = 0;
                for (i64 i = 0; i < k1; ++i) denom += std::exp(static_cast<double>(row[i] - mx));
                const double p_empty = std::exp(static_cast<double>(row[k1 - 1] - mx)) / denom;
                order.emplace_back(p_empty, q);
            }
            std::stable_sort(order.begin(), order.end(),
                             [](const auto& a, const auto& b) { return a.first < b.first; });
            std::vector<i64> chosen;
            for (i64 i = 0; i < keep_n; ++i) chosen.push_back(order[static_cast<std::size_t>(i)].second);
            std::sort(chosen.begin(), chosen.end());
            for (i64 q : chosen) {
                out.keep_mask[static_cast<std::size_t>(t * n_f + q)] = 1;
                kept_rows.push_back(t * n_f + q);
                out.frame_index.push_back(t);
            }
        }
        out.tokens = gather_rows(set.tokens, kept_rows);
        return out;
    }

    /// Window self-attention alternating shift 0 / floor(W/2) per layer.
    /// Attention never crosses a window boundary; tokens outside every window
    /// (impossible here, the partition is exact) would pass through unchanged.
    ObjectTokenSet<S> forward(const ObjectTokenSet<S>& set) const {
        ObjectTokenSet<S> out = set;
        // row range per frame in the compacted token tensor
        std::vector<i64> row_start(static_cast<std::size_t>(set.frames + 1), 0);
        for (i64 r = 0; r < static_cast<i64>(set.frame_index.size()); ++r)
            row_start[static_cast<std::size_t>(set.frame_index[static_cast<std::size_t>(r)] + 1)]++;
        for (i64 t = 0; t < set.frames; ++t) row_start[static_cast<std::size_t>(t + 1)] += row_start[static_cast<std::size_t>(t)];

        Tensor<S> x = set.tokens;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const i64 shift = (l % 2 == 1) ? effective_shift(set.frames) : 0;
            const auto ranges = window_partition(set.frames, cfg_.window, shift);
            std::vector<Tensor<S>> parts;
            for (const auto& [b, e] : ranges) {
                const i64 r0 = row_start[static_cast<std::size_t>(b)];
                const i64 r1 = row_start[static_cast<std::size_t>(e)];
                if (r1 == r0) continue;  // window holds no kept tokens
                Tensor<S> xw = slice_rows(x, r0, r1 - r0);
                parts.push_back(layers_[l].attn.forward(xw, xw, xw));
            }
            Tensor<S> attn_out = concat_rows(parts);
            x = layers_[l].norm1.forward(add(x, attn_out));
            x = layers_[l].norm2.forward(add(x, layers_[l].ffn.forward(x)));
        }
        out.tokens = x;
        return out;
    }

private:
    i64 effective_shift(i64 frames) const {
        (void)frames;
        return cfg_.window / 2;
    }

    struct EncoderLayer {
        AttentionLayer<S> attn;
        FeedForward<S> ffn;
        LayerNormLayer<S> norm1, norm2;
    };
    ModelConfig cfg_;
    LinearLayer<S> input_proj_;
    Tensor<S> temporal_embed_;
    std::vector<EncoderLayer> layers_;
};

}  // namespace vita
