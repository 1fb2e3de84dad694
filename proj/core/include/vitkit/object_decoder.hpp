#pragma once

#include "vitkit/object_encoder.hpp"

namespace vita {

template <class S>
struct VideoQuerySet {
    Tensor<S> decoded;                 // [N_v, C], final layer
    std::vector<Tensor<S>> per_layer;  // last supervision_layers outputs, oldest first
};

template <class S>
struct VideoPrediction {
    Tensor<S> class_logits;        // [N_v, K+1]
    Tensor<S> class_probs;         // [N_v, K+1], rows sum to 1
    Tensor<S> mask_embeddings;     // w_v, [N_v, C]
    Tensor<S> mask_logits_stride;  // [T, N_v, h, w]

    /// Full-resolution mask logits, [N_v, T, H, W].
    Tensor<S> mask_logits(i64 out_h, i64 out_w) const {
        const auto& sh = mask_logits_stride.shape();
        Tensor<S> up = bilinear_upsample(mask_logits_stride, out_h, out_w);  // [T, N_v, H, W]
        return permute(up, {1, 0, 2, 3});
    }
};

/// Decodes N_v trainable video queries against the kept object tokens:
/// cross-attention first, then self-attention, then feed-forward (post-norm).
template <class S>
class ObjectDecoder {
public:
    ObjectDecoder(const ModelConfig& cfg, ParameterStore<S>& ps, Rng& rng) : cfg_(cfg) {
        query_init_ = ps.create("decoder/query_init", {cfg.video_queries, cfg.channels});
        fill_uniform(query_init_, rng, S(-0.5), S(0.5));
        layers_.resize(static_cast<std::size_t>(cfg.decoder_layers));
        for (int l = 0; l < cfg.decoder_layers; ++l) {
            const std::string base = "decoder/layer" + std::to_string(l);
            auto& L = layers_[static_cast<std::size_t>(l)];
            L.cross.init(ps, base + "/cross", cfg.channels, cfg.heads, rng);
            L.self.init(ps, base + "/self", cfg.channels, cfg.heads, rng);
            L.ffn.init(ps, base + "/ffn", cfg.channels, cfg.ffn_hidden, rng);
            L.norm1.init(ps, base + "/norm1", cfg.channels);
            L.norm2.init(ps, base + "/norm2", cfg.channels);
            L.norm3.init(ps, base + "/norm3", cfg.channels);
        }
        class_head_.init(ps, "decoder/class_head", cfg.channels, cfg.categories + 1, rng);
        mask_head_.init(ps, "decoder/mask_head", cfg.channels, cfg.channels, cfg.channels, rng);
    }

    VideoQuerySet<S> forward(const ObjectTokenSet<S>& tokens) const {
        if (tokens.tokens.shape()[0] == 0) throw std::runtime_error("decoder: no kept object tokens to attend to");
        Tensor<S> q = reshape(query_init_, {cfg_.video_queries, cfg_.channels});
        VideoQuerySet<S> out;
        for (const auto& L : layers_) {
            q = L.norm1.forward(add(q, L.cross.forward(q, tokens.tokens, tokens.tokens)));
            q = L.norm2.forward(add(q, L.self.forward(q, q, q)));
            q = L.norm3.forward(add(q, L.ffn.forward(q)));
            out.per_layer.push_back(q);
        }
        const int keep = std::min<int>(cfg_.supervision_layers, static_cast<int>(out.per_layer.size()));
        out.per_layer.erase(out.per_layer.begin(), out.per_layer.end() - keep);
        out.decoded = out.per_layer.back();
        return out;
    }

    Tensor<S> class_logits(const Tensor<S>& decoded) const { return class_head_.forward(decoded); }

    /// Full prediction for one decoded layer.
    VideoPrediction<S> predict(const Tensor<S>& decoded, const PixelEmbeddingMap<S>& pixels) const {
        const auto& es = pixels.embeddings.shape();  // [T, C, h, w]
        const i64 t = es[0], c = es[1], h = es[2], w = es[3];
        VideoPrediction<S> pred;
        pred.class_logits = class_head_.forward(decoded);
        pred.class_probs = softmax(pred.class_logits, -1);
        pred.mask_embeddings = mask_head_.forward(decoded);
        Tensor<S> emb = reshape(pixels.embeddings, {t, c, h * w});
        Tensor<S> wv = tile_leading(pred.mask_embeddings, t);  // [T, N_v, C]
        pred.mask_logits_stride = reshape(matmul(wv, emb), {t, cfg_.video_queries, h, w});
        return pred;
    }

    const ModelConfig& config() const { return cfg_; }

private:
    struct DecoderLayer {
        AttentionLayer<S> cross, self;
        FeedForward<S> ffn;
        LayerNormLayer<S> norm1, norm2, norm3;
    };
    ModelConfig cfg_;
    Tensor<S> query_init_;
    std::vector<DecoderLayer> layers_;
    LinearLayer<S> class_head_;
    MlpHead<S> mask_head_;
};

}  // namespace vita
