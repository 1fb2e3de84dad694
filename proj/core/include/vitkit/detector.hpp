#pragma once

#include <array>

#include "vitkit/config.hpp"
#include "vitkit/nn.hpp"

namespace vita {

template <class S>
struct PixelEmbeddingMap {
    Tensor<S> embeddings;  // [T, C, H/S, W/S]
    i64 stride = 4;
};

template <class S>
struct FrameQuerySet {
    Tensor<S> queries;                 // [T, N_f, C], final decoder layer
    std::vector<Tensor<S>> per_layer;  // last supervision_layers outputs, oldest first
};

template <class S>
struct FramePrediction {
    Tensor<S> class_logits;        // [T, N_f, K+1]
    Tensor<S> mask_weights;        // [T, N_f, C]
    Tensor<S> mask_logits_stride;  // [T, N_f, H/S, W/S]

    Tensor<S> mask_logits(i64 out_h, i64 out_w) const { return bilinear_upsample(mask_logits_stride, out_h, out_w); }
};

/// Fixed sinusoidal 2-D positional encoding, [h*w, C].
template <class S>
Tensor<S> sinusoidal_position_encoding(i64 h, i64 w, i64 c) {
    Tensor<S> pos = Tensor<S>::zeros({h * w, c});
    const i64 half = c / 2;
    for (i64 y = 0; y < h; ++y)
        for (i64 x = 0; x < w; ++x) {
            S* row = pos.data().data() + (y * w + x) * c;
            for (i64 i = 0; i < half; i += 2) {
                const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
                row[i] = static_cast<S>(std::sin(static_cast<double>(y) * freq));
                row[i + 1] = static_cast<S>(std::cos(static_cast<double>(y) * freq));
                row[half + i] = static_cast<S>(std::sin(static_cast<double>(x) * freq));
                row[half + i + 1] = static_cast<S>(std::cos(static_cast<double>(x) * freq));
            }
        }
    return pos;
}

/// Repeats x along a new leading axis: [d...] -> [n, d...].
template <class S>
Tensor<S> tile_leading(const Tensor<S>& x, i64 n) {
    Shape one = x.shape();
    one.insert(one.begin(), 1);
    Tensor<S> r = reshape(x, one);
    std::vector<Tensor<S>> copies(static_cast<std::size_t>(n), r);
    return concat_rows(copies);
}

/// Miniature frame-level set-prediction detector: a strided conv encoder
/// producing stride-S per-pixel embeddings, plus a query decoder that emits
/// N_f frame queries per frame. Frames never exchange information.
template <class S>
class FrameDetector {
public:
    FrameDetector(const ModelConfig& cfg, ParameterStore<S>& ps, Rng& rng) : cfg_(cfg) {
        const auto& ch = cfg.backbone_channels;
        if (ch.size() != 4) throw std::invalid_argument("detector: need 4 backbone channel counts");
        auto conv = [&](const std::string& name, i64 cin, i64 cout, i64 k) {
            Tensor<S>& w = ps.create(name + "/w", {cout, cin, k, k});
            fill_xavier(w, rng, cin * k * k, cout * k * k);
            ps.create(name + "/b", {cout});
            return std::pair<Tensor<S>, Tensor<S>>(w, ps.at(name + "/b"));
        };
        conv_[0] = conv("detector/conv1", 3, ch[0], 3);
        conv_[1] = conv("detector/conv2", ch[0], ch[1], 3);
        conv_[2] = conv("detector/conv3", ch[1], ch[2], 3);
        conv_[3] = conv("detector/conv4", ch[2], ch[3], 3);
        proj_ = conv("detector/proj", ch[3], cfg.channels, 1);

        query_init_ = ps.create("detector/query_init", {cfg.frame_queries, cfg.channels});
        fill_uniform(query_init_, rng, S(-0.5), S(0.5));
        layers_.resize(static_cast<std::size_t>(cfg.detector_layers));
        for (int l = 0; l < cfg.detector_layers; ++l) {
            const std::string base = "detector/layer" + std::to_string(l);
            auto& L = layers_[static_cast<std::size_t>(l)];
            L.cross.init(ps, base + "/cross", cfg.channels, cfg.heads, rng);
            L.self.init(ps, base + "/self", cfg.channels, cfg.heads, rng);
            L.ffn.init(ps, base + "/ffn", cfg.channels, cfg.ffn_hidden, rng);
            L.norm1.init(ps, base + "/norm1", cfg.channels);
            L.norm2.init(ps, base + "/norm2", cfg.channels);
            L.norm3.init(ps, base + "/norm3", cfg.channels);
        }
        class_head_.init(ps, "detector/class_head", cfg.channels, cfg.categories + 1, rng);
        mask_head_.init(ps, "detector/mask_head", cfg.channels, cfg.channels, cfg.channels, rng);
    }

    /// Per-frame stride-S embedding map; frames are processed independently
    /// (the conv stack treats T as the batch axis).
    PixelEmbeddingMap<S> extract_features(const Tensor<S>& frames) const {
        const auto& sh = frames.shape();
        if (sh.size() != 4 || sh[1] != 3) throw std::invalid_argument("extract_features: frames must be [T,3,H,W]");
        if (sh[2] % cfg_.stride != 0 || sh[3] % cfg_.stride != 0)
            throw std::invalid_argument("extract_features: H,W must be divisible by stride " +
                                        std::to_string(cfg_.stride));
        Tensor<S> x = relu(conv2d(frames, conv_[0].first, conv_[0].second, 2, 1));   // /2
        x = relu(conv2d(x, conv_[1].first, conv_[1].second, 2, 1));                  // /4
        x = relu(conv2d(x, conv_[2].first, conv_[2].second, 2, 1));                  // /8
        x = relu(conv2d(x, conv_[3].first, conv_[3].second, 1, 1));                  // /8
        x = bilinear_upsample(x, sh[2] / cfg_.stride, sh[3] / cfg_.stride);          // /S
        x = conv2d(x, proj_.first, proj_.second, 1, 0);
        PixelEmbeddingMap<S> map;
        map.embeddings = x;
        map.stride = cfg_.stride;
        return map;
    }

    /// Refines N_f learned queries against each frame's flattened features.
    FrameQuerySet<S> decode_frame_queries(const PixelEmbeddingMap<S>& features) const {
        const auto& sh = features.embeddings.shape();  // [T, C, h, w]
        const i64 t = sh[0], c = sh[1], h = sh[2], w = sh[3];
        Tensor<S> feat = reshape(permute(features.embeddings, {0, 2, 3, 1}), {t, h * w, c});  // [T, hw, C]
        Tensor<S> keys = feat;
        if (cfg_.positional_encoding) {
            Tensor<S> pos = tile_leading(sinusoidal_position_encoding<S>(h, w, c), t);
            keys = add(feat, pos);
        }
        Tensor<S> q = tile_leading(query_init_, t);  // [T, N_f, C]
        FrameQuerySet<S> out;
        for (const auto& L : layers_) {
            q = L.norm1.forward(add(q, L.cross.forward(q, keys, feat)));
            q = L.norm2.forward(add(q, L.self.forward(q, q, q)));
            q = L.norm3.forward(add(q, L.ffn.forward(q)));
            out.per_layer.push_back(q);
        }
        const int keep = std::min<int>(cfg_.supervision_layers, static_cast<int>(out.per_layer.size()));
        out.per_layer.erase(out.per_layer.begin(), out.per_layer.end() - keep);
        out.queries = out.per_layer.back();
        return out;
    }

    /// Class logits, dynamic mask weights and dot-product mask logits for one
    /// query tensor (call per retained decoder layer for deep supervision).
    FramePrediction<S> predict_frame(const Tensor<S>& queries, const PixelEmbeddingMap<S>& pixels) const {
        const auto& es = pixels.embeddings.shape();  // [T, C, h, w]
        const i64 t = es[0], c = es[1], h = es[2], w = es[3];
        FramePrediction<S> pred;
        pred.class_logits = class_head_.forward(queries);
        pred.mask_weights = mask_head_.forward(queries);
        Tensor<S> emb = reshape(pixels.embeddings, {t, c, h * w});
        pred.mask_logits_stride = reshape(matmul(pred.mask_weights, emb), {t, queries.shape()[1], h, w});
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
    std::array<std::pair<Tensor<S>, Tensor<S>>, 4> conv_;
    std::pair<Tensor<S>, Tensor<S>> proj_;
    Tensor<S> query_init_;
    std::vector<DecoderLayer> layers_;
    LinearLayer<S> class_head_;
    MlpHead<S> mask_head_;
};

}  // namespace vita
