#pragma once

#include "vitkit/hungarian.hpp"
#include "vitkit/object_decoder.hpp"
#include "vitkit/video.hpp"

namespace vita {

// ---- fused loss primitives ----

/// Weighted softmax cross entropy over rows: sum_i w_{t_i} CE_i / sum_i w_{t_i}.
template <class S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets,
                                const std::vector<double>& class_weights) {
    const auto& sh = logits.shape();
    const i64 k = sh.back();
    const i64 n = logits.size() / k;
    if (static_cast<i64>(targets.size()) != n) throw std::invalid_argument("cross_entropy: target count mismatch");
    auto out = detail::make_result<S>(Shape{}, {logits});
    std::vector<S> probs(static_cast<std::size_t>(n * k));
    double total = 0, wsum = 0;
    for (i64 i = 0; i < n; ++i) {
        const S* row = logits.data().data() + i * k;
        S mx = row[0];
        for (i64 j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double denom = 0;
        for (i64 j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
        const double logz = std::log(denom) + static_cast<double>(mx);
        for (i64 j = 0; j < k; ++j)
            probs[static_cast<std::size_t>(i * k + j)] = static_cast<S>(std::exp(static_cast<double>(row[j]) - logz));
        const double w = class_weights[static_cast<std::size_t>(targets[static_cast<std::size_t>(i)])];
        total += w * (logz - static_cast<double>(row[targets[static_cast<std::size_t>(i)]]));
        wsum += w;
    }
    out->data[0] = static_cast<S>(wsum > 0 ? total / wsum : 0.0);
    if (out->requires_grad) {
        auto xn = logits.ptr();
        out->backward = [xn, targets, class_weights, probs = std::move(probs), n, k, wsum](
                            const TensorNode<S>&, const std::vector<S>& g, Grads<S>& gr) {
            if (wsum <= 0) return;
            auto& gx = gr.of(xn.get());
            for (i64 i = 0; i < n; ++i) {
                const int t = targets[static_cast<std::size_t>(i)];
                const S w = static_cast<S>(class_weights[static_cast<std::size_t>(t)] / wsum);
                for (i64 j = 0; j < k; ++j) {
                    S p = probs[static_cast<std::size_t>(i * k + j)];
                    gx[i * k + j] += g[0] * w * (p - (j == t ? S(1) : S(0)));
                }
            }
        };
    }
    return Tensor<S>(out);
}

/// Mean binary cross entropy with logits against constant targets.
template <class S>
Tensor<S> bce_with_logits_mean(const Tensor<S>& logits, const std::vector<S>& targets) {
    if (static_cast<i64>(targets.size()) != logits.size())
        throw std::invalid_argument("bce: target size mismatch");
    const i64 n = logits.size();
    auto out = detail::make_result<S>(Shape{}, {logits});
    double total = 0;
    for (i64 i = 0; i < n; ++i) {
        const double x = static_cast<double>(logits.data()[i]);
        const double t = static_cast<double>(targets[static_cast<std::size_t>(i)]);
        total += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
    out->data[0] = static_cast<S>(total / static_cast<double>(n));
    if (out->requires_grad) {
        auto xn = logits.ptr();
        out->backward = [xn, targets, n](const TensorNode<S>&, const std::vector<S>& g, Grads<S>& gr) {
            auto& gx = gr.of(xn.get());
            for (i64 i = 0; i < n; ++i) {
                const S p = S(1) / (S(1) + std::exp(-xn->data[i]));
                gx[i] += g[0] * (p - targets[static_cast<std::size_t>(i)]) / static_cast<S>(n);
            }
        };
    }
    return Tensor<S>(out);
}

/// Soft dice loss 1 - 2|p∩g| / (|p|+|g|) with p = sigmoid(logits).
/// Both-empty is defined as 0.
template <class S>
Tensor<S> soft_dice_loss(const Tensor<S>& logits, const std::vector<S>& targets) {
    if (static_cast<i64>(targets.size()) != logits.size())
        throw std::invalid_argument("dice: target size mismatch");
    const i64 n = logits.size();
    auto out = detail::make_result<S>(Shape{}, {logits});
    std::vector<S> p(static_cast<std::size_t>(n));
    double inter = 0, uni = 0;
    for (i64 i = 0; i < n; ++i) {
        p[static_cast<std::size_t>(i)] = S(1) / (S(1) + std::exp(-logits.data()[i]));
        inter += static_cast<double>(p[static_cast<std::size_t>(i)]) * static_cast<double>(targets[static_cast<std::size_t>(i)]);
        uni += static_cast<double>(p[static_cast<std::size_t>(i)]) + static_cast<double>(targets[static_cast<std::size_t>(i)]);
    }
    out->data[0] = static_cast<S>(uni > 0 ? 1.0 - 2.0 * inter / uni : 0.0);
    if (out->requires_grad) {
        auto xn = logits.ptr();
        out->backward = [xn, targets, p = std::move(p), inter, uni, n](const TensorNode<S>&, const std::vector<S>& g,
                                                                      Grads<S>& gr) {
            if (uni <= 0) return;
            auto& gx = gr.of(xn.get());
            for (i64 i = 0; i < n; ++i) {
                const double pi = static_cast<double>(p[static_cast<std::size_t>(i)]);
                const double ti = static_cast<double>(targets[static_cast<std::size_t>(i)]);
                const double dLdp = -2.0 * ti / uni + 2.0 * inter / (uni * uni);
                gx[i] += g[0] * static_cast<S>(dLdp * pi * (1.0 - pi));
            }
        };
    }
    return Tensor<S>(out);
}

// ---- matching (no gradients flow through the assignment) ----

/// Nearest-neighbor downsample of a full-resolution binary mask to the
/// stride grid (pixel centers).
template <class S>
std::vector<S> mask_at_stride(const std::uint8_t* mask, i64 H, i64 W, i64 h, i64 w) {
    std::vector<S> out(static_cast<std::size_t>(h * w));
    const i64 sy = H / h, sx = W / w;
    for (i64 i = 0; i < h; ++i)
        for (i64 j = 0; j < w; ++j) {
            const i64 y = std::min(i * sy + sy / 2, H - 1);
            const i64 x = std::min(j * sx + sx / 2, W - 1);
            out[static_cast<std::size_t>(i * w + j)] = static_cast<S>(mask[y * W + x]);
        }
    return out;
}

namespace detail {

inline double bce_scalar(double x, double t) {
    return std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
}

// lambda-weighted matching cost between one predicted mask-logit volume and
// one binary target volume, plus the class probability term
template <class S>
double pair_cost(const S* logits, const S* target, i64 n, double p_class, const LossWeights& w) {
    double bce = 0, inter = 0, uni = 0;
    for (i64 i = 0; i < n; ++i) {
        const double x = static_cast<double>(logits[i]);
        const double t = static_cast<double>(target[i]);
        bce += bce_scalar(x, t);
        const double p = 1.0 / (1.0 + std::exp(-x));
        inter += p * t;
        uni += p + t;
    }
    bce /= static_cast<double>(n);
    const double dice = uni > 0 ? 1.0 - 2.0 * inter / uni : 0.0;
    return w.lambda_cls * (-p_class) + w.lambda_ce * bce + w.lambda_dice * dice;
}

template <class S>
std::vector<double> row_softmax(const S* row, i64 k) {
    std::vector<double> p(static_cast<std::size_t>(k));
    double mx = static_cast<double>(row[0]);
    for (i64 j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0;
    for (i64 j = 0; j < k; ++j) {
        p[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(row[j]) - mx);
        denom += p[static_cast<std::size_t>(j)];
    }
    for (auto& v : p) v /= denom;
    return p;
}

}  // namespace detail

struct MatchResult {
    Assignment assignment;             // prediction -> gt index
    std::vector<int> gt_of_query;      // -1 when unmatched
};

/// Temporally extended matching cost over the stride-resolution volume:
/// lambda_cls * (-p[class]) + lambda_ce * BCE + lambda_dice * Dice.
/// `stride_targets[j]` is gt tracklet j downsampled, [T*h*w].
template <class S>
std::vector<double> matching_cost(const Tensor<S>& class_logits, const Tensor<S>& mask_logits_stride_rows,
                                  const std::vector<std::vector<S>>& stride_targets,
                                  const std::vector<int>& gt_categories, const LossWeights& w) {
    const i64 n = class_logits.shape()[0];
    const i64 k1 = class_logits.shape()[1];
    const i64 g = static_cast<i64>(stride_targets.size());
    if (g > n)
        throw std::invalid_argument("matching_cost: more ground truths (" + std::to_string(g) +
                                    ") than predictions (" + std::to_string(n) + ")");
    const i64 vol = g > 0 ? static_cast<i64>(stride_targets[0].size()) : 0;
    std::vector<double> cost(static_cast<std::size_t>(n * g));
    for (i64 i = 0; i < n; ++i) {
        const auto probs = detail::row_softmax(class_logits.data().data() + i * k1, k1);
        for (i64 j = 0; j < g; ++j) {
            cost[static_cast<std::size_t>(i * g + j)] = detail::pair_cost(
                mask_logits_stride_rows.data().data() + i * vol, stride_targets[static_cast<std::size_t>(j)].data(),
                vol, probs[static_cast<std::size_t>(gt_categories[static_cast<std::size_t>(j)])], w);
        }
    }
    return cost;
}

inline MatchResult run_matching(const std::vector<double>& cost, int n, int g) {
    MatchResult r;
    r.assignment = hungarian(cost, n, g);
    r.gt_of_query.assign(static_cast<std::size_t>(n), -1);
    for (auto [i, j] : r.assignment.pairs) r.gt_of_query[static_cast<std::size_t>(i)] = j;
    return r;
}

// ---- frame-level loss ----

template <class S>
struct FrameLossResult {
    Tensor<S> loss;
    // last-layer per-frame matches: (frame, query, gt tracklet index)
    std::vector<std::array<i64, 3>> matches;
};

/// Set-prediction loss for the frame detector, deep-supervised over the
/// retained decoder layers. Matching and mask costs run at stride
/// resolution; the loss itself runs at full resolution.
template <class S>
FrameLossResult<S> frame_loss(const FrameDetector<S>& detector, const FrameQuerySet<S>& queries,
                              const PixelEmbeddingMap<S>& pixels, const VideoGroundTruth& gt,
                              const LossWeights& w) {
    const auto& es = pixels.embeddings.shape();
    const i64 T = es[0], h = es[2], wd = es[3];
    const i64 H = gt.H, W = gt.W;
    FrameLossResult<S> out;

    // per-frame gt views: instances visible at t
    std::vector<std::vector<int>> visible(static_cast<std::size_t>(T));
    for (i64 t = 0; t < T; ++t)
        for (std::size_t j = 0; j < gt.tracklets.size(); ++j)
            if (gt.present_at(j, t)) visible[static_cast<std::size_t>(t)].push_back(static_cast<int>(j));

    std::vector<Tensor<S>> layer_losses;
    for (std::size_t layer = 0; layer < queries.per_layer.size(); ++layer) {
        FramePrediction<S> pred = detector.predict_frame(queries.per_layer[layer], pixels);
        const i64 n_f = pred.class_logits.shape()[1];
        const i64 k1 = pred.class_logits.shape()[2];
        Tensor<S> mask_rows = reshape(pred.mask_logits_stride, {T * n_f, h, wd});

        std::vector<int> targets(static_cast<std::size_t>(T * n_f), static_cast<int>(k1 - 1));
        std::vector<i64> matched_rows;
        std::vector<std::vector<S>> matched_gt_full;
        const bool last_layer = layer + 1 == queries.per_layer.size();

        for (i64 t = 0; t < T; ++t) {
            const auto& vis = visible[static_cast<std::size_t>(t)];
            if (static_cast<i64>(vis.size()) > n_f)
                throw std::invalid_argument("frame_loss: frame " + std::to_string(t) + " has " +
                                            std::to_string(vis.size()) + " instances but only " +
                                            std::to_string(n_f) + " frame queries");
            if (vis.empty()) continue;
            std::vector<std::vector<S>> stride_targets;
            std::vector<int> cats;
            for (int j : vis) {
                stride_targets.push_back(
                    mask_at_stride<S>(gt.tracklets[static_cast<std::size_t>(j)].masks.data() + t * H * W, H, W, h, wd));
                cats.push_back(gt.tracklets[static_cast<std::size_t>(j)].category);
            }
            Tensor<S> frame_logits = slice_rows(pred.class_logits, t, 1);  // [1, N_f, K+1]
            Tensor<S> cls = reshape(frame_logits, {n_f, k1});
            Tensor<S> mrows = reshape(slice_rows(pred.mask_logits_stride, t, 1), {n_f, h, wd});
            const auto cost = matching_cost(cls, mrows, stride_targets, cats, w);
            MatchResult m = run_matching(cost, static_cast<int>(n_f), static_cast<int>(vis.size()));
            for (auto [qi, gj] : m.assignment.pairs) {
                const int tracklet = vis[static_cast<std::size_t>(gj)];
                targets[static_cast<std::size_t>(t * n_f + qi)] =
                    gt.tracklets[static_cast<std::size_t>(tracklet)].category;
                matched_rows.push_back(t * n_f + qi);
                std::vector<S> full(static_cast<std::size_t>(H * W));
                const std::uint8_t* src = gt.tracklets[static_cast<std::size_t>(tracklet)].masks.data() + t * H * W;
                for (i64 p = 0; p < H * W; ++p) full[static_cast<std::size_t>(p)] = static_cast<S>(src[p]);
                matched_gt_full.push_back(std::move(full));
                if (last_layer) out.matches.push_back({t, qi, tracklet});
            }
        }

        std::vector<double> class_weights(static_cast<std::size_t>(k1), 1.0);
        class_weights.back() = w.no_object_weight;
        Tensor<S> l_cls = softmax_cross_entropy(reshape(pred.class_logits, {T * n_f, k1}), targets, class_weights);
        Tensor<S> layer_loss = scale(l_cls, static_cast<S>(w.lambda_cls));
        if (!matched_rows.empty()) {
            Tensor<S> rows = gather_rows(mask_rows, matched_rows);      // [P, h, w]
            Tensor<S> up = bilinear_upsample(rows, H, W);               // [P, H, W]
            std::vector<S> flat_targets;
            for (const auto& m : matched_gt_full) flat_targets.insert(flat_targets.end(), m.begin(), m.end());
            Tensor<S> l_ce = bce_with_logits_mean(up, flat_targets);
            Tensor<S> l_dice = Tensor<S>::scalar(0);
            for (std::size_t p = 0; p < matched_rows.size(); ++p) {
                Tensor<S> one = slice_rows(up, static_cast<i64>(p), 1);
                l_dice = add(l_dice, soft_dice_loss(one, matched_gt_full[p]));
            }
            l_dice = scale(l_dice, S(1) / static_cast<S>(matched_rows.size()));
            layer_loss = add(layer_loss, add(scale(l_ce, static_cast<S>(w.lambda_ce)),
                                             scale(l_dice, static_cast<S>(w.lambda_dice))));
        }
        layer_losses.push_back(layer_loss);
    }
    Tensor<S> total = layer_losses[0];
    for (std::size_t i = 1; i < layer_losses.size(); ++i) total = add(total, layer_losses[i]);
    out.loss = scale(total, S(1) / static_cast<S>(layer_losses.size()));
    return out;
}

// ---- video-level loss ----

template <class S>
struct VideoLossResult {
    Tensor<S> loss;
    std::vector<std::pair<i64, int>> matches;  // (video query, gt tracklet), last layer
};

template <class S>
VideoLossResult<S> video_loss(const ObjectDecoder<S>& decoder, const VideoQuerySet<S>& video_queries,
                              const PixelEmbeddingMap<S>& pixels, const VideoGroundTruth& gt,
                              const LossWeights& w) {
    const auto& es = pixels.embeddings.shape();
    const i64 T = es[0], h = es[2], wd = es[3];
    const i64 H = gt.H, W = gt.W;
    const i64 g = static_cast<i64>(gt.tracklets.size());

    // stride-resolution target volumes, [T*h*w] per tracklet
    std::vector<std::vector<S>> stride_targets;
    std::vector<int> cats;
    for (const auto& tr : gt.tracklets) {
        std::vector<S> vol;
        vol.reserve(static_cast<std::size_t>(T * h * wd));
        for (i64 t = 0; t < T; ++t) {
            auto f = mask_at_stride<S>(tr.masks.data() + t * H * W, H, W, h, wd);
            vol.insert(vol.end(), f.begin(), f.end());
        }
        stride_targets.push_back(std::move(vol));
        cats.push_back(tr.category);
    }

    VideoLossResult<S> out;
    std::vector<Tensor<S>> layer_losses;
    for (std::size_t layer = 0; layer < video_queries.per_layer.size(); ++layer) {
        VideoPrediction<S> pred = decoder.predict(video_queries.per_layer[layer], pixels);
        const i64 n_v = pred.class_logits.shape()[0];
        const i64 k1 = pred.class_logits.shape()[1];
        if (g > n_v)
            throw std::invalid_argument("video_loss: " + std::to_string(g) + " tracklets exceed " +
                                        std::to_string(n_v) + " video queries");
        // mask volume per query: [N_v, T*h*w]
        Tensor<S> vols = reshape(permute(pred.mask_logits_stride, {1, 0, 2, 3}), {n_v, T * h * wd});
        MatchResult m;
        if (g > 0) {
            const auto cost = matching_cost(pred.class_logits, vols, stride_targets, cats, w);
            m = run_matching(cost, static_cast<int>(n_v), static_cast<int>(g));
        } else {
            m.gt_of_query.assign(static_cast<std::size_t>(n_v), -1);
        }
        const bool last_layer = layer + 1 == video_queries.per_layer.size();

        std::vector<int> targets(static_cast<std::size_t>(n_v), static_cast<int>(k1 - 1));
        for (auto [qi, gj] : m.assignment.pairs) {
            targets[static_cast<std::size_t>(qi)] = cats[static_cast<std::size_t>(gj)];
            if (last_layer) out.matches.emplace_back(qi, gj);
        }
        std::vector<double> class_weights(static_cast<std::size_t>(k1), 1.0);
        class_weights.back() = w.no_object_weight;
        Tensor<S> layer_loss =
            scale(softmax_cross_entropy(pred.class_logits, targets, class_weights), static_cast<S>(w.lambda_cls));

        if (!m.assignment.pairs.empty()) {
            // full-resolution volumes only for matched queries
            std::vector<Tensor<S>> bce_parts;
            Tensor<S> l_dice = Tensor<S>::scalar(0);
            std::vector<S> flat_targets;
            Tensor<S> mask_rows = reshape(pred.mask_logits_stride, {T * n_v, h, wd});
            for (auto [qi, gj] : m.assignment.pairs) {
                std::vector<i64> rows;
                for (i64 t = 0; t < T; ++t) rows.push_back(t * n_v + qi);
                Tensor<S> vol = bilinear_upsample(gather_rows(mask_rows, rows), H, W);  // [T, H, W]
                const auto& tr = gt.tracklets[static_cast<std::size_t>(gj)];
                std::vector<S> full(tr.masks.begin(), tr.masks.end());
                l_dice = add(l_dice, soft_dice_loss(vol, full));
                bce_parts.push_back(vol);
                flat_targets.insert(flat_targets.end(), full.begin(), full.end());
            }
            Tensor<S> all = concat_rows(bce_parts);
            Tensor<S> l_ce = bce_with_logits_mean(all, flat_targets);
            l_dice = scale(l_dice, S(1) / static_cast<S>(m.assignment.pairs.size()));
            layer_loss = add(layer_loss, add(scale(l_ce, static_cast<S>(w.lambda_ce)),
                                             scale(l_dice, static_cast<S>(w.lambda_dice))));
        }
        layer_losses.push_back(layer_loss);
    }
    Tensor<S> total = layer_losses[0];
    for (std::size_t i = 1; i < layer_losses.size(); ++i) total = add(total, layer_losses[i]);
    out.loss = scale(total, S(1) / static_cast<S>(layer_losses.size()));
    return out;
}

// ---- similarity loss ----

template <class S>
struct SimilarityHead {
    LinearLayer<S> video_embed, frame_embed;
    bool shared = true;
    void init(ParameterStore<S>& ps, const ModelConfig& cfg, bool shared_embed, Rng& rng) {
        shared = shared_embed;
        video_embed.init(ps, "sim/embed", cfg.channels, cfg.channels, rng);
        if (!shared) frame_embed.init(ps, "sim/frame_embed", cfg.channels, cfg.channels, rng);
    }
    const LinearLayer<S>& for_frames() const { return shared ? video_embed : frame_embed; }
};

template <class S>
struct SimilarityResult {
    Tensor<S> loss;
    bool skipped = false;  // no matched pair on one side
};

/// Pairwise dot products between embedded matched video queries and embedded
/// matched frame queries; binary cross entropy toward identity agreement.
template <class S>
SimilarityResult<S> similarity_loss(const SimilarityHead<S>& head, const Tensor<S>& decoded_video_queries,
                                    const std::vector<std::pair<i64, int>>& video_matches,
                                    const Tensor<S>& frame_queries,  // [T, N_f, C]
                                    const std::vector<std::array<i64, 3>>& frame_matches,
                                    const VideoGroundTruth& gt) {
    SimilarityResult<S> out;
    if (video_matches.empty() || frame_matches.empty()) {
        out.loss = Tensor<S>::scalar(0);
        out.skipped = true;
        return out;
    }
    const auto& qs = frame_queries.shape();
    const i64 n_f = qs[1], c = qs[2];
    std::vector<i64> vrows, frows;
    std::vector<int> vids, fids;
    for (auto [qi, gj] : video_matches) {
        vrows.push_back(qi);
        vids.push_back(gt.tracklets[static_cast<std::size_t>(gj)].instance_id);
    }
    for (const auto& fm : frame_matches) {
        frows.push_back(fm[0] * n_f + fm[1]);
        fids.push_back(gt.tracklets[static_cast<std::size_t>(fm[2])].instance_id);
    }
    Tensor<S> ev = head.video_embed.forward(gather_rows(decoded_video_queries, vrows));
    Tensor<S> ef = head.for_frames().forward(gather_rows(reshape(frame_queries, {qs[0] * n_f, c}), frows));
    Tensor<S> logits = matmul(ev, permute(ef, {1, 0}));  // [Mv, Mf]
    std::vector<S> targets;
    targets.reserve(vids.size() * fids.size());
    for (int vi : vids)
        for (int fi : fids) targets.push_back(vi == fi ? S(1) : S(0));
    out.loss = bce_with_logits_mean(logits, targets);
    return out;
}

/// L_total = lambda_v * L_v + lambda_f * L_f + lambda_sim * L_sim.
template <class S>
Tensor<S> total_loss(const Tensor<S>& l_v, const Tensor<S>& l_f, const Tensor<S>& l_sim, const LossWeights& w) {
    return add(add(scale(l_v, static_cast<S>(w.lambda_v)), scale(l_f, static_cast<S>(w.lambda_f))),
               scale(l_sim, static_cast<S>(w.lambda_sim)));
}

}  // namespace vita
