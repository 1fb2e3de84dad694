#pragma once

#include "vitkit/losses.hpp"
#include "vitkit/synthetic.hpp"

namespace vita {

template <class S>
struct ClipLosses {
    Tensor<S> total, l_v, l_f, l_sim;
    bool sim_skipped = false;
};

struct StepStats {
    double total = 0, l_v = 0, l_f = 0, l_sim = 0;
};

template <class S>
struct InferenceResult {
    std::vector<TrackletPrediction> tracklets;
    i64 retained_elements = 0;  // tokens + pixel embeddings carried between passes
    i64 peak_elements = 0;      // high-water mark during the call
};

/// Flips requires_grad off for every parameter for the guard's lifetime, so
/// inference never retains a backward graph.
template <class S>
class NoGradGuard {
public:
    explicit NoGradGuard(ParameterStore<S>& ps) : ps_(ps) {
        for (const auto& name : ps.names()) {
            was_.push_back(ps.at(name).requires_grad());
            ps.at(name).set_requires_grad(false);
        }
    }
    ~NoGradGuard() {
        std::size_t i = 0;
        for (const auto& name : ps_.names()) ps_.at(name).set_requires_grad(was_[i++]);
    }

private:
    ParameterStore<S>& ps_;
    std::vector<bool> was_;
};

/// Detector + object encoder + object decoder + similarity head over one
/// shared parameter store.
template <class S>
class VitaModel {
public:
    VitaModel(const ExperimentConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
        Rng rng(init_seed);
        detector_ = std::make_unique<FrameDetector<S>>(cfg.model, params_, rng);
        encoder_ = std::make_unique<ObjectEncoder<S>>(cfg.model, params_, rng);
        decoder_ = std::make_unique<ObjectDecoder<S>>(cfg.model, params_, rng);
        sim_.init(params_, cfg.model, cfg.loss.shared_sim_embed, rng);
    }

    ParameterStore<S>& params() { return params_; }
    const ExperimentConfig& config() const { return cfg_; }
    FrameDetector<S>& detector() { return *detector_; }
    ObjectEncoder<S>& encoder() { return *encoder_; }
    ObjectDecoder<S>& decoder() { return *decoder_; }
    SimilarityHead<S>& similarity_head() { return sim_; }

    /// requires_grad <- pred(name); frozen parameters are skipped by AdamW.
    void set_trainable(const std::function<bool(const std::string&)>& pred) {
        for (const auto& name : params_.names()) params_.at(name).set_requires_grad(pred(name));
    }
    void freeze_detector() {
        set_trainable([](const std::string& n) { return n.rfind("detector/", 0) != 0; });
    }

    ClipLosses<S> forward_clip(const SyntheticVideo& video) const {
        Tensor<S> frames = video.frames.template cast<S>();
        auto feats = detector_->extract_features(frames);
        auto fq = detector_->decode_frame_queries(feats);
        auto fl = frame_loss(*detector_, fq, feats, video.gt, cfg_.loss);
        auto tokens = encoder_->tokenize(fq);
        auto enc = encoder_->forward(tokens);
        auto vq = decoder_->forward(enc);
        auto vl = video_loss(*decoder_, vq, feats, video.gt, cfg_.loss);
        auto sim = similarity_loss(sim_, vq.decoded, vl.matches, fq.queries, fl.matches, video.gt);
        ClipLosses<S> out;
        out.l_v = vl.loss;
        out.l_f = fl.loss;
        out.l_sim = sim.loss;
        out.sim_skipped = sim.skipped;
        out.total = total_loss(vl.loss, fl.loss, sim.loss, cfg_.loss);
        return out;
    }

    /// Frame-level loss only (detector pretraining).
    Tensor<S> forward_detector_only(const SyntheticVideo& video) const {
        Tensor<S> frames = video.frames.template cast<S>();
        auto feats = detector_->extract_features(frames);
        auto fq = detector_->decode_frame_queries(feats);
        return frame_loss(*detector_, fq, feats, video.gt, cfg_.loss).loss;
    }

    /// One optimizer step over a batch of clips. Gradients are averaged in
    /// batch order so repeated runs are bit-identical.
    StepStats train_batch(const std::vector<const SyntheticVideo*>& batch, const AdamWConfig& opt,
                          bool detector_only = false) {
        Grads<S> acc;
        StepStats stats;
        const S inv = S(1) / static_cast<S>(batch.size());
        // fold each clip's gradients into per-parameter accumulators; the
        // clip's graph (and its intermediate nodes) dies before the next one
        auto fold = [&](const Grads<S>& g) {
            for (const auto& name : params_.names()) {
                const Tensor<S>& p = params_.at(name);
                if (!p.requires_grad()) continue;
                auto& dst = acc.of(p.node());
                if (!g.has(p.node())) continue;
                const auto& src = g.at(p.node());
                for (std::size_t i = 0; i < src.size(); ++i) dst[i] += inv * src[i];
            }
        };
        for (const SyntheticVideo* clip : batch) {
            if (detector_only) {
                Tensor<S> loss = forward_detector_only(*clip);
                fold(backward(loss));
                stats.l_f += static_cast<double>(loss.item()) / batch.size();
                stats.total += static_cast<double>(loss.item()) / batch.size();
            } else {
                ClipLosses<S> losses = forward_clip(*clip);
                fold(backward(losses.total));
                stats.total += static_cast<double>(losses.total.item()) / batch.size();
                stats.l_v += static_cast<double>(losses.l_v.item()) / batch.size();
                stats.l_f += static_cast<double>(losses.l_f.item()) / batch.size();
                stats.l_sim += static_cast<double>(losses.l_sim.item()) / batch.size();
            }
        }
        adamw_step(params_, acc, opt);
        return stats;
    }

    /// Complete-offline inference. Pass 1 walks the video frame by frame and
    /// keeps only (pruned) object tokens and the stride-resolution pixel
    /// embeddings; pass 2 runs the encoder/decoder once over the whole video.
    InferenceResult<S> infer_video(const Tensor<S>& frames, const EvalConfig& ev) {
        NoGradGuard<S> guard(params_);
        auto& meter = MemoryMeter::instance();
        meter.reset_peak();

        const auto& sh = frames.shape();
        const i64 T = sh[0], H = sh[2], W = sh[3];
        std::vector<Tensor<S>> kept_tokens, kept_pixels;
        ObjectTokenSet<S> all;
        all.frames = T;
        all.queries_per_frame = cfg_.model.frame_queries;
        for (i64 t = 0; t < T; ++t) {
            Tensor<S> frame = slice_rows(frames, t, 1).detach();
            auto feats = detector_->extract_features(frame);
            auto fq = detector_->decode_frame_queries(feats);
            auto pred = detector_->predict_frame(fq.queries, feats);
            auto tokens = encoder_->tokenize(fq);
            tokens = encoder_->prune(tokens, pred, ev.prune_ratio);
            kept_tokens.push_back(tokens.tokens.detach());
            kept_pixels.push_back(feats.embeddings.detach());
            for (i64 r = 0; r < tokens.tokens.shape()[0]; ++r) all.frame_index.push_back(t);
            all.keep_mask.insert(all.keep_mask.end(), tokens.keep_mask.begin(), tokens.keep_mask.end());
        }
        all.tokens = concat_rows(kept_tokens);
        PixelEmbeddingMap<S> pixels;
        pixels.embeddings = concat_rows(kept_pixels);
        pixels.stride = cfg_.model.stride;

        InferenceResult<S> out;
        out.retained_elements = all.tokens.size() + pixels.embeddings.size();

        auto enc = encoder_->forward(all);
        auto vq = decoder_->forward(enc);
        auto pred = decoder_->predict(vq.decoded, pixels);
        out.tracklets = select_tracklets(pred, T, H, W, ev);
        out.peak_elements = meter.peak();
        return out;
    }

    /// Near-online inference on one clip (used for clip stitching).
    std::vector<TrackletPrediction> infer_clip(const Tensor<S>& frames, const EvalConfig& ev) {
        return infer_video(frames, ev).tracklets;
    }

private:
    std::vector<TrackletPrediction> select_tracklets(const VideoPrediction<S>& pred, i64 T, i64 H, i64 W,
                                                     const EvalConfig& ev) const {
        const i64 n_v = pred.class_logits.shape()[0];
        const i64 k1 = pred.class_logits.shape()[1];
        std::vector<std::tuple<double, i64, int>> scored;  // (score, query, category)
        for (i64 i = 0; i < n_v; ++i) {
            const S* row = pred.class_probs.data().data() + i * k1;
            int best = 0;
            for (i64 j = 1; j < k1 - 1; ++j)
                if (row[j] > row[best]) best = static_cast<int>(j);
            const double score = static_cast<double>(row[best]);
            if (score >= ev.score_threshold) scored.emplace_back(score, i, best);
        }
        std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            return std::get<0>(a) > std::get<0>(b);
        });
        if (static_cast<int>(scored.size()) > ev.top_k) scored.resize(static_cast<std::size_t>(ev.top_k));

        const auto& ms = pred.mask_logits_stride.shape();  // [T, N_v, h, w]
        Tensor<S> rows = reshape(pred.mask_logits_stride, {ms[0] * ms[1], ms[2], ms[3]});
        std::vector<TrackletPrediction> out;
        for (const auto& [score, qi, cat] : scored) {
            std::vector<i64> idx;
            for (i64 t = 0; t < T; ++t) idx.push_back(t * ms[1] + qi);
            Tensor<S> vol = bilinear_upsample(gather_rows(rows, idx), H, W);  // [T, H, W]
            TrackletPrediction tp;
            tp.category = cat;
            tp.score = score;
            tp.masks.resize(static_cast<std::size_t>(T * H * W));
            for (i64 p = 0; p < vol.size(); ++p)
                tp.masks[static_cast<std::size_t>(p)] = vol.data()[p] > S(0) ? 1 : 0;
            out.push_back(std::move(tp));
        }
        return out;
    }

    ExperimentConfig cfg_;
    ParameterStore<S> params_;
    std::unique_ptr<FrameDetector<S>> detector_;
    std::unique_ptr<ObjectEncoder<S>> encoder_;
    std::unique_ptr<ObjectDecoder<S>> decoder_;
    SimilarityHead<S> sim_;
};

}  // namespace vita
