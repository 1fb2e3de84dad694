#pragma once

#include "vitkit/pipeline.hpp"

namespace vita {

struct StIou {
    double iou = 0.0;
    bool both_empty = false;
};

/// Spatio-temporal IoU: sum_t |a_t ∩ b_t| / sum_t |a_t ∪ b_t|.
StIou spatiotemporal_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);

struct ApResult {
    double ap = 0.0;    // mean over thresholds 0.50:0.05:0.95 and categories
    double ap50 = 0.0;
    double ap75 = 0.0;
    double ar10 = 0.0;  // average recall, at most 10 predictions per video
    std::vector<double> per_category;  // indexed by category, NaN when absent from gt
};

/// COCO-style video AP over spatio-temporal IoU, 101-point interpolation,
/// greedy highest-score-first matching, each gt used once per threshold.
ApResult video_ap(const std::vector<std::vector<TrackletPrediction>>& preds,
                  const std::vector<const VideoGroundTruth*>& gts, int categories);

/// Frames where a gt tracklet's best-overlapping prediction index differs
/// from the previous matched frame's, summed over tracklets.
int id_switch_count(const std::vector<TrackletPrediction>& preds, const VideoGroundTruth& gt);

struct MemoryReport {
    i64 backbone_per_frame = 0;     // stride-S pixel embedding floats for one frame
    i64 retained_tokens = 0;        // kept object-token floats across the video
    i64 retained_embeddings = 0;    // pixel-embedding floats across the video
    i64 encoder_workspace = 0;      // largest window attention matrix, floats
    i64 decoder_keys = 0;           // sum_t kept(t)
    i64 dense_counterfactual_keys = 0;  // T * (H/S) * (W/S)
    i64 retained_total() const { return retained_tokens + retained_embeddings; }
};

MemoryReport memory_report(const ModelConfig& cfg, i64 T, i64 H, i64 W, double r);

/// Largest T whose decoder key floats fit the budget.
i64 max_frames_under_budget(i64 budget_floats, i64 keys_per_frame, i64 channels);

enum class StitchMethod { greedy, hungarian };

/// Associates new-clip tracklets (columns) to running tracklets (rows) given
/// the shared-frame IoU matrix [n_running, n_new]. Greedy repeatedly takes
/// the global best pair; hungarian solves (1 - IoU) optimally. Pairs below
/// min_iou stay unmatched. Returns the running index per new tracklet, -1
/// when it opens a new identity.
std::vector<int> stitch_associate(const std::vector<double>& iou, std::size_t n_running, std::size_t n_new,
                                  StitchMethod method, double min_iou = 0.1);

// ---- tracklet output file: one JSON object per line ----

void save_tracklets(const std::string& path, int video_id, const std::vector<TrackletPrediction>& tracklets,
                    i64 T, i64 H, i64 W);
/// Appends records to per-video buckets keyed by the stored video id.
std::map<int, std::vector<TrackletPrediction>> load_tracklets(const std::string& path, i64 T, i64 H, i64 W);

namespace detail {

inline double frame_iou(const std::uint8_t* a, const std::uint8_t* b, i64 n) {
    i64 inter = 0, uni = 0;
    for (i64 i = 0; i < n; ++i) {
        inter += (a[i] & b[i]);
        uni += (a[i] | b[i]);
    }
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

}  // namespace detail

/// Splits the video into length-L clips overlapping by one frame, infers each
/// clip complete-offline, and stitches tracklets by mask IoU on the shared
/// frame. Pairs below IoU 0.1 open a new identity instead of merging.
template <class S>
std::vector<TrackletPrediction> clip_stitch(VitaModel<S>& model, const Tensor<S>& frames, i64 clip_len,
                                            StitchMethod method, const EvalConfig& ev) {
    if (clip_len < 2) throw std::invalid_argument("clip_stitch: clip length must be >= 2");
    const auto& sh = frames.shape();
    const i64 T = sh[0], H = sh[2], W = sh[3];
    if (clip_len >= T) return model.infer_video(frames, ev).tracklets;

    struct Running {
        int category = 0;
        std::vector<double> clip_scores;
        std::vector<std::uint8_t> masks;  // [T*H*W]
    };
    std::vector<Running> running;
    const i64 fsz = H * W;

    i64 s = 0;
    bool first = true;
    while (true) {
        const i64 e = std::min(s + clip_len, T);
        Tensor<S> clip = slice_rows(frames, s, e - s).detach();
        auto preds = model.infer_clip(clip, ev);
        if (first) {
            for (const auto& p : preds) {
                Running r;
                r.category = p.category;
                r.clip_scores.push_back(p.score);
                r.masks.assign(static_cast<std::size_t>(T * fsz), 0);
                std::copy(p.masks.begin(), p.masks.end(), r.masks.begin() + s * fsz);
                running.push_back(std::move(r));
            }
            first = false;
        } else {
            // IoU on the shared frame s between running tracklets and new clip tracklets
            const std::size_t nr = running.size(), np = preds.size();
            std::vector<double> iou(nr * np, 0.0);
            for (std::size_t i = 0; i < nr; ++i)
                for (std::size_t j = 0; j < np; ++j)
                    iou[i * np + j] =
                        detail::frame_iou(running[i].masks.data() + s * fsz, preds[j].masks.data(), fsz);

            const std::vector<int> match_of_pred = stitch_associate(iou, nr, np, method);
            for (std::size_t j = 0; j < np; ++j) {
                if (match_of_pred[j] >= 0) {
                    Running& r = running[static_cast<std::size_t>(match_of_pred[j])];
                    r.clip_scores.push_back(preds[j].score);
                    // the shared frame keeps the earlier clip's mask
                    std::copy(preds[j].masks.begin() + fsz, preds[j].masks.end(), r.masks.begin() + (s + 1) * fsz);
                } else {
                    Running r;
                    r.category = preds[j].category;
                    r.clip_scores.push_back(preds[j].score);
                    r.masks.assign(static_cast<std::size_t>(T * fsz), 0);
                    std::copy(preds[j].masks.begin(), preds[j].masks.end(), r.masks.begin() + s * fsz);
                    running.push_back(std::move(r));
                }
            }
        }
        if (e == T) break;
        s = e - 1;
    }

    std::vector<TrackletPrediction> out;
    for (auto& r : running) {
        TrackletPrediction tp;
        tp.category = r.category;
        double sum = 0;
        for (double v : r.clip_scores) sum += v;
        tp.score = sum / static_cast<double>(r.clip_scores.size());
        tp.masks = std::move(r.masks);
        out.push_back(std::move(tp));
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const TrackletPrediction& a, const TrackletPrediction& b) { return a.score > b.score; });
    return out;
}

}  // namespace vita
