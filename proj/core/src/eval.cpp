#include "vitkit/eval.hpp"

#include <fstream>
#include <json.hpp>

namespace vita {

StIou spatiotemporal_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("spatiotemporal_iou: size mismatch " + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()));
    i64 inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += (a[i] & b[i]);
        uni += (a[i] | b[i]);
    }
    StIou r;
    r.both_empty = uni == 0;
    r.iou = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
    return r;
}

namespace {

double interpolated_ap(std::vector<char>& is_tp, i64 npos) {
    // precision/recall along the ranked list, then 101-point interpolation
    std::vector<double> prec, rec;
    i64 tp = 0, fp = 0;
    for (char t : is_tp) {
        t ? ++tp : ++fp;
        prec.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        rec.push_back(static_cast<double>(tp) / static_cast<double>(npos));
    }
    for (i64 i = static_cast<i64>(prec.size()) - 2; i >= 0; --i) prec[i] = std::max(prec[i], prec[i + 1]);
    double ap = 0;
    std::size_t k = 0;
    for (int r = 0; r <= 100; ++r) {
        const double target = r / 100.0;
        while (k < rec.size() && rec[k] < target) ++k;
        ap += k < prec.size() ? prec[k] : 0.0;
    }
    return ap / 101.0;
}

}  // namespace

ApResult video_ap(const std::vector<std::vector<TrackletPrediction>>& preds,
                  const std::vector<const VideoGroundTruth*>& gts, int categories) {
    if (preds.size() != gts.size()) throw std::invalid_argument("video_ap: prediction/gt video count mismatch");
    const int n_videos = static_cast<int>(gts.size());

    // st-IoU between every prediction and every same-category gt, per video
    struct Entry {
        double score;
        int video, pred;
    };
    ApResult out;
    out.per_category.assign(static_cast<std::size_t>(categories), std::numeric_limits<double>::quiet_NaN());
    std::vector<double> ap50s, ap75s, aps, ars;
    for (int c = 0; c < categories; ++c) {
        std::vector<Entry> ranked;
        i64 npos = 0;
        for (int v = 0; v < n_videos; ++v) {
            for (std::size_t p = 0; p < preds[static_cast<std::size_t>(v)].size(); ++p)
                if (preds[static_cast<std::size_t>(v)][p].category == c)
                    ranked.push_back({preds[static_cast<std::size_t>(v)][p].score, v, static_cast<int>(p)});
            for (const auto& t : gts[static_cast<std::size_t>(v)]->tracklets)
                if (t.category == c) ++npos;
        }
        if (npos == 0) continue;
        std::stable_sort(ranked.begin(), ranked.end(), [](const Entry& a, const Entry& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.video != b.video) return a.video < b.video;
            return a.pred < b.pred;
        });

        // cache st-IoU against same-category gts
        std::vector<std::vector<std::pair<int, double>>> ious(ranked.size());
        for (std::size_t r = 0; r < ranked.size(); ++r) {
            const auto& pr = preds[static_cast<std::size_t>(ranked[r].video)][static_cast<std::size_t>(ranked[r].pred)];
            const auto* gt = gts[static_cast<std::size_t>(ranked[r].video)];
            for (std::size_t g = 0; g < gt->tracklets.size(); ++g)
                if (gt->tracklets[g].category == c)
                    ious[r].emplace_back(static_cast<int>(g), spatiotemporal_iou(pr.masks, gt->tracklets[g].masks).iou);
        }

        double cat_ap = 0, cat_ar = 0;
        int n_thresh = 0;
        for (int ti = 0; ti < 10; ++ti) {
            const double tau = 0.50 + 0.05 * ti;
            std::vector<std::vector<char>> gt_used(static_cast<std::size_t>(n_videos));
            for (int v = 0; v < n_videos; ++v)
                gt_used[static_cast<std::size_t>(v)].assign(gts[static_cast<std::size_t>(v)]->tracklets.size(), 0);
            std::vector<char> is_tp(ranked.size(), 0);
            i64 matched = 0;
            for (std::size_t r = 0; r < ranked.size(); ++r) {
                int best_g = -1;
                double best_iou = tau;
                for (auto [g, iou] : ious[r]) {
                    if (gt_used[static_cast<std::size_t>(ranked[r].video)][static_cast<std::size_t>(g)]) continue;
                    if (iou >= best_iou) {
                        best_iou = iou;
                        best_g = g;
                    }
                }
                if (best_g >= 0) {
                    gt_used[static_cast<std::size_t>(ranked[r].video)][static_cast<std::size_t>(best_g)] = 1;
                    is_tp[r] = 1;
                    ++matched;
                }
            }
            const double ap = interpolated_ap(is_tp, npos);
            cat_ap += ap;
            cat_ar += static_cast<double>(matched) / static_cast<double>(npos);
            ++n_thresh;
            if (ti == 0) ap50s.push_back(ap);
            if (ti == 5) ap75s.push_back(ap);
        }
        out.per_category[static_cast<std::size_t>(c)] = cat_ap / n_thresh;
        aps.push_back(cat_ap / n_thresh);
        ars.push_back(cat_ar / n_thresh);
    }
    auto mean = [](const std::vector<double>& v) {
        if (v.empty()) return 0.0;
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    out.ap = mean(aps);
    out.ap50 = mean(ap50s);
    out.ap75 = mean(ap75s);
    out.ar10 = mean(ars);
    return out;
}

int id_switch_count(const std::vector<TrackletPrediction>& preds, const VideoGroundTruth& gt) {
    const i64 fsz = gt.H * gt.W;
    int switches = 0;
    for (std::size_t g = 0; g < gt.tracklets.size(); ++g) {
        int prev = -1;
        for (i64 t = 0; t < gt.T; ++t) {
            if (!gt.present_at(g, t)) continue;
            const std::uint8_t* gm = gt.tracklets[g].masks.data() + t * fsz;
            int best = -1;
            double best_iou = 0.0;
            for (std::size_t p = 0; p < preds.size(); ++p) {
                const double iou = detail::frame_iou(gm, preds[p].masks.data() + t * fsz, fsz);
                if (iou > best_iou) {
                    best_iou = iou;
                    best = static_cast<int>(p);
                }
            }
            if (best < 0) continue;  // nothing overlaps at this frame
            if (prev >= 0 && best != prev) ++switches;
            prev = best;
        }
    }
    return switches;
}

std::vector<int> stitch_associate(const std::vector<double>& iou, std::size_t n_running, std::size_t n_new,
                                  StitchMethod method, double min_iou) {
    if (iou.size() != n_running * n_new) throw std::invalid_argument("stitch_associate: IoU matrix size mismatch");
    std::vector<int> match_of_new(n_new, -1);
    if (n_running == 0 || n_new == 0) return match_of_new;
    if (method == StitchMethod::greedy) {
        std::vector<char> used_r(n_running, 0), used_n(n_new, 0);
        while (true) {
            double best = -1.0;
            int bi = -1, bj = -1;
            for (std::size_t i = 0; i < n_running; ++i) {
                if (used_r[i]) continue;
                for (std::size_t j = 0; j < n_new; ++j) {
                    if (used_n[j]) continue;
                    if (iou[i * n_new + j] > best) {
                        best = iou[i * n_new + j];
                        bi = static_cast<int>(i);
                        bj = static_cast<int>(j);
                    }
                }
            }
            if (bi < 0 || best < min_iou) break;
            used_r[static_cast<std::size_t>(bi)] = 1;
            used_n[static_cast<std::size_t>(bj)] = 1;
            match_of_new[static_cast<std::size_t>(bj)] = bi;
        }
    } else {
        // hungarian() needs gts <= predictions; orient so the smaller side
        // plays the gt role
        const bool new_as_rows = n_new >= n_running;
        const std::size_t n = new_as_rows ? n_new : n_running, g = new_as_rows ? n_running : n_new;
        std::vector<double> cost(n * g);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < g; ++j) {
                const double v = new_as_rows ? iou[j * n_new + i] : iou[i * n_new + j];
                cost[i * g + j] = 1.0 - v;
            }
        auto a = hungarian(cost, static_cast<int>(n), static_cast<int>(g));
        for (auto [i, j] : a.pairs) {
            const auto r = static_cast<std::size_t>(new_as_rows ? j : i);
            const auto p = static_cast<std::size_t>(new_as_rows ? i : j);
            if (iou[r * n_new + p] >= min_iou) match_of_new[p] = static_cast<int>(r);
        }
    }
    return match_of_new;
}

MemoryReport memory_report(const ModelConfig& cfg, i64 T, i64 H, i64 W, double r) {
    if (r <= 0.0 || r > 1.0) throw std::invalid_argument("memory_report: ratio must be in (0, 1]");
    MemoryReport m;
    const i64 h = H / cfg.stride, w = W / cfg.stride;
    const i64 kept = static_cast<i64>(std::ceil(r * static_cast<double>(cfg.frame_queries)));
    m.backbone_per_frame = cfg.channels * h * w;
    m.retained_tokens = T * kept * cfg.channels;
    m.retained_embeddings = T * cfg.channels * h * w;
    const i64 max_window = std::min<i64>(cfg.window, T) * kept;
    m.encoder_workspace = max_window * max_window;
    m.decoder_keys = T * kept;
    m.dense_counterfactual_keys = T * h * w;
    return m;
}

i64 max_frames_under_budget(i64 budget_floats, i64 keys_per_frame, i64 channels) {
    return budget_floats / (keys_per_frame * channels);
}

void save_tracklets(const std::string& path, int video_id, const std::vector<TrackletPrediction>& tracklets,
                    i64 T, i64 H, i64 W) {
    std::ofstream os(path, std::ios::app);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    for (const auto& t : tracklets) {
        nlohmann::json j;
        j["video"] = video_id;
        j["category"] = t.category;
        j["score"] = t.score;
        auto& frames = j["masks"] = nlohmann::json::array();
        for (i64 f = 0; f < T; ++f) {
            std::vector<std::uint8_t> m(t.masks.begin() + f * H * W, t.masks.begin() + (f + 1) * H * W);
            frames.push_back(rle_encode(m));
        }
        os << j.dump() << '\n';
    }
    if (!os) throw std::runtime_error("write failed for " + path);
}

std::map<int, std::vector<TrackletPrediction>> load_tracklets(const std::string& path, i64 T, i64 H, i64 W) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::map<int, std::vector<TrackletPrediction>> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        TrackletPrediction t;
        t.category = j.at("category").get<int>();
        t.score = j.at("score").get<double>();
        const auto& frames = j.at("masks");
        if (static_cast<i64>(frames.size()) != T)
            throw std::runtime_error("tracklet record has " + std::to_string(frames.size()) + " frames, expected " +
                                     std::to_string(T));
        t.masks.reserve(static_cast<std::size_t>(T * H * W));
        for (const auto& runs : frames) {
            auto m = rle_decode(runs.get<std::vector<std::uint32_t>>(), static_cast<std::size_t>(H * W));
            t.masks.insert(t.masks.end(), m.begin(), m.end());
        }
        out[j.at("video").get<int>()].push_back(std::move(t));
    }
    return out;
}

}  // namespace vita
