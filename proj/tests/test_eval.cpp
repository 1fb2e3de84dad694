#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "testcfg.hpp"
#include "vitkit/eval.hpp"

using namespace vita;

namespace {

// one tracklet whose frame-0 mask sets the first `on` pixels of an `n`-pixel
// frame, optionally shifted
std::vector<std::uint8_t> block_mask(std::size_t n, std::size_t on, std::size_t offset = 0) {
    std::vector<std::uint8_t> m(n, 0);
    for (std::size_t i = 0; i < on; ++i) m[offset + i] = 1;
    return m;
}

VideoGroundTruth one_gt(std::vector<std::uint8_t> mask, i64 t, i64 h, i64 w, int category = 0) {
    VideoGroundTruth gt;
    gt.T = t;
    gt.H = h;
    gt.W = w;
    GtInstance inst;
    inst.category = category;
    inst.instance_id = 1;
    inst.masks = std::move(mask);
    gt.tracklets.push_back(std::move(inst));
    return gt;
}

TrackletPrediction pred_of(std::vector<std::uint8_t> mask, double score, int category = 0) {
    TrackletPrediction p;
    p.category = category;
    p.score = score;
    p.masks = std::move(mask);
    return p;
}

}  // namespace

TEST_CASE("spatio-temporal IoU") {
    SUBCASE("identical masks") {
        auto m = block_mask(20, 7, 3);
        auto r = spatiotemporal_iou(m, m);
        CHECK(r.iou == 1.0);
        CHECK_FALSE(r.both_empty);
    }
    SUBCASE("disjoint masks") {
        CHECK(spatiotemporal_iou(block_mask(20, 5, 0), block_mask(20, 5, 10)).iou == 0.0);
    }
    SUBCASE("partial overlap against a pixel count") {
        // a = pixels [0,12), b = pixels [8,18): inter 4, union 18
        auto r = spatiotemporal_iou(block_mask(32, 12, 0), block_mask(32, 10, 8));
        CHECK(r.iou == doctest::Approx(4.0 / 18.0).epsilon(1e-12));
    }
    SUBCASE("both empty") {
        auto r = spatiotemporal_iou(block_mask(8, 0), block_mask(8, 0));
        CHECK(r.both_empty);
        CHECK(r.iou == 0.0);
    }
    SUBCASE("size mismatch rejected") {
        CHECK_THROWS_AS(spatiotemporal_iou(block_mask(8, 1), block_mask(9, 1)), std::invalid_argument);
    }
}

TEST_CASE("video average precision") {
    const i64 h = 10, w = 10;
    SUBCASE("perfect predictions give AP 1") {
        auto gt = one_gt(block_mask(100, 40), 1, h, w);
        std::vector<std::vector<TrackletPrediction>> preds{{pred_of(block_mask(100, 40), 0.9)}};
        auto r = video_ap(preds, {&gt}, 3);
        CHECK(r.ap == doctest::Approx(1.0));
        CHECK(r.ap50 == doctest::Approx(1.0));
        CHECK(r.ap75 == doctest::Approx(1.0));
        CHECK(r.ar10 == doctest::Approx(1.0));
        CHECK(r.per_category[0] == doctest::Approx(1.0));
        CHECK(std::isnan(r.per_category[1]));
    }
    SUBCASE("no predictions give AP 0") {
        auto gt = one_gt(block_mask(100, 40), 1, h, w);
        auto r = video_ap({{}}, {&gt}, 3);
        CHECK(r.ap == 0.0);
        CHECK(r.ar10 == 0.0);
    }
    SUBCASE("a higher-scored false positive halves AP50") {
        // gt = 100 pixels; tp: 90-pixel subset (IoU 0.9, score 0.8);
        // fp: 30-pixel subset (IoU 0.3, score 0.9) ranked first
        auto gt = one_gt(block_mask(400, 100), 1, 20, 20);
        std::vector<std::vector<TrackletPrediction>> preds{
            {pred_of(block_mask(400, 90), 0.8), pred_of(block_mask(400, 30), 0.9)}};
        auto r = video_ap(preds, {&gt}, 3);
        CHECK(r.ap50 == doctest::Approx(0.5).epsilon(1e-9));
    }
    SUBCASE("monotone rescaling of the scores changes nothing") {
        auto gt = one_gt(block_mask(400, 100), 1, 20, 20);
        std::vector<std::vector<TrackletPrediction>> a{
            {pred_of(block_mask(400, 90), 0.8), pred_of(block_mask(400, 30), 0.9)}};
        auto b = a;
        for (auto& p : b[0]) p.score = p.score * 0.1 + 0.05;
        auto ra = video_ap(a, {&gt}, 3);
        auto rb = video_ap(b, {&gt}, 3);
        CHECK(ra.ap == rb.ap);
        CHECK(ra.ap50 == rb.ap50);
        CHECK(ra.ar10 == rb.ar10);
    }
    SUBCASE("category confusion is a miss") {
        auto gt = one_gt(block_mask(100, 40), 1, h, w, /*category=*/1);
        std::vector<std::vector<TrackletPrediction>> preds{{pred_of(block_mask(100, 40), 0.9, /*category=*/0)}};
        auto r = video_ap(preds, {&gt}, 3);
        CHECK(r.ap == 0.0);
    }
    SUBCASE("video count mismatch rejected") {
        auto gt = one_gt(block_mask(100, 40), 1, h, w);
        CHECK_THROWS_AS(video_ap({}, {&gt}, 3), std::invalid_argument);
    }
}

TEST_CASE("identity switches") {
    const i64 T = 6, h = 4, w = 4, fsz = h * w;
    std::vector<std::uint8_t> gt_mask(static_cast<std::size_t>(T * fsz), 0);
    for (i64 t = 0; t < T; ++t)
        for (i64 p = 0; p < 8; ++p) gt_mask[static_cast<std::size_t>(t * fsz + p)] = 1;
    auto gt = one_gt(gt_mask, T, h, w);

    SUBCASE("one consistent prediction has zero switches") {
        CHECK(id_switch_count({pred_of(gt_mask, 0.9)}, gt) == 0);
    }
    SUBCASE("handover at frame 3 counts one switch") {
        std::vector<std::uint8_t> first(static_cast<std::size_t>(T * fsz), 0);
        std::vector<std::uint8_t> second(static_cast<std::size_t>(T * fsz), 0);
        for (i64 t = 0; t < T; ++t)
            for (i64 p = 0; p < 8; ++p)
                (t < 3 ? first : second)[static_cast<std::size_t>(t * fsz + p)] = 1;
        CHECK(id_switch_count({pred_of(first, 0.9), pred_of(second, 0.8)}, gt) == 1);
    }
    SUBCASE("frames with no overlapping prediction are skipped") {
        std::vector<std::uint8_t> sparse(static_cast<std::size_t>(T * fsz), 0);
        for (i64 t = 0; t < T; t += 2)
            for (i64 p = 0; p < 8; ++p) sparse[static_cast<std::size_t>(t * fsz + p)] = 1;
        CHECK(id_switch_count({pred_of(sparse, 0.9)}, gt) == 0);
    }
}

TEST_CASE("stitch association") {
    // greedy takes the global best IoU first; hungarian minimizes total cost
    const std::vector<double> iou{0.6, 0.5, 0.5, 0.1};
    auto g = stitch_associate(iou, 2, 2, StitchMethod::greedy);
    CHECK(g == std::vector<int>{0, 1});
    auto h = stitch_associate(iou, 2, 2, StitchMethod::hungarian);
    CHECK(h == std::vector<int>{1, 0});

    SUBCASE("pairs below the IoU floor open new identities") {
        auto r = stitch_associate({0.05}, 1, 1, StitchMethod::greedy);
        CHECK(r == std::vector<int>{-1});
        r = stitch_associate({0.05}, 1, 1, StitchMethod::hungarian);
        CHECK(r == std::vector<int>{-1});
    }
    SUBCASE("empty sides") {
        CHECK(stitch_associate({}, 0, 0, StitchMethod::greedy).empty());
        CHECK(stitch_associate({}, 0, 2, StitchMethod::hungarian) == std::vector<int>{-1, -1});
    }
}

TEST_CASE("memory report closed forms") {
    ModelConfig cfg;  // defaults: C=64, N_f=20, S=4, W=6
    SUBCASE("decoder keys are independent of resolution") {
        for (i64 res : {64, 128, 256}) CHECK(memory_report(cfg, 36, res, res, 1.0).decoder_keys == 720);
    }
    SUBCASE("pruning scales the key count exactly") {
        CHECK(memory_report(cfg, 36, 64, 64, 0.75).decoder_keys == 540);
    }
    SUBCASE("dense counterfactual keys grow with resolution") {
        CHECK(memory_report(cfg, 36, 64, 64, 1.0).dense_counterfactual_keys == 36 * 16 * 16);
        CHECK(memory_report(cfg, 36, 128, 128, 1.0).dense_counterfactual_keys == 36 * 32 * 32);
    }
    SUBCASE("budgeted frame counts") {
        CHECK(max_frames_under_budget(1000000, 20, 64) == 781);
        CHECK(max_frames_under_budget(1000000, 16 * 16, 64) == 61);
    }
    SUBCASE("invalid ratio rejected") {
        CHECK_THROWS_AS(memory_report(cfg, 6, 64, 64, 0.0), std::invalid_argument);
    }
}

TEST_CASE("inference retains exactly the closed-form float count") {
    ExperimentConfig cfg = vita::testing::tiny_experiment();
    VitaModel<float> model(cfg, 31);
    SceneSpec spec;
    spec.H = 32;
    spec.W = 32;
    spec.T = 4;
    spec.max_instances = 2;
    spec.seed = 3;
    SyntheticVideo v = generate_video(spec);

    EvalConfig ev;
    for (double r : {1.0, 0.6}) {
        ev.prune_ratio = r;
        auto res = model.infer_video(v.frames, ev);
        auto m = memory_report(cfg.model, 4, 32, 32, r);
        CHECK(res.retained_elements == m.retained_total());
        CHECK(res.peak_elements >= res.retained_elements);
    }
}

TEST_CASE("clip stitching with a clip covering the video equals direct inference") {
    ExperimentConfig cfg = vita::testing::tiny_experiment();
    VitaModel<float> model(cfg, 33);
    SceneSpec spec;
    spec.H = 32;
    spec.W = 32;
    spec.T = 3;
    spec.max_instances = 2;
    spec.seed = 4;
    SyntheticVideo v = generate_video(spec);
    EvalConfig ev;

    auto direct = model.infer_video(v.frames, ev).tracklets;
    auto stitched = clip_stitch(model, v.frames, 8, StitchMethod::greedy, ev);
    REQUIRE(stitched.size() == direct.size());
    for (std::size_t i = 0; i < direct.size(); ++i) {
        CHECK(stitched[i].category == direct[i].category);
        CHECK(stitched[i].score == direct[i].score);
        CHECK(stitched[i].masks == direct[i].masks);
    }

    SUBCASE("short clips produce full-length tracklets") {
        auto partial = clip_stitch(model, v.frames, 2, StitchMethod::hungarian, ev);
        for (const auto& p : partial) CHECK(p.masks.size() == static_cast<std::size_t>(3 * 32 * 32));
    }
    SUBCASE("clip length below two is rejected") {
        CHECK_THROWS_AS(clip_stitch(model, v.frames, 1, StitchMethod::greedy, ev), std::invalid_argument);
    }
}

TEST_CASE("tracklet files round trip") {
    const std::string path = "/tmp/vitkit_test_tracklets.jsonl";
    std::remove(path.c_str());
    const i64 T = 2, h = 4, w = 4;
    std::vector<TrackletPrediction> v0{pred_of(block_mask(32, 9, 5), 0.75, 1)};
    std::vector<TrackletPrediction> v1{pred_of(block_mask(32, 0), 0.25, 2), pred_of(block_mask(32, 32), 0.5, 0)};
    save_tracklets(path, 0, v0, T, h, w);
    save_tracklets(path, 1, v1, T, h, w);
    auto loaded = load_tracklets(path, T, h, w);
    std::remove(path.c_str());

    REQUIRE(loaded.size() == 2);
    REQUIRE(loaded[0].size() == 1);
    REQUIRE(loaded[1].size() == 2);
    CHECK(loaded[0][0].category == 1);
    CHECK(loaded[0][0].score == 0.75);
    CHECK(loaded[0][0].masks == v0[0].masks);
    CHECK(loaded[1][0].masks == v1[0].masks);
    CHECK(loaded[1][1].masks == v1[1].masks);
}
