#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "testcfg.hpp"
#include "vitkit/losses.hpp"
#include "vitkit/pipeline.hpp"

using namespace vita;
using vita::testing::tiny_experiment;
using vita::testing::tiny_model;

namespace {

Tensor<float> random_frames(Shape shape, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<float> d(0.f, 1.f);
    Tensor<float> t = Tensor<float>::zeros(std::move(shape));
    for (float& v : t.data()) v = d(rng);
    return t;
}

}  // namespace

TEST_CASE("feature map shape and finiteness") {
    SUBCASE("tiny config, zero input") {
        ModelConfig cfg = tiny_model();
        ParameterStore<float> ps;
        Rng rng(1);
        FrameDetector<float> det(cfg, ps, rng);
        auto map = det.extract_features(Tensor<float>::zeros({2, 3, 32, 32}));
        REQUIRE(map.embeddings.shape() == Shape{2, 16, 8, 8});
        for (float v : map.embeddings.data()) CHECK(std::isfinite(v));
    }
    SUBCASE("default config arithmetic") {
        ModelConfig cfg;
        ParameterStore<float> ps;
        Rng rng(1);
        FrameDetector<float> det(cfg, ps, rng);
        auto map = det.extract_features(Tensor<float>::zeros({6, 3, 64, 64}));
        CHECK(map.embeddings.shape() == Shape{6, 64, 16, 16});
        CHECK(map.stride == 4);
    }
    SUBCASE("non-divisible dims rejected") {
        ModelConfig cfg = tiny_model();
        ParameterStore<float> ps;
        Rng rng(1);
        FrameDetector<float> det(cfg, ps, rng);
        CHECK_THROWS_AS(det.extract_features(Tensor<float>::zeros({1, 3, 30, 32})), std::invalid_argument);
    }
}

TEST_CASE("frames are processed independently") {
    ModelConfig cfg = tiny_model();
    ParameterStore<float> ps;
    Rng rng(2);
    FrameDetector<float> det(cfg, ps, rng);

    Tensor<float> a = random_frames({2, 3, 32, 32}, 10);
    Tensor<float> b = a.detach();
    // perturb frame 1 only
    for (i64 i = 3 * 32 * 32; i < b.size(); ++i) b.data()[i] += 0.37f;

    auto fa = det.extract_features(a);
    auto fb = det.extract_features(b);
    auto qa = det.decode_frame_queries(fa);
    auto qb = det.decode_frame_queries(fb);
    auto pa = det.predict_frame(qa.queries, fa);
    auto pb = det.predict_frame(qb.queries, fb);

    const i64 emb0 = fa.embeddings.size() / 2;
    for (i64 i = 0; i < emb0; ++i) CHECK(fa.embeddings.data()[i] == fb.embeddings.data()[i]);
    const i64 q0 = qa.queries.size() / 2;
    for (i64 i = 0; i < q0; ++i) CHECK(qa.queries.data()[i] == qb.queries.data()[i]);
    const i64 c0 = pa.class_logits.size() / 2;
    bool frame1_differs = false;
    for (i64 i = 0; i < c0; ++i) CHECK(pa.class_logits.data()[i] == pb.class_logits.data()[i]);
    for (i64 i = c0; i < pa.class_logits.size(); ++i) frame1_differs |= pa.class_logits.data()[i] != pb.class_logits.data()[i];
    CHECK(frame1_differs);
}

TEST_CASE("query decoding contract") {
    ModelConfig cfg = tiny_model();
    ParameterStore<float> ps;
    Rng rng(3);
    FrameDetector<float> det(cfg, ps, rng);
    auto feats = det.extract_features(random_frames({3, 3, 32, 32}, 11));
    auto q = det.decode_frame_queries(feats);
    CHECK(q.queries.shape() == Shape{3, 5, 16});
    REQUIRE(static_cast<int>(q.per_layer.size()) == cfg.supervision_layers);
    for (const auto& layer : q.per_layer) CHECK(layer.shape() == q.queries.shape());
    for (i64 i = 0; i < q.queries.size(); ++i) CHECK(q.queries.data()[i] == q.per_layer.back().data()[i]);
}

TEST_CASE("feature-token permutation leaves queries unchanged without positional encoding") {
    ModelConfig cfg = tiny_model();
    cfg.positional_encoding = false;
    ParameterStore<float> ps;
    Rng rng(4);
    FrameDetector<float> det(cfg, ps, rng);

    const i64 t = 2, c = cfg.channels, h = 4, w = 4;
    Tensor<float> emb = random_frames({t, c, h, w}, 12);
    // permute spatial sites identically in every frame and channel
    std::vector<i64> perm{5, 0, 11, 2, 9, 4, 1, 15, 8, 3, 10, 7, 12, 13, 6, 14};
    Tensor<float> emb2 = Tensor<float>::zeros({t, c, h, w});
    for (i64 f = 0; f < t; ++f)
        for (i64 ch = 0; ch < c; ++ch)
            for (i64 p = 0; p < h * w; ++p)
                emb2.data()[(f * c + ch) * h * w + p] = emb.data()[(f * c + ch) * h * w + perm[static_cast<std::size_t>(p)]];

    PixelEmbeddingMap<float> m1{emb, cfg.stride}, m2{emb2, cfg.stride};
    auto q1 = det.decode_frame_queries(m1);
    auto q2 = det.decode_frame_queries(m2);
    for (i64 i = 0; i < q1.queries.size(); ++i)
        CHECK(std::abs(q1.queries.data()[i] - q2.queries.data()[i]) < 1e-5f);
}

TEST_CASE("mask logits are the dot product of mask weights and pixel embeddings") {
    ModelConfig cfg = tiny_model();
    ParameterStore<float> ps;
    Rng rng(5);
    FrameDetector<float> det(cfg, ps, rng);
    auto feats = det.extract_features(random_frames({2, 3, 32, 32}, 13));
    auto q = det.decode_frame_queries(feats);
    auto pred = det.predict_frame(q.queries, feats);
    REQUIRE(pred.mask_logits_stride.shape() == Shape{2, 5, 8, 8});
    CHECK(pred.mask_logits(32, 32).shape() == Shape{2, 5, 32, 32});

    const i64 c = cfg.channels, hw = 64;
    for (i64 t = 0; t < 2; ++t)
        for (i64 n = 0; n < 5; ++n)
            for (i64 p = 0; p < hw; ++p) {
                double dot = 0;
                for (i64 ch = 0; ch < c; ++ch)
                    dot += static_cast<double>(pred.mask_weights.data()[(t * 5 + n) * c + ch]) *
                           static_cast<double>(feats.embeddings.data()[(t * c + ch) * hw + p]);
                CHECK(std::abs(dot - pred.mask_logits_stride.data()[(t * 5 + n) * hw + p]) < 1e-4);
            }
}

TEST_CASE("mask loss reaches both query-side and pixel-side parameters") {
    ModelConfig cfg = tiny_model();
    ParameterStore<float> ps;
    Rng rng(6);
    FrameDetector<float> det(cfg, ps, rng);
    auto feats = det.extract_features(random_frames({1, 3, 32, 32}, 14));
    auto q = det.decode_frame_queries(feats);
    auto pred = det.predict_frame(q.queries, feats);
    Grads<float> g = backward(mean_all(mul(pred.mask_logits_stride, pred.mask_logits_stride)));
    auto nonzero = [&](const char* name) {
        REQUIRE(g.has(ps.at(name).node()));
        for (float v : g.at(ps.at(name).node()))
            if (v != 0.f) return true;
        return false;
    };
    CHECK(nonzero("detector/mask_head/fc1/w"));
    CHECK(nonzero("detector/proj/w"));
}

TEST_CASE("frame loss") {
    ModelConfig cfg = tiny_model();
    ParameterStore<float> ps;
    Rng rng(7);
    FrameDetector<float> det(cfg, ps, rng);
    LossWeights w;
    auto feats = det.extract_features(random_frames({2, 3, 32, 32}, 15));
    auto q = det.decode_frame_queries(feats);

    SUBCASE("no ground truth: classification toward no-object only") {
        VideoGroundTruth gt;
        gt.T = 2;
        gt.H = 32;
        gt.W = 32;
        auto r = frame_loss(det, q, feats, gt, w);
        CHECK(r.matches.empty());
        // oracle: per retained layer, lambda_cls * CE of every query toward the
        // no-object class, averaged over layers
        double expect = 0;
        for (const auto& layer : q.per_layer) {
            auto pred = det.predict_frame(layer, feats);
            const i64 k1 = cfg.categories + 1;
            double ce = 0;
            const i64 rows = pred.class_logits.size() / k1;
            for (i64 i = 0; i < rows; ++i) {
                const float* row = pred.class_logits.data().data() + i * k1;
                double mx = row[0];
                for (i64 j = 1; j < k1; ++j) mx = std::max<double>(mx, row[j]);
                double denom = 0;
                for (i64 j = 0; j < k1; ++j) denom += std::exp(row[j] - mx);
                ce += std::log(denom) + mx - row[k1 - 1];
            }
            expect += w.lambda_cls * ce / static_cast<double>(rows);
        }
        expect /= static_cast<double>(q.per_layer.size());
        CHECK(std::abs(r.loss.item() - expect) < 1e-4);
    }

    SUBCASE("more instances than queries is an error") {
        VideoGroundTruth gt;
        gt.T = 2;
        gt.H = 32;
        gt.W = 32;
        for (int i = 0; i < 6; ++i) {
            GtInstance inst;
            inst.category = 0;
            inst.instance_id = i + 1;
            inst.masks.assign(2 * 32 * 32, 0);
            inst.masks[static_cast<std::size_t>(i)] = 1;
            inst.masks[static_cast<std::size_t>(32 * 32 + i)] = 1;
            gt.tracklets.push_back(std::move(inst));
        }
        CHECK_THROWS_WITH_AS(frame_loss(det, q, feats, gt, w),
                             doctest::Contains("6 instances but only 5 frame queries"), std::invalid_argument);
    }

    SUBCASE("invariant under ground-truth relabeling") {
        SceneSpec spec;
        spec.H = 32;
        spec.W = 32;
        spec.T = 2;
        spec.max_instances = 3;
        spec.seed = 21;
        SyntheticVideo v = generate_video(spec);
        auto f2 = det.extract_features(v.frames);
        auto q2 = det.decode_frame_queries(f2);
        auto r1 = frame_loss(det, q2, f2, v.gt, w);
        std::reverse(v.gt.tracklets.begin(), v.gt.tracklets.end());
        auto r2 = frame_loss(det, q2, f2, v.gt, w);
        CHECK(r1.loss.item() == r2.loss.item());
        CHECK(r1.matches.size() == r2.matches.size());
    }
}

TEST_CASE("frozen detector parameters survive an optimizer step untouched") {
    ExperimentConfig cfg = tiny_experiment();
    VitaModel<float> model(cfg, 99);
    model.freeze_detector();

    SceneSpec spec;
    spec.H = 32;
    spec.W = 32;
    spec.T = 2;
    spec.max_instances = 2;
    spec.seed = 5;
    SyntheticVideo v = generate_video(spec);

    std::vector<std::vector<float>> before;
    std::vector<std::string> det_names;
    for (const auto& n : model.params().names())
        if (n.rfind("detector/", 0) == 0) {
            det_names.push_back(n);
            before.push_back(model.params().at(n).data());
        }
    const std::vector<float> enc_before = model.params().at("encoder/input_proj/w").data();
    std::vector<const SyntheticVideo*> batch{&v};
    model.train_batch(batch, AdamWConfig{});
    for (std::size_t k = 0; k < det_names.size(); ++k)
        CHECK(model.params().at(det_names[k]).data() == before[k]);
    CHECK(model.params().at("encoder/input_proj/w").data() != enc_before);
}
