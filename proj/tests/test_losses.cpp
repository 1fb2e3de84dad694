#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"
#include "testcfg.hpp"
#include "vitkit/losses.hpp"
#include "vitkit/synthetic.hpp"

using namespace vita;
using vita::testing::gradcheck;
using vita::testing::random_tensor;

namespace {

const double kLn2 = std::log(2.0);

template <class S>
Tensor<S> filled(Shape shape, std::uint64_t seed, double stdev = 1.0) {
    Rng rng(seed);
    std::normal_distribution<double> d(0.0, stdev);
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    for (S& v : t.data()) v = static_cast<S>(d(rng));
    return t;
}

}  // namespace

TEST_CASE("binary cross entropy with logits") {
    SUBCASE("zero logits give ln 2 for any target") {
        Tensor<double> x = Tensor<double>::zeros({2, 3});
        CHECK(bce_with_logits_mean(x, std::vector<double>{0, 1, 0, 1, 1, 0}).item() == doctest::Approx(kLn2).epsilon(1e-12));
    }
    SUBCASE("confident correct logits give near-zero loss") {
        Tensor<double> x = Tensor<double>::zeros({4});
        x.data() = {30, 30, -30, -30};
        CHECK(bce_with_logits_mean(x, std::vector<double>{1, 1, 0, 0}).item() < 1e-12);
    }
    SUBCASE("size mismatch rejected") {
        CHECK_THROWS_AS(bce_with_logits_mean(Tensor<double>::zeros({3}), std::vector<double>{1, 0}),
                        std::invalid_argument);
    }
    SUBCASE("gradient check") {
        std::mt19937_64 seeder(41);
        for (int s = 0; s < 20; ++s) {
            std::mt19937_64 rng(seeder());
            Tensor<double> x = random_tensor({3, 4}, rng, 2.0);
            x.set_requires_grad();
            std::vector<double> t(12);
            for (double& v : t) v = static_cast<double>(rng() % 2);
            CHECK(gradcheck({&x}, [&] { return bce_with_logits_mean(x, t); }) < 1e-5);
        }
    }
}

TEST_CASE("soft dice loss") {
    SUBCASE("both sides empty is exactly zero with zero gradient") {
        Tensor<double> x = Tensor<double>::full({4}, -1000.0);
        x.set_requires_grad();
        Tensor<double> l = soft_dice_loss(x, std::vector<double>(4, 0.0));
        CHECK(l.item() == 0.0);
        Grads<double> g = backward(l);
        for (double v : g.of(x.node())) CHECK(v == 0.0);
    }
    SUBCASE("disjoint confident prediction scores near one") {
        Tensor<double> x = Tensor<double>::zeros({4});
        x.data() = {50, 50, -50, -50};
        CHECK(soft_dice_loss(x, std::vector<double>{0, 0, 1, 1}).item() == doctest::Approx(1.0).epsilon(1e-9));
    }
    SUBCASE("perfect confident prediction scores near zero") {
        Tensor<double> x = Tensor<double>::zeros({4});
        x.data() = {50, 50, -50, -50};
        CHECK(soft_dice_loss(x, std::vector<double>{1, 1, 0, 0}).item() == doctest::Approx(0.0).epsilon(1e-9));
    }
    SUBCASE("gradient check") {
        std::mt19937_64 seeder(43);
        for (int s = 0; s < 20; ++s) {
            std::mt19937_64 rng(seeder());
            Tensor<double> x = random_tensor({10}, rng, 1.5);
            x.set_requires_grad();
            std::vector<double> t(10);
            for (double& v : t) v = static_cast<double>(rng() % 2);
            CHECK(gradcheck({&x}, [&] { return soft_dice_loss(x, t); }) < 1e-5);
        }
    }
}

TEST_CASE("weighted softmax cross entropy") {
    SUBCASE("uniform logits give ln K") {
        Tensor<double> x = Tensor<double>::zeros({3, 4});
        CHECK(softmax_cross_entropy(x, {0, 2, 3}, {1, 1, 1, 1}).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }
    SUBCASE("class weights form a weighted mean") {
        Tensor<double> x = Tensor<double>::zeros({2, 2});
        x.data() = {2, 0, 0, 0};
        // row 0 (target 0, weight 1): CE = log(1+e^-2); row 1 (target 1, weight
        // 0.1): CE = ln 2
        const double expect = (std::log1p(std::exp(-2.0)) + 0.1 * kLn2) / 1.1;
        CHECK(softmax_cross_entropy(x, {0, 1}, {1.0, 0.1}).item() == doctest::Approx(expect).epsilon(1e-12));
    }
    SUBCASE("gradient check") {
        std::mt19937_64 seeder(47);
        for (int s = 0; s < 20; ++s) {
            std::mt19937_64 rng(seeder());
            Tensor<double> x = random_tensor({5, 3}, rng, 2.0);
            x.set_requires_grad();
            std::vector<int> t(5);
            for (int& v : t) v = static_cast<int>(rng() % 3);
            CHECK(gradcheck({&x}, [&] { return softmax_cross_entropy(x, t, {1.0, 0.7, 0.1}); }) < 1e-5);
        }
    }
}

TEST_CASE("matching cost and assignment") {
    LossWeights w;
    SUBCASE("obvious pairs dominate the assignment") {
        // three queries, three gts; query i predicts gt i's mask and class
        const i64 vol = 8;
        Tensor<double> cls = Tensor<double>::zeros({3, 4});
        Tensor<double> masks = Tensor<double>::full({3, vol}, -20.0);
        std::vector<std::vector<double>> targets(3, std::vector<double>(vol, 0.0));
        std::vector<int> cats{0, 1, 2};
        for (i64 i = 0; i < 3; ++i) {
            cls.data()[i * 4 + i] = 10.0;
            masks.data()[i * vol + 2 * i] = 20.0;
            masks.data()[i * vol + 2 * i + 1] = 20.0;
            targets[static_cast<std::size_t>(i)][static_cast<std::size_t>(2 * i)] = 1.0;
            targets[static_cast<std::size_t>(i)][static_cast<std::size_t>(2 * i + 1)] = 1.0;
        }
        auto m = run_matching(matching_cost(cls, masks, targets, cats, w), 3, 3);
        for (int i = 0; i < 3; ++i) CHECK(m.gt_of_query[static_cast<std::size_t>(i)] == i);
    }
    SUBCASE("all-equal costs break ties lexicographically") {
        auto m = run_matching(std::vector<double>(5 * 3, 0.4), 5, 3);
        CHECK(m.gt_of_query == std::vector<int>{0, 1, 2, -1, -1});
        CHECK(m.assignment.unmatched_predictions == std::vector<int>{3, 4});
    }
    SUBCASE("random 5x3 costs match an exhaustive search") {
        Rng rng(17);
        std::uniform_real_distribution<double> d(-2.0, 2.0);
        for (int trial = 0; trial < 25; ++trial) {
            std::vector<double> cost(15);
            for (double& c : cost) c = d(rng);
            double best = std::numeric_limits<double>::infinity();
            for (int a = 0; a < 5; ++a)
                for (int b = 0; b < 5; ++b)
                    for (int c = 0; c < 5; ++c) {
                        if (a == b || a == c || b == c) continue;
                        best = std::min(best, cost[static_cast<std::size_t>(a * 3)] +
                                                  cost[static_cast<std::size_t>(b * 3 + 1)] +
                                                  cost[static_cast<std::size_t>(c * 3 + 2)]);
                    }
            auto m = run_matching(cost, 5, 3);
            double got = 0;
            for (auto [i, j] : m.assignment.pairs) got += cost[static_cast<std::size_t>(i * 3 + j)];
            CHECK(got == doctest::Approx(best).epsilon(1e-12));
        }
    }
    SUBCASE("more gts than predictions is an error") {
        Tensor<double> cls = Tensor<double>::zeros({1, 4});
        Tensor<double> masks = Tensor<double>::zeros({1, 4});
        std::vector<std::vector<double>> targets(2, std::vector<double>(4, 0.0));
        CHECK_THROWS_WITH_AS(matching_cost(cls, masks, targets, std::vector<int>{0, 0}, w),
                             doctest::Contains("more ground truths (2) than predictions (1)"), std::invalid_argument);
    }
}

TEST_CASE("video loss") {
    ModelConfig mc = vita::testing::tiny_model();
    ParameterStore<float> ps;
    Rng rng(3);
    ObjectDecoder<float> dec(mc, ps, rng);
    LossWeights w;

    ObjectTokenSet<float> set;
    set.frames = 2;
    set.queries_per_frame = 3;
    set.tokens = filled<float>({6, mc.channels}, 5);
    set.keep_mask.assign(6, 1);
    for (i64 r = 0; r < 6; ++r) set.frame_index.push_back(r / 3);
    auto vq = dec.forward(set);

    PixelEmbeddingMap<float> pixels;
    pixels.stride = 4;
    pixels.embeddings = filled<float>({2, mc.channels, 8, 8}, 6, 0.3);

    SUBCASE("no ground truth reduces to the no-object class term") {
        VideoGroundTruth gt;
        gt.T = 2;
        gt.H = 32;
        gt.W = 32;
        auto r = video_loss(dec, vq, pixels, gt, w);
        CHECK(r.matches.empty());
        double expect = 0;
        for (const auto& layer : vq.per_layer) {
            auto pred = dec.predict(layer, pixels);
            double ce = 0;
            for (i64 i = 0; i < 5; ++i) {
                const float* row = pred.class_logits.data().data() + i * 4;
                double mx = row[0];
                for (int j = 1; j < 4; ++j) mx = std::max<double>(mx, row[j]);
                double denom = 0;
                for (int j = 0; j < 4; ++j) denom += std::exp(row[j] - mx);
                ce += std::log(denom) + mx - row[3];
            }
            expect += w.lambda_cls * ce / 5.0;  // equal weights cancel in the weighted mean
        }
        expect /= static_cast<double>(vq.per_layer.size());
        CHECK(std::abs(r.loss.item() - expect) < 1e-4);
    }
    SUBCASE("invariant under ground-truth reordering") {
        SceneSpec spec;
        spec.H = 32;
        spec.W = 32;
        spec.T = 2;
        spec.max_instances = 3;
        spec.seed = 29;
        SyntheticVideo v = generate_video(spec);
        auto r1 = video_loss(dec, vq, pixels, v.gt, w);
        std::reverse(v.gt.tracklets.begin(), v.gt.tracklets.end());
        auto r2 = video_loss(dec, vq, pixels, v.gt, w);
        CHECK(r1.loss.item() == r2.loss.item());
        CHECK(r1.matches.size() == r2.matches.size());
    }
    SUBCASE("too many tracklets is an error") {
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
            gt.tracklets.push_back(std::move(inst));
        }
        CHECK_THROWS_WITH_AS(video_loss(dec, vq, pixels, gt, w), doctest::Contains("6 tracklets exceed 5"),
                             std::invalid_argument);
    }
}

TEST_CASE("similarity loss") {
    ModelConfig mc = vita::testing::tiny_model();
    const i64 c = mc.channels;
    ParameterStore<float> ps;
    Rng rng(7);
    SimilarityHead<float> head;
    head.init(ps, mc, true, rng);
    // identity embedding so logits are raw dot products
    Tensor<float>& w = ps.at("sim/embed/w");
    for (i64 i = 0; i < c; ++i)
        for (i64 j = 0; j < c; ++j) w.data()[i * c + j] = i == j ? 1.f : 0.f;
    for (float& v : ps.at("sim/embed/b").data()) v = 0.f;

    VideoGroundTruth gt;
    gt.T = 3;
    gt.H = 4;
    gt.W = 4;
    for (int i = 0; i < 2; ++i) {
        GtInstance inst;
        inst.category = 0;
        inst.instance_id = i + 1;
        inst.masks.assign(3 * 16, 1);
        gt.tracklets.push_back(std::move(inst));
    }

    SUBCASE("confident same-identity pair scores near zero") {
        Tensor<float> dq = Tensor<float>::zeros({5, c});
        dq.data()[0] = std::sqrt(20.f);
        Tensor<float> fq = Tensor<float>::zeros({3, 4, c});
        fq.data()[0] = std::sqrt(20.f);
        auto r = similarity_loss(head, dq, {{0, 0}}, fq, {{0, 0, 0}}, gt);
        CHECK_FALSE(r.skipped);
        CHECK(r.loss.item() < 1e-6f);
    }
    SUBCASE("orthogonal embeddings score ln 2") {
        Tensor<float> dq = Tensor<float>::zeros({5, c});
        Tensor<float> fq = Tensor<float>::zeros({3, 4, c});
        auto r = similarity_loss(head, dq, {{0, 0}}, fq, {{0, 0, 0}}, gt);
        CHECK(std::abs(r.loss.item() - static_cast<float>(kLn2)) < 1e-6f);
    }
    SUBCASE("identity-indicator targets over a 2x6 block") {
        const float s = std::sqrt(20.f);
        Tensor<float> dq = Tensor<float>::zeros({5, c});
        dq.data()[0 * c + 0] = s;  // video query 0 -> id 1
        dq.data()[1 * c + 1] = s;  // video query 1 -> id 2
        Tensor<float> fq = Tensor<float>::zeros({3, 4, c});
        std::vector<std::array<i64, 3>> fm;
        for (i64 t = 0; t < 3; ++t) {
            fq.data()[(t * 4 + 0) * c + 0] = s;  // query 0 tracks id 1
            fq.data()[(t * 4 + 1) * c + 1] = s;  // query 1 tracks id 2
            fm.push_back({t, 0, 0});
            fm.push_back({t, 1, 1});
        }
        auto r = similarity_loss(head, dq, {{0, 0}, {1, 1}}, fq, fm, gt);
        // 6 same-id logits at 20 (loss ~0), 6 different-id logits at 0 (ln 2)
        CHECK(std::abs(r.loss.item() - static_cast<float>(kLn2 / 2.0)) < 1e-5f);
    }
    SUBCASE("no matched pair on either side is skipped") {
        Tensor<float> dq = Tensor<float>::zeros({5, c});
        Tensor<float> fq = Tensor<float>::zeros({3, 4, c});
        auto r1 = similarity_loss(head, dq, {}, fq, {{0, 0, 0}}, gt);
        auto r2 = similarity_loss(head, dq, {{0, 0}}, fq, {}, gt);
        CHECK(r1.skipped);
        CHECK(r2.skipped);
        CHECK(r1.loss.item() == 0.f);
        CHECK(r2.loss.item() == 0.f);
    }
}

TEST_CASE("total loss combines the three terms with their weights") {
    LossWeights w;
    CHECK(w.lambda_v == 1.0);
    CHECK(w.lambda_f == 1.0);
    CHECK(w.lambda_sim == 0.5);
    Tensor<double> t = total_loss(Tensor<double>::scalar(2), Tensor<double>::scalar(3), Tensor<double>::scalar(4), w);
    CHECK(t.item() == doctest::Approx(7.0).epsilon(1e-12));
}
