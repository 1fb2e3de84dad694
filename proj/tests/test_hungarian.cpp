#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "vitkit/hungarian.hpp"

using namespace vita;

namespace {

// exhaustive enumeration over all injections of gts into predictions
double brute_force(const std::vector<double>& cost, int n, int g) {
    std::vector<int> preds(n);
    for (int i = 0; i < n; ++i) preds[i] = i;
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> chosen(g, -1);
    std::function<void(int, double, unsigned)> rec = [&](int j, double acc, unsigned used) {
        if (j == g) {
            best = std::min(best, acc);
            return;
        }
        for (int i = 0; i < n; ++i) {
            if (used & (1u << i)) continue;
            rec(j + 1, acc + cost[static_cast<std::size_t>(i) * g + j], used | (1u << i));
        }
    };
    rec(0, 0.0, 0);
    return best;
}

}  // namespace

TEST_CASE("diagonal-dominant and 1x1 cases") {
    std::vector<double> diag = {0, 1, 1, 1, 0, 1, 1, 1, 0};
    Assignment a = hungarian(diag, 3, 3);
    CHECK(a.total == 0.0);
    REQUIRE(a.pairs.size() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(a.pairs[i].first == i);
        CHECK(a.pairs[i].second == i);
    }

    Assignment one = hungarian({4.2}, 1, 1);
    REQUIRE(one.pairs.size() == 1);
    CHECK(one.pairs[0] == std::pair<int, int>(0, 0));
}

TEST_CASE("200 random matrices match exhaustive enumeration exactly") {
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 7);
        const int g = 1 + static_cast<int>(rng() % static_cast<unsigned>(n));
        std::vector<double> cost(static_cast<std::size_t>(n) * g);
        for (double& c : cost) c = u(rng);
        const double expected = brute_force(cost, n, g);
        CHECK(hungarian_total(cost, n, g) == doctest::Approx(expected).epsilon(1e-12));
        Assignment a = hungarian(cost, n, g);
        CHECK(a.total == doctest::Approx(expected).epsilon(1e-12));
        // injectivity
        std::vector<char> pu(n, 0), gu(g, 0);
        for (auto [i, j] : a.pairs) {
            CHECK(!pu[i]);
            CHECK(!gu[j]);
            pu[i] = gu[j] = 1;
        }
        CHECK(static_cast<int>(a.pairs.size()) == g);
        CHECK(static_cast<int>(a.pairs.size() + a.unmatched_predictions.size()) == n);
    }
}

TEST_CASE("constant shift leaves the assignment unchanged") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> cost(5 * 3);
    for (double& c : cost) c = u(rng);
    Assignment a = hungarian(cost, 5, 3);
    std::vector<double> shifted = cost;
    for (double& c : shifted) c += 10.0;
    Assignment b = hungarian(shifted, 5, 3);
    CHECK(a.pairs == b.pairs);
}

TEST_CASE("tied costs break deterministically by index") {
    // all-equal costs: matching should pick the lexicographically smallest list
    std::vector<double> cost(4 * 2, 1.0);
    Assignment a = hungarian(cost, 4, 2);
    REQUIRE(a.pairs.size() == 2);
    CHECK(a.pairs[0] == std::pair<int, int>(0, 0));
    CHECK(a.pairs[1] == std::pair<int, int>(1, 1));
}

TEST_CASE("input validation") {
    CHECK_THROWS_AS(hungarian({1.0, 2.0}, 1, 2), std::invalid_argument);
    CHECK_THROWS_AS(hungarian({std::numeric_limits<double>::infinity()}, 1, 1), std::invalid_argument);
    Assignment empty = hungarian({}, 3, 0);
    CHECK(empty.pairs.empty());
    CHECK(empty.unmatched_predictions.size() == 3);
}
