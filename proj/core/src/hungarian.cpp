#include "vitkit/hungarian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace vita {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Shortest-augmenting-path assignment: rows = ground truths (n_gt), columns =
// predictions (n_pred), n_gt <= n_pred. a is [n_gt, n_pred] row-major.
// Returns the optimal total; if pred_of_gt is given, fills the matching.
double solve(const std::vector<double>& a, int n_gt, int n_pred, std::vector<int>* pred_of_gt) {
    std::vector<double> u(n_gt + 1, 0.0), v(n_pred + 1, 0.0);
    std::vector<int> p(n_pred + 1, 0), way(n_pred + 1, 0);
    for (int i = 1; i <= n_gt; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n_pred + 1, kInf);
        std::vector<char> used(n_pred + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            int j1 = -1;
            double delta = kInf;
            for (int j = 1; j <= n_pred; ++j) {
                if (used[j]) continue;
                const double cur = a[(i0 - 1) * n_pred + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n_pred; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    double total = 0.0;
    for (int j = 1; j <= n_pred; ++j)
        if (p[j]) total += a[(p[j] - 1) * n_pred + (j - 1)];
    if (pred_of_gt) {
        pred_of_gt->assign(n_gt, -1);
        for (int j = 1; j <= n_pred; ++j)
            if (p[j]) (*pred_of_gt)[p[j] - 1] = j - 1;
    }
    return total;
}

void validate(const std::vector<double>& cost, int n, int g) {
    if (g > n) throw std::invalid_argument("hungarian: more ground truths (" + std::to_string(g) +
                                           ") than predictions (" + std::to_string(n) + ")");
    if (static_cast<int>(cost.size()) != n * g) throw std::invalid_argument("hungarian: cost matrix size mismatch");
    for (double c : cost)
        if (!std::isfinite(c)) throw std::invalid_argument("hungarian: non-finite cost entry");
}

// cost is [n_pred, n_gt]; transpose into the [n_gt, n_pred] layout solve() wants.
std::vector<double> transposed(const std::vector<double>& cost, int n, int g) {
    std::vector<double> a(static_cast<std::size_t>(g) * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < g; ++j) a[static_cast<std::size_t>(j) * n + i] = cost[static_cast<std::size_t>(i) * g + j];
    return a;
}

}  // namespace

double hungarian_total(const std::vector<double>& cost, int n, int g) {
    validate(cost, n, g);
    if (g == 0) return 0.0;
    return solve(transposed(cost, n, g), g, n, nullptr);
}

Assignment hungarian(const std::vector<double>& cost, int n, int g) {
    validate(cost, n, g);
    Assignment out;
    if (g == 0) {
        for (int i = 0; i < n; ++i) out.unmatched_predictions.push_back(i);
        return out;
    }
    const double best = solve(transposed(cost, n, g), g, n, nullptr);
    const double eps = 1e-9 * (1.0 + std::abs(best));

    // Fix pairs greedily in prediction order; among equal-cost optima this
    // yields the lexicographically smallest sorted pair list.
    std::vector<char> gt_used(g, 0);
    double fixed = 0.0;
    int remaining = g;
    for (int i = 0; i < n && remaining > 0; ++i) {
        // Optimal completion using predictions (i+1..n-1) for gts in `rest`,
        // optionally with gt j pre-assigned to prediction i.
        auto completion = [&](int fixed_gt) {
            std::vector<int> rest;
            for (int j = 0; j < g; ++j)
                if (!gt_used[j] && j != fixed_gt) rest.push_back(j);
            if (rest.empty()) return 0.0;
            const int np = n - i - 1;
            if (np < static_cast<int>(rest.size())) return kInf;
            std::vector<double> sub(rest.size() * static_cast<std::size_t>(np));
            for (std::size_t r = 0; r < rest.size(); ++r)
                for (int pcol = 0; pcol < np; ++pcol)
                    sub[r * np + pcol] = cost[static_cast<std::size_t>(i + 1 + pcol) * g + rest[r]];
            return solve(sub, static_cast<int>(rest.size()), np, nullptr);
        };
        bool matched = false;
        for (int j = 0; j < g && !matched; ++j) {
            if (gt_used[j]) continue;
            const double cij = cost[static_cast<std::size_t>(i) * g + j];
            if (fixed + cij + completion(j) <= best + eps) {
                out.pairs.emplace_back(i, j);
                gt_used[j] = 1;
                fixed += cij;
                --remaining;
                matched = true;
            }
        }
        if (!matched) out.unmatched_predictions.push_back(i);
    }
    for (int i = static_cast<int>(out.pairs.size() + out.unmatched_predictions.size()); i < n; ++i)
        out.unmatched_predictions.push_back(i);
    // pairs + unmatched cover all predictions; recompute exact total from pairs
    out.total = 0.0;
    for (auto [i, j] : out.pairs) out.total += cost[static_cast<std::size_t>(i) * g + j];
    return out;
}

}  // namespace vita
