#pragma once

#include <utility>
#include <vector>

namespace vita {

/// Injective minimum-cost assignment of all G columns (ground truths) to the
/// N rows (predictions) of a row-major [N, G] cost matrix, N >= G.
struct Assignment {
    std::vector<std::pair<int, int>> pairs;  // (prediction, gt), sorted by prediction
    std::vector<int> unmatched_predictions;
    double total = 0.0;
};

/// Optimal total only (no tie-break); throws on non-finite entries or G > N.
double hungarian_total(const std::vector<double>& cost, int n, int g);

/// Optimal assignment with a deterministic tie-break: among all minimum-cost
/// assignments, the lexicographically smallest sorted pair list.
Assignment hungarian(const std::vector<double>& cost, int n, int g);

}  // namespace vita
