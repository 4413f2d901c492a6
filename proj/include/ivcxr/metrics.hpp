#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "ivcxr/errors.hpp"

namespace ivcxr::metrics {

/// Area under the ROC curve as the Mann-Whitney statistic: the chance that a random
/// positive outscores a random negative, ties counting one half. Average ranks
/// handle ties.
inline double auc(std::span<const double> scores, std::span<const double> labels) {
    require(scores.size() == labels.size(), "auc: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::size_t pos = 0;
    for (double l : labels) {
        require(l == 0.0 || l == 1.0, "auc: labels must be 0 or 1");
        pos += l == 1.0;
    }
    if (pos == 0 || pos == n) throw UndefinedMetric("auc undefined: labels contain a single class");
    for (double s : scores)
        if (!std::isfinite(s)) throw NumericFault("auc: non-finite score");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0.0;  // sum of positive ranks, ranks doubled to stay integral
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double twice_avg = static_cast<double>(i + 1 + j);  // 2 * mean of ranks i+1..j
        for (std::size_t t = i; t < j; ++t)
            if (labels[order[t]] == 1.0) rank_sum += twice_avg;
        i = j;
    }
    const double p = static_cast<double>(pos), q = static_cast<double>(n - pos);
    return (rank_sum - p * (p + 1.0)) / (2.0 * p * q);
}

}  // namespace ivcxr::metrics
