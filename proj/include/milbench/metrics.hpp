#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace milbench {

class MetricError : public std::runtime_error {
public:
    explicit MetricError(const std::string& what) : std::runtime_error(what) {}
};

/// Parallel slide-level scores and binary labels.
struct ScoreSet {
    std::vector<double> scores;
    std::vector<int> labels;

    std::size_t size() const { return scores.size(); }

    void check() const {
        if (scores.size() != labels.size())
            throw MetricError("score set: scores/labels length mismatch");
        if (scores.size() < 2) throw MetricError("score set: need at least 2 entries");
        for (int l : labels)
            if (l != 0 && l != 1) throw MetricError("score set: labels must be 0/1");
    }
};

/// Mann-Whitney AUROC: fraction of (positive, negative) pairs with the
/// positive scored higher, ties counted 0.5. Computed by a single sorted
/// sweep over tie groups.
inline double auroc(const ScoreSet& s) {
    s.check();
    std::size_t n = s.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return s.scores[a] < s.scores[b];
    });
    double pos_total = 0.0, neg_total = 0.0;
    for (int l : s.labels) (l == 1 ? pos_total : neg_total) += 1.0;
    if (pos_total == 0.0 || neg_total == 0.0)
        throw MetricError("auroc: undefined, only one class present");

    double u = 0.0, neg_below = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        double pos_here = 0.0, neg_here = 0.0;
        while (j < n && s.scores[order[j]] == s.scores[order[i]]) {
            (s.labels[order[j]] == 1 ? pos_here : neg_here) += 1.0;
            ++j;
        }
        u += pos_here * neg_below + 0.5 * pos_here * neg_here;
        neg_below += neg_here;
        i = j;
    }
    return u / (pos_total * neg_total);
}

/// Average precision: mean of precision at each positive's rank, scores
/// sorted descending with ties broken by original index.
inline double average_precision(const ScoreSet& s) {
    s.check();
    std::size_t n = s.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return s.scores[a] > s.scores[b];
    });
    double positives = 0.0;
    for (int l : s.labels) positives += l;
    if (positives == 0.0) throw MetricError("average_precision: no positives");

    double ap = 0.0, pos_seen = 0.0;
    for (std::size_t rank = 0; rank < n; ++rank) {
        if (s.labels[order[rank]] == 1) {
            pos_seen += 1.0;
            ap += pos_seen / static_cast<double>(rank + 1);
        }
    }
    return ap / positives;
}

/// Five-number summary plus mean and population (divisor N) std.
struct MetricSummary {
    double mean = 0.0;
    double stddev = 0.0;
    double min = 0.0;
    double q1 = 0.0;
    double median = 0.0;
    double q3 = 0.0;
    double max = 0.0;
    std::size_t count = 0;
};

/// Quartiles by linear interpolation of order statistics (inclusive method).
inline MetricSummary summarize(std::vector<double> values) {
    if (values.empty()) throw MetricError("summarize: empty input");
    MetricSummary r;
    r.count = values.size();
    double sum = 0.0;
    for (double v : values) sum += v;
    r.mean = sum / static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.stddev = std::sqrt(ss / static_cast<double>(values.size()));

    std::sort(values.begin(), values.end());
    auto quantile = [&](double p) {
        double h = p * static_cast<double>(values.size() - 1);
        std::size_t lo = static_cast<std::size_t>(h);
        std::size_t hi = std::min(lo + 1, values.size() - 1);
        double frac = h - static_cast<double>(lo);
        return values[lo] + frac * (values[hi] - values[lo]);
    };
    r.min = values.front();
    r.q1 = quantile(0.25);
    r.median = quantile(0.5);
    r.q3 = quantile(0.75);
    r.max = values.back();
    return r;
}

}  // namespace milbench
