#pragma once

#include "ruleagent/error.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace ruleagent {

/// 0-based index of the nearest-rank p-percentile, rank = ceil(p * n).
inline std::size_t nearest_rank_index(double p, std::size_t n)
{
    if (n == 0) {
        throw InvalidArgument("percentile of an empty population");
    }
    // The epsilon keeps p*n products such as 0.95*100 from rounding up a rank.
    const auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n) - 1e-9));
    return std::clamp<std::size_t>(rank, 1, n) - 1;
}

inline double nearest_rank_percentile(std::span<const double> values, double p)
{
    if (!(p > 0.0 && p < 1.0)) {
        throw InvalidArgument("percentile must lie in (0, 1)");
    }
    std::vector<double> sorted(values.begin(), values.end());
    const auto k = nearest_rank_index(p, sorted.size());
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end());
    return sorted[k];
}

/// Midpoint of the two central values for even sizes.
inline double median(std::span<const double> values)
{
    if (values.empty()) {
        throw InvalidArgument("median of an empty population");
    }
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const auto n = sorted.size();
    return n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
}

inline double population_variance(std::span<const double> values)
{
    if (values.empty()) {
        return 0.0;
    }
    double mean = 0.0;
    for (const double v : values) {
        mean += v;
    }
    mean /= static_cast<double>(values.size());
    double acc = 0.0;
    for (const double v : values) {
        acc += (v - mean) * (v - mean);
    }
    return acc / static_cast<double>(values.size());
}

/// Fraction of values <= each value (ties share the highest rank).
inline std::vector<double> percentile_ranks(std::span<const double> values)
{
    const auto n = values.size();
    std::vector<std::size_t> order(n);
    for (std::size_t k = 0; k < n; ++k) {
        order[k] = k;
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t k = 0;
    while (k < n) {
        std::size_t end = k + 1;
        while (end < n && values[order[end]] == values[order[k]]) {
            ++end;
        }
        for (std::size_t r = k; r < end; ++r) {
            ranks[order[r]] = static_cast<double>(end) / static_cast<double>(n);
        }
        k = end;
    }
    return ranks;
}

} // namespace ruleagent
