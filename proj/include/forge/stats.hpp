#pragma once

#include <cmath>
#include <numeric>
#include <span>

namespace forge::stats {

inline double mean(std::span<const double> xs) {
    return xs.empty() ? 0.0 : std::accumulate(xs.begin(), xs.end(), 0.0) / double(xs.size());
}

/// n - 1 denominator; 0 for fewer than two values.
inline double sample_sd(std::span<const double> xs) {
    if (xs.size() < 2) return 0.0;
    const double m = mean(xs);
    double ss = 0.0;
    for (double x : xs) ss += (x - m) * (x - m);
    return std::sqrt(ss / double(xs.size() - 1));
}

}  // namespace forge::stats
