#pragma once

// Independent numeric oracles shared by the test suites. Nothing here calls
// into the autodiff engine.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace oracle {

/// Central differences of a scalar function, one coordinate at a time.
inline std::vector<double> central_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double step = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + step;
        const double up = f(x);
        x[i] = orig - step;
        const double down = f(x);
        x[i] = orig;
        g[i] = (up - down) / (2.0 * step);
    }
    return g;
}

/// ||a - b|| / max(||b||, floor)
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-12) {
    double diff = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        ref += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max(std::sqrt(ref), floor);
}

/// Per-coordinate relative error |a-b| / max(|a|, |b|, floor).
inline double coordinate_error(double a, double b, double floor) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline std::vector<double> uniform(std::size_t n, double lo, double hi, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

/// Uniform values bounded away from zero, for kinked or singular primitives.
inline std::vector<double> away_from_zero(std::size_t n, double lo, double hi, unsigned seed) {
    auto v = uniform(n, lo, hi, seed);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::bernoulli_distribution sign(0.5);
    for (auto& x : v) x = sign(rng) ? x : -x;
    return v;
}

} // namespace oracle
