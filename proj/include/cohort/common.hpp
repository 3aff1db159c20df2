#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace cohort {

using Rng = std::mt19937_64;

inline double log_sum_exp(std::span<const double> xs) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : xs) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : xs) s += std::exp(x - m);
    return m + std::log(s);
}

inline double log_add_exp(double a, double b) {
    if (a < b) std::swap(a, b);
    if (!std::isfinite(a)) return a;
    return a + std::log1p(std::exp(b - a));
}

// Draws an index from unnormalized nonnegative weights.
inline int sample_discrete(std::span<const double> w, Rng& rng) {
    double total = std::accumulate(w.begin(), w.end(), 0.0);
    if (!(total > 0.0) || !std::isfinite(total)) {
        // renormalize in log space
        std::vector<double> lw(w.size());
        for (size_t i = 0; i < w.size(); ++i)
            lw[i] = w[i] > 0 ? std::log(w[i]) : -std::numeric_limits<double>::infinity();
        double lse = log_sum_exp(lw);
        if (!std::isfinite(lse)) throw std::runtime_error("sample_discrete: degenerate weights");
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        double u = unif(rng), acc = 0.0;
        for (size_t i = 0; i < w.size(); ++i) {
            acc += std::exp(lw[i] - lse);
            if (u <= acc) return static_cast<int>(i);
        }
        return static_cast<int>(w.size()) - 1;
    }
    std::uniform_real_distribution<double> unif(0.0, total);
    double u = unif(rng), acc = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
        acc += w[i];
        if (u <= acc) return static_cast<int>(i);
    }
    return static_cast<int>(w.size()) - 1;
}

inline std::vector<double> sample_dirichlet(std::span<const double> alpha, Rng& rng) {
    std::vector<double> out(alpha.size());
    double sum = 0.0;
    for (size_t i = 0; i < alpha.size(); ++i) {
        std::gamma_distribution<double> g(alpha[i], 1.0);
        out[i] = g(rng);
        sum += out[i];
    }
    if (sum <= 0.0) {  // all shapes tiny; fall back to argmax-style draw
        std::uniform_int_distribution<size_t> pick(0, alpha.size() - 1);
        std::fill(out.begin(), out.end(), 0.0);
        out[pick(rng)] = 1.0;
        return out;
    }
    for (double& v : out) v /= sum;
    return out;
}

inline double sample_laplace(double scale, Rng& rng) {
    std::uniform_real_distribution<double> unif(-0.5, 0.5);
    double u = unif(rng);
    return -scale * std::copysign(std::log1p(-2.0 * std::abs(u)), u);
}

// Simple fork-join loop over [0, n). nthreads <= 1 runs inline.
inline void parallel_for(size_t n, int nthreads, const std::function<void(size_t)>& body) {
    if (nthreads <= 1 || n < 2) {
        for (size_t i = 0; i < n; ++i) body(i);
        return;
    }
    size_t t = std::min<size_t>(nthreads, n);
    std::vector<std::thread> workers;
    workers.reserve(t);
    for (size_t k = 0; k < t; ++k) {
        workers.emplace_back([&, k] {
            for (size_t i = k; i < n; i += t) body(i);
        });
    }
    for (auto& w : workers) w.join();
}

// FNV-1a, used for config/vocabulary fingerprints.
inline uint64_t fnv1a(std::span<const char> data, uint64_t h = 14695981039346656037ull) {
    for (char c : data) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h;
}
inline uint64_t fnv1a(const std::string& s, uint64_t h = 14695981039346656037ull) {
    return fnv1a(std::span<const char>(s.data(), s.size()), h);
}

inline double median_of_sorted(std::span<const double> xs) {
    if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
    size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

inline double quantile_of_sorted(std::span<const double> xs, double q) {
    if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
    double pos = q * (xs.size() - 1);
    size_t lo = static_cast<size_t>(pos);
    size_t hi = std::min(lo + 1, xs.size() - 1);
    double frac = pos - lo;
    return xs[lo] * (1.0 - frac) + xs[hi] * frac;
}

}  // namespace cohort
