#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "diffreg/error.hpp"
#include "diffreg/random.hpp"

namespace diffreg {

/// Process-wide count of draws taken from any ErrorModel. Instrumentation only.
inline std::atomic<std::uint64_t>& error_draw_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

/// Gaussian-kernel density over signed baseline residuals (prediction - label),
/// with support clipped to [-clip, clip].
struct ErrorModel {
    std::vector<double> residuals;
    double bandwidth = 1.0;
    double clip = 20.0;

    void validate() const {
        require(!residuals.empty(), ErrorKind::fit, "error model has no residuals");
        require(std::isfinite(bandwidth) && bandwidth > 0.0, ErrorKind::fit, "error model bandwidth must be positive");
        require(std::isfinite(clip) && clip > 0.0, ErrorKind::fit, "error model clip bound must be positive");
    }

    friend bool operator==(const ErrorModel&, const ErrorModel&) = default;
};

namespace detail {

// Linear-interpolation quantile of sorted data.
inline double quantile_sorted(std::span<const double> sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

} // namespace detail

/// Silverman's rule of thumb: 0.9 * min(sd, IQR / 1.34) * n^(-1/5); 1 when that is zero.
inline double silverman_bandwidth(std::span<const double> values) {
    const std::size_t n = values.size();
    require(n > 0, ErrorKind::fit, "bandwidth of an empty sample");
    double sd = 0.0;
    if (n > 1) {
        double mean = 0.0;
        for (double v : values) {
            mean += v;
        }
        mean /= static_cast<double>(n);
        double ss = 0.0;
        for (double v : values) {
            ss += (v - mean) * (v - mean);
        }
        sd = std::sqrt(ss / static_cast<double>(n - 1));
    }
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double iqr = detail::quantile_sorted(sorted, 0.75) - detail::quantile_sorted(sorted, 0.25);
    const double h = 0.9 * std::min(sd, iqr / 1.34) * std::pow(static_cast<double>(n), -0.2);
    return h > 0.0 ? h : 1.0;
}

inline ErrorModel fit_error_kde(std::span<const double> residuals, double clip = 20.0) {
    require(!residuals.empty(), ErrorKind::fit, "cannot fit an error model to zero residuals");
    require(std::isfinite(clip) && clip > 0.0, ErrorKind::config, "clip bound must be positive");
    ErrorModel m;
    m.clip = clip;
    for (double r : residuals) {
        require(std::isfinite(r), ErrorKind::numeric, "non-finite residual");
        if (r >= -clip && r <= clip) {
            m.residuals.push_back(r);
        }
    }
    require(!m.residuals.empty(), ErrorKind::fit,
            "every residual lies outside [-" + std::to_string(clip) + ", " + std::to_string(clip) + "]");
    m.bandwidth = silverman_bandwidth(m.residuals);
    return m;
}

inline double kde_density(const ErrorModel& m, double e) {
    const double inv_h = 1.0 / m.bandwidth;
    double acc = 0.0;
    for (double r : m.residuals) {
        const double u = (e - r) * inv_h;
        acc += std::exp(-0.5 * u * u);
    }
    return acc * inv_h * std::numbers::inv_sqrtpi / std::numbers::sqrt2 / static_cast<double>(m.residuals.size());
}

/// Smoothed bootstrap draw, rejection-resampled into [-clip, clip].
inline double sample_error(const ErrorModel& m, Rng& rng) {
    error_draw_counter().fetch_add(1, std::memory_order_relaxed);
    std::uniform_int_distribution<std::size_t> pick(0, m.residuals.size() - 1);
    std::normal_distribution<double> normal(0.0, 1.0);
    double e = 0.0;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        e = m.residuals[pick(rng)] + m.bandwidth * normal(rng);
        if (e >= -m.clip && e <= m.clip) {
            return e;
        }
    }
    return std::clamp(e, -m.clip, m.clip);
}

} // namespace diffreg
