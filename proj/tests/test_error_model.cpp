#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "support.hpp"

using namespace diffreg;

namespace {

// Oracle: direct evaluation of the Gaussian kernel sum.
double kernel_sum(const std::vector<double>& residuals, double h, double e) {
    double acc = 0.0;
    for (double r : residuals) {
        const double u = (e - r) / h;
        acc += std::exp(-u * u / 2.0) / std::sqrt(2.0 * std::numbers::pi);
    }
    return acc / (static_cast<double>(residuals.size()) * h);
}

std::vector<double> normal_draws(std::size_t n, std::uint64_t seed, double sd = 1.0) {
    Rng rng = make_stream(seed);
    std::normal_distribution<double> normal(0.0, sd);
    std::vector<double> out(n);
    for (auto& v : out) {
        v = normal(rng);
    }
    return out;
}

double trapezoid_mass(const ErrorModel& m, double lo, double hi, std::size_t steps) {
    const double dx = (hi - lo) / static_cast<double>(steps);
    double acc = 0.5 * (kde_density(m, lo) + kde_density(m, hi));
    for (std::size_t i = 1; i < steps; ++i) {
        acc += kde_density(m, lo + dx * static_cast<double>(i));
    }
    return acc * dx;
}

} // namespace

TEST(ErrorModelFit, DegenerateSpreadFallsBackToUnitBandwidth) {
    const std::vector<double> r{0.0};
    const auto m = fit_error_kde(r, 20.0);
    EXPECT_EQ(m.bandwidth, 1.0);
    EXPECT_EQ(m.residuals.size(), 1u);
    const std::vector<double> same{3.0, 3.0, 3.0};
    EXPECT_EQ(fit_error_kde(same).bandwidth, 1.0);
}

TEST(ErrorModelFit, ResidualsBeyondTheClipAreDiscarded) {
    const std::vector<double> r{25.0, -3.0, 1.0, 20.0, -20.5};
    const auto m = fit_error_kde(r, 20.0);
    EXPECT_EQ(m.residuals, (std::vector<double>{-3.0, 1.0, 20.0}));
}

TEST(ErrorModelFit, SilvermanOnStandardNormalSample) {
    const auto r = normal_draws(1000, 42);
    const auto m = fit_error_kde(r, 20.0);
    const double reference = 0.9 * std::pow(1000.0, -0.2);
    EXPECT_NEAR(reference, 0.2260697788358622, 1e-12);
    EXPECT_NEAR(m.bandwidth, reference, 0.1 * reference);
}

TEST(ErrorModelFit, SilvermanFormulaOnAFixedSample) {
    // sd = sqrt(5/3) ~ 1.290994; quartiles by linear interpolation 1.75 and 3.25 -> IQR/1.34 ~ 1.119403.
    const std::vector<double> r{1.0, 2.0, 3.0, 4.0};
    const double expected = 0.9 * (1.5 / 1.34) * std::pow(4.0, -0.2);
    EXPECT_NEAR(silverman_bandwidth(r), expected, 1e-15);
    EXPECT_NEAR(expected, 0.7635139420854616, 1e-12);
}

TEST(ErrorModelFit, EmptyInputsAreFitErrors) {
    const std::vector<double> none;
    try {
        fit_error_kde(none);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::fit);
    }
    const std::vector<double> far{30.0, -40.0};
    try {
        fit_error_kde(far, 20.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::fit);
    }
}

TEST(KdeDensity, SingleKernelClosedForm) {
    const ErrorModel m{{0.0}, 0.5, 20.0};
    EXPECT_NEAR(kde_density(m, 0.0), 1.0 / (0.5 * std::sqrt(2.0 * std::numbers::pi)), 1e-15);
    EXPECT_NEAR(kde_density(m, 0.0), 0.797885, 1e-6);
}

TEST(KdeDensity, TwoKernelsAtZeroEqualPhiOfOne) {
    const ErrorModel m{{-1.0, 1.0}, 1.0, 20.0};
    const double oracle = kernel_sum(m.residuals, 1.0, 0.0);
    EXPECT_NEAR(oracle, 0.24197072451914337, 1e-15);
    EXPECT_NEAR(kde_density(m, 0.0), oracle, 1e-15);
}

TEST(KdeDensity, MatchesKernelSumOracleEverywhere) {
    const auto r = normal_draws(50, 3, 4.0);
    const auto m = fit_error_kde(r);
    for (double e = -15.0; e <= 15.0; e += 0.37) {
        EXPECT_NEAR(kde_density(m, e), kernel_sum(m.residuals, m.bandwidth, e), 1e-14);
        EXPECT_GE(kde_density(m, e), 0.0);
    }
}

TEST(KdeDensity, GaussianTail) {
    const ErrorModel m{{-2.0, 0.5, 3.0}, 0.8, 20.0};
    const double far = 3.0 + 10.0 * 0.8;
    EXPECT_LT(kde_density(m, far), 1e-8 * kde_density(m, 3.0));
}

TEST(KdeDensity, SymmetricInTheResidualMultiset) {
    const ErrorModel a{{-2.0, 0.5, 3.0, 3.0}, 0.8, 20.0};
    const ErrorModel b{{3.0, 0.5, 3.0, -2.0}, 0.8, 20.0};
    for (double e = -5; e < 5; e += 0.5) {
        EXPECT_NEAR(kde_density(a, e), kde_density(b, e), 1e-15);
    }
}

TEST(KdeDensity, IntegratesToOne) {
    const auto r = normal_draws(300, 8, 5.0);
    const auto m = fit_error_kde(r);
    const double lo = -m.clip - 10.0 * m.bandwidth;
    const double hi = m.clip + 10.0 * m.bandwidth;
    EXPECT_NEAR(trapezoid_mass(m, lo, hi, 20000), 1.0, 1e-3);
}

TEST(SampleError, AllDrawsWithinTheClip) {
    const std::vector<double> r{-19.5, 19.5, 0.0, 10.0};
    const ErrorModel m{r, 3.0, 20.0};
    Rng rng = make_stream(1);
    for (int i = 0; i < 100000; ++i) {
        const double e = sample_error(m, rng);
        ASSERT_GE(e, -20.0);
        ASSERT_LE(e, 20.0);
    }
}

TEST(SampleError, NarrowKernelReproducesTheAtom) {
    const ErrorModel m{{0.0}, 1e-6, 20.0};
    Rng rng = make_stream(2);
    for (int i = 0; i < 1000; ++i) {
        EXPECT_NEAR(sample_error(m, rng), 0.0, 1e-4);
    }
}

TEST(SampleError, SymmetricMixtureHasZeroMean) {
    const ErrorModel m{{-2.0, 2.0}, 0.5, 20.0};
    Rng rng = make_stream(3);
    double acc = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        acc += sample_error(m, rng);
    }
    EXPECT_NEAR(acc / n, 0.0, 0.05);
}

TEST(SampleError, HistogramMatchesRenormalisedDensity) {
    const ErrorModel m{{-18.0, -4.0, 0.0, 1.0, 2.5, 19.0}, 2.0, 20.0};
    Rng rng = make_stream(4);
    const int n = 100000;
    const double width = 0.5;
    const int bins = static_cast<int>(40.0 / width);
    std::vector<double> hist(static_cast<std::size_t>(bins), 0.0);
    for (int i = 0; i < n; ++i) {
        const double e = sample_error(m, rng);
        const int b = std::min(bins - 1, static_cast<int>((e + 20.0) / width));
        hist[static_cast<std::size_t>(b)] += 1.0 / n;
    }
    const double mass = trapezoid_mass(m, -20.0, 20.0, 8000);
    double tv = 0.0;
    for (int b = 0; b < bins; ++b) {
        const double lo = -20.0 + b * width;
        const double p = trapezoid_mass(m, lo, lo + width, 50) / mass;
        tv += std::abs(p - hist[static_cast<std::size_t>(b)]);
    }
    EXPECT_LT(0.5 * tv, 0.05);
}

TEST(SampleError, SameSeedSameStream) {
    const ErrorModel m{{-1.0, 0.0, 4.0}, 0.7, 20.0};
    Rng a = make_stream(9);
    Rng b = make_stream(9);
    for (int i = 0; i < 100; ++i) {
        EXPECT_EQ(sample_error(m, a), sample_error(m, b));
    }
}
