#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "diffreg/dataset.hpp"
#include "diffreg/error.hpp"

namespace diffreg {

/// Any scalar regressor that produces the initial estimate refined downstream.
class BaselinePredictor {
public:
    virtual ~BaselinePredictor() = default;
    virtual double predict(std::span<const double> features) const = 0;
    virtual std::size_t feature_dim() const = 0;
};

inline double baseline_predict(const BaselinePredictor& m, std::span<const double> features) {
    require(features.size() == m.feature_dim(), ErrorKind::input,
            "baseline expects " + std::to_string(m.feature_dim()) + " features, got " +
                std::to_string(features.size()));
    return m.predict(features);
}

/// Signed residuals prediction - label, aligned with the dataset order.
inline std::vector<double> compute_residuals(const BaselinePredictor& m, const Dataset& ds) {
    std::vector<double> out;
    out.reserve(ds.size());
    for (const auto& s : ds.samples) {
        out.push_back(baseline_predict(m, s.features) - s.label);
    }
    return out;
}

class RidgeModel final : public BaselinePredictor {
public:
    RidgeModel() = default;
    RidgeModel(std::vector<double> weights, double bias, double lambda)
        : weights_(std::move(weights)), bias_(bias), lambda_(lambda) {}

    double predict(std::span<const double> features) const override {
        double acc = bias_;
        for (std::size_t i = 0; i < weights_.size(); ++i) {
            acc += weights_[i] * features[i];
        }
        return acc;
    }
    std::size_t feature_dim() const override { return weights_.size(); }

    const std::vector<double>& weights() const { return weights_; }
    double bias() const { return bias_; }
    double lambda() const { return lambda_; }

private:
    std::vector<double> weights_;
    double bias_ = 0.0;
    double lambda_ = 0.0;
};

/// Exact minimiser of sum (w.x + b - a)^2 + lambda ||w||^2, bias unpenalised,
/// from the normal equations of the bias-augmented design.
inline RidgeModel fit_ridge_baseline(const Dataset& train, double lambda) {
    require(!train.empty(), ErrorKind::fit, "ridge fit on an empty dataset");
    require(std::isfinite(lambda) && lambda >= 0.0, ErrorKind::config, "ridge lambda must be >= 0");
    const auto n = static_cast<Eigen::Index>(train.size());
    const auto d = static_cast<Eigen::Index>(train.feature_dim);

    Eigen::MatrixXd x(n, d + 1);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& s = train.samples[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < d; ++j) {
            x(i, j) = s.features[static_cast<std::size_t>(j)];
        }
        x(i, d) = 1.0;
        y(i) = s.label;
    }
    Eigen::MatrixXd gram = x.transpose() * x;
    gram.diagonal().head(d).array() += lambda;
    const Eigen::VectorXd rhs = x.transpose() * y;

    Eigen::VectorXd theta;
    if (lambda == 0.0) {
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(gram);
        require(qr.rank() == d + 1, ErrorKind::fit,
                "normal equations are singular with lambda=0; use lambda > 0");
        theta = qr.solve(rhs);
    } else {
        Eigen::LLT<Eigen::MatrixXd> llt(gram);
        require(llt.info() == Eigen::Success, ErrorKind::fit, "ridge normal equations not positive definite");
        theta = llt.solve(rhs);
    }
    require(theta.allFinite(), ErrorKind::numeric, "ridge solution is not finite");

    std::vector<double> w(static_cast<std::size_t>(d));
    for (Eigen::Index j = 0; j < d; ++j) {
        w[static_cast<std::size_t>(j)] = theta(j);
    }
    return RidgeModel(std::move(w), theta(d), lambda);
}

} // namespace diffreg
