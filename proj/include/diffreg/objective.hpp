#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "diffreg/dar.hpp"
#include "diffreg/error.hpp"

namespace diffreg {

struct LossConfig {
    int half_classes = 20;
    /// Keep the second copy of the absolute MSE inside the per-reference average.
    bool inner_absolute_term = true;
    double prob_floor = 1e-12;
};

/// Class index of a difference: clamp(round(delta), -C, C) + C.
inline int class_target(double delta, int half_classes) {
    const long r = std::lround(delta);
    return static_cast<int>(std::clamp<long>(r, -half_classes, half_classes)) + half_classes;
}

struct PairLoss {
    double ce = 0.0;
    double mean = 0.0;     // 1/2 (m - delta)^2, m = sum w_c c
    double variance = 0.0; // sum w_c (c - m)^2
    double mse_diff = 0.0; // (d_r - delta)^2
};

inline PairLoss pair_losses(std::span<const double> probs, double diff, double delta, int half_classes,
                            double prob_floor = 1e-12) {
    require(probs.size() == static_cast<std::size_t>(2 * half_classes + 1), ErrorKind::input,
            "class probability vector has the wrong length");
    PairLoss out;
    const int k = class_target(delta, half_classes);
    out.ce = -std::log(std::max(probs[static_cast<std::size_t>(k)], prob_floor));
    double m = 0.0;
    for (std::size_t c = 0; c < probs.size(); ++c) {
        m += probs[c] * (static_cast<double>(c) - half_classes);
    }
    out.mean = 0.5 * (m - delta) * (m - delta);
    for (std::size_t c = 0; c < probs.size(); ++c) {
        const double dev = static_cast<double>(c) - half_classes - m;
        out.variance += probs[c] * dev * dev;
    }
    out.mse_diff = (diff - delta) * (diff - delta);
    return out;
}

struct LossBreakdown {
    double mse_abs = 0.0;  // (y-hat - a)^2
    double ce = 0.0;       // per-pair terms, averaged over oriented pairs
    double mean = 0.0;
    double variance = 0.0;
    double mse_diff = 0.0;
    double total = 0.0;

    LossBreakdown& operator+=(const LossBreakdown& o) {
        mse_abs += o.mse_abs;
        ce += o.ce;
        mean += o.mean;
        variance += o.variance;
        mse_diff += o.mse_diff;
        total += o.total;
        return *this;
    }
    LossBreakdown& operator*=(double s) {
        mse_abs *= s;
        ce *= s;
        mean *= s;
        variance *= s;
        mse_diff *= s;
        total *= s;
        return *this;
    }
};

/// L = L_abs + mean_over_oriented_pairs(CE + M + V + MSE_d) + [inner] L_abs.
inline LossBreakdown compute_losses(double refined, double label, std::span<const PairLoss> pairs,
                                    bool inner_absolute_term = true) {
    require(!pairs.empty(), ErrorKind::input, "loss needs at least one oriented pair");
    LossBreakdown out;
    out.mse_abs = (refined - label) * (refined - label);
    for (const auto& p : pairs) {
        out.ce += p.ce;
        out.mean += p.mean;
        out.variance += p.variance;
        out.mse_diff += p.mse_diff;
    }
    const double inv = 1.0 / static_cast<double>(pairs.size());
    out.ce *= inv;
    out.mean *= inv;
    out.variance *= inv;
    out.mse_diff *= inv;
    out.total = (inner_absolute_term ? 2.0 : 1.0) * out.mse_abs + out.ce + out.mean + out.variance + out.mse_diff;
    return out;
}

/// One query's oriented pairs. The first `num_forward` pairs have the query on
/// the a-side and feed the refined estimate; the rest are their reverses.
struct QueryPairs {
    double label = 0.0;   // a_q
    double initial = 0.0; // a-hat used in the refined estimate
    std::size_t num_forward = 0;
    std::vector<PairInput> pairs;
    std::vector<double> targets; // delta per pair (a-side label - b-side label)
};

struct ObjectiveResult {
    LossBreakdown loss;               // mean over queries
    std::vector<QueryOutput> outputs; // per query
};

/// Loss over a batch of queries (mean over queries) and, when `grad` is given,
/// its exact gradient accumulated into `grad` (same layout as p.values()).
/// In train mode `query_rngs[q]` drives the dropout masks of query q's pairs.
inline ObjectiveResult evaluate_objective(const DarParams& p, std::span<const QueryPairs> batch,
                                          const LossConfig& lcfg, Mode mode, std::span<Rng* const> query_rngs,
                                          std::vector<double>* grad) {
    require(!batch.empty(), ErrorKind::input, "empty batch");
    require(lcfg.half_classes == p.config().half_classes, ErrorKind::config, "loss C differs from network C");
    std::vector<PairInput> inputs;
    std::vector<Rng*> col_rngs;
    std::vector<std::size_t> first;
    for (std::size_t q = 0; q < batch.size(); ++q) {
        const auto& qp = batch[q];
        require(qp.num_forward > 0 && qp.pairs.size() >= qp.num_forward && qp.targets.size() == qp.pairs.size(),
                ErrorKind::input, "malformed query pair set");
        first.push_back(inputs.size());
        for (const auto& pr : qp.pairs) {
            inputs.push_back(pr);
            if (mode == Mode::train) {
                col_rngs.push_back(query_rngs[q]);
            }
        }
    }
    const PairBatch fw = forward_pairs(p, inputs, mode, col_rngs);

    const int C = lcfg.half_classes;
    const auto K = static_cast<Eigen::Index>(2 * C + 1);
    const Eigen::VectorXd centers = class_centers(C);
    const bool second_order = p.config().second_order;
    HeadGradients up(K, fw.size());
    const double scale = 1.0 / static_cast<double>(batch.size());

    ObjectiveResult result;
    for (std::size_t q = 0; q < batch.size(); ++q) {
        const auto& qp = batch[q];
        const auto base = static_cast<Eigen::Index>(first[q]);
        const std::size_t npairs = qp.pairs.size();
        const std::size_t nf = qp.num_forward;

        std::vector<double> diffs(nf);
        std::vector<double> logits(nf);
        for (std::size_t r = 0; r < nf; ++r) {
            diffs[r] = fw.diff(base + static_cast<Eigen::Index>(r));
            logits[r] = fw.ref_logit(base + static_cast<Eigen::Index>(r));
        }
        QueryOutput qo = aggregate_refinement(qp.initial, diffs, logits);

        std::vector<PairLoss> terms(npairs);
        for (std::size_t j = 0; j < npairs; ++j) {
            const auto col = base + static_cast<Eigen::Index>(j);
            terms[j] = pair_losses(std::span<const double>(fw.probs.col(col).data(), static_cast<std::size_t>(K)),
                                   fw.diff(col), qp.targets[j], C, lcfg.prob_floor);
        }
        LossBreakdown lb = compute_losses(qo.refined, qp.label, terms, lcfg.inner_absolute_term);
        lb *= scale;
        result.loss += lb;

        if (grad != nullptr) {
            const double abs_coef = lcfg.inner_absolute_term ? 2.0 : 1.0;
            const double g_refined = scale * abs_coef * 2.0 * (qo.refined - qp.label);
            const double shift = qo.refined - qo.initial;
            const double beta = scale / static_cast<double>(npairs);
            for (std::size_t j = 0; j < npairs; ++j) {
                const auto col = base + static_cast<Eigen::Index>(j);
                const auto w = fw.probs.col(col);
                const double delta = qp.targets[j];
                double g_diff = beta * 2.0 * (fw.diff(col) - delta);
                if (j < nf) {
                    g_diff += g_refined * qo.weights[j];
                    up.ref(col) = g_refined * qo.weights[j] * (fw.diff(col) - shift);
                }
                const double m = w.dot(centers);
                // dL/dw_c before the softmax Jacobian (CE handled directly on logits).
                Eigen::VectorXd g_w = g_diff * (centers + fw.second.col(col));
                g_w += beta * (m - delta) * centers;
                g_w += beta * (centers.array() - m).square().matrix();
                const double wg = w.dot(g_w);
                up.logits.col(col) = w.cwiseProduct(g_w.array().matrix() - Eigen::VectorXd::Constant(K, wg));
                const int k = class_target(delta, C);
                if (w(k) > lcfg.prob_floor) {
                    up.logits.col(col) += beta * w;
                    up.logits(k, col) -= beta;
                }
                if (second_order) {
                    up.second.col(col) = g_diff * w;
                }
            }
        }
        result.outputs.push_back(std::move(qo));
    }
    if (grad != nullptr) {
        backward_pairs(p, fw, up, *grad);
    }
    return result;
}

/// Loss and exact gradient of a batch; the gradient has the layout of p.values().
struct GradientResult {
    LossBreakdown loss;
    std::vector<double> grad;
};

inline GradientResult backward_gradients(const DarParams& p, std::span<const QueryPairs> batch,
                                         const LossConfig& lcfg, Mode mode = Mode::eval,
                                         std::span<Rng* const> query_rngs = {}) {
    GradientResult out;
    out.grad.assign(p.size(), 0.0);
    out.loss = evaluate_objective(p, batch, lcfg, mode, query_rngs, &out.grad).loss;
    for (double g : out.grad) {
        require(std::isfinite(g), ErrorKind::numeric, "non-finite gradient");
    }
    return out;
}

} // namespace diffreg
