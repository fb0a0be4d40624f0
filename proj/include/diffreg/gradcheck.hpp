#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "diffreg/dar.hpp"
#include "diffreg/objective.hpp"

namespace diffreg {

struct GradCheckConfig {
    std::size_t feature_dim = 16;
    std::size_t embed_dim = 4;
    std::vector<std::size_t> hidden{32, 16};
    int half_classes = 4;
    std::size_t num_references = 2;
    std::size_t num_queries = 3;
    int label_min = 20;
    int label_max = 40;
    double step = 1e-4;
    /// Floor on the relative-error denominator: entries below it in magnitude must
    /// agree to abs_floor * tolerance in absolute terms (central differences cannot
    /// resolve them better at this step size).
    double abs_floor = 1e-5;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::map<std::string, double> per_block; // max relative error per parameter block
    std::size_t checked = 0;
    std::size_t skipped_kinks = 0; // entries whose perturbation crosses a LeakyReLU kink
    double seconds = 0.0;
};

/// A random batch for the tiny gradient-check network. Owns the feature storage.
struct GradCheckProblem {
    DarParams params;
    std::vector<std::vector<double>> features;
    std::vector<QueryPairs> batch;
};

inline GradCheckProblem make_gradcheck_problem(const GradCheckConfig& g, std::uint64_t seed) {
    DarConfig cfg;
    cfg.feature_dim = g.feature_dim;
    cfg.embed_dim = g.embed_dim;
    cfg.hidden = g.hidden;
    cfg.half_classes = g.half_classes;
    cfg.dropout = 0.0;
    cfg.label_min = g.label_min;
    cfg.label_max = g.label_max;

    GradCheckProblem prob{init_dar_params(cfg, seed), {}, {}};
    Rng rng = make_stream(seed, {0x6c4eu});
    std::normal_distribution<double> normal(0.0, 1.0);
    // Full-scale heads so no gradient group is vanishingly small.
    for (std::size_t b : {prob.params.class_weight_block(), prob.params.diff_weight_block()}) {
        prob.params.block(b) *= 10.0;
    }
    for (std::size_t i = 0; i < g.feature_dim; ++i) {
        prob.params.input_mean[i] = 0.1 * normal(rng);
        prob.params.input_scale[i] = 1.0 + 0.2 * std::abs(normal(rng));
    }

    // Queries anywhere in range; references near the (noisy) retrieval age, as retrieval produces.
    std::uniform_int_distribution<int> age(g.label_min, g.label_max);
    std::uniform_int_distribution<int> offset(-2, 2);
    const std::size_t n_samples = g.num_queries * (1 + g.num_references);
    prob.features.resize(n_samples);
    std::vector<double> labels(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) {
        prob.features[s].resize(g.feature_dim);
        for (auto& v : prob.features[s]) {
            v = normal(rng);
        }
    }
    std::size_t next = 0;
    for (std::size_t q = 0; q < g.num_queries; ++q) {
        const std::size_t qi = next++;
        labels[qi] = age(rng) + 0.3 * normal(rng);
        QueryPairs qp;
        qp.label = labels[qi];
        const int q_age = std::clamp(label_bucket(labels[qi]) + offset(rng), g.label_min, g.label_max);
        for (std::size_t r = 0; r < g.num_references; ++r) {
            labels[next + r] = std::clamp(q_age + offset(rng), g.label_min, g.label_max) + 0.3 * normal(rng);
        }
        qp.initial = q_age;
        qp.num_forward = g.num_references;
        std::vector<std::size_t> refs;
        for (std::size_t r = 0; r < g.num_references; ++r) {
            refs.push_back(next++);
        }
        for (std::size_t ri : refs) {
            qp.pairs.push_back({prob.features[qi], q_age, prob.features[ri], label_bucket(labels[ri])});
            qp.targets.push_back(labels[qi] - labels[ri]);
        }
        for (std::size_t ri : refs) {
            qp.pairs.push_back({prob.features[ri], label_bucket(labels[ri]), prob.features[qi], q_age});
            qp.targets.push_back(labels[ri] - labels[qi]);
        }
        prob.batch.push_back(std::move(qp));
    }
    return prob;
}

namespace detail {

inline std::vector<bool> activation_signs(const DarParams& p, std::span<const QueryPairs> batch) {
    std::vector<PairInput> inputs;
    for (const auto& qp : batch) {
        inputs.insert(inputs.end(), qp.pairs.begin(), qp.pairs.end());
    }
    const auto fw = forward_pairs(p, inputs, Mode::eval);
    std::vector<bool> signs;
    for (const auto& z : fw.pre) {
        for (Eigen::Index i = 0; i < z.size(); ++i) {
            signs.push_back(z.data()[i] > 0.0);
        }
    }
    return signs;
}

} // namespace detail

/// Analytic gradients of the full loss against central finite differences, every parameter.
inline GradCheckReport gradient_check(const GradCheckConfig& g, std::uint64_t seed) {
    const auto start = std::chrono::steady_clock::now();
    GradCheckProblem prob = make_gradcheck_problem(g, seed);
    DarParams& p = prob.params;
    LossConfig lcfg;
    lcfg.half_classes = g.half_classes;

    const auto analytic = backward_gradients(p, prob.batch, lcfg, Mode::eval);
    const auto base_signs = detail::activation_signs(p, prob.batch);
    auto loss_at = [&]() { return evaluate_objective(p, prob.batch, lcfg, Mode::eval, {}, nullptr).loss.total; };

    GradCheckReport report;
    for (std::size_t b = 0; b < p.blocks().size(); ++b) {
        const auto& blk = p.blocks()[b];
        double block_max = 0.0;
        for (std::size_t i = blk.offset; i < blk.offset + blk.size(); ++i) {
            const double orig = p.values()[i];
            p.values()[i] = orig + g.step;
            const double up = loss_at();
            const bool kink_up = detail::activation_signs(p, prob.batch) != base_signs;
            p.values()[i] = orig - g.step;
            const double down = loss_at();
            const bool kink_down = detail::activation_signs(p, prob.batch) != base_signs;
            p.values()[i] = orig;
            if (kink_up || kink_down) {
                ++report.skipped_kinks;
                continue;
            }
            const double numeric = (up - down) / (2.0 * g.step);
            const double a = analytic.grad[i];
            const double scale = std::max({std::abs(a), std::abs(numeric), g.abs_floor});
            const double rel = std::abs(a - numeric) / scale;
            block_max = std::max(block_max, rel);
            ++report.checked;
        }
        report.per_block[blk.name] = block_max;
        report.max_rel_err = std::max(report.max_rel_err, block_max);
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

} // namespace diffreg
