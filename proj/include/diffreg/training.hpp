#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffreg/baseline.hpp"
#include "diffreg/dar.hpp"
#include "diffreg/error_model.hpp"
#include "diffreg/inference.hpp"
#include "diffreg/objective.hpp"
#include "diffreg/parallel.hpp"
#include "diffreg/retrieval.hpp"

namespace diffreg {

enum class ErrorDistribution {
    kde,     ///< smoothed bootstrap from the fitted residual KDE
    uniform  ///< discrete uniform on -radius..radius (ablation)
};

struct TrainConfig {
    int epochs = 150;
    std::size_t batch_size = 32;
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    ErrorDistribution error_dist = ErrorDistribution::kde;
    int uniform_radius = 3;
    bool inner_absolute_term = true;
    std::size_t threads = 1;

    void validate() const {
        require(epochs > 0, ErrorKind::config, "epochs must be positive");
        require(batch_size > 0, ErrorKind::config, "batch size must be positive");
        require(std::isfinite(learning_rate) && learning_rate >= 0.0, ErrorKind::config,
                "learning rate must be >= 0");
        require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorKind::config,
                "Adam betas must lie in [0, 1)");
        require(uniform_radius >= 0, ErrorKind::config, "uniform radius must be >= 0");
    }
};

/// Everything train_dar needs besides data. DAR feature_dim and label bounds are
/// taken from the reference index.
struct TrainOptions {
    TrainConfig train;
    DarConfig dar;
    RetrievalConfig retrieval;
};

// ---------------------------------------------------------------------------
// Augmentation

/// Draws the retrieval-age perturbation epsilon of a training query.
class ErrorSampler {
public:
    ErrorSampler(const ErrorModel& model, ErrorDistribution kind, int radius = 3)
        : model_(&model), kind_(kind), radius_(radius) {}

    double sample(Rng& rng) const {
        if (kind_ == ErrorDistribution::uniform) {
            return static_cast<double>(std::uniform_int_distribution<int>(-radius_, radius_)(rng));
        }
        return sample_error(*model_, rng);
    }

private:
    const ErrorModel* model_;
    ErrorDistribution kind_;
    int radius_;
};

// ---------------------------------------------------------------------------
// Batch construction

enum class Orientation { forward, reverse };

/// One DAE evaluation: a-side vs b-side, both as positions in the training set.
struct OrientedPair {
    std::size_t query = 0; // owning query
    std::size_t a_index = 0;
    int a_age = 0;
    std::size_t b_index = 0;
    int b_age = 0;
    double target = 0.0; // a-side label - b-side label
    int class_index = 0; // clamp(round(target), -C, C) + C
    Orientation orientation = Orientation::forward;
};

struct QueryRecord {
    std::size_t query = 0;
    double epsilon = 0.0;
    int retrieval_age = 0;
    std::vector<std::size_t> references;
    std::vector<OrientedPair> pairs; // R forward pairs followed by their R reverses
};

/// Perturb each query's age with epsilon, retrieve its references (own subject excluded)
/// and emit both orientations of every query-reference pair.
inline std::vector<QueryRecord> build_training_batch(const ReferenceIndex& idx, std::span<const std::size_t> queries,
                                                     const ErrorSampler& err, const RetrievalConfig& rc,
                                                     int half_classes, std::span<Rng* const> query_rngs) {
    require(query_rngs.size() == queries.size(), ErrorKind::input, "one rng per query required");
    std::vector<QueryRecord> out;
    out.reserve(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) {
        Rng& rng = *query_rngs[i];
        const Sample& q = idx.sample(queries[i]);
        QueryRecord rec;
        rec.query = queries[i];
        rec.epsilon = err.sample(rng);
        const double perturbed = std::clamp(q.label + rec.epsilon, static_cast<double>(idx.label_min()),
                                            static_cast<double>(idx.label_max()));
        rec.retrieval_age = label_bucket(perturbed);
        rec.references = retrieve_references(idx, q.features, rec.retrieval_age, rc, rng, q.subject_id).references;

        for (std::size_t r : rec.references) {
            const Sample& ref = idx.sample(r);
            const double delta = q.label - ref.label;
            rec.pairs.push_back({rec.query, rec.query, rec.retrieval_age, r, label_bucket(ref.label), delta,
                                 class_target(delta, half_classes), Orientation::forward});
        }
        for (std::size_t r : rec.references) {
            const Sample& ref = idx.sample(r);
            const double delta = ref.label - q.label;
            rec.pairs.push_back({rec.query, r, label_bucket(ref.label), rec.query, rec.retrieval_age, delta,
                                 class_target(delta, half_classes), Orientation::reverse});
        }
        out.push_back(std::move(rec));
    }
    return out;
}

/// Objective input for one record; the refined estimate starts from the perturbed retrieval age.
inline QueryPairs to_query_pairs(const ReferenceIndex& idx, const QueryRecord& rec) {
    QueryPairs qp;
    qp.label = idx.sample(rec.query).label;
    qp.initial = rec.retrieval_age;
    qp.num_forward = rec.references.size();
    for (const auto& pr : rec.pairs) {
        qp.pairs.push_back({idx.sample(pr.a_index).features, pr.a_age, idx.sample(pr.b_index).features, pr.b_age});
        qp.targets.push_back(pr.target);
    }
    return qp;
}

// ---------------------------------------------------------------------------
// Optimiser

/// Cosine annealing from base at t=0 to 0 at t=total.
inline double cosine_step_size(double base, std::size_t t, std::size_t total) {
    if (total == 0) {
        return base;
    }
    const double frac = std::min(1.0, static_cast<double>(t) / static_cast<double>(total));
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
};

/// Bias-corrected Adam update at step index t (0-based) of a `total`-step cosine schedule.
inline void optimizer_step(std::vector<double>& params, const std::vector<double>& grads, AdamState& state,
                           std::size_t t, std::size_t total, const TrainConfig& cfg) {
    require(params.size() == grads.size(), ErrorKind::input, "parameter/gradient size mismatch");
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    require(state.m.size() == params.size(), ErrorKind::input, "optimiser state size mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        require(std::isfinite(grads[i]), ErrorKind::numeric,
                "non-finite gradient at parameter " + std::to_string(i) + "; aborting step " + std::to_string(t));
    }
    const double lr = cosine_step_size(cfg.learning_rate, t, total);
    const double k = static_cast<double>(t + 1);
    const double c1 = 1.0 - std::pow(cfg.beta1, k);
    const double c2 = 1.0 - std::pow(cfg.beta2, k);
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_epsilon);
    }
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
    int epoch = 0; // 1-based
    LossBreakdown loss;
    double step_size = 0.0; // at the last step of the epoch
    double monitor_mae = std::numeric_limits<double>::quiet_NaN();
};

inline nlohmann::json to_json(const EpochLog& e) {
    nlohmann::json j;
    j["epoch"] = e.epoch;
    j["loss"] = e.loss.total;
    j["mse_abs"] = e.loss.mse_abs;
    j["ce"] = e.loss.ce;
    j["mean"] = e.loss.mean;
    j["variance"] = e.loss.variance;
    j["mse_diff"] = e.loss.mse_diff;
    j["step_size"] = e.step_size;
    if (std::isfinite(e.monitor_mae)) {
        j["monitor_mae"] = e.monitor_mae;
    }
    return j;
}

struct TrainResult {
    DarParams params;
    std::vector<EpochLog> log;
};

struct TrainHooks {
    /// Called after every epoch.
    std::function<void(const EpochLog&)> on_epoch;
    /// Optional held-out set scored (refined MAE) after every epoch.
    const Dataset* monitor = nullptr;
    /// Warm start; must share the DAR configuration.
    const DarParams* init = nullptr;
    /// Salt for the test-time retrieval seed used by the monitor.
    std::uint64_t monitor_salt = 0;
};

/// Mean |refined - label| over `ds`, given precomputed baseline estimates.
inline double refined_mae(const ReferenceIndex& idx, const DarParams& p, const RetrievalConfig& rc, const Dataset& ds,
                          std::span<const double> initial, std::uint64_t salt, std::size_t threads = 1) {
    require(!ds.empty() && initial.size() == ds.size(), ErrorKind::evaluation, "monitor set is empty or misaligned");
    std::vector<double> err(ds.size());
    parallel_for(ds.size(), threads, [&](std::size_t i) {
        const auto& s = ds.samples[i];
        err[i] = std::abs(refine_estimate(idx, p, rc, s.features, initial[i], salt).refined - s.label);
    });
    return std::accumulate(err.begin(), err.end(), 0.0) / static_cast<double>(err.size());
}

namespace detail {
inline constexpr std::size_t kChunkQueries = 8;
}

/// Train the differential regressor on the indexed training partition.
/// Query order, epsilon draws, retrieval and dropout all come from per-(epoch, query)
/// streams of `seed`, and chunk gradients are summed in a fixed order, so the result
/// is identical for any thread count.
inline TrainResult train_dar(std::shared_ptr<const ReferenceIndex> idx, const BaselinePredictor& bar,
                             const ErrorModel& err, const TrainOptions& opts, std::uint64_t seed,
                             const TrainHooks& hooks = {}) {
    require(idx != nullptr, ErrorKind::input, "train_dar needs a reference index");
    opts.train.validate();
    opts.retrieval.validate();
    err.validate();
    const Dataset& train = idx->dataset();

    DarConfig dcfg = opts.dar;
    dcfg.feature_dim = train.feature_dim;
    dcfg.label_min = train.label_min;
    dcfg.label_max = train.label_max;

    TrainResult result;
    if (hooks.init != nullptr) {
        require(hooks.init->config() == dcfg, ErrorKind::config, "warm-start parameters have a different DAR config");
        result.params = *hooks.init;
    } else {
        result.params = init_dar_params(dcfg, seed);
        set_input_normalization(result.params, train);
    }
    DarParams& params = result.params;

    std::vector<double> monitor_initial;
    if (hooks.monitor != nullptr) {
        for (const auto& s : hooks.monitor->samples) {
            monitor_initial.push_back(baseline_predict(bar, s.features));
        }
    }

    LossConfig lcfg;
    lcfg.half_classes = dcfg.half_classes;
    lcfg.inner_absolute_term = opts.train.inner_absolute_term;
    const ErrorSampler sampler(err, opts.train.error_dist, opts.train.uniform_radius);

    const std::size_t n = train.size();
    const std::size_t bs = std::min(opts.train.batch_size, n);
    const std::size_t steps_per_epoch = (n + bs - 1) / bs;
    const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(opts.train.epochs);
    AdamState adam;
    std::size_t step = 0;

    std::vector<std::size_t> order(n);
    for (int epoch = 1; epoch <= opts.train.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng = make_stream(seed, {0x0e0cu, static_cast<std::uint64_t>(epoch)});
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        EpochLog elog;
        elog.epoch = epoch;
        for (std::size_t start = 0; start < n; start += bs) {
            const std::size_t stop = std::min(n, start + bs);
            const std::size_t batch_n = stop - start;
            const std::size_t chunks = (batch_n + detail::kChunkQueries - 1) / detail::kChunkQueries;
            std::vector<std::vector<double>> chunk_grad(chunks);
            std::vector<LossBreakdown> chunk_loss(chunks);

            parallel_for(chunks, opts.train.threads, [&](std::size_t c) {
                const std::size_t c0 = start + c * detail::kChunkQueries;
                const std::size_t c1 = std::min(stop, c0 + detail::kChunkQueries);
                std::vector<std::size_t> queries(order.begin() + static_cast<std::ptrdiff_t>(c0),
                                                 order.begin() + static_cast<std::ptrdiff_t>(c1));
                std::vector<Rng> rngs;
                rngs.reserve(queries.size());
                for (std::size_t q : queries) {
                    rngs.push_back(make_stream(seed, {static_cast<std::uint64_t>(epoch), q}));
                }
                std::vector<Rng*> rng_ptrs;
                for (auto& r : rngs) {
                    rng_ptrs.push_back(&r);
                }
                const auto records = build_training_batch(*idx, queries, sampler, opts.retrieval, dcfg.half_classes,
                                                          rng_ptrs);
                std::vector<QueryPairs> qps;
                qps.reserve(records.size());
                for (const auto& rec : records) {
                    qps.push_back(to_query_pairs(*idx, rec));
                }
                chunk_grad[c].assign(params.size(), 0.0);
                auto res = evaluate_objective(params, qps, lcfg, Mode::train, rng_ptrs, &chunk_grad[c]);
                // evaluate_objective averages over the chunk; rescale to the batch mean.
                const double w = static_cast<double>(queries.size()) / static_cast<double>(batch_n);
                for (auto& g : chunk_grad[c]) {
                    g *= w;
                }
                chunk_loss[c] = res.loss;
                chunk_loss[c] *= static_cast<double>(queries.size());
            });

            std::vector<double> grad = std::move(chunk_grad[0]);
            for (std::size_t c = 1; c < chunks; ++c) {
                for (std::size_t i = 0; i < grad.size(); ++i) {
                    grad[i] += chunk_grad[c][i];
                }
            }
            for (const auto& l : chunk_loss) {
                elog.loss += l;
            }
            elog.step_size = cosine_step_size(opts.train.learning_rate, step, total_steps);
            optimizer_step(params.values(), grad, adam, step, total_steps, opts.train);
            ++step;
        }
        elog.loss *= 1.0 / static_cast<double>(n);
        if (hooks.monitor != nullptr) {
            elog.monitor_mae = refined_mae(*idx, params, opts.retrieval, *hooks.monitor, monitor_initial,
                                           hooks.monitor_salt, opts.train.threads);
        }
        if (hooks.on_epoch) {
            hooks.on_epoch(elog);
        }
        result.log.push_back(elog);
    }
    return result;
}

inline TrainResult train_dar(const Dataset& train, const BaselinePredictor& bar, const ErrorModel& err,
                             const TrainOptions& opts, std::uint64_t seed, const TrainHooks& hooks = {}) {
    return train_dar(std::make_shared<const ReferenceIndex>(std::make_shared<const Dataset>(train)), bar, err, opts,
                     seed, hooks);
}

} // namespace diffreg
