#pragma once

#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "diffreg/dataset.hpp"
#include "diffreg/error.hpp"
#include "diffreg/random.hpp"

namespace diffreg {

inline constexpr double kLeakySlope = 0.01;

/// Shape of the differential regressor.
struct DarConfig {
    std::size_t feature_dim = 0;
    std::size_t embed_dim = 16;
    std::vector<std::size_t> hidden{2048, 1024, 512};
    int half_classes = 20; // C: difference classes -C..C
    double dropout = 0.2;
    int label_min = 0;
    int label_max = 0;
    /// false drops the per-class regressors and keeps only the class expectation.
    bool second_order = true;

    std::size_t num_classes() const { return static_cast<std::size_t>(2 * half_classes + 1); }
    std::size_t input_dim() const { return 2 * (feature_dim + embed_dim); }
    std::size_t num_ages() const { return static_cast<std::size_t>(label_max - label_min + 1); }
    std::size_t final_width() const { return hidden.back(); }

    void validate() const {
        require(feature_dim > 0, ErrorKind::config, "DAR feature_dim must be positive");
        require(embed_dim > 0, ErrorKind::config, "DAR embed_dim must be positive");
        require(!hidden.empty(), ErrorKind::config, "DAR needs at least one hidden layer");
        for (auto h : hidden) {
            require(h > 0, ErrorKind::config, "DAR hidden widths must be positive");
        }
        require(half_classes >= 1, ErrorKind::config, "C must be >= 1");
        require(dropout >= 0.0 && dropout < 1.0, ErrorKind::config, "dropout must lie in [0, 1)");
        require(label_min <= label_max, ErrorKind::config, "DAR label bounds are inverted");
    }

    friend bool operator==(const DarConfig&, const DarConfig&) = default;
};

struct ParamBlock {
    std::string name;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    std::size_t offset = 0;

    std::size_t size() const { return static_cast<std::size_t>(rows * cols); }

    friend bool operator==(const ParamBlock&, const ParamBlock&) = default;
};

using MatrixMap = Eigen::Map<Eigen::MatrixXd>;
using ConstMatrixMap = Eigen::Map<const Eigen::MatrixXd>;

/// Learnable parameters stored as one flat, column-major buffer with named blocks:
/// embedding (m x ages), backbone.{l}.weight/bias, class_head, diff_heads, ref_head.
/// The input standardisation (mean/scale per feature) is fixed, not learned.
class DarParams {
public:
    DarParams() = default;

    explicit DarParams(DarConfig cfg) : config_(std::move(cfg)) {
        config_.validate();
        const auto m = static_cast<Eigen::Index>(config_.embed_dim);
        const auto k = static_cast<Eigen::Index>(config_.num_classes());
        add("embedding", m, static_cast<Eigen::Index>(config_.num_ages()));
        Eigen::Index prev = static_cast<Eigen::Index>(config_.input_dim());
        for (std::size_t l = 0; l < config_.hidden.size(); ++l) {
            const auto h = static_cast<Eigen::Index>(config_.hidden[l]);
            add("backbone." + std::to_string(l) + ".weight", h, prev);
            add("backbone." + std::to_string(l) + ".bias", h, 1);
            prev = h;
        }
        add("class_head.weight", k, prev);
        add("class_head.bias", k, 1);
        add("diff_heads.weight", k, prev);
        add("diff_heads.bias", k, 1);
        add("ref_head.weight", 1, prev);
        add("ref_head.bias", 1, 1);
        values_.assign(total_, 0.0);
        input_mean.assign(config_.feature_dim, 0.0);
        input_scale.assign(config_.feature_dim, 1.0);
    }

    const DarConfig& config() const { return config_; }
    const std::vector<ParamBlock>& blocks() const { return blocks_; }
    std::size_t size() const { return total_; }
    std::size_t num_layers() const { return config_.hidden.size(); }

    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }

    // Block indices into blocks().
    static constexpr std::size_t embedding_block() { return 0; }
    std::size_t weight_block(std::size_t l) const { return 1 + 2 * l; }
    std::size_t bias_block(std::size_t l) const { return 2 + 2 * l; }
    std::size_t class_weight_block() const { return 1 + 2 * num_layers(); }
    std::size_t class_bias_block() const { return class_weight_block() + 1; }
    std::size_t diff_weight_block() const { return class_weight_block() + 2; }
    std::size_t diff_bias_block() const { return class_weight_block() + 3; }
    std::size_t ref_weight_block() const { return class_weight_block() + 4; }
    std::size_t ref_bias_block() const { return class_weight_block() + 5; }

    /// View of block `b` inside any buffer laid out like this parameter set (values or gradients).
    MatrixMap view(std::vector<double>& buffer, std::size_t b) const {
        const auto& blk = blocks_[b];
        return MatrixMap(buffer.data() + blk.offset, blk.rows, blk.cols);
    }
    ConstMatrixMap view(const std::vector<double>& buffer, std::size_t b) const {
        const auto& blk = blocks_[b];
        return ConstMatrixMap(buffer.data() + blk.offset, blk.rows, blk.cols);
    }
    MatrixMap block(std::size_t b) { return view(values_, b); }
    ConstMatrixMap block(std::size_t b) const { return view(values_, b); }

    std::vector<double> input_mean;
    std::vector<double> input_scale;

    friend bool operator==(const DarParams&, const DarParams&) = default;

private:
    void add(std::string name, Eigen::Index rows, Eigen::Index cols) {
        blocks_.push_back({std::move(name), rows, cols, total_});
        total_ += static_cast<std::size_t>(rows * cols);
    }

    DarConfig config_;
    std::vector<ParamBlock> blocks_;
    std::vector<double> values_;
    std::size_t total_ = 0;
};

/// Fan-in scaled uniform weights and biases, standard normal age embeddings.
/// The class and regression heads start 10x smaller so initial differentials stay near zero.
inline DarParams init_dar_params(const DarConfig& cfg, std::uint64_t seed) {
    DarParams p(cfg);
    Rng rng = make_stream(seed, {0x1417u});
    std::normal_distribution<double> normal(0.0, 1.0);
    auto emb = p.block(DarParams::embedding_block());
    for (Eigen::Index j = 0; j < emb.cols(); ++j) {
        for (Eigen::Index i = 0; i < emb.rows(); ++i) {
            emb(i, j) = normal(rng);
        }
    }
    auto fill = [&](std::size_t wb, std::size_t bb, double shrink) {
        auto w = p.block(wb);
        auto b = p.block(bb);
        const double bound = shrink / std::sqrt(static_cast<double>(w.cols()));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (Eigen::Index j = 0; j < w.cols(); ++j) {
            for (Eigen::Index i = 0; i < w.rows(); ++i) {
                w(i, j) = u(rng);
            }
        }
        for (Eigen::Index i = 0; i < b.rows(); ++i) {
            b(i, 0) = u(rng);
        }
    };
    for (std::size_t l = 0; l < p.num_layers(); ++l) {
        fill(p.weight_block(l), p.bias_block(l), 1.0);
    }
    fill(p.class_weight_block(), p.class_bias_block(), 0.1);
    fill(p.diff_weight_block(), p.diff_bias_block(), 0.1);
    fill(p.ref_weight_block(), p.ref_bias_block(), 1.0);
    return p;
}

/// Per-feature standardisation taken from the training features.
inline void set_input_normalization(DarParams& p, const Dataset& train) {
    const std::size_t d = p.config().feature_dim;
    require(train.feature_dim == d, ErrorKind::input, "normalisation data has the wrong feature dimension");
    require(!train.empty(), ErrorKind::input, "normalisation needs at least one sample");
    std::vector<double> mean(d, 0.0);
    std::vector<double> sq(d, 0.0);
    for (const auto& s : train.samples) {
        for (std::size_t i = 0; i < d; ++i) {
            mean[i] += s.features[i];
        }
    }
    const double n = static_cast<double>(train.size());
    for (auto& v : mean) {
        v /= n;
    }
    for (const auto& s : train.samples) {
        for (std::size_t i = 0; i < d; ++i) {
            const double c = s.features[i] - mean[i];
            sq[i] += c * c;
        }
    }
    for (std::size_t i = 0; i < d; ++i) {
        const double sd = std::sqrt(sq[i] / n);
        p.input_scale[i] = sd > 1e-12 ? sd : 1.0;
    }
    p.input_mean = std::move(mean);
}

/// Embedding row for an integer label; out-of-range labels clamp to the nearest bound.
inline Eigen::VectorXd embed_label(const DarParams& p, int label) {
    const int a = std::clamp(label, p.config().label_min, p.config().label_max);
    return p.block(DarParams::embedding_block()).col(a - p.config().label_min);
}

/// Class centres -C..C.
inline Eigen::VectorXd class_centers(int half_classes) {
    Eigen::VectorXd c(2 * half_classes + 1);
    for (int i = 0; i < c.size(); ++i) {
        c(i) = static_cast<double>(i - half_classes);
    }
    return c;
}

enum class Mode { train, eval };

/// One DAE input: the a-side is the sample whose difference to the b-side is estimated.
struct PairInput {
    std::span<const double> a_features;
    int a_age = 0;
    std::span<const double> b_features;
    int b_age = 0;
};

/// Forward results for a batch of pairs (one column per pair) plus backward caches.
struct PairBatch {
    Eigen::MatrixXd input;
    std::vector<Eigen::MatrixXd> pre;  // affine outputs per layer
    std::vector<Eigen::MatrixXd> act;  // activations after LeakyReLU and dropout
    std::vector<Eigen::MatrixXd> mask; // inverted-dropout scale factors (train mode only)
    Eigen::MatrixXd logits;            // K x N
    Eigen::MatrixXd probs;             // w_c, K x N
    Eigen::MatrixXd second;            // d_c, K x N
    Eigen::VectorXd diff;              // d_r = sum_c w_c (c + d_c)
    Eigen::VectorXd ref_logit;         // pre-softmax reference weight
    std::vector<int> a_age;
    std::vector<int> b_age;

    Eigen::Index size() const { return diff.size(); }
};

namespace detail {

inline void check_finite(const Eigen::MatrixXd& m, const char* name) {
    require(m.allFinite(), ErrorKind::numeric, std::string("non-finite values in ") + name);
}

inline void softmax_columns(const Eigen::MatrixXd& logits, Eigen::MatrixXd& out) {
    out.resize(logits.rows(), logits.cols());
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        const double mx = logits.col(j).maxCoeff();
        out.col(j) = (logits.col(j).array() - mx).exp();
        out.col(j) /= out.col(j).sum();
    }
}

} // namespace detail

/// Batched DAE forward. In train mode `column_rngs[j]` supplies the dropout mask of column j.
inline PairBatch forward_pairs(const DarParams& p, std::span<const PairInput> pairs, Mode mode,
                               std::span<Rng* const> column_rngs = {}) {
    const auto& cfg = p.config();
    const auto d = static_cast<Eigen::Index>(cfg.feature_dim);
    const auto m = static_cast<Eigen::Index>(cfg.embed_dim);
    const auto n = static_cast<Eigen::Index>(pairs.size());
    const bool dropout = mode == Mode::train && cfg.dropout > 0.0;
    if (dropout) {
        require(column_rngs.size() == pairs.size(), ErrorKind::input, "train-mode forward needs one rng per pair");
    }

    PairBatch out;
    out.input.resize(2 * (d + m), n);
    out.a_age.resize(pairs.size());
    out.b_age.resize(pairs.size());
    const auto emb = p.block(DarParams::embedding_block());
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto& pr = pairs[static_cast<std::size_t>(j)];
        require(pr.a_features.size() == cfg.feature_dim && pr.b_features.size() == cfg.feature_dim,
                ErrorKind::input,
                "DAR expects " + std::to_string(cfg.feature_dim) + " features per side");
        auto col = out.input.col(j);
        for (Eigen::Index i = 0; i < d; ++i) {
            const auto u = static_cast<std::size_t>(i);
            col(i) = (pr.a_features[u] - p.input_mean[u]) / p.input_scale[u];
            col(d + m + i) = (pr.b_features[u] - p.input_mean[u]) / p.input_scale[u];
        }
        const int aa = std::clamp(pr.a_age, cfg.label_min, cfg.label_max);
        const int ba = std::clamp(pr.b_age, cfg.label_min, cfg.label_max);
        out.a_age[static_cast<std::size_t>(j)] = aa;
        out.b_age[static_cast<std::size_t>(j)] = ba;
        col.segment(d, m) = emb.col(aa - cfg.label_min);
        col.segment(2 * d + m, m) = emb.col(ba - cfg.label_min);
    }
    detail::check_finite(out.input, "input");

    const Eigen::MatrixXd* prev = &out.input;
    const double keep = 1.0 - cfg.dropout;
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (std::size_t l = 0; l < p.num_layers(); ++l) {
        const auto w = p.block(p.weight_block(l));
        const auto b = p.block(p.bias_block(l));
        Eigen::MatrixXd z = w * (*prev);
        z.colwise() += b.col(0);
        Eigen::MatrixXd a = z.unaryExpr([](double v) { return v > 0.0 ? v : kLeakySlope * v; });
        if (dropout) {
            Eigen::MatrixXd mask(a.rows(), a.cols());
            for (Eigen::Index j = 0; j < n; ++j) {
                Rng& rng = *column_rngs[static_cast<std::size_t>(j)];
                for (Eigen::Index i = 0; i < a.rows(); ++i) {
                    mask(i, j) = unif(rng) < keep ? 1.0 / keep : 0.0;
                }
            }
            a.array() *= mask.array();
            out.mask.push_back(std::move(mask));
        }
        out.pre.push_back(std::move(z));
        out.act.push_back(std::move(a));
        prev = &out.act.back();
    }
    const Eigen::MatrixXd& h = *prev;
    detail::check_finite(h, "backbone");

    out.logits = p.block(p.class_weight_block()) * h;
    out.logits.colwise() += p.block(p.class_bias_block()).col(0);
    detail::check_finite(out.logits, "class_head");
    detail::softmax_columns(out.logits, out.probs);
    if (cfg.second_order) {
        out.second = p.block(p.diff_weight_block()) * h;
        out.second.colwise() += p.block(p.diff_bias_block()).col(0);
        detail::check_finite(out.second, "diff_heads");
    } else {
        out.second = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cfg.num_classes()), n);
    }
    out.ref_logit = (p.block(p.ref_weight_block()) * h).transpose();
    out.ref_logit.array() += p.block(p.ref_bias_block())(0, 0);
    detail::check_finite(out.ref_logit, "ref_head");

    const Eigen::VectorXd centers = class_centers(cfg.half_classes);
    out.diff.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        double acc = 0.0;
        for (Eigen::Index c = 0; c < centers.size(); ++c) {
            acc += out.probs(c, j) * (centers(c) + out.second(c, j));
        }
        out.diff(j) = acc;
    }
    return out;
}

struct PairOutput {
    std::vector<double> class_probs; // w_c
    std::vector<double> second_order; // d_c
    double diff = 0.0;               // d_r
    double ref_logit = 0.0;
};

/// Single-pair convenience wrapper around forward_pairs.
inline PairOutput dae_pair_forward(const DarParams& p, std::span<const double> query_features, int query_age,
                                   std::span<const double> ref_features, int ref_age, Mode mode, Rng* rng = nullptr) {
    const PairInput in{query_features, query_age, ref_features, ref_age};
    Rng* rngs[1] = {rng};
    const auto batch = forward_pairs(p, std::span<const PairInput>(&in, 1), mode,
                                     mode == Mode::train ? std::span<Rng* const>(rngs, 1) : std::span<Rng* const>());
    PairOutput out;
    out.class_probs.assign(batch.probs.col(0).data(), batch.probs.col(0).data() + batch.probs.rows());
    out.second_order.assign(batch.second.col(0).data(), batch.second.col(0).data() + batch.second.rows());
    out.diff = batch.diff(0);
    out.ref_logit = batch.ref_logit(0);
    return out;
}

/// Upstream gradients arriving at the heads, one column per pair.
struct HeadGradients {
    Eigen::MatrixXd logits; // dL/d(class logits), K x N
    Eigen::MatrixXd second; // dL/d(d_c), K x N
    Eigen::VectorXd ref;    // dL/d(ref logit), N

    explicit HeadGradients(Eigen::Index classes = 0, Eigen::Index n = 0)
        : logits(Eigen::MatrixXd::Zero(classes, n)), second(Eigen::MatrixXd::Zero(classes, n)),
          ref(Eigen::VectorXd::Zero(n)) {}
};

/// Reverse pass through heads, backbone and embedding; accumulates into `grad`
/// (a buffer laid out like p.values()).
inline void backward_pairs(const DarParams& p, const PairBatch& batch, const HeadGradients& up,
                           std::vector<double>& grad) {
    const auto& cfg = p.config();
    require(grad.size() == p.size(), ErrorKind::input, "gradient buffer has the wrong size");
    const std::size_t layers = p.num_layers();
    const Eigen::MatrixXd& h = batch.act.back();

    p.view(grad, p.class_weight_block()).noalias() += up.logits * h.transpose();
    p.view(grad, p.class_bias_block()).col(0) += up.logits.rowwise().sum();
    Eigen::MatrixXd g_h = p.block(p.class_weight_block()).transpose() * up.logits;
    if (cfg.second_order) {
        p.view(grad, p.diff_weight_block()).noalias() += up.second * h.transpose();
        p.view(grad, p.diff_bias_block()).col(0) += up.second.rowwise().sum();
        g_h.noalias() += p.block(p.diff_weight_block()).transpose() * up.second;
    }
    p.view(grad, p.ref_weight_block()).noalias() += up.ref.transpose() * h.transpose();
    p.view(grad, p.ref_bias_block())(0, 0) += up.ref.sum();
    g_h.noalias() += p.block(p.ref_weight_block()).transpose() * up.ref.transpose();
    detail::check_finite(g_h, "grad(backbone output)");

    Eigen::MatrixXd g = std::move(g_h);
    for (std::size_t li = layers; li-- > 0;) {
        if (!batch.mask.empty()) {
            g.array() *= batch.mask[li].array();
        }
        const auto& z = batch.pre[li];
        g.array() *= z.array().unaryExpr([](double v) { return v > 0.0 ? 1.0 : kLeakySlope; });
        const Eigen::MatrixXd& a_prev = li == 0 ? batch.input : batch.act[li - 1];
        p.view(grad, p.weight_block(li)).noalias() += g * a_prev.transpose();
        p.view(grad, p.bias_block(li)).col(0) += g.rowwise().sum();
        Eigen::MatrixXd g_prev = p.block(p.weight_block(li)).transpose() * g;
        g = std::move(g_prev);
    }

    const auto d = static_cast<Eigen::Index>(cfg.feature_dim);
    const auto m = static_cast<Eigen::Index>(cfg.embed_dim);
    auto g_emb = p.view(grad, DarParams::embedding_block());
    for (Eigen::Index j = 0; j < g.cols(); ++j) {
        g_emb.col(batch.a_age[static_cast<std::size_t>(j)] - cfg.label_min) += g.col(j).segment(d, m);
        g_emb.col(batch.b_age[static_cast<std::size_t>(j)] - cfg.label_min) += g.col(j).segment(2 * d + m, m);
    }
}

/// Query-level output: reference weights and the refined estimate.
struct QueryOutput {
    std::vector<double> diffs;   // d_r
    std::vector<double> weights; // w_r = softmax(ref logits)
    double initial = 0.0;        // a-hat
    double refined = 0.0;        // y-hat = a-hat + sum w_r d_r
};

inline std::vector<double> softmax(std::span<const double> logits) {
    require(!logits.empty(), ErrorKind::input, "softmax of an empty list");
    double mx = logits[0];
    for (double v : logits) {
        mx = std::max(mx, v);
    }
    std::vector<double> out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        total += out[i];
    }
    for (auto& v : out) {
        v /= total;
    }
    return out;
}

inline QueryOutput aggregate_refinement(double initial, std::span<const double> diffs,
                                        std::span<const double> ref_logits) {
    require(!diffs.empty() && diffs.size() == ref_logits.size(), ErrorKind::evaluation,
            "aggregation needs equal, nonzero numbers of differentials and reference logits");
    QueryOutput out;
    out.initial = initial;
    out.diffs.assign(diffs.begin(), diffs.end());
    out.weights = softmax(ref_logits);
    double shift = 0.0;
    for (std::size_t r = 0; r < diffs.size(); ++r) {
        shift += out.weights[r] * diffs[r];
    }
    out.refined = initial + shift;
    return out;
}

} // namespace diffreg
