#pragma once

#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffreg/baseline.hpp"
#include "diffreg/dar.hpp"
#include "diffreg/error_model.hpp"
#include "diffreg/inference.hpp"
#include "diffreg/retrieval.hpp"
#include "diffreg/training.hpp"

namespace diffreg {

/// Baseline + error model + reference index + trained DAR, usable as the
/// baseline of the next refinement round.
class Pipeline final : public BaselinePredictor {
public:
    Pipeline(std::shared_ptr<const BaselinePredictor> baseline, ErrorModel err,
             std::shared_ptr<const ReferenceIndex> index, DarParams dar, RetrievalConfig retrieval, int iteration)
        : baseline_(std::move(baseline)), err_(std::move(err)), index_(std::move(index)), dar_(std::move(dar)),
          retrieval_(retrieval), iteration_(iteration) {
        require(baseline_ != nullptr && index_ != nullptr, ErrorKind::config, "pipeline needs a baseline and an index");
        const auto& cfg = dar_.config();
        require(cfg.label_min == index_->label_min() && cfg.label_max == index_->label_max(), ErrorKind::config,
                "DAR label bounds differ from the reference index");
        require(cfg.feature_dim == index_->dataset().feature_dim && cfg.feature_dim == baseline_->feature_dim(),
                ErrorKind::config, "feature dimension differs between pipeline components");
        require(iteration_ >= 1, ErrorKind::config, "pipeline iteration tag must be >= 1");
        retrieval_.validate();
        err_.validate();
    }

    double predict(std::span<const double> features) const override { return predict_detail(features).refined; }
    std::size_t feature_dim() const override { return dar_.config().feature_dim; }

    /// Baseline estimate, retrieval at its rounded value, DAE on every pair, aggregation.
    RefinedPrediction predict_detail(std::span<const double> features) const {
        const double initial = baseline_predict(*baseline_, features);
        return refine_estimate(*index_, dar_, retrieval_, features, initial, static_cast<std::uint64_t>(iteration_));
    }

    const BaselinePredictor& baseline() const { return *baseline_; }
    const std::shared_ptr<const BaselinePredictor>& shared_baseline() const { return baseline_; }
    const ErrorModel& error_model() const { return err_; }
    const ReferenceIndex& index() const { return *index_; }
    const std::shared_ptr<const ReferenceIndex>& shared_index() const { return index_; }
    const DarParams& dar() const { return dar_; }
    const RetrievalConfig& retrieval() const { return retrieval_; }
    int iteration() const { return iteration_; }

private:
    std::shared_ptr<const BaselinePredictor> baseline_;
    ErrorModel err_;
    std::shared_ptr<const ReferenceIndex> index_;
    DarParams dar_;
    RetrievalConfig retrieval_;
    int iteration_ = 1;
};

// ---------------------------------------------------------------------------
// Iterative refinement

struct RefineOptions {
    TrainOptions train;
    double clip = 20.0;
    /// Start DAR_{n+1} from DAR_n's parameters when the previous round is a pipeline with the same shape.
    bool warm_start = true;
};

using DarTrainer = std::function<TrainResult(std::shared_ptr<const ReferenceIndex>, const BaselinePredictor&,
                                             const ErrorModel&, const TrainOptions&, std::uint64_t,
                                             const TrainHooks&)>;

inline TrainResult default_dar_trainer(std::shared_ptr<const ReferenceIndex> idx, const BaselinePredictor& bar,
                                       const ErrorModel& err, const TrainOptions& opts, std::uint64_t seed,
                                       const TrainHooks& hooks) {
    return train_dar(std::move(idx), bar, err, opts, seed, hooks);
}

struct IterationResult {
    std::shared_ptr<const Pipeline> pipeline;
    std::vector<double> residuals; // residuals of the previous round on the dist partition
    std::vector<EpochLog> log;
};

/// One round: residuals of bar_n on dist -> D_eps^n -> DAR trained on train -> BAR_{n+1}.
inline IterationResult refine_iteration(std::shared_ptr<const ReferenceIndex> train_idx, const Dataset& dist,
                                        std::shared_ptr<const BaselinePredictor> bar_n, const RefineOptions& opts,
                                        std::uint64_t seed, TrainHooks hooks = {},
                                        const DarTrainer& trainer = default_dar_trainer) {
    require(train_idx != nullptr && bar_n != nullptr, ErrorKind::config, "refinement needs an index and a baseline");
    require(!dist.empty(), ErrorKind::input, "distribution-estimation set is empty");
    IterationResult out;
    out.residuals = compute_residuals(*bar_n, dist);
    ErrorModel err = fit_error_kde(out.residuals, opts.clip);

    int iteration = 1;
    const auto* prev = dynamic_cast<const Pipeline*>(bar_n.get());
    if (prev != nullptr) {
        iteration = prev->iteration() + 1;
        if (opts.warm_start && hooks.init == nullptr) {
            DarConfig want = opts.train.dar;
            want.feature_dim = train_idx->dataset().feature_dim;
            want.label_min = train_idx->label_min();
            want.label_max = train_idx->label_max();
            if (prev->dar().config() == want) {
                hooks.init = &prev->dar();
            }
        }
    }
    hooks.monitor_salt = static_cast<std::uint64_t>(iteration);
    Fnv1a h;
    h.update(&seed, sizeof(seed));
    h.update(&iteration, sizeof(iteration));
    TrainResult trained = trainer(train_idx, *bar_n, err, opts.train, h.digest(), hooks);
    out.log = std::move(trained.log);
    out.pipeline = std::make_shared<const Pipeline>(bar_n, std::move(err), std::move(train_idx),
                                                    std::move(trained.params), opts.train.retrieval, iteration);
    return out;
}

/// Apply refine_iteration `iterations` times starting from bar_0; returns every round.
inline std::vector<IterationResult> run_refinement(const Dataset& train, const Dataset& dist,
                                                   std::shared_ptr<const BaselinePredictor> bar_0,
                                                   const RefineOptions& opts, int iterations, std::uint64_t seed,
                                                   const TrainHooks& hooks = {},
                                                   const std::function<void(const IterationResult&)>& on_round = {}) {
    require(iterations >= 1, ErrorKind::config, "iterations must be >= 1");
    auto idx = std::make_shared<const ReferenceIndex>(std::make_shared<const Dataset>(train));
    std::vector<IterationResult> rounds;
    std::shared_ptr<const BaselinePredictor> current = std::move(bar_0);
    for (int n = 0; n < iterations; ++n) {
        rounds.push_back(refine_iteration(idx, dist, current, opts, seed, hooks));
        current = rounds.back().pipeline;
        if (on_round) {
            on_round(rounds.back());
        }
    }
    return rounds;
}

// ---------------------------------------------------------------------------
// Serialisation

inline constexpr const char* kCheckpointFormat = "diffreg-checkpoint-v1";
inline constexpr const char* kBaselineFormat = "diffreg-baseline-v1";
inline constexpr const char* kErrorModelFormat = "diffreg-error-model-v1";

using nlohmann::json;

namespace detail {

[[noreturn]] inline void load_error(const std::string& field, const std::string& what) {
    fail(ErrorKind::load, "checkpoint field '" + field + "': " + what);
}

inline const json& field(const json& j, const std::string& key, const std::string& path) {
    const std::string full = path.empty() ? key : path + "." + key;
    if (!j.is_object()) {
        load_error(path, "expected an object");
    }
    auto it = j.find(key);
    if (it == j.end()) {
        load_error(full, "missing");
    }
    return *it;
}

template <class T>
T get(const json& j, const std::string& key, const std::string& path) {
    const json& v = field(j, key, path);
    const std::string full = path.empty() ? key : path + "." + key;
    try {
        if constexpr (std::is_same_v<T, double>) {
            if (!v.is_number()) {
                load_error(full, "expected a number");
            }
        } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
            if (!v.is_number_integer()) {
                load_error(full, "expected an integer");
            }
        }
        return v.get<T>();
    } catch (const json::exception& e) {
        load_error(full, e.what());
    }
}

inline std::vector<double> get_array(const json& j, const std::string& key, const std::string& path,
                                     std::size_t expect_size, bool check_size = true) {
    const std::string full = path.empty() ? key : path + "." + key;
    const json& v = field(j, key, path);
    if (!v.is_array()) {
        load_error(full, "expected an array");
    }
    if (check_size && v.size() != expect_size) {
        load_error(full, "expected " + std::to_string(expect_size) + " values, found " + std::to_string(v.size()));
    }
    std::vector<double> out;
    out.reserve(v.size());
    for (const auto& x : v) {
        if (!x.is_number()) {
            load_error(full, "non-numeric entry");
        }
        out.push_back(x.get<double>());
    }
    return out;
}

inline json dataset_to_json(const Dataset& ds) {
    json j;
    j["feature_dim"] = ds.feature_dim;
    j["label_min"] = ds.label_min;
    j["label_max"] = ds.label_max;
    json samples = json::array();
    for (const auto& s : ds.samples) {
        samples.push_back({{"sample_id", s.sample_id},
                           {"subject_id", s.subject_id},
                           {"label", s.label},
                           {"groups", s.groups},
                           {"features", s.features}});
    }
    j["samples"] = std::move(samples);
    return j;
}

inline Dataset dataset_from_json(const json& j, const std::string& path) {
    Dataset ds;
    ds.feature_dim = get<std::size_t>(j, "feature_dim", path);
    ds.label_min = get<int>(j, "label_min", path);
    ds.label_max = get<int>(j, "label_max", path);
    const json& arr = field(j, "samples", path);
    if (!arr.is_array()) {
        load_error(path + ".samples", "expected an array");
    }
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const std::string p = path + ".samples[" + std::to_string(i) + "]";
        Sample s;
        s.sample_id = get<std::string>(arr[i], "sample_id", p);
        s.subject_id = get<std::string>(arr[i], "subject_id", p);
        s.label = get<double>(arr[i], "label", p);
        s.groups = get<std::map<std::string, std::string>>(arr[i], "groups", p);
        s.features = get_array(arr[i], "features", p, ds.feature_dim);
        ds.samples.push_back(std::move(s));
    }
    try {
        ds.validate();
    } catch (const Error& e) {
        load_error(path, e.what());
    }
    return ds;
}

inline json retrieval_to_json(const RetrievalConfig& rc) {
    return {{"pool_size", rc.pool_size},
            {"num_references", rc.num_references},
            {"max_widen", rc.max_widen},
            {"exclude_subject", rc.exclude_subject},
            {"method", rc.method == RetrievalMethod::nearest ? "nearest" : "random"}};
}

inline RetrievalConfig retrieval_from_json(const json& j, const std::string& path) {
    RetrievalConfig rc;
    rc.pool_size = get<std::size_t>(j, "pool_size", path);
    rc.num_references = get<std::size_t>(j, "num_references", path);
    rc.max_widen = get<int>(j, "max_widen", path);
    rc.exclude_subject = get<bool>(j, "exclude_subject", path);
    const auto method = get<std::string>(j, "method", path);
    if (method == "nearest") {
        rc.method = RetrievalMethod::nearest;
    } else if (method == "random") {
        rc.method = RetrievalMethod::random;
    } else {
        load_error(path + ".method", "unknown retrieval method '" + method + "'");
    }
    try {
        rc.validate();
    } catch (const Error& e) {
        load_error(path, e.what());
    }
    return rc;
}

inline json dar_to_json(const DarParams& p) {
    const auto& c = p.config();
    json cfg = {{"feature_dim", c.feature_dim}, {"embed_dim", c.embed_dim},     {"hidden", c.hidden},
                {"half_classes", c.half_classes}, {"dropout", c.dropout},       {"label_min", c.label_min},
                {"label_max", c.label_max},       {"second_order", c.second_order}};
    json blocks = json::array();
    for (std::size_t b = 0; b < p.blocks().size(); ++b) {
        const auto& blk = p.blocks()[b];
        blocks.push_back({{"name", blk.name},
                          {"rows", blk.rows},
                          {"cols", blk.cols},
                          {"values", std::vector<double>(p.values().begin() + static_cast<std::ptrdiff_t>(blk.offset),
                                                         p.values().begin() +
                                                             static_cast<std::ptrdiff_t>(blk.offset + blk.size()))}});
    }
    return {{"config", cfg}, {"parameters", blocks}, {"input_mean", p.input_mean}, {"input_scale", p.input_scale}};
}

inline DarParams dar_from_json(const json& j, const std::string& path) {
    const std::string cp = path + ".config";
    const json& cj = field(j, "config", path);
    DarConfig c;
    c.feature_dim = get<std::size_t>(cj, "feature_dim", cp);
    c.embed_dim = get<std::size_t>(cj, "embed_dim", cp);
    c.hidden = get<std::vector<std::size_t>>(cj, "hidden", cp);
    c.half_classes = get<int>(cj, "half_classes", cp);
    c.dropout = get<double>(cj, "dropout", cp);
    c.label_min = get<int>(cj, "label_min", cp);
    c.label_max = get<int>(cj, "label_max", cp);
    c.second_order = get<bool>(cj, "second_order", cp);
    DarParams p = [&] {
        try {
            return DarParams(c);
        } catch (const Error& e) {
            load_error(cp, e.what());
        }
    }();

    const json& blocks = field(j, "parameters", path);
    if (!blocks.is_array() || blocks.size() != p.blocks().size()) {
        load_error(path + ".parameters",
                   "expected " + std::to_string(p.blocks().size()) + " parameter blocks for this configuration");
    }
    for (std::size_t b = 0; b < p.blocks().size(); ++b) {
        const auto& blk = p.blocks()[b];
        const std::string bp = path + ".parameters[" + std::to_string(b) + "]";
        const auto name = get<std::string>(blocks[b], "name", bp);
        if (name != blk.name) {
            load_error(bp + ".name", "expected '" + blk.name + "', found '" + name + "'");
        }
        const std::string np = path + ".parameters." + blk.name;
        const auto rows = get<long long>(blocks[b], "rows", np);
        const auto cols = get<long long>(blocks[b], "cols", np);
        if (rows != blk.rows || cols != blk.cols) {
            load_error(np + ".shape", "expected " + std::to_string(blk.rows) + "x" + std::to_string(blk.cols) +
                                          ", found " + std::to_string(rows) + "x" + std::to_string(cols));
        }
        const auto values = get_array(blocks[b], "values", np, blk.size());
        for (double v : values) {
            if (!std::isfinite(v)) {
                load_error(np + ".values", "non-finite parameter");
            }
        }
        std::copy(values.begin(), values.end(), p.values().begin() + static_cast<std::ptrdiff_t>(blk.offset));
    }
    p.input_mean = get_array(j, "input_mean", path, c.feature_dim);
    p.input_scale = get_array(j, "input_scale", path, c.feature_dim);
    return p;
}

inline json error_model_to_json(const ErrorModel& m) {
    return {{"residuals", m.residuals}, {"bandwidth", m.bandwidth}, {"clip", m.clip}};
}

inline ErrorModel error_model_from_json(const json& j, const std::string& path) {
    ErrorModel m;
    m.residuals = get_array(j, "residuals", path, 0, false);
    m.bandwidth = get<double>(j, "bandwidth", path);
    m.clip = get<double>(j, "clip", path);
    try {
        m.validate();
    } catch (const Error& e) {
        load_error(path, e.what());
    }
    return m;
}

inline json ridge_to_json(const RidgeModel& m) {
    return {{"type", "ridge"}, {"weights", m.weights()}, {"bias", m.bias()}, {"lambda", m.lambda()}};
}

inline json predictor_to_json(const BaselinePredictor& m, const Dataset* parent_refs);

inline json pipeline_to_json(const Pipeline& p, const Dataset* parent_refs) {
    json j;
    j["type"] = "pipeline";
    j["iteration"] = p.iteration();
    j["label_min"] = p.index().label_min();
    j["label_max"] = p.index().label_max();
    j["feature_dim"] = p.feature_dim();
    j["retrieval"] = retrieval_to_json(p.retrieval());
    j["dar"] = dar_to_json(p.dar());
    j["error_model"] = error_model_to_json(p.error_model());
    const Dataset& refs = p.index().dataset();
    // Rounds of one refinement share the training partition; store it once at the outermost level.
    if (parent_refs == nullptr || !(*parent_refs == refs)) {
        j["references"] = dataset_to_json(refs);
    }
    j["baseline"] = predictor_to_json(p.baseline(), &refs);
    return j;
}

inline json predictor_to_json(const BaselinePredictor& m, const Dataset* parent_refs) {
    if (const auto* r = dynamic_cast<const RidgeModel*>(&m)) {
        return ridge_to_json(*r);
    }
    if (const auto* p = dynamic_cast<const Pipeline*>(&m)) {
        return pipeline_to_json(*p, parent_refs);
    }
    fail(ErrorKind::config, "only ridge and pipeline predictors can be serialised");
}

inline std::shared_ptr<const BaselinePredictor> predictor_from_json(const json& j, const std::string& path,
                                                                    std::shared_ptr<const ReferenceIndex> parent_idx);

inline RidgeModel ridge_from_json(const json& j, const std::string& path) {
    auto w = get_array(j, "weights", path, 0, false);
    if (w.empty()) {
        load_error(path + ".weights", "empty weight vector");
    }
    return RidgeModel(std::move(w), get<double>(j, "bias", path), get<double>(j, "lambda", path));
}

inline std::shared_ptr<const Pipeline> pipeline_from_json(const json& j, const std::string& path,
                                                          std::shared_ptr<const ReferenceIndex> parent_idx) {
    std::shared_ptr<const ReferenceIndex> idx;
    if (j.contains("references")) {
        idx = std::make_shared<const ReferenceIndex>(
            std::make_shared<const Dataset>(dataset_from_json(j["references"], path + ".references")));
    } else if (parent_idx != nullptr) {
        idx = parent_idx;
    } else {
        load_error(path + ".references", "missing");
    }
    const int lmin = get<int>(j, "label_min", path);
    const int lmax = get<int>(j, "label_max", path);
    if (lmin != idx->label_min() || lmax != idx->label_max()) {
        load_error(path + ".label_min", "label bounds differ from the stored references");
    }
    const auto dim = get<std::size_t>(j, "feature_dim", path);
    auto baseline = predictor_from_json(field(j, "baseline", path), path + ".baseline", idx);
    auto dar = dar_from_json(field(j, "dar", path), path + ".dar");
    if (dar.config().feature_dim != dim || baseline->feature_dim() != dim) {
        load_error(path + ".feature_dim", "does not match the DAR and baseline shapes");
    }
    auto err = error_model_from_json(field(j, "error_model", path), path + ".error_model");
    auto rc = retrieval_from_json(field(j, "retrieval", path), path + ".retrieval");
    const int iteration = get<int>(j, "iteration", path);
    try {
        return std::make_shared<const Pipeline>(std::move(baseline), std::move(err), std::move(idx), std::move(dar),
                                                rc, iteration);
    } catch (const Error& e) {
        load_error(path, e.what());
    }
}

inline std::shared_ptr<const BaselinePredictor> predictor_from_json(const json& j, const std::string& path,
                                                                    std::shared_ptr<const ReferenceIndex> parent_idx) {
    const auto type = get<std::string>(j, "type", path);
    if (type == "ridge") {
        return std::make_shared<const RidgeModel>(ridge_from_json(j, path));
    }
    if (type == "pipeline") {
        return pipeline_from_json(j, path, std::move(parent_idx));
    }
    load_error(path + ".type", "unknown predictor type '" + type + "'");
}

inline std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::input, "cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorKind::input, "cannot write '" + path + "'");
    out << text;
    require(out.good(), ErrorKind::input, "write to '" + path + "' failed");
}

inline json parse_json(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        fail(ErrorKind::load, what + " is not valid JSON (truncated or corrupted): " + e.what());
    }
}

inline void check_format(const json& j, const char* expected) {
    const auto format = get<std::string>(j, "format", "");
    if (format != expected) {
        load_error("format", "expected '" + std::string(expected) + "', found '" + format + "'");
    }
}

} // namespace detail

/// Canonical text: sorted keys, shortest round-trip doubles, trailing newline.
inline std::string checkpoint_to_string(const Pipeline& p) {
    json j = detail::pipeline_to_json(p, nullptr);
    j["format"] = kCheckpointFormat;
    return j.dump(1) + "\n";
}

inline std::shared_ptr<const Pipeline> checkpoint_from_string(const std::string& text) {
    const json j = detail::parse_json(text, "checkpoint");
    detail::check_format(j, kCheckpointFormat);
    return detail::pipeline_from_json(j, "", nullptr);
}

inline void save_checkpoint(const Pipeline& p, const std::string& path) {
    detail::write_text(path, checkpoint_to_string(p));
}

inline std::shared_ptr<const Pipeline> load_checkpoint(const std::string& path) {
    return checkpoint_from_string(detail::read_text(path));
}

inline void save_baseline(const RidgeModel& m, const std::string& path) {
    json j = detail::ridge_to_json(m);
    j["format"] = kBaselineFormat;
    detail::write_text(path, j.dump(1) + "\n");
}

inline void save_error_model(const ErrorModel& m, const std::string& path) {
    json j = detail::error_model_to_json(m);
    j["format"] = kErrorModelFormat;
    detail::write_text(path, j.dump(1) + "\n");
}

inline ErrorModel load_error_model(const std::string& path) {
    const json j = detail::parse_json(detail::read_text(path), "error model");
    detail::check_format(j, kErrorModelFormat);
    return detail::error_model_from_json(j, "");
}

/// Load either a baseline file or a pipeline checkpoint.
inline std::shared_ptr<const BaselinePredictor> load_predictor(const std::string& path) {
    const json j = detail::parse_json(detail::read_text(path), "model file");
    const auto format = detail::get<std::string>(j, "format", "");
    if (format == kCheckpointFormat) {
        return detail::pipeline_from_json(j, "", nullptr);
    }
    if (format == kBaselineFormat) {
        return std::make_shared<const RidgeModel>(detail::ridge_from_json(j, ""));
    }
    detail::load_error("format", "unsupported model format '" + format + "'");
}

} // namespace diffreg
