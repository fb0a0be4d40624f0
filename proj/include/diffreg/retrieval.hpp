#pragma once

#include <algorithm>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diffreg/dataset.hpp"
#include "diffreg/error.hpp"
#include "diffreg/random.hpp"

namespace diffreg {

enum class RetrievalMethod {
    nearest,  ///< R drawn from the P embedding-nearest candidates
    random    ///< R drawn from the whole age-matched candidate set
};

struct RetrievalConfig {
    std::size_t pool_size = 30;      // P
    std::size_t num_references = 10; // R
    int max_widen = 3;
    bool exclude_subject = true;
    RetrievalMethod method = RetrievalMethod::nearest;

    void validate() const {
        require(pool_size > 0, ErrorKind::config, "pool size P must be positive");
        require(num_references > 0, ErrorKind::config, "reference count R must be positive");
        require(num_references <= pool_size, ErrorKind::config,
                "reference count R=" + std::to_string(num_references) + " exceeds pool size P=" +
                    std::to_string(pool_size));
        require(max_widen >= 0, ErrorKind::config, "max_widen must be nonnegative");
    }
};

/// Training samples bucketed by integer label. Owns a shared, immutable dataset.
class ReferenceIndex {
public:
    explicit ReferenceIndex(std::shared_ptr<const Dataset> data) : data_(std::move(data)) {
        require(data_ != nullptr && !data_->empty(), ErrorKind::input, "reference index needs a nonempty dataset");
        data_->validate();
        buckets_.resize(static_cast<std::size_t>(data_->label_max - data_->label_min + 1));
        for (std::size_t i = 0; i < data_->size(); ++i) {
            const int b = label_bucket(data_->samples[i].label);
            buckets_[static_cast<std::size_t>(b - data_->label_min)].push_back(i);
        }
    }

    const Dataset& dataset() const { return *data_; }
    const std::shared_ptr<const Dataset>& shared_dataset() const { return data_; }
    const Sample& sample(std::size_t i) const { return data_->samples[i]; }
    int label_min() const { return data_->label_min; }
    int label_max() const { return data_->label_max; }
    std::size_t size() const { return data_->size(); }

    int clamp_age(int age) const { return std::clamp(age, label_min(), label_max()); }

    /// Dataset positions whose rounded label is `age`; empty outside the label bounds.
    std::span<const std::size_t> bucket(int age) const {
        if (age < label_min() || age > label_max()) {
            return {};
        }
        return buckets_[static_cast<std::size_t>(age - label_min())];
    }

private:
    std::shared_ptr<const Dataset> data_;
    std::vector<std::vector<std::size_t>> buckets_;
};

inline ReferenceIndex build_reference_index(Dataset ds) {
    return ReferenceIndex(std::make_shared<const Dataset>(std::move(ds)));
}

struct Candidate {
    std::size_t index = 0;
    double distance = 0.0; // squared Euclidean
};

struct RetrievalResult {
    std::vector<std::size_t> references; // dataset positions, in draw order
    std::vector<Candidate> pool;         // sorted by (distance, sample_id)
    int widen_used = 0;
};

/// Age-matched candidates at the smallest widening level (0..max_widen) that is nonempty.
inline std::vector<std::size_t> age_candidates(const ReferenceIndex& idx, int target_age, int max_widen,
                                               const std::optional<std::string>& excluded_subject,
                                               int& widen_used) {
    const int t = idx.clamp_age(target_age);
    std::vector<std::size_t> out;
    for (int w = 0; w <= max_widen; ++w) {
        auto take = [&](int age) {
            for (std::size_t i : idx.bucket(age)) {
                if (!excluded_subject || idx.sample(i).subject_id != *excluded_subject) {
                    out.push_back(i);
                }
            }
        };
        if (w == 0) {
            take(t);
        } else {
            take(t - w);
            take(t + w);
        }
        if (!out.empty()) {
            widen_used = w;
            std::sort(out.begin(), out.end());
            return out;
        }
    }
    fail(ErrorKind::retrieval, "no reference candidates within +/-" + std::to_string(max_widen) + " of age " +
                                   std::to_string(t));
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

/// The `pool_size` candidates closest to `query`; ties broken by sample_id.
inline std::vector<Candidate> nearest_pool(const ReferenceIndex& idx, std::span<const double> query,
                                           std::span<const std::size_t> candidates, std::size_t pool_size) {
    require(query.size() == idx.dataset().feature_dim, ErrorKind::input,
            "query has " + std::to_string(query.size()) + " features, index expects " +
                std::to_string(idx.dataset().feature_dim));
    std::vector<Candidate> all;
    all.reserve(candidates.size());
    for (std::size_t i : candidates) {
        all.push_back({i, squared_distance(query, idx.sample(i).features)});
    }
    auto less = [&](const Candidate& a, const Candidate& b) {
        if (a.distance != b.distance) {
            return a.distance < b.distance;
        }
        return idx.sample(a.index).sample_id < idx.sample(b.index).sample_id;
    };
    const std::size_t keep = std::min(pool_size, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), less);
    all.resize(keep);
    return all;
}

/// Age bucket lookup, embedding-nearest pool, then R uniform draws without replacement.
inline RetrievalResult retrieve_references(const ReferenceIndex& idx, std::span<const double> query, int target_age,
                                           const RetrievalConfig& cfg, Rng& rng,
                                           const std::optional<std::string>& excluded_subject = std::nullopt) {
    RetrievalResult result;
    const auto excluded = cfg.exclude_subject ? excluded_subject : std::nullopt;
    const auto candidates = age_candidates(idx, target_age, cfg.max_widen, excluded, result.widen_used);
    const std::size_t pool_size = cfg.method == RetrievalMethod::nearest ? cfg.pool_size : candidates.size();
    result.pool = nearest_pool(idx, query, candidates, pool_size);

    const std::size_t n = result.pool.size();
    const std::size_t r = std::min(cfg.num_references, n);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    for (std::size_t i = 0; i < r; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(order[i], order[pick(rng)]);
        result.references.push_back(result.pool[order[i]].index);
    }
    return result;
}

} // namespace diffreg
