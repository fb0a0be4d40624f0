#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "diffreg/dar.hpp"
#include "diffreg/random.hpp"
#include "diffreg/retrieval.hpp"

namespace diffreg {

struct RefinedPrediction {
    double refined = 0.0;  // y-hat
    double initial = 0.0;  // a-hat from the baseline
    int retrieval_age = 0;
    std::vector<double> diffs;   // d_r
    std::vector<double> weights; // w_r
    std::vector<std::string> references;
    bool fallback = false; // retrieval failed; refined == initial
    std::string warning;
};

/// Test-time refinement of a baseline estimate: retrieve at round(clamp(a-hat)) without
/// error sampling, run the DAE on each (query, reference) pair and aggregate.
/// The random R-of-P stage is seeded from a hash of the features, so repeated calls agree.
inline RefinedPrediction refine_estimate(const ReferenceIndex& idx, const DarParams& p, const RetrievalConfig& rc,
                                         std::span<const double> features, double initial, std::uint64_t salt = 0) {
    RefinedPrediction out;
    out.initial = initial;
    out.refined = initial;
    const double clamped = std::clamp(initial, static_cast<double>(idx.label_min()),
                                      static_cast<double>(idx.label_max()));
    out.retrieval_age = label_bucket(clamped);

    Rng rng = make_stream(hash_features(features), {salt});
    RetrievalResult found;
    try {
        found = retrieve_references(idx, features, out.retrieval_age, rc, rng);
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::retrieval) {
            throw;
        }
        out.fallback = true;
        out.warning = e.what();
        return out;
    }

    std::vector<PairInput> pairs;
    pairs.reserve(found.references.size());
    for (std::size_t r : found.references) {
        const auto& s = idx.sample(r);
        pairs.push_back({features, out.retrieval_age, s.features, label_bucket(s.label)});
        out.references.push_back(s.sample_id);
    }
    const auto fw = forward_pairs(p, pairs, Mode::eval);
    const std::span<const double> diffs(fw.diff.data(), static_cast<std::size_t>(fw.diff.size()));
    const std::span<const double> logits(fw.ref_logit.data(), static_cast<std::size_t>(fw.ref_logit.size()));
    auto q = aggregate_refinement(initial, diffs, logits);
    out.refined = q.refined;
    out.diffs = std::move(q.diffs);
    out.weights = std::move(q.weights);
    return out;
}

} // namespace diffreg
