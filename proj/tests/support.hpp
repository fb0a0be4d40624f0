#pragma once

#include <string>
#include <vector>

#include "diffreg/diffreg.hpp"

namespace testing_support {

inline diffreg::Sample make_sample(std::string id, std::string subject, double label, std::vector<double> features,
                                   std::map<std::string, std::string> groups = {}) {
    diffreg::Sample s;
    s.sample_id = std::move(id);
    s.subject_id = std::move(subject);
    s.label = label;
    s.features = std::move(features);
    s.groups = std::move(groups);
    return s;
}

inline diffreg::Dataset make_dataset(std::vector<diffreg::Sample> samples, int label_min, int label_max) {
    diffreg::Dataset ds;
    ds.feature_dim = samples.empty() ? 1 : samples.front().features.size();
    ds.label_min = label_min;
    ds.label_max = label_max;
    ds.samples = std::move(samples);
    return ds;
}

/// Small desk-scale DAR shape used by the unit tests.
inline diffreg::DarConfig tiny_dar(std::size_t feature_dim, int label_min, int label_max) {
    diffreg::DarConfig c;
    c.feature_dim = feature_dim;
    c.embed_dim = 4;
    c.hidden = {16, 8};
    c.half_classes = 4;
    c.dropout = 0.0;
    c.label_min = label_min;
    c.label_max = label_max;
    return c;
}

/// Parameters whose class head is a point mass on difference 0 and whose regressors
/// output exactly 0, so every d_r is exactly 0.
inline diffreg::DarParams zero_output_params(const diffreg::DarConfig& cfg) {
    diffreg::DarParams p(cfg);
    p.block(p.class_bias_block())(cfg.half_classes, 0) = 1000.0;
    return p;
}

inline diffreg::SynthConfig small_synth(std::uint64_t seed, int subjects = 60) {
    diffreg::SynthConfig sc;
    sc.num_subjects = subjects;
    sc.samples_per_subject = 4;
    sc.feature_dim = 8;
    sc.noise_sigma = 0.5;
    sc.label_min = 20;
    sc.label_max = 50;
    sc.seed = seed;
    return sc;
}

} // namespace testing_support
