#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "diffreg/error.hpp"
#include "diffreg/random.hpp"

namespace diffreg {

/// Integer bucket of a label, rounding half away from zero.
inline int label_bucket(double label) {
    return static_cast<int>(std::lround(label));
}

struct Sample {
    std::string sample_id;
    std::string subject_id;
    double label = 0.0;
    std::vector<double> features;
    std::map<std::string, std::string> groups;

    friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
    std::vector<Sample> samples;
    std::size_t feature_dim = 0;
    int label_min = 0;
    int label_max = 0;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }

    /// Throws when any dataset invariant is broken.
    void validate() const {
        require(feature_dim > 0, ErrorKind::input, "dataset feature_dim must be positive");
        require(label_min <= label_max, ErrorKind::input, "dataset label_min exceeds label_max");
        std::unordered_set<std::string> ids;
        for (const auto& s : samples) {
            require(s.features.size() == feature_dim, ErrorKind::input,
                    "sample " + s.sample_id + " has " + std::to_string(s.features.size()) +
                        " features, expected " + std::to_string(feature_dim));
            require(std::isfinite(s.label), ErrorKind::input, "sample " + s.sample_id + " has a non-finite label");
            const int b = label_bucket(s.label);
            require(b >= label_min && b <= label_max, ErrorKind::input,
                    "sample " + s.sample_id + " label outside [" + std::to_string(label_min) + ", " +
                        std::to_string(label_max) + "]");
            require(ids.insert(s.sample_id).second, ErrorKind::input, "duplicate sample_id " + s.sample_id);
        }
    }

    /// Sorted names of every group attribute present in the dataset.
    std::vector<std::string> group_names() const {
        std::set<std::string> names;
        for (const auto& s : samples) {
            for (const auto& [k, v] : s.groups) {
                names.insert(k);
            }
        }
        return {names.begin(), names.end()};
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Copy of `parent` restricted to the samples accepted by `keep`, preserving order and bounds.
template <typename Pred>
Dataset filter_dataset(const Dataset& parent, Pred keep) {
    Dataset out;
    out.feature_dim = parent.feature_dim;
    out.label_min = parent.label_min;
    out.label_max = parent.label_max;
    for (const auto& s : parent.samples) {
        if (keep(s)) {
            out.samples.push_back(s);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct GroupDef {
    std::string name;
    std::vector<std::string> categories;
    /// Per-category offset along the group's random feature direction.
    std::vector<double> shift_scales;
    /// Per-category subject assignment probabilities; empty means uniform.
    std::vector<double> weights;
};

struct SynthConfig {
    int num_subjects = 500;
    int samples_per_subject = 4;
    int feature_dim = 32;
    double noise_sigma = 0.6;
    int label_min = 16;
    int label_max = 77;
    std::vector<GroupDef> groups;
    std::uint64_t seed = 0;

    void validate() const {
        require(num_subjects > 0, ErrorKind::config, "num_subjects must be positive");
        require(samples_per_subject > 0, ErrorKind::config, "samples_per_subject must be positive");
        require(feature_dim > 0, ErrorKind::config, "feature_dim must be positive");
        require(std::isfinite(noise_sigma) && noise_sigma >= 0.0, ErrorKind::config,
                "noise_sigma must be a nonnegative real");
        require(label_min < label_max, ErrorKind::config, "label range must be nonempty (label_min < label_max)");
        require(label_min >= 0, ErrorKind::config, "label_min must be nonnegative (log(1+a) basis)");
        for (const auto& g : groups) {
            require(!g.name.empty(), ErrorKind::config, "group name must be nonempty");
            require(!g.categories.empty(), ErrorKind::config, "group " + g.name + " has no categories");
            require(g.shift_scales.size() == g.categories.size(), ErrorKind::config,
                    "group " + g.name + ": one shift scale per category required");
            require(g.weights.empty() || g.weights.size() == g.categories.size(), ErrorKind::config,
                    "group " + g.name + ": one weight per category required");
            for (double w : g.weights) {
                require(std::isfinite(w) && w >= 0.0, ErrorKind::config, "group " + g.name + ": weights must be >= 0");
            }
        }
    }
};

namespace detail {

inline constexpr int kLatentDim = 8;
inline constexpr int kBasisDim = 4;

inline std::string padded(char prefix, long value, int width) {
    std::string digits = std::to_string(value);
    if (static_cast<int>(digits.size()) < width) {
        digits.insert(0, static_cast<std::size_t>(width) - digits.size(), '0');
    }
    return std::string(1, prefix) + digits;
}

inline void age_basis(double age, double span, double out[kBasisDim]) {
    out[0] = age / span;
    out[1] = std::sin(age / 10.0);
    out[2] = std::sin(age / 25.0);
    out[3] = std::log1p(age);
}

} // namespace detail

/// Seeded stand-in for a face-embedding dataset: features are a smooth nonlinear
/// function of the label plus a per-subject latent offset, group offsets and noise.
inline Dataset generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    using detail::kBasisDim;
    using detail::kLatentDim;

    Rng rng = make_stream(cfg.seed, {0x5157u});
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto d = static_cast<std::size_t>(cfg.feature_dim);

    std::vector<double> age_map(d * kBasisDim);
    for (auto& v : age_map) {
        v = normal(rng);
    }
    std::vector<double> subject_map(d * kLatentDim);
    for (auto& v : subject_map) {
        v = normal(rng) / std::sqrt(static_cast<double>(kLatentDim));
    }
    std::vector<std::vector<double>> group_dirs;
    for (std::size_t g = 0; g < cfg.groups.size(); ++g) {
        std::vector<double> dir(d);
        double norm = 0.0;
        for (auto& v : dir) {
            v = normal(rng);
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (auto& v : dir) {
            v /= norm;
        }
        group_dirs.push_back(std::move(dir));
    }

    // Right-skewed triangle (mode at the lower third) on a widened support,
    // rejected back into the label range so both ends keep nonzero mass.
    const double span = static_cast<double>(cfg.label_max - cfg.label_min);
    const double lo = cfg.label_min - span / 3.0;
    const double mode = cfg.label_min + span / 3.0;
    const double hi = cfg.label_max + span / 3.0;
    std::array<double, 3> knots{lo, mode, hi};
    std::array<double, 3> dens{0.0, 1.0, 0.0};
    std::piecewise_linear_distribution<double> triangle(knots.begin(), knots.end(), dens.begin());

    Dataset ds;
    ds.feature_dim = d;
    ds.label_min = cfg.label_min;
    ds.label_max = cfg.label_max;
    ds.samples.reserve(static_cast<std::size_t>(cfg.num_subjects) * cfg.samples_per_subject);

    const int id_width = static_cast<int>(std::to_string(cfg.num_subjects * cfg.samples_per_subject).size());
    const int subj_width = static_cast<int>(std::to_string(cfg.num_subjects).size());
    long next_sample = 0;

    for (int j = 0; j < cfg.num_subjects; ++j) {
        std::array<double, kLatentDim> latent{};
        for (auto& v : latent) {
            v = normal(rng);
        }
        std::map<std::string, std::string> groups;
        std::vector<double> shift(d, 0.0);
        for (std::size_t g = 0; g < cfg.groups.size(); ++g) {
            const auto& def = cfg.groups[g];
            std::size_t cat = 0;
            if (def.categories.size() > 1) {
                if (def.weights.empty()) {
                    cat = std::uniform_int_distribution<std::size_t>(0, def.categories.size() - 1)(rng);
                } else {
                    cat = std::discrete_distribution<std::size_t>(def.weights.begin(), def.weights.end())(rng);
                }
            }
            groups[def.name] = def.categories[cat];
            for (std::size_t i = 0; i < d; ++i) {
                shift[i] += def.shift_scales[cat] * group_dirs[g][i];
            }
        }
        const std::string subject = detail::padded('p', j, subj_width);
        for (int k = 0; k < cfg.samples_per_subject; ++k) {
            double raw = 0.0;
            do {
                raw = triangle(rng);
            } while (raw < cfg.label_min - 0.5 || raw >= cfg.label_max + 0.5);
            const double age = static_cast<double>(label_bucket(raw));

            double basis[kBasisDim];
            detail::age_basis(age, span, basis);
            Sample s;
            s.sample_id = detail::padded('s', next_sample++, id_width);
            s.subject_id = subject;
            s.label = age;
            s.groups = groups;
            s.features.resize(d);
            for (std::size_t i = 0; i < d; ++i) {
                double v = shift[i];
                for (int b = 0; b < kBasisDim; ++b) {
                    v += age_map[i * kBasisDim + b] * basis[b];
                }
                for (int b = 0; b < kLatentDim; ++b) {
                    v += subject_map[i * kLatentDim + b] * latent[b];
                }
                // Draw unconditionally so the stream does not depend on noise_sigma.
                v += cfg.noise_sigma * normal(rng);
                s.features[i] = v;
            }
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// CSV persistence

/// Shortest decimal text that parses back to exactly `value`.
inline std::string format_double(double value) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, res.ptr);
}

inline bool parse_double(std::string_view text, double& out) {
    if (text.empty()) {
        return false;
    }
    if (text.front() == '+') {
        text.remove_prefix(1);
    }
    auto res = std::from_chars(text.data(), text.data() + text.size(), out);
    return res.ec == std::errc() && res.ptr == text.data() + text.size() && std::isfinite(out);
}

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return fields;
}

inline void check_csv_text(const std::string& text, const std::string& what) {
    require(text.find_first_of(",\"\r\n") == std::string::npos, ErrorKind::input,
            what + " '" + text + "' contains a character not allowed in CSV fields");
}

} // namespace detail

inline void write_dataset_csv(const Dataset& ds, std::ostream& out) {
    const auto names = ds.group_names();
    out << "sample_id,subject_id,label";
    for (const auto& n : names) {
        detail::check_csv_text(n, "group name");
        out << ",group:" << n;
    }
    for (std::size_t i = 0; i < ds.feature_dim; ++i) {
        out << ",f" << i;
    }
    out << '\n';

    std::vector<const Sample*> order;
    order.reserve(ds.size());
    for (const auto& s : ds.samples) {
        order.push_back(&s);
    }
    std::stable_sort(order.begin(), order.end(),
                     [](const Sample* a, const Sample* b) { return a->sample_id < b->sample_id; });
    for (const Sample* s : order) {
        detail::check_csv_text(s->sample_id, "sample_id");
        detail::check_csv_text(s->subject_id, "subject_id");
        out << s->sample_id << ',' << s->subject_id << ',' << format_double(s->label);
        for (const auto& n : names) {
            auto it = s->groups.find(n);
            std::string value = it == s->groups.end() ? std::string() : it->second;
            detail::check_csv_text(value, "group value");
            out << ',' << value;
        }
        for (double f : s->features) {
            out << ',' << format_double(f);
        }
        out << '\n';
    }
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::input, "cannot open " + path + " for writing");
    write_dataset_csv(ds, out);
    require(static_cast<bool>(out), ErrorKind::input, "failed writing " + path);
}

inline Dataset parse_dataset_csv(std::string_view text) {
    std::vector<std::string_view> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        auto pos = text.find('\n', start);
        auto line = text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
        if (!line.empty() && line.back() == '\r') {
            line.remove_suffix(1);
        }
        lines.push_back(line);
        if (pos == std::string_view::npos) {
            break;
        }
        start = pos + 1;
    }
    while (!lines.empty() && lines.back().empty()) {
        lines.pop_back();
    }
    require(!lines.empty(), ErrorKind::parse, "empty file: missing header");

    const auto header = detail::split_fields(lines[0]);
    require(header.size() >= 4 && header[0] == "sample_id" && header[1] == "subject_id" && header[2] == "label",
            ErrorKind::parse, "missing header: expected 'sample_id,subject_id,label,...,f0,...'");
    std::vector<std::string> group_cols;
    std::size_t col = 3;
    for (; col < header.size() && header[col].starts_with("group:"); ++col) {
        auto name = header[col].substr(6);
        require(!name.empty(), ErrorKind::parse, "header: empty group name");
        group_cols.emplace_back(name);
    }
    const std::size_t first_feature = col;
    const std::size_t dim = header.size() - first_feature;
    require(dim > 0, ErrorKind::parse, "header: no feature columns");
    for (std::size_t i = 0; i < dim; ++i) {
        require(header[first_feature + i] == "f" + std::to_string(i), ErrorKind::parse,
                "header: column " + std::to_string(first_feature + i + 1) + " should be f" + std::to_string(i));
    }

    Dataset ds;
    ds.feature_dim = dim;
    require(lines.size() > 1, ErrorKind::parse, "no data rows");
    std::unordered_set<std::string> ids;
    int lo = 0;
    int hi = 0;
    for (std::size_t r = 1; r < lines.size(); ++r) {
        const std::string where = "row " + std::to_string(r) + " (line " + std::to_string(r + 1) + ")";
        const auto fields = detail::split_fields(lines[r]);
        require(fields.size() == header.size(), ErrorKind::parse,
                where + ": expected " + std::to_string(header.size()) + " columns, found " +
                    std::to_string(fields.size()));
        Sample s;
        s.sample_id = std::string(fields[0]);
        s.subject_id = std::string(fields[1]);
        require(!s.sample_id.empty(), ErrorKind::parse, where + ": empty sample_id");
        require(ids.insert(s.sample_id).second, ErrorKind::parse, where + ": duplicate sample_id " + s.sample_id);
        require(parse_double(fields[2], s.label), ErrorKind::parse, where + ": non-numeric label '" +
                                                                         std::string(fields[2]) + "'");
        for (std::size_t g = 0; g < group_cols.size(); ++g) {
            if (!fields[3 + g].empty()) {
                s.groups[group_cols[g]] = std::string(fields[3 + g]);
            }
        }
        s.features.resize(dim);
        for (std::size_t i = 0; i < dim; ++i) {
            require(parse_double(fields[first_feature + i], s.features[i]), ErrorKind::parse,
                    where + ": non-numeric feature f" + std::to_string(i) + " '" +
                        std::string(fields[first_feature + i]) + "'");
        }
        const int b = label_bucket(s.label);
        lo = r == 1 ? b : std::min(lo, b);
        hi = r == 1 ? b : std::max(hi, b);
        ds.samples.push_back(std::move(s));
    }
    ds.label_min = lo;
    ds.label_max = hi;
    return ds;
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::parse, "cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return parse_dataset_csv(buf.str());
    } catch (const Error& e) {
        throw Error(e.kind(), path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Subject-exclusive split

struct DatasetSplit {
    Dataset train;
    Dataset dist;
    Dataset test;
};

/// Partition by subject into train / error-distribution / test parts.
/// Subjects are shuffled and each is greedily given to the part whose
/// sample count lags its target fraction the most (relative deficit).
inline DatasetSplit subject_exclusive_split(const Dataset& ds, double train_frac, double dist_frac,
                                            std::uint64_t seed) {
    require(train_frac > 0.0 && dist_frac > 0.0 && train_frac + dist_frac < 1.0, ErrorKind::config,
            "split fractions must be positive with train_frac + dist_frac < 1");
    std::map<std::string, std::size_t> counts;
    for (const auto& s : ds.samples) {
        ++counts[s.subject_id];
    }
    require(counts.size() >= 3, ErrorKind::input,
            "subject-exclusive split needs at least 3 subjects, found " + std::to_string(counts.size()));

    std::vector<std::string> subjects;
    subjects.reserve(counts.size());
    for (const auto& [id, n] : counts) {
        subjects.push_back(id);
    }
    Rng rng = make_stream(seed, {0x5e11u});
    std::shuffle(subjects.begin(), subjects.end(), rng);

    const double n = static_cast<double>(ds.size());
    const std::array<double, 3> target{n * train_frac, n * dist_frac, n * (1.0 - train_frac - dist_frac)};
    std::array<double, 3> filled{0.0, 0.0, 0.0};
    std::map<std::string, int> part;
    for (const auto& id : subjects) {
        int best = 0;
        double best_deficit = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < 3; ++k) {
            const double deficit = (target[k] - filled[k]) / target[k];
            if (deficit > best_deficit) {
                best_deficit = deficit;
                best = k;
            }
        }
        part[id] = best;
        filled[best] += static_cast<double>(counts[id]);
    }
    auto in_part = [&](int k) { return [&, k](const Sample& s) { return part.at(s.subject_id) == k; }; };
    return {filter_dataset(ds, in_part(0)), filter_dataset(ds, in_part(1)), filter_dataset(ds, in_part(2))};
}

} // namespace diffreg
