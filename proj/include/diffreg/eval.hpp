#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "diffreg/baseline.hpp"
#include "diffreg/dataset.hpp"
#include "diffreg/error.hpp"
#include "diffreg/parallel.hpp"
#include "diffreg/pipeline.hpp"

namespace diffreg {

inline double mean_absolute_error(std::span<const double> predictions, std::span<const double> labels) {
    require(!predictions.empty() && predictions.size() == labels.size(), ErrorKind::evaluation,
            "MAE needs equal, nonzero numbers of predictions and labels");
    double acc = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        acc += std::abs(predictions[i] - labels[i]);
    }
    return acc / static_cast<double>(predictions.size());
}

struct EvalRecord {
    std::string sample_id;
    double label = 0.0;
    double initial = 0.0; // baseline estimate
    double refined = 0.0; // final prediction
    double error = 0.0;   // refined - label
    bool fallback = false;
    std::map<std::string, std::string> groups;
};

struct EvalReport {
    std::vector<EvalRecord> records;
    double mae = 0.0;

    std::vector<double> errors() const {
        std::vector<double> out;
        out.reserve(records.size());
        for (const auto& r : records) {
            out.push_back(r.error);
        }
        return out;
    }
};

/// Score `model` on every sample of `ds`. Pipelines also report their baseline estimate.
inline EvalReport evaluate(const BaselinePredictor& model, const Dataset& ds, std::size_t threads = 1) {
    require(!ds.empty(), ErrorKind::evaluation, "evaluation set is empty");
    EvalReport report;
    report.records.resize(ds.size());
    const auto* pipeline = dynamic_cast<const Pipeline*>(&model);
    parallel_for(ds.size(), threads, [&](std::size_t i) {
        const auto& s = ds.samples[i];
        EvalRecord& r = report.records[i];
        r.sample_id = s.sample_id;
        r.label = s.label;
        r.groups = s.groups;
        if (pipeline != nullptr) {
            const auto out = pipeline->predict_detail(s.features);
            r.initial = out.initial;
            r.refined = out.refined;
            r.fallback = out.fallback;
        } else {
            r.initial = r.refined = baseline_predict(model, s.features);
        }
        r.error = r.refined - r.label;
    });
    std::vector<double> pred;
    std::vector<double> labels;
    for (const auto& r : report.records) {
        pred.push_back(r.refined);
        labels.push_back(r.label);
    }
    report.mae = mean_absolute_error(pred, labels);
    return report;
}

inline void write_predictions_csv(const EvalReport& report, std::ostream& out) {
    out << "sample_id,label,initial,refined,error,fallback\n";
    for (const auto& r : report.records) {
        out << r.sample_id << ',' << format_double(r.label) << ',' << format_double(r.initial) << ','
            << format_double(r.refined) << ',' << format_double(r.error) << ',' << (r.fallback ? 1 : 0) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Histograms

struct Histogram {
    std::vector<double> edges; // size = counts.size() + 1; bin i is [edges[i], edges[i+1])
    std::vector<std::size_t> counts;

    std::size_t total() const {
        std::size_t n = 0;
        for (auto c : counts) {
            n += c;
        }
        return n;
    }
};

struct ErrorHistograms {
    Histogram signed_error;   // bins centred on multiples of the width, symmetric about 0
    Histogram absolute_error; // bins [k w, (k+1) w) from 0
};

namespace detail {

// Bin k (k = 0..nbins-1) covers [offset + k w, offset + (k+1) w).
inline Histogram uniform_bins(double offset, double width, std::size_t nbins) {
    Histogram h;
    h.counts.assign(nbins, 0);
    for (std::size_t k = 0; k <= nbins; ++k) {
        h.edges.push_back(offset + static_cast<double>(k) * width);
    }
    return h;
}

} // namespace detail

inline ErrorHistograms error_histograms(std::span<const double> errors, double bin_width) {
    require(bin_width > 0.0 && std::isfinite(bin_width), ErrorKind::input, "bin width must be positive");
    require(!errors.empty(), ErrorKind::evaluation, "histogram of an empty report");
    long reach = 0;
    long abs_top = 0;
    for (double e : errors) {
        require(std::isfinite(e), ErrorKind::evaluation, "non-finite error in report");
        reach = std::max(reach, static_cast<long>(std::floor(std::abs(e) / bin_width + 0.5)));
        abs_top = std::max(abs_top, static_cast<long>(std::floor(std::abs(e) / bin_width)));
    }
    ErrorHistograms out;
    const auto signed_bins = static_cast<std::size_t>(2 * reach + 1);
    out.signed_error = detail::uniform_bins(-(static_cast<double>(reach) + 0.5) * bin_width, bin_width, signed_bins);
    out.absolute_error = detail::uniform_bins(0.0, bin_width, static_cast<std::size_t>(abs_top + 1));
    for (double e : errors) {
        const auto k = static_cast<long>(std::floor(e / bin_width + 0.5)) + reach;
        ++out.signed_error.counts[static_cast<std::size_t>(std::clamp<long>(k, 0, 2 * reach))];
        const auto a = static_cast<long>(std::floor(std::abs(e) / bin_width));
        ++out.absolute_error.counts[static_cast<std::size_t>(std::clamp<long>(a, 0, abs_top))];
    }
    return out;
}

inline ErrorHistograms error_histograms(const EvalReport& report, double bin_width) {
    const auto e = report.errors();
    return error_histograms(e, bin_width);
}

/// Plot data: one row per bin.
inline void write_histogram_csv(const Histogram& h, std::ostream& out) {
    out << "lower,upper,count\n";
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        out << format_double(h.edges[i]) << ',' << format_double(h.edges[i + 1]) << ',' << h.counts[i] << '\n';
    }
}

// ---------------------------------------------------------------------------
// Bias report

struct BiasRow {
    std::string range; // age range or group cell
    std::size_t samples = 0;
    double mae = 0.0;
    double std_abs = 0.0; // population std of |error|
    std::size_t train_samples = 0;
    double mean_error = 0.0;
    double std_error = 0.0; // population std of the signed error
};

struct BiasTable {
    std::string name; // "age", an axis name, or "axisA x axisB"
    std::vector<BiasRow> rows;
};

/// Width-`width` integer edges covering [label_min, label_max].
inline std::vector<double> default_age_bins(int label_min, int label_max, int width = 5) {
    require(width > 0 && label_min <= label_max, ErrorKind::input, "invalid age-bin request");
    std::vector<double> edges;
    for (int e = label_min; e <= label_max; e += width) {
        edges.push_back(e);
    }
    edges.push_back(edges.back() + width);
    return edges;
}

namespace detail {

inline BiasRow summarize(std::string range, std::span<const double> errs, std::size_t train_samples) {
    BiasRow row;
    row.range = std::move(range);
    row.samples = errs.size();
    row.train_samples = train_samples;
    if (errs.empty()) {
        return row;
    }
    const auto n = static_cast<double>(errs.size());
    for (double e : errs) {
        row.mae += std::abs(e);
        row.mean_error += e;
    }
    row.mae /= n;
    row.mean_error /= n;
    for (double e : errs) {
        row.std_abs += (std::abs(e) - row.mae) * (std::abs(e) - row.mae);
        row.std_error += (e - row.mean_error) * (e - row.mean_error);
    }
    row.std_abs = std::sqrt(row.std_abs / n);
    row.std_error = std::sqrt(row.std_error / n);
    return row;
}

/// Bin i is [edges[i], edges[i+1]); the first and last bins are open-ended.
inline std::size_t age_bin(double label, std::span<const double> edges) {
    const auto it = std::upper_bound(edges.begin() + 1, edges.end() - 1, label);
    return static_cast<std::size_t>(it - (edges.begin() + 1));
}

inline std::string bin_label(std::span<const double> edges, std::size_t i) {
    return "[" + format_double(edges[i]) + "," + format_double(edges[i + 1]) + ")";
}

inline std::string cell_key(const std::map<std::string, std::string>& groups, std::span<const std::string> axes) {
    std::string key;
    for (std::size_t a = 0; a < axes.size(); ++a) {
        if (a > 0) {
            key += " x ";
        }
        key += axes[a] + "=" + groups.at(axes[a]);
    }
    return key;
}

} // namespace detail

/// Age-bin table, one table per group axis, and one per pair of axes.
/// `train` (optional) supplies the per-row training counts.
inline std::vector<BiasTable> group_bias_report(const EvalReport& report, const std::vector<std::string>& axes,
                                                std::span<const double> age_edges, const Dataset* train = nullptr) {
    require(!report.records.empty(), ErrorKind::evaluation, "bias report of an empty evaluation");
    require(age_edges.size() >= 2 && std::is_sorted(age_edges.begin(), age_edges.end()) &&
                std::adjacent_find(age_edges.begin(), age_edges.end()) == age_edges.end(),
            ErrorKind::input, "age bins need at least two strictly increasing edges");
    std::set<std::string> known;
    for (const auto& r : report.records) {
        for (const auto& [k, v] : r.groups) {
            known.insert(k);
        }
    }
    for (const auto& a : axes) {
        bool everywhere = true;
        for (const auto& r : report.records) {
            everywhere = everywhere && r.groups.count(a) > 0;
        }
        if (!everywhere) {
            std::string names;
            for (const auto& k : known) {
                names += (names.empty() ? "" : ", ") + k;
            }
            fail(ErrorKind::input, "unknown group '" + a + "'; known groups: " + (names.empty() ? "(none)" : names));
        }
    }

    std::vector<BiasTable> tables;
    {
        const std::size_t nbins = age_edges.size() - 1;
        std::vector<std::vector<double>> errs(nbins);
        std::vector<std::size_t> train_counts(nbins, 0);
        for (const auto& r : report.records) {
            errs[detail::age_bin(r.label, age_edges)].push_back(r.error);
        }
        if (train != nullptr) {
            for (const auto& s : train->samples) {
                ++train_counts[detail::age_bin(s.label, age_edges)];
            }
        }
        BiasTable t{"age", {}};
        for (std::size_t b = 0; b < nbins; ++b) {
            t.rows.push_back(detail::summarize(detail::bin_label(age_edges, b), errs[b], train_counts[b]));
        }
        tables.push_back(std::move(t));
    }

    auto cell_table = [&](std::vector<std::string> cell_axes) {
        std::map<std::string, std::vector<double>> errs;
        std::map<std::string, std::size_t> train_counts;
        for (const auto& r : report.records) {
            errs[detail::cell_key(r.groups, cell_axes)].push_back(r.error);
        }
        if (train != nullptr) {
            for (const auto& s : train->samples) {
                bool has_all = true;
                for (const auto& a : cell_axes) {
                    has_all = has_all && s.groups.count(a) > 0;
                }
                if (has_all) {
                    ++train_counts[detail::cell_key(s.groups, cell_axes)];
                }
            }
        }
        BiasTable t;
        for (std::size_t a = 0; a < cell_axes.size(); ++a) {
            t.name += (a > 0 ? " x " : "") + cell_axes[a];
        }
        for (const auto& [key, e] : errs) {
            t.rows.push_back(detail::summarize(key, e, train_counts[key]));
        }
        tables.push_back(std::move(t));
    };
    for (const auto& a : axes) {
        cell_table({a});
    }
    for (std::size_t i = 0; i < axes.size(); ++i) {
        for (std::size_t j = i + 1; j < axes.size(); ++j) {
            cell_table({axes[i], axes[j]});
        }
    }
    return tables;
}

/// Columns: table,range,samples,mae,std,train_samples,mean_error,std_error
inline void write_bias_csv(const std::vector<BiasTable>& tables, std::ostream& out) {
    out << "table,range,samples,mae,std,train_samples,mean_error,std_error\n";
    for (const auto& t : tables) {
        for (const auto& r : t.rows) {
            out << t.name << ',' << r.range << ',' << r.samples << ',' << format_double(r.mae) << ','
                << format_double(r.std_abs) << ',' << r.train_samples << ',' << format_double(r.mean_error) << ','
                << format_double(r.std_error) << '\n';
        }
    }
}

} // namespace diffreg
