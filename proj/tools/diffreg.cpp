// diffreg command-line front end: synthetic data, splitting, baseline and DAR
// training, iterative refinement, prediction, evaluation and bias reports.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "diffreg/diffreg.hpp"

namespace fs = std::filesystem;
using diffreg::Error;
using diffreg::ErrorKind;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return kExitUsage;
        case ErrorKind::numeric: return kExitNumeric;
        default: return kExitData;
    }
}

void print_error(const std::string& kind, const std::string& message, int code) {
    json j = {{"error", kind}, {"message", message}, {"exit_code", code}};
    std::cerr << j.dump() << std::endl;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string file_hash(const std::string& path) {
    diffreg::Fnv1a h;
    h.update(diffreg::detail::read_text(path));
    return "fnv1a64:" + hex64(h.digest());
}

void ensure_parent(const std::string& path) {
    const fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) {
        fs::create_directories(parent);
    }
}

std::vector<std::size_t> parse_dims(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            std::size_t used = 0;
            const long v = std::stol(tok, &used);
            diffreg::require(used == tok.size() && v > 0, ErrorKind::config, "");
            out.push_back(static_cast<std::size_t>(v));
        } catch (...) {
            diffreg::fail(ErrorKind::config, "--hidden expects positive integers separated by commas, got '" + text + "'");
        }
    }
    diffreg::require(!out.empty(), ErrorKind::config, "--hidden needs at least one width");
    return out;
}

/// "name:cat=shift[@weight],cat=shift[@weight],..."
diffreg::GroupDef parse_group(const std::string& text) {
    const auto colon = text.find(':');
    diffreg::require(colon != std::string::npos && colon > 0, ErrorKind::config,
                     "--group expects name:cat=shift[@weight],..., got '" + text + "'");
    diffreg::GroupDef g;
    g.name = text.substr(0, colon);
    std::stringstream ss(text.substr(colon + 1));
    std::string item;
    bool any_weight = false;
    std::vector<double> weights;
    while (std::getline(ss, item, ',')) {
        const auto eq = item.find('=');
        diffreg::require(eq != std::string::npos && eq > 0, ErrorKind::config, "bad group category '" + item + "'");
        g.categories.push_back(item.substr(0, eq));
        std::string rest = item.substr(eq + 1);
        double weight = 1.0;
        const auto at = rest.find('@');
        double shift = 0.0;
        bool ok = diffreg::parse_double(rest.substr(0, at), shift);
        if (at != std::string::npos) {
            ok = ok && diffreg::parse_double(rest.substr(at + 1), weight);
            any_weight = true;
        }
        diffreg::require(ok, ErrorKind::config, "bad number in group category '" + item + "'");
        g.shift_scales.push_back(shift);
        weights.push_back(weight);
    }
    if (any_weight) {
        g.weights = weights;
    }
    return g;
}

/// Flags shared by the commands that train a DAR.
struct TrainFlags {
    int epochs = 150;
    std::size_t batch_size = 32;
    double lr = 3e-4;
    std::size_t references = 10;
    std::size_t pool = 30;
    int max_widen = 3;
    int classes = 20;
    std::size_t embed_dim = 16;
    std::string hidden = "128,64";
    double dropout = 0.2;
    std::string error_dist = "kde";
    int uniform_radius = 3;
    std::string retrieval = "nearest";
    std::string head = "full";
    bool no_inner_abs = false;

    void add_to(CLI::App* app) {
        app->add_option("--epochs", epochs, "Training epochs")->capture_default_str()->check(CLI::PositiveNumber);
        app->add_option("--batch-size", batch_size, "Queries per optimiser step")
            ->capture_default_str()
            ->check(CLI::PositiveNumber);
        app->add_option("--lr", lr, "Base step size (cosine-annealed to 0)")->capture_default_str();
        app->add_option("-R,--references", references, "References per query (R)")->capture_default_str();
        app->add_option("-P,--pool", pool, "Nearest-neighbour pool size (P)")->capture_default_str();
        app->add_option("--max-widen", max_widen, "Age-bucket widening radius")->capture_default_str();
        app->add_option("-C,--classes", classes, "Difference classes -C..C")->capture_default_str();
        app->add_option("--embed-dim", embed_dim, "Age embedding width")->capture_default_str();
        app->add_option("--hidden", hidden, "Backbone widths, comma separated (full scale: 2048,1024,512)")
            ->capture_default_str();
        app->add_option("--dropout", dropout, "Dropout probability")->capture_default_str();
        app->add_option("--error-dist", error_dist, "Training age perturbation: kde | uniform")
            ->capture_default_str()
            ->check(CLI::IsMember({"kde", "uniform"}));
        app->add_option("--uniform-radius", uniform_radius, "Radius of the uniform ablation")->capture_default_str();
        app->add_option("--retrieval", retrieval, "Reference selection: nearest | random")
            ->capture_default_str()
            ->check(CLI::IsMember({"nearest", "random"}));
        app->add_option("--head", head, "Head design: full (second-order) | classifier")
            ->capture_default_str()
            ->check(CLI::IsMember({"full", "classifier"}));
        app->add_flag("--no-inner-abs", no_inner_abs, "Drop the second copy of the absolute MSE term");
    }

    diffreg::TrainOptions options(std::size_t threads) const {
        diffreg::TrainOptions o;
        o.train.epochs = epochs;
        o.train.batch_size = batch_size;
        o.train.learning_rate = lr;
        o.train.error_dist =
            error_dist == "uniform" ? diffreg::ErrorDistribution::uniform : diffreg::ErrorDistribution::kde;
        o.train.uniform_radius = uniform_radius;
        o.train.inner_absolute_term = !no_inner_abs;
        o.train.threads = threads;
        o.retrieval.num_references = references;
        o.retrieval.pool_size = pool;
        o.retrieval.max_widen = max_widen;
        o.retrieval.method = retrieval == "random" ? diffreg::RetrievalMethod::random : diffreg::RetrievalMethod::nearest;
        o.dar.embed_dim = embed_dim;
        o.dar.hidden = parse_dims(hidden);
        o.dar.half_classes = classes;
        o.dar.dropout = dropout;
        o.dar.second_order = head == "full";
        // Validate everything (R <= P among others) before any work starts.
        o.train.validate();
        o.retrieval.validate();
        diffreg::DarConfig probe = o.dar;
        probe.feature_dim = 1;
        probe.validate();
        return o;
    }
};

/// Records every option of a subcommand plus input hashes next to an artifact.
class Manifest {
public:
    explicit Manifest(const CLI::App* cmd, std::vector<std::string> argv) : cmd_(cmd), argv_(std::move(argv)) {}

    void input(const std::string& path) { inputs_[path] = file_hash(path); }
    void output(const std::string& path) { outputs_.push_back(path); }

    void write(const std::string& path, std::uint64_t seed) const {
        json args = json::object();
        for (const CLI::Option* opt : cmd_->get_options()) {
            if (opt->get_name() == "--help" || opt->get_name().empty()) {
                continue;
            }
            const auto& res = opt->results();
            if (!res.empty()) {
                args[opt->get_name()] = res.size() == 1 ? json(res[0]) : json(res);
            } else {
                args[opt->get_name()] = opt->get_default_str();
            }
        }
        json j = {{"command", cmd_->get_name()}, {"argv", argv_}, {"args", args},
                  {"seed", seed},                {"inputs", inputs_}, {"outputs", outputs_}};
        diffreg::detail::write_text(path, j.dump(1) + "\n");
    }

private:
    const CLI::App* cmd_;
    std::vector<std::string> argv_;
    std::map<std::string, std::string> inputs_;
    std::vector<std::string> outputs_;
};

std::string manifest_path(const std::string& artifact) { return artifact + ".manifest.json"; }

void write_stream(const std::string& path, const std::function<void(std::ostream&)>& fn) {
    ensure_parent(path);
    std::ofstream out(path, std::ios::binary);
    diffreg::require(out.good(), ErrorKind::input, "cannot write '" + path + "'");
    fn(out);
    diffreg::require(out.good(), ErrorKind::input, "write to '" + path + "' failed");
}

void write_predict_csv(const diffreg::Pipeline* pipeline, const diffreg::BaselinePredictor& model,
                       const diffreg::Dataset& ds, std::size_t threads, std::ostream& out) {
    struct Row {
        diffreg::RefinedPrediction p;
    };
    std::vector<Row> rows(ds.size());
    diffreg::parallel_for(ds.size(), threads, [&](std::size_t i) {
        const auto& f = ds.samples[i].features;
        if (pipeline != nullptr) {
            rows[i].p = pipeline->predict_detail(f);
        } else {
            rows[i].p.initial = rows[i].p.refined = diffreg::baseline_predict(model, f);
        }
    });
    auto join = [](const auto& values) {
        std::string s;
        for (const auto& v : values) {
            if (!s.empty()) {
                s += ';';
            }
            if constexpr (std::is_same_v<std::decay_t<decltype(v)>, double>) {
                s += diffreg::format_double(v);
            } else {
                s += v;
            }
        }
        return s;
    };
    out << "sample_id,label,initial,refined,retrieval_age,fallback,references,diffs,weights\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& p = rows[i].p;
        out << ds.samples[i].sample_id << ',' << diffreg::format_double(ds.samples[i].label) << ','
            << diffreg::format_double(p.initial) << ',' << diffreg::format_double(p.refined) << ','
            << p.retrieval_age << ',' << (p.fallback ? 1 : 0) << ',' << join(p.references) << ','
            << join(p.diffs) << ',' << join(p.weights) << '\n';
    }
}

} // namespace

int main(int argc, char** argv) {
    const std::vector<std::string> args(argv + 1, argv + argc);
    CLI::App app{"Differential regression refinement of a baseline regressor"};
    app.require_subcommand(1);
    std::size_t threads = 0;
    app.add_option("--threads", threads, "Worker threads (0: DIFFREG_THREADS or 1)")->capture_default_str();

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a seeded synthetic dataset (CSV)");
    diffreg::SynthConfig sc;
    std::string synth_out;
    std::vector<std::string> synth_groups;
    synth->add_option("--out", synth_out, "Output CSV")->required();
    synth->add_option("--seed", sc.seed, "Random seed")->capture_default_str();
    synth->add_option("--subjects", sc.num_subjects, "Number of subjects")->capture_default_str();
    synth->add_option("--samples-per-subject", sc.samples_per_subject, "Samples per subject")->capture_default_str();
    synth->add_option("--dim", sc.feature_dim, "Feature dimension")->capture_default_str();
    synth->add_option("--noise", sc.noise_sigma, "Feature noise sigma")->capture_default_str();
    synth->add_option("--label-min", sc.label_min, "Smallest label")->capture_default_str();
    synth->add_option("--label-max", sc.label_max, "Largest label")->capture_default_str();
    synth->add_option("--group", synth_groups, "Group axis: name:cat=shift[@weight],... (repeatable)");

    // split
    auto* split = app.add_subcommand("split", "Subject-exclusive train/dist/test split");
    std::string split_data;
    std::string split_dir;
    double train_frac = 0.78;
    double dist_frac = 0.02;
    std::uint64_t split_seed = 0;
    split->add_option("--data", split_data, "Input CSV")->required();
    split->add_option("--out-dir", split_dir, "Directory for train.csv, dist.csv, test.csv")->required();
    split->add_option("--train-frac", train_frac, "Training fraction")->capture_default_str();
    split->add_option("--dist-frac", dist_frac, "Error-distribution fraction")->capture_default_str();
    split->add_option("--seed", split_seed, "Random seed")->capture_default_str();

    // train-bar
    auto* train_bar = app.add_subcommand("train-bar", "Fit the ridge baseline");
    std::string bar_train;
    std::string bar_out;
    double lambda = 1.0;
    std::uint64_t bar_seed = 0;
    train_bar->add_option("--train", bar_train, "Training CSV")->required();
    train_bar->add_option("--out", bar_out, "Output baseline JSON")->required();
    train_bar->add_option("--lambda", lambda, "Ridge penalty")->capture_default_str();
    train_bar->add_option("--seed", bar_seed, "Random seed (recorded; the fit is deterministic)")->capture_default_str();

    // fit-err
    auto* fit_err = app.add_subcommand("fit-err", "Fit the KDE error model on baseline residuals");
    std::string err_model;
    std::string err_dist;
    std::string err_out;
    double clip = 20.0;
    std::uint64_t err_seed = 0;
    fit_err->add_option("--baseline", err_model, "Baseline or pipeline file")->required();
    fit_err->add_option("--dist", err_dist, "Distribution-estimation CSV")->required();
    fit_err->add_option("--out", err_out, "Output error-model JSON")->required();
    fit_err->add_option("--clip", clip, "Residual clip bound")->capture_default_str();
    fit_err->add_option("--seed", err_seed, "Random seed (recorded; the fit is deterministic)")->capture_default_str();

    // train-dar
    auto* train_dar_cmd = app.add_subcommand("train-dar", "Train one DAR round into a pipeline checkpoint");
    std::string td_train;
    std::string td_baseline;
    std::string td_err;
    std::string td_out;
    std::string td_log;
    std::string td_monitor;
    std::uint64_t td_seed = 0;
    TrainFlags td_flags;
    train_dar_cmd->add_option("--train", td_train, "Training CSV")->required();
    train_dar_cmd->add_option("--baseline", td_baseline, "Baseline or pipeline file")->required();
    train_dar_cmd->add_option("--error-model", td_err, "Error-model JSON")->required();
    train_dar_cmd->add_option("--out", td_out, "Output checkpoint")->required();
    train_dar_cmd->add_option("--log", td_log, "Training log (JSON lines)");
    train_dar_cmd->add_option("--monitor", td_monitor, "Held-out CSV scored after every epoch");
    train_dar_cmd->add_option("--seed", td_seed, "Random seed")->capture_default_str();
    td_flags.add_to(train_dar_cmd);

    // refine
    auto* refine = app.add_subcommand("refine", "Iterative refinement BAR_n -> BAR_{n+1}");
    std::string rf_train;
    std::string rf_dist;
    std::string rf_baseline;
    std::string rf_dir;
    std::string rf_monitor;
    int iterations = 2;
    double rf_clip = 20.0;
    bool no_warm_start = false;
    std::uint64_t rf_seed = 0;
    TrainFlags rf_flags;
    refine->add_option("--train", rf_train, "Training CSV")->required();
    refine->add_option("--dist", rf_dist, "Distribution-estimation CSV")->required();
    refine->add_option("--baseline", rf_baseline, "Initial baseline or pipeline file")->required();
    refine->add_option("--out-dir", rf_dir, "Directory for pipeline_iter<n>.json and logs")->required();
    refine->add_option("--iterations", iterations, "Refinement rounds")->capture_default_str()->check(
        CLI::PositiveNumber);
    refine->add_option("--clip", rf_clip, "Residual clip bound")->capture_default_str();
    refine->add_option("--monitor", rf_monitor, "Held-out CSV scored after every epoch");
    refine->add_flag("--no-warm-start", no_warm_start, "Train every round from a fresh initialisation");
    refine->add_option("--seed", rf_seed, "Random seed")->capture_default_str();
    rf_flags.add_to(refine);

    // predict
    auto* predict = app.add_subcommand("predict", "Predict every sample of a CSV");
    std::string pr_model;
    std::string pr_data;
    std::string pr_out;
    std::uint64_t pr_seed = 0;
    predict->add_option("--model", pr_model, "Baseline or pipeline file")->required();
    predict->add_option("--data", pr_data, "Input CSV")->required();
    predict->add_option("--out", pr_out,
                        "Output CSV: sample_id,label,initial,refined,retrieval_age,fallback,references,diffs,weights")
        ->required();
    predict->add_option("--seed", pr_seed, "Random seed (recorded; prediction is deterministic)")->capture_default_str();

    // eval
    auto* eval = app.add_subcommand("eval", "MAE, per-sample errors and error histograms");
    std::string ev_model;
    std::string ev_data;
    std::string ev_prefix;
    double bin_width = 1.0;
    std::uint64_t ev_seed = 0;
    eval->add_option("--model", ev_model, "Baseline or pipeline file")->required();
    eval->add_option("--data", ev_data, "Evaluation CSV")->required();
    eval->add_option("--out-prefix", ev_prefix,
                     "Writes <prefix>.summary.json, <prefix>.predictions.csv "
                     "(sample_id,label,initial,refined,error,fallback), <prefix>.hist_signed.csv and "
                     "<prefix>.hist_abs.csv (lower,upper,count)")
        ->required();
    eval->add_option("--bin-width", bin_width, "Histogram bin width")->capture_default_str();
    eval->add_option("--seed", ev_seed, "Random seed (recorded; evaluation is deterministic)")->capture_default_str();

    // bias
    auto* bias = app.add_subcommand("bias", "Per-age-bin and per-group error tables");
    std::string bi_model;
    std::string bi_data;
    std::string bi_train;
    std::string bi_out;
    std::vector<std::string> axes;
    int age_bin_width = 5;
    std::uint64_t bi_seed = 0;
    bias->add_option("--model", bi_model, "Baseline or pipeline file")->required();
    bias->add_option("--data", bi_data, "Evaluation CSV")->required();
    bias->add_option("--train", bi_train, "Training CSV (fills train_samples)");
    bias->add_option("--out", bi_out,
                     "Output CSV: table,range,samples,mae,std,train_samples,mean_error,std_error "
                     "(std: std of |error|; std_error: std of signed error)")
        ->required();
    bias->add_option("--axes", axes, "Group axes (default: all)")->delimiter(',');
    bias->add_option("--age-bin-width", age_bin_width, "Age bin width")->capture_default_str()->check(
        CLI::PositiveNumber);
    bias->add_option("--seed", bi_seed, "Random seed (recorded; the report is deterministic)")->capture_default_str();

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "Analytic vs finite-difference gradients (exit 0 iff < 1e-4)");
    std::uint64_t gc_seed = 0;
    bool gc_double = false;
    std::string gc_out;
    gradcheck->add_option("--seed", gc_seed, "Random seed")->capture_default_str();
    gradcheck->add_flag("--double-hidden", gc_double, "Use hidden widths [64, 32]");
    gradcheck->add_option("--out", gc_out, "Also write the JSON report here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what(), kExitUsage);
        return kExitUsage;
    }

    try {
        const std::size_t nthreads = threads > 0 ? threads : diffreg::default_thread_count();
        CLI::App* cmd = app.get_subcommands().front();
        Manifest manifest(cmd, args);

        if (cmd == synth) {
            for (const auto& g : synth_groups) {
                sc.groups.push_back(parse_group(g));
            }
            sc.validate();
            const auto ds = diffreg::generate_synthetic(sc);
            ensure_parent(synth_out);
            diffreg::save_dataset(ds, synth_out);
            manifest.output(synth_out);
            manifest.write(manifest_path(synth_out), sc.seed);
        } else if (cmd == split) {
            diffreg::require(train_frac > 0.0 && dist_frac > 0.0 && train_frac + dist_frac < 1.0, ErrorKind::config,
                             "fractions must be positive with train_frac + dist_frac < 1");
            const auto ds = diffreg::load_dataset(split_data);
            manifest.input(split_data);
            const auto parts = diffreg::subject_exclusive_split(ds, train_frac, dist_frac, split_seed);
            fs::create_directories(split_dir);
            const std::pair<const char*, const diffreg::Dataset*> outs[] = {
                {"train.csv", &parts.train}, {"dist.csv", &parts.dist}, {"test.csv", &parts.test}};
            for (const auto& [name, part] : outs) {
                const std::string path = (fs::path(split_dir) / name).string();
                diffreg::save_dataset(*part, path);
                manifest.output(path);
            }
            manifest.write((fs::path(split_dir) / "split.manifest.json").string(), split_seed);
        } else if (cmd == train_bar) {
            const auto train = diffreg::load_dataset(bar_train);
            manifest.input(bar_train);
            const auto model = diffreg::fit_ridge_baseline(train, lambda);
            ensure_parent(bar_out);
            diffreg::save_baseline(model, bar_out);
            manifest.output(bar_out);
            manifest.write(manifest_path(bar_out), bar_seed);
        } else if (cmd == fit_err) {
            const auto model = diffreg::load_predictor(err_model);
            const auto dist = diffreg::load_dataset(err_dist);
            manifest.input(err_model);
            manifest.input(err_dist);
            const auto m = diffreg::fit_error_kde(diffreg::compute_residuals(*model, dist), clip);
            ensure_parent(err_out);
            diffreg::save_error_model(m, err_out);
            manifest.output(err_out);
            manifest.write(manifest_path(err_out), err_seed);
        } else if (cmd == train_dar_cmd) {
            const auto opts = td_flags.options(nthreads);
            const auto train = diffreg::load_dataset(td_train);
            const auto bar = diffreg::load_predictor(td_baseline);
            const auto err = diffreg::load_error_model(td_err);
            manifest.input(td_train);
            manifest.input(td_baseline);
            manifest.input(td_err);
            diffreg::Dataset monitor;
            diffreg::TrainHooks hooks;
            if (!td_monitor.empty()) {
                monitor = diffreg::load_dataset(td_monitor);
                manifest.input(td_monitor);
                hooks.monitor = &monitor;
            }
            std::ofstream log;
            if (!td_log.empty()) {
                ensure_parent(td_log);
                log.open(td_log, std::ios::binary);
                diffreg::require(log.good(), ErrorKind::input, "cannot write '" + td_log + "'");
                manifest.output(td_log);
            }
            hooks.on_epoch = [&](const diffreg::EpochLog& e) {
                const std::string line = diffreg::to_json(e).dump();
                if (log.is_open()) {
                    log << line << '\n';
                }
                std::cerr << line << '\n';
            };
            const auto* prev = dynamic_cast<const diffreg::Pipeline*>(bar.get());
            const int iteration = prev != nullptr ? prev->iteration() + 1 : 1;
            hooks.monitor_salt = static_cast<std::uint64_t>(iteration);
            auto idx = std::make_shared<const diffreg::ReferenceIndex>(std::make_shared<const diffreg::Dataset>(train));
            auto trained = diffreg::train_dar(idx, *bar, err, opts, td_seed, hooks);
            const diffreg::Pipeline pipeline(bar, err, idx, std::move(trained.params), opts.retrieval, iteration);
            ensure_parent(td_out);
            diffreg::save_checkpoint(pipeline, td_out);
            manifest.output(td_out);
            manifest.write(manifest_path(td_out), td_seed);
        } else if (cmd == refine) {
            diffreg::RefineOptions ropts;
            ropts.train = rf_flags.options(nthreads);
            ropts.clip = rf_clip;
            ropts.warm_start = !no_warm_start;
            const auto train = diffreg::load_dataset(rf_train);
            const auto dist = diffreg::load_dataset(rf_dist);
            const auto bar = diffreg::load_predictor(rf_baseline);
            manifest.input(rf_train);
            manifest.input(rf_dist);
            manifest.input(rf_baseline);
            diffreg::Dataset monitor;
            diffreg::TrainHooks hooks;
            if (!rf_monitor.empty()) {
                monitor = diffreg::load_dataset(rf_monitor);
                manifest.input(rf_monitor);
                hooks.monitor = &monitor;
            }
            fs::create_directories(rf_dir);
            int round = 0;
            std::ofstream log;
            hooks.on_epoch = [&](const diffreg::EpochLog& e) {
                json j = diffreg::to_json(e);
                j["iteration"] = round;
                log << j.dump() << '\n';
                std::cerr << j.dump() << '\n';
            };
            // Each round starts by opening its log; the callback runs before the round's pipeline exists.
            auto open_log = [&](int n) {
                round = n;
                const std::string path = (fs::path(rf_dir) / ("train_log_iter" + std::to_string(n) + ".jsonl")).string();
                log.close();
                log.open(path, std::ios::binary);
                diffreg::require(log.good(), ErrorKind::input, "cannot write '" + path + "'");
                manifest.output(path);
            };
            auto idx = std::make_shared<const diffreg::ReferenceIndex>(std::make_shared<const diffreg::Dataset>(train));
            std::shared_ptr<const diffreg::BaselinePredictor> current = bar;
            const auto* start = dynamic_cast<const diffreg::Pipeline*>(bar.get());
            const int first = start != nullptr ? start->iteration() + 1 : 1;
            for (int n = first; n < first + iterations; ++n) {
                open_log(n);
                auto res = diffreg::refine_iteration(idx, dist, current, ropts, rf_seed, hooks);
                const std::string path = (fs::path(rf_dir) / ("pipeline_iter" + std::to_string(n) + ".json")).string();
                diffreg::save_checkpoint(*res.pipeline, path);
                manifest.output(path);
                current = res.pipeline;
            }
            log.close();
            manifest.write((fs::path(rf_dir) / "refine.manifest.json").string(), rf_seed);
        } else if (cmd == predict) {
            const auto model = diffreg::load_predictor(pr_model);
            const auto ds = diffreg::load_dataset(pr_data);
            manifest.input(pr_model);
            manifest.input(pr_data);
            write_stream(pr_out, [&](std::ostream& out) {
                write_predict_csv(dynamic_cast<const diffreg::Pipeline*>(model.get()), *model, ds, nthreads, out);
            });
            manifest.output(pr_out);
            manifest.write(manifest_path(pr_out), pr_seed);
        } else if (cmd == eval) {
            const auto model = diffreg::load_predictor(ev_model);
            const auto ds = diffreg::load_dataset(ev_data);
            manifest.input(ev_model);
            manifest.input(ev_data);
            const auto report = diffreg::evaluate(*model, ds, nthreads);
            const auto hist = diffreg::error_histograms(report, bin_width);
            std::vector<double> initial;
            std::vector<double> labels;
            std::size_t fallbacks = 0;
            for (const auto& r : report.records) {
                initial.push_back(r.initial);
                labels.push_back(r.label);
                fallbacks += r.fallback ? 1 : 0;
            }
            const json summary = {{"samples", report.records.size()},
                                  {"mae", report.mae},
                                  {"baseline_mae", diffreg::mean_absolute_error(initial, labels)},
                                  {"fallbacks", fallbacks}};
            const std::string sp = ev_prefix + ".summary.json";
            ensure_parent(sp);
            diffreg::detail::write_text(sp, summary.dump(1) + "\n");
            write_stream(ev_prefix + ".predictions.csv",
                         [&](std::ostream& out) { diffreg::write_predictions_csv(report, out); });
            write_stream(ev_prefix + ".hist_signed.csv",
                         [&](std::ostream& out) { diffreg::write_histogram_csv(hist.signed_error, out); });
            write_stream(ev_prefix + ".hist_abs.csv",
                         [&](std::ostream& out) { diffreg::write_histogram_csv(hist.absolute_error, out); });
            for (const char* suffix : {".summary.json", ".predictions.csv", ".hist_signed.csv", ".hist_abs.csv"}) {
                manifest.output(ev_prefix + suffix);
            }
            manifest.write(ev_prefix + ".manifest.json", ev_seed);
            std::cout << summary.dump() << std::endl;
        } else if (cmd == bias) {
            const auto model = diffreg::load_predictor(bi_model);
            const auto ds = diffreg::load_dataset(bi_data);
            manifest.input(bi_model);
            manifest.input(bi_data);
            diffreg::Dataset train;
            if (!bi_train.empty()) {
                train = diffreg::load_dataset(bi_train);
                manifest.input(bi_train);
            }
            if (axes.empty()) {
                axes = ds.group_names();
            }
            const auto report = diffreg::evaluate(*model, ds, nthreads);
            const auto edges = diffreg::default_age_bins(ds.label_min, ds.label_max, age_bin_width);
            const auto tables = diffreg::group_bias_report(report, axes, edges, bi_train.empty() ? nullptr : &train);
            write_stream(bi_out, [&](std::ostream& out) { diffreg::write_bias_csv(tables, out); });
            manifest.output(bi_out);
            manifest.write(manifest_path(bi_out), bi_seed);
        } else if (cmd == gradcheck) {
            diffreg::GradCheckConfig g;
            if (gc_double) {
                g.hidden = {64, 32};
            }
            const auto report = diffreg::gradient_check(g, gc_seed);
            json j = {{"max_rel_err", report.max_rel_err}, {"per_block", report.per_block},
                      {"checked", report.checked},         {"skipped_kinks", report.skipped_kinks},
                      {"seconds", report.seconds},          {"tolerance", 1e-4}};
            std::cout << j.dump() << std::endl;
            if (!gc_out.empty()) {
                ensure_parent(gc_out);
                j.erase("seconds");
                diffreg::detail::write_text(gc_out, j.dump(1) + "\n");
                manifest.output(gc_out);
                manifest.write(manifest_path(gc_out), gc_seed);
            }
            if (!(report.max_rel_err < 1e-4)) {
                print_error("numeric", "gradient check failed: max relative error " +
                                           diffreg::format_double(report.max_rel_err) + " >= 1e-4",
                            kExitNumeric);
                return kExitNumeric;
            }
        }
    } catch (const Error& e) {
        const int code = exit_code_for(e.kind());
        print_error(diffreg::to_string(e.kind()), e.what(), code);
        return code;
    } catch (const std::filesystem::filesystem_error& e) {
        print_error("input", e.what(), kExitData);
        return kExitData;
    } catch (const std::exception& e) {
        print_error("internal", e.what(), kExitData);
        return kExitData;
    }
    return kExitOk;
}
