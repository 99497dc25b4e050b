// SPDX-License-Identifier: Apache-2.0
#include "dtme/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dtme/common.hpp"
#include "dtme/io.hpp"
#include "dtme/trainer.hpp"

namespace dtme::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- gen-data ----

int cmd_gen_data(const GenDataArgs& args, std::ostream& out, std::ostream& err) {
    (void)err;
    const KvConfig kv = parse_kv_file(args.spec_path);
    const SyntheticSpec spec = spec_from_config(kv);
    prepare_run_dir(args.out_dir, args.force);
    DirLock lock(args.out_dir);
    const Dataset data = generate_dataset(spec);
    const fs::path target = fs::path(args.out_dir) / "dataset.bin";
    save_dataset(data, target);
    out << "spec_hash=" << hash_hex(spec.content_hash()) << "\n";
    out << "dataset=" << target.string() << "\n";
    out << "samples=" << data.size() << " tokens=" << spec.tokens()
        << " channels=" << spec.channels << " tasks=" << spec.num_tasks() << "\n";
    return kExitOk;
}

// ---- train ----

namespace {

TrainConfig effective_train_config(const TrainArgs& args) {
    TrainConfig tc;
    if (args.config_path) tc = train_config_from_config(parse_kv_file(*args.config_path));
    if (args.mode) tc.mode = train_mode_from_string(*args.mode);
    if (args.seed) tc.seed = *args.seed;
    if (args.steps) tc.steps = *args.steps;
    if (args.batch) tc.batch = *args.batch;
    if (args.r) tc.r = *args.r;
    if (args.beta) tc.beta = *args.beta;
    if (args.tokens_per_task) tc.tokens_per_task = *args.tokens_per_task;
    if (args.timing) tc.timing = *args.timing;
    if (args.strategy) tc.strategy = plan_strategy_from_string(*args.strategy);
    if (args.actions) tc.actions = plan_actions_from_string(*args.actions);
    if (args.task) tc.single_task = *args.task;
    if (args.monitor_every) tc.monitor_every = *args.monitor_every;
    if (args.conflict_samples) tc.conflict_samples = *args.conflict_samples;
    return tc;
}

}  // namespace

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
    (void)err;
    if (!fs::exists(args.dataset_path)) {
        throw IoError("dataset not found: " + args.dataset_path);
    }
    const uint64_t dataset_hash = hash_file(args.dataset_path);
    const Dataset data = load_dataset(args.dataset_path);
    TrainConfig tc = effective_train_config(args);
    tc.validate(data.spec.num_tasks());
    const uint64_t chash = config_hash(tc, dataset_hash);

    prepare_run_dir(args.out_dir, args.force);
    DirLock lock(args.out_dir);
    const fs::path dir(args.out_dir);
    write_text_file_checked(dir / "config.txt", canonical_config_text(tc, dataset_hash));

    ModelConfig mcfg;
    mcfg.depth = tc.depth;
    mcfg.hidden = tc.hidden;
    mcfg.heads = tc.heads;
    mcfg.tokens = data.spec.tokens();
    mcfg.input_channels = data.spec.channels;
    mcfg.head_specs = head_specs_for(data.spec);
    TransformerModel model(mcfg, tc.seed);

    RunRecord rec = train_run(model, data, tc);

    write_losses_csv(dir / "losses.csv", rec, chash);
    write_metrics_csv(dir / "metrics.csv", rec.metrics, chash);
    write_conflicts_jsonl(dir / "conflicts.jsonl", rec, chash);
    if (rec.plan) write_plan_txt(dir / "plan.txt", *rec.plan, chash);
    save_checkpoint(model, chash, tc.seed, rec.plan, dir / "checkpoint.bin");

    out << "mode=" << to_string(tc.mode) << " seed=" << tc.seed << " steps=" << tc.steps << "\n";
    out << "config_hash=" << hash_hex(chash) << "\n";
    out << "final_loss=" << format_double(rec.losses.back().total) << "\n";
    out << "params_before=" << rec.params_before << " params_after=" << rec.params_after
        << " overhead_percent=" << format_double(rec.overhead_percent) << "\n";
    for (const MetricRow& row : rec.metrics.rows) {
        out << "metric " << row.task << " " << row.metric << " model=" << format_double(row.model)
            << "\n";
    }
    out << "checkpoint_hash=" << hash_hex(hash_file(dir / "checkpoint.bin")) << "\n";
    return kExitOk;
}

// ---- analyze ----

namespace {

// Split index for a different ratio over an already-extracted spectrum: a
// diagonal covariance with the same eigenvalues yields the same m.
int split_for_ratio(const std::vector<double>& values, int layer, double r) {
    const int p = static_cast<int>(values.size());
    std::vector<double> diag(static_cast<size_t>(p) * static_cast<size_t>(p), 0.0);
    for (int i = 0; i < p; ++i) {
        diag[static_cast<size_t>(i) * p + static_cast<size_t>(i)] = values[static_cast<size_t>(i)];
    }
    TokenCovariance cov;
    cov.layer = layer;
    cov.dim = p;
    cov.matrix = Tensor::from({p, p}, std::move(diag));
    cov.samples = 1;
    return spectral_split(cov, r).split;
}

}  // namespace

int cmd_analyze(const AnalyzeArgs& args, std::ostream& out, std::ostream& err) {
    (void)err;
    if (!(args.r > 0.0)) throw ContractError("--r must be positive");
    const Checkpoint ckpt = load_checkpoint(args.checkpoint_path);
    TransformerModel model = model_from_checkpoint(ckpt);
    const Dataset data = load_dataset(args.dataset_path);
    if (data.size() == 0) throw ContractError("dataset is empty");
    if (model.config().tokens != data.spec.tokens() ||
        model.config().input_channels != data.spec.channels ||
        static_cast<int>(model.config().head_specs.size()) != data.spec.num_tasks()) {
        throw ContractError("checkpoint and dataset are incompatible");
    }

    std::vector<int> all(static_cast<size_t>(data.size()));
    for (int i = 0; i < data.size(); ++i) all[static_cast<size_t>(i)] = i;
    const ConflictMeasurement meas = measure_conflicts(model, data, all, args.r);

    std::string report = conflict_report_text(meas, args.r, ckpt.config_hash);
    if (!args.sweep.empty()) {
        std::istringstream ss(args.sweep);
        std::string item;
        std::ostringstream extra;
        while (std::getline(ss, item, ',')) {
            const double rv = std::stod(item);
            if (!(rv > 0.0)) throw ContractError("--sweep values must be positive");
            for (const SpectralBasis& basis : meas.bases) {
                extra << "sweep_r=" << format_double(rv) << " layer=" << basis.layer
                      << " m=" << split_for_ratio(basis.values, basis.layer, rv) << "\n";
            }
        }
        report += extra.str();
    }
    if (fs::exists(args.out_path) && !args.force) {
        throw IoError(args.out_path + " exists (pass --force to overwrite)");
    }
    write_text_file_checked(args.out_path, report);

    out << "layer m dim range_mass null_mass range_score null_score\n";
    for (size_t d = 0; d < meas.bases.size(); ++d) {
        const SpectralBasis& basis = meas.bases[d];
        double total = 0.0, head = 0.0;
        for (size_t i = 0; i < basis.values.size(); ++i) {
            total += basis.values[i];
            if (static_cast<int>(i) < basis.split) head += basis.values[i];
        }
        const LayerSeverity& sev = meas.severities[d];
        out << basis.layer << " " << basis.split << " " << basis.dim() << " "
            << format_double(total > 0.0 ? head / total : 0.0) << " "
            << format_double(total > 0.0 ? 1.0 - head / total : 0.0) << " "
            << format_double(sev.range_score) << " " << format_double(sev.null_score) << "\n";
    }
    return kExitOk;
}

// ---- report ----

namespace {

struct LossTail {
    int steps = 0;
    double final_total = 0.0;
};

LossTail scan_losses_csv(const fs::path& path, const std::string& expect_hash) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    LossTail tail;
    std::string line;
    bool hash_ok = false;
    while (std::getline(in, line)) {
        if (line.rfind("# config_hash=", 0) == 0) {
            hash_ok = line.substr(14) == expect_hash;
            continue;
        }
        if (line.empty() || line[0] == '#') continue;
        if (line.rfind("step,", 0) == 0) continue;
        const size_t c1 = line.find(',');
        const size_t c2 = line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos) continue;
        if (line.substr(c1 + 1, c2 - c1 - 1) != "total") continue;
        tail.steps = std::stoi(line.substr(0, c1)) + 1;
        tail.final_total = std::stod(line.substr(c2 + 1));
    }
    if (!hash_ok) throw IoError(path.string() + ": config hash mismatch");
    return tail;
}

std::string csv_hash_comment(const fs::path& path) {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("# config_hash=", 0) == 0) return line.substr(14);
        if (!line.empty() && line[0] != '#') break;
    }
    return "";
}

RunSummary load_run_summary(const fs::path& dir) {
    RunSummary run;
    run.dir = dir.string();
    for (const char* name : {"config.txt", "losses.csv", "metrics.csv", "conflicts.jsonl",
                             "checkpoint.bin"}) {
        if (!fs::exists(dir / name)) {
            throw IoError(dir.string() + ": missing " + name);
        }
    }
    // config.txt is the canonical serialized config, so its byte hash is the
    // run's config hash; artifacts must agree.
    const uint64_t chash = hash_file(dir / "config.txt");
    run.config_hash_hex = hash_hex(chash);

    const KvConfig kv = parse_kv_file(dir / "config.txt");
    run.mode = kv.get("mode", "joint");
    run.seed = kv.get_u64("seed", 0);
    run.timing = kv.get_double("timing", 0.0);
    run.beta = kv.get_double("beta", 0.0);

    if (csv_hash_comment(dir / "metrics.csv") != run.config_hash_hex) {
        throw IoError((dir / "metrics.csv").string() + ": config hash mismatch");
    }
    run.metrics = read_metrics_csv(dir / "metrics.csv");

    const LossTail tail = scan_losses_csv(dir / "losses.csv", run.config_hash_hex);
    run.steps = tail.steps;
    run.final_total_loss = tail.final_total;

    const Checkpoint ckpt = load_checkpoint(dir / "checkpoint.bin");
    if (ckpt.config_hash != chash) {
        throw IoError((dir / "checkpoint.bin").string() + ": config hash mismatch");
    }
    long after = 0;
    for (const auto& [name, vals] : ckpt.params) after += static_cast<long>(vals.size());
    run.params_after = after;
    run.params_before = after;
    if (ckpt.plan) {
        run.plan = ckpt.plan;
        run.params_before =
            after - planned_extra_params(*ckpt.plan,
                                         static_cast<int>(ckpt.model_config.head_specs.size()),
                                         ckpt.model_config.hidden);
    }
    run.overhead_percent = param_overhead(static_cast<double>(run.params_before),
                                          static_cast<double>(run.params_after));

    run.snapshots = read_conflicts_jsonl(dir / "conflicts.jsonl");
    run.conflict_reduction_range = conflict_reduction_percent(run.snapshots, true);
    run.conflict_reduction_null = conflict_reduction_percent(run.snapshots, false);

    bool complete = !run.metrics.rows.empty();
    for (const MetricRow& row : run.metrics.rows) complete = complete && row.has_baseline;
    if (complete) run.delta_m = delta_m_from_table(run.metrics);
    return run;
}

void fill_baselines(std::vector<RunSummary>& runs) {
    // Single-task runs provide the reference metric for matching rows of
    // multi-task runs with the same seed.
    for (RunSummary& run : runs) {
        if (run.mode == "st") continue;
        bool changed = false;
        for (MetricRow& row : run.metrics.rows) {
            if (row.has_baseline) continue;
            for (const RunSummary& st : runs) {
                if (st.mode != "st" || st.seed != run.seed) continue;
                for (const MetricRow& ref : st.metrics.rows) {
                    if (ref.task == row.task && ref.metric == row.metric) {
                        row.baseline = ref.model;
                        row.has_baseline = true;
                        changed = true;
                    }
                }
            }
        }
        if (changed) {
            bool complete = !run.metrics.rows.empty();
            for (const MetricRow& row : run.metrics.rows) complete = complete && row.has_baseline;
            if (complete) run.delta_m = delta_m_from_table(run.metrics);
        }
    }
}

json run_to_json(const RunSummary& run) {
    json j;
    j["dir"] = run.dir;
    j["mode"] = run.mode;
    j["seed"] = run.seed;
    j["config_hash"] = run.config_hash_hex;
    json metrics = json::array();
    for (const MetricRow& row : run.metrics.rows) {
        json m;
        m["task"] = row.task;
        m["metric"] = row.metric;
        m["model"] = row.model;
        m["baseline"] = row.has_baseline ? json(row.baseline) : json(nullptr);
        m["lower_is_better"] = row.lower_is_better;
        metrics.push_back(m);
    }
    j["metrics"] = metrics;
    j["delta_m"] = run.delta_m ? json(*run.delta_m) : json(nullptr);
    j["overhead_percent"] = run.overhead_percent;
    j["params_before"] = run.params_before;
    j["params_after"] = run.params_after;
    j["final_total_loss"] = run.final_total_loss;
    j["steps"] = run.steps;
    j["timing"] = run.timing;
    j["beta"] = run.beta;
    j["conflict_reduction_range"] = run.conflict_reduction_range;
    j["conflict_reduction_null"] = run.conflict_reduction_null;
    if (run.plan) {
        json p;
        p["strategy"] = to_string(run.plan->strategy);
        p["created_step"] = run.plan->created_step;
        json mods = json::array(), exps = json::array();
        for (int d = 0; d < run.plan->depth; ++d) {
            if (run.plan->modulates(d)) mods.push_back(d + 1);
            if (run.plan->expands(d)) exps.push_back(d + 1);
        }
        p["modulated_layers"] = mods;
        p["expanded_layers"] = exps;
        j["plan"] = p;
    } else {
        j["plan"] = nullptr;
    }
    return j;
}

void write_plot_csvs(const fs::path& dir, const std::vector<RunSummary>& runs) {
    std::ostringstream timing, beta, hist;
    timing << "mode,seed,timing,delta_m,final_total_loss\n";
    beta << "mode,seed,beta,overhead_percent,delta_m\n";
    hist << "dir,step,bin,lo,hi,count\n";
    for (const RunSummary& run : runs) {
        if (run.mode == "dtme") {
            timing << run.mode << "," << run.seed << "," << format_double(run.timing) << ",";
            if (run.delta_m) timing << format_double(*run.delta_m);
            timing << "," << format_double(run.final_total_loss) << "\n";
            beta << run.mode << "," << run.seed << "," << format_double(run.beta) << ","
                 << format_double(run.overhead_percent) << ",";
            if (run.delta_m) beta << format_double(*run.delta_m);
            beta << "\n";
        }
        for (const ConflictSnapshot& snap : run.snapshots) {
            for (size_t b = 0; b < snap.param_cos_hist.size(); ++b) {
                const double lo = -1.0 + 2.0 * static_cast<double>(b) / kCosineHistogramBins;
                const double hi = lo + 2.0 / kCosineHistogramBins;
                hist << run.dir << "," << snap.step << "," << b << "," << format_double(lo) << ","
                     << format_double(hi) << "," << snap.param_cos_hist[b] << "\n";
            }
        }
    }
    write_text_file_checked(dir / "timing_sweep.csv", timing.str());
    write_text_file_checked(dir / "beta_sweep.csv", beta.str());
    write_text_file_checked(dir / "cosine_hist.csv", hist.str());
}

}  // namespace

int cmd_report(const ReportArgs& args, std::ostream& out, std::ostream& err) {
    std::vector<RunSummary> runs;
    for (const std::string& dir : args.run_dirs) {
        try {
            runs.push_back(load_run_summary(dir));
        } catch (const std::exception& e) {
            err << "warning: skipping " << dir << ": " << e.what() << "\n";
        }
    }
    if (runs.empty()) throw ContractError("no completed run directories");
    fill_baselines(runs);

    json doc;
    doc["version"] = 1;
    json jruns = json::array();
    for (const RunSummary& run : runs) jruns.push_back(run_to_json(run));
    doc["runs"] = jruns;

    json pairs = json::array();
    for (const RunSummary& base : runs) {
        if (base.mode != "joint" || !base.delta_m) continue;
        for (const RunSummary& other : runs) {
            if (&other == &base || other.seed != base.seed) continue;
            if (other.mode == "joint" || other.mode == "st" || !other.delta_m) continue;
            json p;
            p["seed"] = base.seed;
            p["baseline_mode"] = base.mode;
            p["model_mode"] = other.mode;
            p["delta_m_baseline"] = *base.delta_m;
            p["delta_m_model"] = *other.delta_m;
            p["delta_m_gain"] = *other.delta_m - *base.delta_m;
            pairs.push_back(p);
        }
    }
    doc["pairs"] = pairs;

    std::map<std::string, std::pair<double, int>> acc;
    for (const RunSummary& run : runs) {
        if (run.delta_m) {
            acc["delta_m_" + run.mode].first += *run.delta_m;
            acc["delta_m_" + run.mode].second += 1;
        }
    }
    json means = json::object();
    for (const auto& [key, sum_count] : acc) {
        means[key] = sum_count.first / sum_count.second;
    }
    doc["means"] = means;

    const json schema = json::parse(report_schema_text());
    validate_against_schema(doc, schema);

    prepare_run_dir(args.out_dir, args.force);
    DirLock lock(args.out_dir);
    const fs::path dir(args.out_dir);
    write_text_file_checked(dir / "report.json", doc.dump(2) + "\n");
    write_plot_csvs(dir, runs);

    out << "runs=" << runs.size() << " pairs=" << pairs.size() << "\n";
    out << "report=" << (dir / "report.json").string() << "\n";
    return kExitOk;
}

// ---- front end ----

namespace {

int dispatch(const std::function<int()>& fn, std::ostream& err) {
    try {
        return fn();
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Token-space conflict analysis and adaptive expansion for multi-task training"};
    app.require_subcommand(1);

    GenDataArgs gen;
    CLI::App* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset");
    gen_cmd->add_option("--spec", gen.spec_path, "Dataset spec file (key=value)")
        ->required()
        ->envname("DTME_SPEC");
    gen_cmd->add_option("--out", gen.out_dir, "Output directory")->required()->envname("DTME_OUT");
    gen_cmd->add_flag("--force", gen.force, "Reuse a non-empty output directory");

    TrainArgs train;
    CLI::App* train_cmd = app.add_subcommand("train", "Train one run");
    train_cmd->add_option("--mode", train.mode, "joint|st|dtme|pcgrad")->envname("DTME_MODE");
    train_cmd->add_option("--config", train.config_path, "Training config file (key=value)")
        ->envname("DTME_CONFIG");
    train_cmd->add_option("--dataset", train.dataset_path, "Path to dataset.bin")
        ->required()
        ->envname("DTME_DATASET");
    train_cmd->add_option("--out", train.out_dir, "Run directory")->required()->envname(
        "DTME_OUT");
    train_cmd->add_flag("--force", train.force, "Reuse a non-empty run directory");
    train_cmd->add_option("--seed", train.seed, "Run seed")->envname("DTME_SEED");
    train_cmd->add_option("--steps", train.steps, "Total optimization steps")
        ->envname("DTME_STEPS");
    train_cmd->add_option("--batch", train.batch, "Batch size")->envname("DTME_BATCH");
    train_cmd->add_option("--r", train.r, "Spectral split ratio")->envname("DTME_R");
    train_cmd->add_option("--beta", train.beta, "Layer budget fraction")->envname("DTME_BETA");
    train_cmd->add_option("--tokens-per-task", train.tokens_per_task, "Expansion tokens per task")
        ->envname("DTME_TOKENS_PER_TASK");
    train_cmd->add_option("--timing", train.timing, "Fraction of steps before expansion")
        ->envname("DTME_TIMING");
    train_cmd->add_option("--strategy", train.strategy, "standard|random|reverse|swap")
        ->envname("DTME_STRATEGY");
    train_cmd->add_option("--actions", train.actions, "both|tm|te|none")->envname("DTME_ACTIONS");
    train_cmd->add_option("--task", train.task, "Task index for st mode")->envname("DTME_TASK");
    train_cmd->add_option("--monitor-every", train.monitor_every, "Snapshot cadence in steps")
        ->envname("DTME_MONITOR_EVERY");
    train_cmd->add_option("--conflict-samples", train.conflict_samples,
                          "Samples for the measurement pass (0 = full train split)")
        ->envname("DTME_CONFLICT_SAMPLES");

    AnalyzeArgs analyze;
    CLI::App* analyze_cmd = app.add_subcommand("analyze", "Conflict analysis of a checkpoint");
    analyze_cmd->add_option("--checkpoint", analyze.checkpoint_path, "Path to checkpoint.bin")
        ->required()
        ->envname("DTME_CHECKPOINT");
    analyze_cmd->add_option("--dataset", analyze.dataset_path, "Path to dataset.bin")
        ->required()
        ->envname("DTME_DATASET");
    analyze_cmd->add_option("--r", analyze.r, "Spectral split ratio")->envname("DTME_R");
    analyze_cmd->add_option("--sweep", analyze.sweep, "Extra comma-separated r values")
        ->envname("DTME_SWEEP");
    analyze_cmd->add_option("--out", analyze.out_path, "Report file to write")
        ->required()
        ->envname("DTME_OUT");
    analyze_cmd->add_flag("--force", analyze.force, "Overwrite an existing report file");

    ReportArgs report;
    CLI::App* report_cmd = app.add_subcommand("report", "Aggregate finished runs");
    report_cmd->add_option("--runs", report.run_dirs, "Run directories")
        ->required()
        ->expected(-1);
    report_cmd->add_option("--out", report.out_dir, "Output directory")->required()->envname(
        "DTME_OUT");
    report_cmd->add_flag("--force", report.force, "Reuse a non-empty output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    if (gen_cmd->parsed()) {
        return dispatch([&] { return cmd_gen_data(gen, std::cout, std::cerr); }, std::cerr);
    }
    if (train_cmd->parsed()) {
        return dispatch([&] { return cmd_train(train, std::cout, std::cerr); }, std::cerr);
    }
    if (analyze_cmd->parsed()) {
        return dispatch([&] { return cmd_analyze(analyze, std::cout, std::cerr); }, std::cerr);
    }
    if (report_cmd->parsed()) {
        return dispatch([&] { return cmd_report(report, std::cout, std::cerr); }, std::cerr);
    }
    return kExitUsage;
}

}  // namespace dtme::cli
