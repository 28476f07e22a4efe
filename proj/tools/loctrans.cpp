// loctrans: train locality-dial language models and emit the sweep tables.
//
// Exit codes: 0 success, 1 failed check or diverged training, 2 usage or
// configuration error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "loctrans/error.hpp"
#include "loctrans/experiment.hpp"
#include "loctrans/log.hpp"

namespace fs = std::filesystem;
using namespace loctrans;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

struct Common {
    std::string config;
    std::optional<std::string> out;
};

ExperimentSpec load(const Common& c) {
    ExperimentSpec spec = c.config.empty() ? ExperimentSpec{} : load_spec(c.config);
    if (c.out) spec.output_dir = *c.out;
    spec.validate();
    return spec;
}

std::string lambda_tag(double lambda) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", lambda);
    return buf;
}

void add_common(CLI::App* cmd, Common& c, bool config_required) {
    auto* opt = cmd->add_option("--config", c.config, "experiment JSON (see configs/)");
    if (config_required) opt->required();
    cmd->add_option("--out", c.out, "output directory (overrides output_dir)");
}

int cmd_train(const Common& c, double lambda, std::uint64_t seed) {
    const ExperimentSpec spec = load(c);
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ParameterError("--lambda must lie in [0, 1]");
    CellRunner runner(spec, load_corpus(spec.corpus));
    const CellResult r = runner.run(lambda, seed);
    const std::string stem = "train-lambda" + lambda_tag(lambda) + "-seed" + std::to_string(seed);
    const fs::path ckpt = spec.output_dir / (stem + ".ckpt");
    const fs::path hist = spec.output_dir / (stem + ".history.jsonl");
    fs::create_directories(spec.output_dir);
    fs::copy_file(r.checkpoint, ckpt, fs::copy_options::overwrite_existing);
    fs::copy_file(r.history, hist, fs::copy_options::overwrite_existing);
    std::printf("%s\n", ckpt.string().c_str());
    std::fprintf(stderr, "test loss %.4f  perplexity %.3f  accuracy %.4f  best epoch %zu%s\n", r.test.loss,
                 r.test.perplexity, r.test.accuracy, r.best_epoch, r.cached ? "  (cached)" : "");
    return kOk;
}

int cmd_sweep_interp(const Common& c, bool no_train) {
    const ExperimentSpec spec = load(c);
    CellRunner runner(spec, load_corpus(spec.corpus));
    const InterpSweep sweep = sweep_interpretability(runner, !no_train);
    const fs::path rows = spec.output_dir / "interp.csv";
    const fs::path agg = spec.output_dir / "interp_mean.csv";
    write_file_atomic(rows, format_metrics_csv(sweep.rows));
    write_file_atomic(agg, format_metrics_csv(sweep.aggregate));
    std::printf("%s\n%s\n", rows.string().c_str(), agg.string().c_str());
    return kOk;
}

int cmd_sweep_perf(const Common& c, bool no_train) {
    const ExperimentSpec spec = load(c);
    CellRunner runner(spec, load_corpus(spec.corpus));
    const PerfSweep sweep = sweep_performance(runner, !no_train);
    const fs::path path = spec.output_dir / "perf.csv";
    write_file_atomic(path, format_perf_csv(sweep.rows));
    std::printf("%s\n", path.string().c_str());
    bool partial = false;
    for (const auto& d : sweep.detail) partial = partial || d.partial;
    if (partial) {
        log_warn("some seeds failed; affected rows aggregate the surviving seeds");
        return kFailed;
    }
    return kOk;
}

int cmd_thresholds(const Common& c, std::optional<std::string> checkpoint, double lambda, std::uint64_t seed) {
    const ExperimentSpec spec = load(c);
    const LoadedCorpus corpus = load_corpus(spec.corpus);
    fs::path path;
    if (checkpoint) {
        path = *checkpoint;
        if (!fs::exists(path)) throw IoError("checkpoint not found: " + path.string());
    } else {
        CellRunner runner(spec, corpus);
        const auto hit = runner.lookup(lambda, seed);
        if (!hit) throw MissingCellsError({lambda});
        path = hit->checkpoint;
    }
    const Checkpoint ckpt = load_checkpoint(path);
    const ThresholdReport rep = threshold_report(ckpt, corpus.splits.train, spec.train.calibration_sequences);
    const std::string body = rep.to_json().dump(2) + "\n";
    const fs::path out = spec.output_dir / ("thresholds-lambda" + lambda_tag(rep.lambda) + ".json");
    write_file_atomic(out, body);
    std::cout << body;
    return kOk;
}

int cmd_bound_check(const Common& c, std::optional<double> delta, double penalty_scale) {
    const ExperimentSpec spec = load(c);
    SyntheticSpec data = spec.bound_check.data;
    if (delta) data.delta = *delta;
    const BoundCheckResult res = run_bound_check(data, spec.bound_check.train, penalty_scale);
    const std::string body = res.to_json().dump(2) + "\n";
    write_file_atomic(spec.output_dir / "bound_check.json", body);
    std::cout << body;
    for (const auto& v : res.violations) std::cerr << "violated: " << v << '\n';
    return res.pass ? kOk : kFailed;
}

int cmd_make_corpus(const std::string& dir, std::size_t tokens, std::uint64_t seed) {
    SyntheticCorpusSpec spec;
    spec.train_tokens = tokens;
    spec.valid_tokens = tokens / 10;
    spec.test_tokens = tokens / 10;
    spec.seed = seed;
    write_corpus_files(spec, dir);
    std::printf("%s\n", dir.c_str());
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Locality-dial transformer language models: training, sweeps and bound checks"};
    app.require_subcommand(1);
    bool verbose = false, quiet = false;
    app.add_flag("-v,--verbose", verbose, "log per-epoch progress");
    app.add_flag("-q,--quiet", quiet, "suppress warnings");

    Common common;
    double lambda = 1.0;
    std::uint64_t seed = 1;
    bool no_train = false;

    auto* train = app.add_subcommand("train", "train one model at a given lambda");
    add_common(train, common, true);
    train->add_option("--lambda", lambda, "locality dial in [0, 1]")->required();
    train->add_option("--seed", seed, "training seed");

    auto* interp = app.add_subcommand("sweep-interp", "attention entropy and fidelity per lambda and split");
    add_common(interp, common, true);
    interp->add_flag("--no-train", no_train, "fail instead of training missing models");

    auto* perf = app.add_subcommand("sweep-perf", "test loss, accuracy and perplexity per lambda over seeds");
    add_common(perf, common, true);
    perf->add_flag("--no-train", no_train, "fail instead of training missing models");

    std::optional<std::string> checkpoint;
    auto* thr = app.add_subcommand("thresholds", "penalty thresholds and bounds for a trained model");
    add_common(thr, common, true);
    thr->add_option("--checkpoint", checkpoint, "checkpoint file (default: the cached model for --lambda/--seed)");
    thr->add_option("--lambda", lambda, "locality dial of the cached model");
    thr->add_option("--seed", seed, "seed of the cached model");

    std::optional<double> delta;
    double penalty_scale = 1.0;
    auto* bound = app.add_subcommand("bound-check", "synthetic validation of the localization bounds");
    add_common(bound, common, false);
    bound->add_option("--delta", delta, "override the planted margin");
    bound->add_option("--penalty-scale", penalty_scale, "multiple of the threshold used as penalty")
        ->check(CLI::NonNegativeNumber);

    std::string corpus_dir;
    std::size_t corpus_tokens = 200000;
    std::uint64_t corpus_seed = 7;
    auto* make = app.add_subcommand("make-corpus", "write the synthetic article corpus as text files");
    make->add_option("--out", corpus_dir, "directory for train.txt, valid.txt, test.txt")->required();
    make->add_option("--tokens", corpus_tokens, "approximate training tokens (valid and test get a tenth)")
        ->check(CLI::PositiveNumber);
    make->add_option("--seed", corpus_seed, "generator seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }
    set_log_level(quiet ? LogLevel::quiet : verbose ? LogLevel::info : LogLevel::warn);

    try {
        if (*train) return cmd_train(common, lambda, seed);
        if (*interp) return cmd_sweep_interp(common, no_train);
        if (*perf) return cmd_sweep_perf(common, no_train);
        if (*thr) return cmd_thresholds(common, checkpoint, lambda, seed);
        if (*bound) return cmd_bound_check(common, delta, penalty_scale);
        if (*make) return cmd_make_corpus(corpus_dir, corpus_tokens, corpus_seed);
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailed;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailed;
    }
    return kUsage;
}
