#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "loctrans/corpus.hpp"
#include "loctrans/error.hpp"
#include "loctrans/evaluate.hpp"
#include "loctrans/locality.hpp"
#include "loctrans/metrics.hpp"
#include "loctrans/model.hpp"
#include "loctrans/trainer.hpp"

namespace loctrans {

// Either three whitespace-tokenized text files or the built-in generator.
struct CorpusSource {
    std::filesystem::path train, valid, test;
    std::optional<SyntheticCorpusSpec> synthetic;
    std::size_t min_count = 1;
};

struct BoundCheckSpec {
    SyntheticSpec data;
    SyntheticTrainConfig train;
};

struct ExperimentSpec {
    CorpusSource corpus;
    ModelConfig model; // vocab_size is filled from the corpus
    TrainConfig train;
    LocalityConfig locality; // template; lambda_dial is set per cell
    std::vector<double> interp_grid{1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0};
    std::vector<double> perf_grid{1.0, 0.8, 0.6, 0.4, 0.0};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    // Seed of the model each interpretability row is measured on.
    std::uint64_t interp_seed = 1;
    std::size_t sample_tokens = 200;
    // Independent token samples per split; their spread is the split row's std.
    std::size_t interp_samples = 3;
    std::filesystem::path output_dir = "runs";
    std::filesystem::path cache_dir; // empty = output_dir / "cache"
    BoundCheckSpec bound_check;

    // Throws ParameterError for grids outside [0, 1], empty seed lists and
    // invalid sections.
    void validate() const;
    std::filesystem::path effective_cache_dir() const;
};

// Reads a JSON spec. Relative corpus paths resolve against the file's
// directory; output and cache directories against the working directory. Unknown keys are rejected so that typos do not silently fall back
// to defaults. Throws IoError or ParameterError.
ExperimentSpec load_spec(const std::filesystem::path& path);
ExperimentSpec spec_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json spec_to_json(const ExperimentSpec& spec);

struct LoadedCorpus {
    CorpusSplits splits;
    std::string fingerprint; // hex SHA-256 of the encoded splits
};

// Throws IoError naming the first missing file.
LoadedCorpus load_corpus(const CorpusSource& source);

std::string sha256_hex(std::string_view bytes);

// One trained model of a sweep: (lambda, seed) under a fixed spec.
struct CellResult {
    double lambda = 0.0;
    std::uint64_t seed = 0;
    std::string key; // content hash naming the cache entry
    std::filesystem::path checkpoint;
    std::filesystem::path history;
    SplitEval test;
    SplitEval valid;
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;
    bool early_stopped = false;
    double train_seconds = 0.0; // wall time of the original training run
    bool cached = false;
};

void to_json(nlohmann::json& j, const CellResult& r);
void from_json(const nlohmann::json& j, CellResult& r);

// Everything that determines a cell's trained model: corpus fingerprint,
// model, training and locality configuration, lambda and seed.
std::string cell_key(const ExperimentSpec& spec, const LoadedCorpus& corpus, double lambda,
                     std::uint64_t seed);

class CellRunner {
public:
    CellRunner(ExperimentSpec spec, LoadedCorpus corpus);

    const ExperimentSpec& spec() const { return spec_; }
    const LoadedCorpus& corpus() const { return corpus_; }
    ModelConfig model_config() const;

    // Cached result, if the cell has been trained.
    std::optional<CellResult> lookup(double lambda, std::uint64_t seed) const;
    // Trains on a cache miss. Files are written to temporaries and renamed, and
    // result.json is written last, so a cell is either complete or absent.
    CellResult run(double lambda, std::uint64_t seed) const;

    struct Cell {
        double lambda;
        std::uint64_t seed;
    };
    // Runs cells on a pool of worker_count() threads. Results follow the
    // input order. A failed cell rethrows after the pool drains unless
    // collect_failures is set, in which case it is returned as nullopt.
    std::vector<std::optional<CellResult>> run_all(std::span<const Cell> cells,
                                                   bool collect_failures = false) const;

private:
    ExperimentSpec spec_;
    LoadedCorpus corpus_;
};

// LOCTRANS_THREADS when set (>= 1), otherwise the hardware concurrency.
std::size_t worker_count();

// Interpretability of one trained model on one split: mean and sample std of
// entropy and weighted fidelity over spec.interp_samples independent draws of
// spec.sample_tokens query positions, means of the rest.
MetricsRow interpretability_row(const Checkpoint& ckpt, std::span<const std::int32_t> tokens,
                                const std::string& split, std::size_t sample_tokens,
                                std::size_t samples);

// Mean over split rows, with entropy and fidelity std taken across splits.
MetricsRow aggregate_splits(std::span<const MetricsRow> rows);

struct InterpSweep {
    std::vector<MetricsRow> rows;      // per (lambda, split), grid order then train/valid/test
    std::vector<MetricsRow> aggregate; // per lambda, split "mean"
};

struct PerfSweep {
    std::vector<PerfRow> rows;
    std::vector<SeedAggregate> detail; // parallel to rows
};

class MissingCellsError : public Error {
public:
    explicit MissingCellsError(std::vector<double> lambdas);
    const std::vector<double>& lambdas() const { return lambdas_; }

private:
    std::vector<double> lambdas_;
};

// With train_missing = false, throws MissingCellsError listing every lambda
// without a cached model.
InterpSweep sweep_interpretability(const CellRunner& runner, bool train_missing = true);

// perplexity = exp(mean loss) so the loss/perplexity pairing holds per row;
// perplexity_std is the spread of the per-seed perplexities. epochs is the
// mean best epoch.
PerfSweep sweep_performance(const CellRunner& runner, bool train_missing = true);

struct ThresholdReport {
    double lambda = 0.0;
    Calibration calibration; // stored post-warmup calibration, or recomputed
    bool recomputed = false;
    PenaltyTable effective;
    // Per (head, block): "above", "at" or "below" the block threshold.
    std::vector<std::string> status;
    std::size_t below = 0;
    std::optional<double> entropy_bound;
    double fidelity_bound = 0.0;
    std::size_t anchor_count = 0; // largest anchor set

    nlohmann::json to_json() const;
};

// Uses the calibration stored in the checkpoint when there is one (the
// constants the run's penalties were derived from), otherwise estimates the
// constants from the checkpoint's embeddings of the first
// calibration_sequences training windows. Throws DomainError for a
// single-block partition.
ThresholdReport threshold_report(const Checkpoint& ckpt, std::span<const std::int32_t> train_tokens,
                                 std::size_t calibration_sequences);

// Writes bytes to path through a temporary in the same directory and a rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string format_metrics_csv(std::span<const MetricsRow> rows);
std::string format_perf_csv(std::span<const PerfRow> rows);

} // namespace loctrans
