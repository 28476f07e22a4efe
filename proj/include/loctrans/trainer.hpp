#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "loctrans/corpus.hpp"
#include "loctrans/locality.hpp"
#include "loctrans/metrics.hpp"
#include "loctrans/model.hpp"

namespace loctrans {

// How the group penalty enters the update. subgradient: its gradient joins the
// task gradient inside Adam, whose per-coordinate normalization makes the
// shrink rate nearly independent of the penalty's size. proximal: Adam sees
// the task loss only, then each group is soft-thresholded by
// penalty_step * alpha, so the shrink rate scales with lambda (offset target
// only).
enum class PenaltyUpdate { subgradient, proximal };

std::string to_string(PenaltyUpdate u);
PenaltyUpdate penalty_update_from_string(const std::string& name);

struct TrainConfig {
    double lr = 3e-4;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 30;
    std::size_t patience = 7;
    // Patience only counts once validation perplexity has dropped below the gate.
    double ppl_gate = 10.0;
    std::uint64_t seed = 1;
    // Epochs trained unpenalized before anchors are selected and the base
    // penalties calibrated.
    std::size_t warmup_epochs = 1;
    double clip_norm = 1.0;
    std::size_t anchor_k_min = 3;
    std::size_t anchor_k_max = 5;
    std::size_t calibration_sequences = 16;
    // Linear penalty ramp over this many epochs after warmup; 0 = constant.
    std::size_t ramp_epochs = 0;
    // Learning-rate multiplier for the offset tables, which the group penalty
    // must shrink from O(sqrt(margin)) toward zero at Adam's bounded step size.
    double table_lr_scale = 1.0;
    PenaltyUpdate penalty_update = PenaltyUpdate::subgradient;
    double penalty_step = 1.0; // proximal update only
    // Caps optimizer steps per epoch; 0 = every batch.
    std::size_t max_steps_per_epoch = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// How base penalties are derived from the estimated constants. The measured
// margin and correlation of language-model embeddings usually violate the
// threshold's preconditions (delta <= 0, rho near 1), so both are clamped to
// the edge of the regime where the guarantees are stated.
struct CalibrationPolicy {
    double rho_cap = 0.99;
    // delta is raised to at least tau * ln(2N), the entropy bound's precondition.
    bool clamp_delta = true;
};

struct Calibration {
    ConstantsEstimate measured;
    ThresholdInputs used; // after clamping; block_size = largest block
    bool delta_clamped = false;
    bool rho_clamped = false;
    std::vector<double> block_thresholds;
    PenaltyTable base;

    nlohmann::json to_json() const;
    // Inverse of to_json(); base is not part of the serialized form.
    static Calibration from_json(const nlohmann::json& j);
};

// Estimates constants from the input embeddings of the first n_sequences
// training windows grouped by block (anchor rows from the partition), with
// L_loss the largest per-position gradient norm of the batch-mean task loss
// with respect to those embeddings, and fills base penalties with the
// per-block thresholds (identical across heads).
Calibration calibrate_penalties(const ModelParams& params, const ModelConfig& config,
                                const BlockPartition& partition,
                                std::span<const std::int32_t> train_tokens, std::size_t n_sequences,
                                const CalibrationPolicy& policy = {});

// Anchors from the attention that the first n_sequences training windows
// receive, every layer and head.
BlockPartition select_model_anchors(const ModelParams& params, const ModelConfig& config,
                                    const BlockPartition& partition,
                                    std::span<const std::int32_t> train_tokens,
                                    std::size_t n_sequences, std::size_t k_min, std::size_t k_max);

struct EpochRecord {
    std::size_t epoch = 0; // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_ppl = 0.0;
    double penalty_value = 0.0; // group penalty at the epoch's effective table
    double lambda = 0.0;
};

void to_json(nlohmann::json& j, const EpochRecord& r);

struct StepRecord {
    std::size_t epoch = 0;
    std::size_t step = 0; // global, 1-based
    double task_loss = 0.0;
    double group_penalty = 0.0;
    double value_decay = 0.0; // beta * ||W_V||^2
    double objective = 0.0;
    double grad_norm = 0.0; // before clipping
    const Batch* batch = nullptr; // valid only during the callback
};

struct TrainHooks {
    std::optional<std::filesystem::path> history_path;    // JSONL, one EpochRecord per line
    std::optional<std::filesystem::path> checkpoint_path; // best (or last good) checkpoint
    // Runs after backward and before the optimizer update, so the parameters
    // are those the step's objective was evaluated at.
    std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
    Checkpoint best;
    std::vector<EpochRecord> history;
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;
    bool early_stopped = false;
    std::optional<Calibration> calibration;
    PenaltyTable effective;
};

// Minimizes task loss + group penalty + beta ||W_V||^2 with Adam. When
// locality.base is empty, base penalties are calibrated after warmup;
// otherwise the given base is used from the first post-warmup epoch. Throws
// DivergenceError (after writing the last good checkpoint when a path is set)
// if a step loss is NaN or exceeds 1e3.
TrainResult train(const ModelConfig& config, ModelParams params, std::span<const std::int32_t> train_tokens,
                  std::span<const std::int32_t> valid_tokens, const BlockPartition& partition,
                  const LocalityConfig& locality, const TrainConfig& cfg, const TrainHooks& hooks = {});

struct SeedRun {
    std::uint64_t seed = 0;
    bool ok = true;
    std::string error;
    double loss = 0.0;
    double accuracy = 0.0;
    double perplexity = 0.0;
    double epochs = 0.0;
};

struct SeedAggregate {
    std::vector<SeedRun> runs;
    MeanStd loss, accuracy, perplexity, epochs; // over successful runs
    bool partial = false;     // some seed aborted
    bool single_seed = false; // std is 0 by convention
};

// Runs every seed (a throwing run is recorded as failed) and aggregates mean
// and sample standard deviation. Throws ParameterError for an empty list.
SeedAggregate run_seeds(std::span<const std::uint64_t> seeds,
                        const std::function<SeedRun(std::uint64_t)>& run_one);

} // namespace loctrans
