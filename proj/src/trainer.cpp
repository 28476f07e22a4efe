#include "loctrans/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "loctrans/adam.hpp"
#include "loctrans/error.hpp"
#include "loctrans/evaluate.hpp"
#include "loctrans/log.hpp"
#include "loctrans/ops.hpp"

namespace loctrans {

using nlohmann::json;

std::string to_string(PenaltyUpdate u) { return u == PenaltyUpdate::proximal ? "proximal" : "subgradient"; }

PenaltyUpdate penalty_update_from_string(const std::string& name) {
    if (name == "subgradient") return PenaltyUpdate::subgradient;
    if (name == "proximal") return PenaltyUpdate::proximal;
    throw ParameterError("unknown penalty update '" + name + "' (expected subgradient or proximal)");
}

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ParameterError("learning rate must be positive");
    if (batch_size == 0) throw ParameterError("batch size must be at least 1");
    if (max_epochs == 0) throw ParameterError("max epochs must be at least 1");
    if (!(clip_norm > 0.0)) throw ParameterError("clip norm must be positive");
    if (anchor_k_min == 0 || anchor_k_min > anchor_k_max) {
        throw ParameterError("anchor counts need 1 <= k_min <= k_max");
    }
    if (calibration_sequences == 0) throw ParameterError("calibration needs at least one sequence");
    if (!(table_lr_scale > 0.0)) throw ParameterError("table lr scale must be positive");
    if (!(penalty_step >= 0.0)) throw ParameterError("penalty step must be non-negative");
}

void to_json(json& j, const TrainConfig& c) {
    j = json{{"lr", c.lr},
             {"batch_size", c.batch_size},
             {"max_epochs", c.max_epochs},
             {"patience", c.patience},
             {"ppl_gate", c.ppl_gate},
             {"seed", c.seed},
             {"warmup_epochs", c.warmup_epochs},
             {"clip_norm", c.clip_norm},
             {"anchor_k_min", c.anchor_k_min},
             {"anchor_k_max", c.anchor_k_max},
             {"calibration_sequences", c.calibration_sequences},
             {"ramp_epochs", c.ramp_epochs},
             {"table_lr_scale", c.table_lr_scale},
             {"penalty_update", to_string(c.penalty_update)},
             {"penalty_step", c.penalty_step},
             {"max_steps_per_epoch", c.max_steps_per_epoch}};
}

void from_json(const json& j, TrainConfig& c) {
    const TrainConfig d;
    c.lr = j.value("lr", d.lr);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.max_epochs = j.value("max_epochs", d.max_epochs);
    c.patience = j.value("patience", d.patience);
    c.ppl_gate = j.value("ppl_gate", d.ppl_gate);
    c.seed = j.value("seed", d.seed);
    c.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
    c.clip_norm = j.value("clip_norm", d.clip_norm);
    c.anchor_k_min = j.value("anchor_k_min", d.anchor_k_min);
    c.anchor_k_max = j.value("anchor_k_max", d.anchor_k_max);
    c.calibration_sequences = j.value("calibration_sequences", d.calibration_sequences);
    c.ramp_epochs = j.value("ramp_epochs", d.ramp_epochs);
    c.table_lr_scale = j.value("table_lr_scale", d.table_lr_scale);
    c.penalty_update = penalty_update_from_string(j.value("penalty_update", to_string(d.penalty_update)));
    c.penalty_step = j.value("penalty_step", d.penalty_step);
    c.max_steps_per_epoch = j.value("max_steps_per_epoch", d.max_steps_per_epoch);
}

void to_json(json& j, const EpochRecord& r) {
    j = json{{"epoch", r.epoch},     {"train_loss", r.train_loss},       {"val_loss", r.val_loss},
             {"val_ppl", r.val_ppl}, {"penalty_value", r.penalty_value}, {"lambda", r.lambda}};
}

json Calibration::to_json() const {
    json j;
    j["measured"] = measured.inputs;
    j["measured"]["near_collinear"] = measured.near_collinear;
    j["used"] = used;
    j["delta_clamped"] = delta_clamped;
    j["rho_clamped"] = rho_clamped;
    j["block_thresholds"] = block_thresholds;
    return j;
}

Calibration Calibration::from_json(const json& j) {
    Calibration c;
    c.measured.inputs = j.at("measured").get<ThresholdInputs>();
    c.measured.near_collinear = j.at("measured").value("near_collinear", false);
    c.used = j.at("used").get<ThresholdInputs>();
    c.delta_clamped = j.at("delta_clamped").get<bool>();
    c.rho_clamped = j.at("rho_clamped").get<bool>();
    c.block_thresholds = j.at("block_thresholds").get<std::vector<double>>();
    return c;
}

namespace {

std::vector<std::int32_t> leading_windows(std::span<const std::int32_t> tokens, std::size_t n,
                                          std::size_t want, std::size_t* got) {
    Batcher batcher(tokens, n, 1, 0);
    const std::size_t s = std::min(want, batcher.windows());
    std::vector<std::int32_t> ids;
    ids.reserve(s * n);
    for (std::size_t w = 0; w < s; ++w) {
        const Batch one = batcher.window(w);
        ids.insert(ids.end(), one.inputs.begin(), one.inputs.end());
    }
    *got = s;
    return ids;
}

std::vector<std::int32_t> leading_targets(std::span<const std::int32_t> tokens, std::size_t n,
                                          std::size_t s) {
    Batcher batcher(tokens, n, 1, 0);
    std::vector<std::int32_t> t;
    for (std::size_t w = 0; w < s; ++w) {
        const Batch one = batcher.window(w);
        t.insert(t.end(), one.targets.begin(), one.targets.end());
    }
    return t;
}

} // namespace

BlockPartition select_model_anchors(const ModelParams& params, const ModelConfig& config,
                                    const BlockPartition& partition,
                                    std::span<const std::int32_t> train_tokens,
                                    std::size_t n_sequences, std::size_t k_min, std::size_t k_max) {
    std::size_t s = 0;
    const auto ids = leading_windows(train_tokens, config.seq_len, n_sequences, &s);
    const auto result = forward(params, config, partition, ids, s, {.record = true});
    return select_anchors(partition, std::span<const AttentionRecord>(result.records), k_min, k_max);
}

Calibration calibrate_penalties(const ModelParams& params, const ModelConfig& config,
                                const BlockPartition& partition,
                                std::span<const std::int32_t> train_tokens, std::size_t n_sequences,
                                const CalibrationPolicy& policy) {
    const std::size_t n = config.seq_len;
    std::size_t s = 0;
    const auto ids = leading_windows(train_tokens, n, n_sequences, &s);
    const auto targets = leading_targets(train_tokens, n, s);

    // Gradient of the batch-mean task loss with respect to each input embedding.
    Tensor x0 = input_embeddings(params, config, partition, ids, s).clone();
    x0.set_requires_grad(true);
    x0.zero_grad();
    {
        Tape tape;
        TapeScope scope(tape);
        const Tensor loss = ops::cross_entropy(forward_embedded(params, config, partition, x0, s).logits, targets);
        tape.backward(loss);
    }
    std::vector<double> norms(x0.rows(), 0.0);
    const auto g = x0.grad();
    for (std::size_t r = 0; r < x0.rows(); ++r) {
        double ss = 0.0;
        for (std::size_t c = 0; c < x0.cols(); ++c) ss += g[r * x0.cols() + c] * g[r * x0.cols() + c];
        norms[r] = std::sqrt(ss);
    }
    x0.drop_grad();

    std::vector<Tensor> blocks;
    std::vector<std::vector<std::size_t>> anchors;
    for (const auto& b : partition.blocks) {
        Tensor rows({s * b.size(), config.d_model});
        std::vector<std::size_t> anc;
        std::size_t r = 0;
        for (std::size_t q = 0; q < s; ++q) {
            for (std::size_t t = b.begin; t < b.end; ++t, ++r) {
                for (std::size_t c = 0; c < config.d_model; ++c) rows.at(r, c) = x0.at(q * n + t, c);
                if (std::find(b.anchors.begin(), b.anchors.end(), t) != b.anchors.end()) anc.push_back(r);
            }
        }
        blocks.push_back(std::move(rows));
        anchors.push_back(std::move(anc));
    }

    Calibration cal;
    cal.measured = estimate_constants(blocks, anchors, norms, config.tau);
    cal.used = cal.measured.inputs;
    if (cal.used.rho_max > policy.rho_cap) {
        cal.used.rho_max = policy.rho_cap;
        cal.rho_clamped = true;
    }
    const double delta_floor = config.tau * std::log(2.0 * static_cast<double>(n));
    if (policy.clamp_delta && cal.used.delta < delta_floor) {
        cal.used.delta = delta_floor;
        cal.delta_clamped = true;
    }
    if (cal.delta_clamped || cal.rho_clamped) {
        log_info("calibration clamped measured constants (delta " + std::to_string(cal.measured.inputs.delta) +
                 ", rho_max " + std::to_string(cal.measured.inputs.rho_max) + ")");
    }
    const std::size_t heads = config.n_layers * config.n_heads;
    cal.base = PenaltyTable(heads, partition.count());
    for (std::size_t i = 0; i < partition.count(); ++i) {
        ThresholdInputs in = cal.used;
        in.block_size = partition.blocks[i].size();
        const double th = penalty_threshold(in);
        cal.block_thresholds.push_back(th);
        for (std::size_t h = 0; h < heads; ++h) cal.base.at(h, i) = th;
    }
    return cal;
}

namespace {

void write_history(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write history " + path.string());
    for (const auto& r : history) out << json(r).dump() << '\n';
}

PenaltyTable scaled(const PenaltyTable& t, double s) {
    PenaltyTable out = t;
    for (double& a : out.alpha) a *= s;
    return out;
}

} // namespace

TrainResult train(const ModelConfig& config, ModelParams params, std::span<const std::int32_t> train_tokens,
                  std::span<const std::int32_t> valid_tokens, const BlockPartition& partition_in,
                  const LocalityConfig& locality, const TrainConfig& cfg, const TrainHooks& hooks) {
    config.validate();
    cfg.validate();
    locality.validate();
    const std::size_t n = config.seq_len;
    const std::size_t heads = config.n_layers * config.n_heads;

    BlockPartition partition = partition_in;
    PenaltyTable base = locality.base;
    if (!base.alpha.empty() && (base.heads != heads || base.blocks != partition.count())) {
        throw ShapeError("base penalty table does not match the model's heads and blocks");
    }

    TrainResult result;
    const auto trainable = params.trainable();
    const bool proximal = cfg.penalty_update == PenaltyUpdate::proximal;
    if (proximal && config.penalty_target != PenaltyTarget::offset) {
        throw ParameterError("the proximal penalty update needs the offset target");
    }
    AdamState adam;
    std::vector<double> lr_scale(trainable.size(), 1.0);
    for (std::size_t i = 0; i < trainable.size(); ++i) {
        const auto& name = trainable[i].first;
        if (name.ends_with("r_q") || name.ends_with("r_k")) lr_scale[i] = cfg.table_lr_scale;
    }
    Batcher batcher(train_tokens, n, cfg.batch_size, cfg.seed);
    PenaltyTable active(heads, partition.count());

    double best_ppl = std::numeric_limits<double>::infinity();
    ModelParams best = params.clone();
    bool have_best = false, armed = false;
    std::size_t since_best = 0, step = 0;

    auto make_checkpoint = [&](const ModelParams& p, std::size_t epoch) {
        Checkpoint ck{config, p, partition, json::object()};
        ck.meta["lambda"] = locality.lambda_dial;
        ck.meta["seed"] = cfg.seed;
        ck.meta["epoch"] = epoch;
        ck.meta["base_penalties"] = base;
        if (result.calibration) ck.meta["calibration"] = result.calibration->to_json();
        return ck;
    };

    auto prepare_penalties = [&]() {
        partition = select_model_anchors(params, config, partition, train_tokens, cfg.calibration_sequences,
                                         cfg.anchor_k_min, cfg.anchor_k_max);
        if (base.alpha.empty()) {
            result.calibration = calibrate_penalties(params, config, partition, train_tokens,
                                                     cfg.calibration_sequences);
            base = result.calibration->base;
        }
    };

    const std::size_t warmup = std::min(cfg.warmup_epochs, cfg.max_epochs - 1);
    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        if (epoch == warmup) prepare_penalties();
        if (epoch >= warmup) {
            const double ramp = cfg.ramp_epochs == 0
                                    ? 1.0
                                    : std::min(1.0, static_cast<double>(epoch - warmup + 1) /
                                                        static_cast<double>(cfg.ramp_epochs));
            active = scaled(dial_to_penalties(locality.lambda_dial, base), ramp);
        }

        batcher.start_epoch(epoch);
        Batch batch;
        double loss_sum = 0.0;
        std::size_t steps_this_epoch = 0;
        Tape tape;
        while (batcher.next(batch)) {
            if (cfg.max_steps_per_epoch && steps_this_epoch == cfg.max_steps_per_epoch) break;
            tape.clear();
            for (const auto& [name, t] : trainable) t.zero_grad();
            StepRecord rec;
            // The proximal update handles the penalty after the Adam step, so
            // it is evaluated off the tape and only logged.
            if (proximal && active.max() > 0.0) {
                rec.group_penalty = model_group_penalty(params, config, partition, active).item();
            }
            {
                TapeScope scope(tape);
                const auto fr = forward(params, config, partition, batch.inputs, batch.batch);
                const Tensor loss = ops::cross_entropy(fr.logits, batch.targets);
                Tensor objective = loss;
                rec.task_loss = loss.item();
                if (active.max() > 0.0 && !proximal) {
                    const Tensor pen = model_group_penalty(params, config, partition, active);
                    rec.group_penalty = pen.item();
                    objective = ops::add(objective, pen);
                }
                if (locality.beta > 0.0) {
                    const Tensor vd = ops::scale(value_decay(params), locality.beta);
                    rec.value_decay = vd.item();
                    objective = ops::add(objective, vd);
                }
                rec.objective = objective.item() + (proximal ? rec.group_penalty : 0.0);
                if (!std::isfinite(rec.task_loss) || rec.task_loss > 1e3) {
                    if (hooks.checkpoint_path) {
                        save_checkpoint(*hooks.checkpoint_path,
                                        make_checkpoint(have_best ? best : params, result.best_epoch));
                    }
                    if (hooks.history_path) write_history(*hooks.history_path, result.history);
                    throw DivergenceError("training diverged at step " + std::to_string(step + 1) +
                                          " (loss " + std::to_string(rec.task_loss) + ")");
                }
                tape.backward(objective);
            }
            ++step;
            ++steps_this_epoch;
            rec.epoch = epoch + 1;
            rec.step = step;
            rec.batch = &batch;
            rec.grad_norm = grad_norm(trainable);
            if (hooks.on_step) hooks.on_step(rec);
            clip_grad_norm(trainable, cfg.clip_norm);
            adam_step(trainable, adam, cfg.lr, lr_scale);
            if (proximal && active.max() > 0.0) {
                proximal_group_shrink(params, config, partition, active, cfg.penalty_step);
            }
            loss_sum += rec.task_loss;
        }
        for (const auto& [name, t] : trainable) t.drop_grad();

        EpochRecord er;
        er.epoch = epoch + 1;
        er.lambda = locality.lambda_dial;
        er.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(1, steps_this_epoch));
        const SplitEval val = evaluate_split(params, config, partition, valid_tokens, cfg.batch_size);
        er.val_loss = val.loss;
        er.val_ppl = val.perplexity;
        er.penalty_value = model_group_penalty(params, config, partition, active).item();
        result.history.push_back(er);
        result.epochs_run = epoch + 1;
        log_info("epoch " + std::to_string(er.epoch) + " train " + std::to_string(er.train_loss) +
                 " val_ppl " + std::to_string(er.val_ppl) + " penalty " + std::to_string(er.penalty_value));
        if (hooks.history_path) write_history(*hooks.history_path, result.history);

        // Warmup epochs are unpenalized, so they never supply the returned model.
        if (epoch < warmup) continue;
        if (val.perplexity < best_ppl) {
            best_ppl = val.perplexity;
            best = params.clone();
            have_best = true;
            result.best_epoch = epoch + 1;
            since_best = 0;
        } else if (armed) {
            ++since_best;
        }
        if (val.perplexity < cfg.ppl_gate) armed = true;
        if (armed && since_best >= cfg.patience && cfg.patience > 0) {
            result.early_stopped = true;
            break;
        }
    }

    result.effective = active;
    result.best = make_checkpoint(have_best ? best : params, result.best_epoch);
    result.best.meta["epochs_run"] = result.epochs_run;
    result.best.meta["val_ppl"] = best_ppl;
    result.best.meta["effective_penalties"] = active;
    if (hooks.checkpoint_path) save_checkpoint(*hooks.checkpoint_path, result.best);
    return result;
}

SeedAggregate run_seeds(std::span<const std::uint64_t> seeds,
                        const std::function<SeedRun(std::uint64_t)>& run_one) {
    if (seeds.empty()) throw ParameterError("run_seeds needs at least one seed");
    SeedAggregate agg;
    std::vector<double> loss, acc, ppl, epochs;
    for (std::uint64_t seed : seeds) {
        SeedRun r;
        try {
            r = run_one(seed);
            r.seed = seed;
        } catch (const Error& e) {
            r = SeedRun{};
            r.seed = seed;
            r.ok = false;
            r.error = e.what();
            log_warn("seed " + std::to_string(seed) + " aborted: " + r.error);
        }
        if (r.ok) {
            loss.push_back(r.loss);
            acc.push_back(r.accuracy);
            ppl.push_back(r.perplexity);
            epochs.push_back(r.epochs);
        } else {
            agg.partial = true;
        }
        agg.runs.push_back(std::move(r));
    }
    if (!loss.empty()) {
        agg.loss = mean_std(loss);
        agg.accuracy = mean_std(acc);
        agg.perplexity = mean_std(ppl);
        agg.epochs = mean_std(epochs);
    }
    agg.single_seed = loss.size() == 1;
    if (agg.single_seed) log_warn("single successful seed: standard deviations are 0 by convention");
    return agg;
}

} // namespace loctrans
