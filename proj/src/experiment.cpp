#include "loctrans/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

#include "loctrans/error.hpp"
#include "loctrans/log.hpp"

namespace loctrans {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Bumped whenever a change alters what a cached cell would contain.
constexpr int kCacheFormat = 1;

void reject_unknown_keys(const json& given, const json& known, const std::string& where) {
    if (!given.is_object()) throw ParameterError(where + " must be a JSON object");
    for (const auto& [key, value] : given.items()) {
        if (!known.contains(key)) throw ParameterError("unknown key '" + key + "' in " + where);
    }
}

json corpus_to_json(const CorpusSource& c) {
    json j;
    if (c.synthetic) {
        j["synthetic"] = json{{"train_tokens", c.synthetic->train_tokens},
                              {"valid_tokens", c.synthetic->valid_tokens},
                              {"test_tokens", c.synthetic->test_tokens},
                              {"seed", c.synthetic->seed}};
    } else {
        j["train"] = c.train.string();
        j["valid"] = c.valid.string();
        j["test"] = c.test.string();
    }
    j["min_count"] = c.min_count;
    return j;
}

CorpusSource corpus_from_json(const json& j, const fs::path& base_dir) {
    reject_unknown_keys(j, json{{"synthetic", 0}, {"train", 0}, {"valid", 0}, {"test", 0}, {"min_count", 0}},
                        "corpus");
    CorpusSource c;
    c.min_count = j.value("min_count", c.min_count);
    if (j.contains("synthetic")) {
        const json& s = j.at("synthetic");
        const SyntheticCorpusSpec d;
        reject_unknown_keys(s, json{{"train_tokens", 0}, {"valid_tokens", 0}, {"test_tokens", 0}, {"seed", 0}},
                            "corpus.synthetic");
        SyntheticCorpusSpec spec;
        spec.train_tokens = s.value("train_tokens", d.train_tokens);
        spec.valid_tokens = s.value("valid_tokens", d.valid_tokens);
        spec.test_tokens = s.value("test_tokens", d.test_tokens);
        spec.seed = s.value("seed", d.seed);
        c.synthetic = spec;
        if (j.contains("train") || j.contains("valid") || j.contains("test")) {
            throw ParameterError("corpus gives both synthetic and file sources");
        }
        return c;
    }
    for (const char* key : {"train", "valid", "test"}) {
        if (!j.contains(key)) throw ParameterError(std::string("corpus needs '") + key + "' (or 'synthetic')");
    }
    auto resolve = [&](const char* key) {
        fs::path p = j.at(key).get<std::string>();
        return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    };
    c.train = resolve("train");
    c.valid = resolve("valid");
    c.test = resolve("test");
    return c;
}

json locality_to_json(const LocalityConfig& l) {
    json j{{"beta", l.beta}, {"tau", l.tau}};
    if (!l.base.alpha.empty()) j["base"] = l.base;
    return j;
}

LocalityConfig locality_from_json(const json& j) {
    reject_unknown_keys(j, json{{"beta", 0}, {"tau", 0}, {"base", 0}}, "locality");
    LocalityConfig l;
    l.beta = j.value("beta", l.beta);
    l.tau = j.value("tau", l.tau);
    if (j.contains("base")) l.base = j.at("base").get<PenaltyTable>();
    return l;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

std::string lambda_tag(double lambda) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", lambda);
    return buf;
}

} // namespace

void ExperimentSpec::validate() const {
    ModelConfig m = model; // the vocabulary size comes from the corpus later
    if (m.vocab_size == 0) m.vocab_size = 2;
    m.validate();
    train.validate();
    auto check_grid = [](const std::vector<double>& grid, const char* name) {
        if (grid.empty()) throw ParameterError(std::string(name) + " is empty");
        for (double l : grid) {
            if (!(l >= 0.0 && l <= 1.0)) {
                throw ParameterError(std::string(name) + " holds " + std::to_string(l) + ", outside [0, 1]");
            }
        }
    };
    check_grid(interp_grid, "interp_grid");
    check_grid(perf_grid, "perf_grid");
    if (seeds.empty()) throw ParameterError("seeds is empty");
    if (sample_tokens == 0) throw ParameterError("sample_tokens must be positive");
    if (interp_samples == 0) throw ParameterError("interp_samples must be positive");
    if (!(locality.beta >= 0.0)) throw ParameterError("beta must be non-negative");
    if (!(locality.tau > 0.0)) throw ParameterError("tau must be positive");
    if (output_dir.empty()) throw ParameterError("output_dir is empty");
    bound_check.data.validate();
}

fs::path ExperimentSpec::effective_cache_dir() const {
    return cache_dir.empty() ? output_dir / "cache" : cache_dir;
}

json spec_to_json(const ExperimentSpec& s) {
    json j;
    j["corpus"] = corpus_to_json(s.corpus);
    j["model"] = s.model;
    j["train"] = s.train;
    j["locality"] = locality_to_json(s.locality);
    j["interp_grid"] = s.interp_grid;
    j["perf_grid"] = s.perf_grid;
    j["seeds"] = s.seeds;
    j["interp_seed"] = s.interp_seed;
    j["sample_tokens"] = s.sample_tokens;
    j["interp_samples"] = s.interp_samples;
    j["output_dir"] = s.output_dir.string();
    if (!s.cache_dir.empty()) j["cache_dir"] = s.cache_dir.string();
    j["bound_check"] = json{{"data", s.bound_check.data}, {"train", s.bound_check.train}};
    return j;
}

ExperimentSpec spec_from_json(const json& j, const fs::path& base_dir) {
    const ExperimentSpec defaults;
    json known = spec_to_json(defaults);
    known["cache_dir"] = "";
    reject_unknown_keys(j, known, "spec");

    ExperimentSpec s;
    try {
        if (j.contains("corpus")) s.corpus = corpus_from_json(j.at("corpus"), base_dir);
        if (j.contains("model")) {
            reject_unknown_keys(j.at("model"), known.at("model"), "model");
            s.model = j.at("model").get<ModelConfig>();
        }
        if (j.contains("train")) {
            reject_unknown_keys(j.at("train"), known.at("train"), "train");
            s.train = j.at("train").get<TrainConfig>();
        }
        if (j.contains("locality")) s.locality = locality_from_json(j.at("locality"));
        s.interp_grid = j.value("interp_grid", s.interp_grid);
        s.perf_grid = j.value("perf_grid", s.perf_grid);
        s.seeds = j.value("seeds", s.seeds);
        s.interp_seed = j.value("interp_seed", s.interp_seed);
        s.sample_tokens = j.value("sample_tokens", s.sample_tokens);
        s.interp_samples = j.value("interp_samples", s.interp_samples);
        if (j.contains("output_dir")) s.output_dir = j.at("output_dir").get<std::string>();
        if (j.contains("cache_dir")) s.cache_dir = j.at("cache_dir").get<std::string>();
        if (j.contains("bound_check")) {
            const json& b = j.at("bound_check");
            reject_unknown_keys(b, known.at("bound_check"), "bound_check");
            if (b.contains("data")) {
                reject_unknown_keys(b.at("data"), known.at("bound_check").at("data"), "bound_check.data");
                s.bound_check.data = b.at("data").get<SyntheticSpec>();
            }
            if (b.contains("train")) {
                reject_unknown_keys(b.at("train"), known.at("bound_check").at("train"), "bound_check.train");
                s.bound_check.train = b.at("train").get<SyntheticTrainConfig>();
            }
        }
    } catch (const json::exception& e) {
        throw ParameterError(std::string("malformed spec: ") + e.what());
    }
    s.validate();
    return s;
}

ExperimentSpec load_spec(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("config file not found: " + path.string());
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ParameterError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return spec_from_json(j, path.parent_path());
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 digest failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 15]);
    }
    return out;
}

LoadedCorpus load_corpus(const CorpusSource& source) {
    LoadedCorpus out;
    if (source.synthetic) {
        const auto text = generate_corpus_text(*source.synthetic);
        std::istringstream train_text(text.train);
        const Vocabulary vocab = build_vocab(train_text, source.min_count);
        out.splits.train = encode(text.train, vocab);
        out.splits.valid = encode(text.valid, vocab);
        out.splits.test = encode(text.test, vocab);
        out.splits.vocab_size = vocab.size();
    } else {
        for (const auto* p : {&source.train, &source.valid, &source.test}) {
            if (!fs::exists(*p)) throw IoError("corpus file not found: " + p->string());
        }
        const Vocabulary vocab = build_vocab(source.train, source.min_count);
        out.splits = encode_splits(source.train, source.valid, source.test, vocab);
    }
    std::string bytes;
    auto append = [&](const std::vector<std::int32_t>& ids) {
        bytes.append(std::to_string(ids.size())).push_back(':');
        bytes.append(reinterpret_cast<const char*>(ids.data()), ids.size() * sizeof(std::int32_t));
    };
    append(out.splits.train);
    append(out.splits.valid);
    append(out.splits.test);
    bytes.append(std::to_string(out.splits.vocab_size));
    out.fingerprint = sha256_hex(bytes);
    return out;
}

void to_json(json& j, const CellResult& r) {
    j = json{{"lambda", r.lambda},
             {"seed", r.seed},
             {"key", r.key},
             {"checkpoint", r.checkpoint.filename().string()},
             {"history", r.history.filename().string()},
             {"test", {{"loss", r.test.loss}, {"accuracy", r.test.accuracy}, {"perplexity", r.test.perplexity},
                       {"tokens", r.test.tokens}}},
             {"valid", {{"loss", r.valid.loss}, {"accuracy", r.valid.accuracy},
                        {"perplexity", r.valid.perplexity}, {"tokens", r.valid.tokens}}},
             {"epochs_run", r.epochs_run},
             {"best_epoch", r.best_epoch},
             {"early_stopped", r.early_stopped},
             {"train_seconds", r.train_seconds}};
}

void from_json(const json& j, CellResult& r) {
    auto split = [](const json& s) {
        return SplitEval{s.at("loss").get<double>(), s.at("accuracy").get<double>(),
                         s.at("perplexity").get<double>(), s.at("tokens").get<std::size_t>()};
    };
    r.lambda = j.at("lambda").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.key = j.at("key").get<std::string>();
    r.checkpoint = j.at("checkpoint").get<std::string>();
    r.history = j.at("history").get<std::string>();
    r.test = split(j.at("test"));
    r.valid = split(j.at("valid"));
    r.epochs_run = j.at("epochs_run").get<std::size_t>();
    r.best_epoch = j.at("best_epoch").get<std::size_t>();
    r.early_stopped = j.at("early_stopped").get<bool>();
    r.train_seconds = j.value("train_seconds", 0.0);
}

std::string cell_key(const ExperimentSpec& spec, const LoadedCorpus& corpus, double lambda,
                     std::uint64_t seed) {
    ModelConfig model = spec.model;
    model.vocab_size = corpus.splits.vocab_size;
    TrainConfig train = spec.train;
    train.seed = seed;
    json j{{"format", kCacheFormat},
           {"corpus", corpus.fingerprint},
           {"model", model},
           {"train", train},
           {"locality", locality_to_json(spec.locality)},
           {"lambda", lambda},
           {"seed", seed}};
    return sha256_hex(j.dump());
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ostringstream suffix;
    suffix << ".tmp." << std::this_thread::get_id();
    const fs::path tmp = path.string() + suffix.str();
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("failed writing " + tmp.string());
    }
    fs::rename(tmp, path);
}

CellRunner::CellRunner(ExperimentSpec spec, LoadedCorpus corpus)
    : spec_(std::move(spec)), corpus_(std::move(corpus)) {
    spec_.validate();
}

ModelConfig CellRunner::model_config() const {
    ModelConfig m = spec_.model;
    m.vocab_size = corpus_.splits.vocab_size;
    return m;
}

std::optional<CellResult> CellRunner::lookup(double lambda, std::uint64_t seed) const {
    const std::string key = cell_key(spec_, corpus_, lambda, seed);
    const fs::path dir = spec_.effective_cache_dir() / key;
    const fs::path result_path = dir / "result.json";
    if (!fs::exists(result_path)) return std::nullopt;
    CellResult r;
    try {
        r = json::parse(read_file(result_path)).get<CellResult>();
    } catch (const json::exception& e) {
        log_warn("ignoring unreadable cache entry " + result_path.string() + ": " + e.what());
        return std::nullopt;
    }
    r.checkpoint = dir / r.checkpoint;
    r.history = dir / r.history;
    if (!fs::exists(r.checkpoint)) return std::nullopt;
    r.cached = true;
    return r;
}

CellResult CellRunner::run(double lambda, std::uint64_t seed) const {
    if (auto hit = lookup(lambda, seed)) return *hit;

    const ModelConfig model = model_config();
    TrainConfig train_cfg = spec_.train;
    train_cfg.seed = seed;
    LocalityConfig locality = spec_.locality;
    locality.lambda_dial = lambda;

    const std::string key = cell_key(spec_, corpus_, lambda, seed);
    const fs::path dir = spec_.effective_cache_dir() / key;
    fs::create_directories(dir);
    std::ostringstream suffix;
    suffix << ".tmp." << std::this_thread::get_id();
    TrainHooks hooks;
    hooks.checkpoint_path = dir / ("model.ckpt" + suffix.str());
    hooks.history_path = dir / ("history.jsonl" + suffix.str());

    log_info("training lambda " + lambda_tag(lambda) + " seed " + std::to_string(seed) + " -> " + key);
    const BlockPartition partition = make_partition(model.seq_len, model.block_window);
    const auto start = std::chrono::steady_clock::now();
    const TrainResult tr = train(model, init_params(model, seed), corpus_.splits.train, corpus_.splits.valid,
                                 partition, locality, train_cfg, hooks);

    CellResult r;
    r.lambda = lambda;
    r.seed = seed;
    r.key = key;
    r.checkpoint = dir / "model.ckpt";
    r.history = dir / "history.jsonl";
    r.test = evaluate_split(tr.best.params, model, tr.best.partition, corpus_.splits.test, train_cfg.batch_size);
    r.valid = evaluate_split(tr.best.params, model, tr.best.partition, corpus_.splits.valid, train_cfg.batch_size);
    r.epochs_run = tr.epochs_run;
    r.best_epoch = tr.best_epoch;
    r.early_stopped = tr.early_stopped;
    r.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    fs::rename(*hooks.checkpoint_path, r.checkpoint);
    fs::rename(*hooks.history_path, r.history);
    write_file_atomic(dir / "result.json", json(r).dump(2) + "\n");
    return r;
}

std::size_t worker_count() {
    if (const char* env = std::getenv("LOCTRANS_THREADS")) {
        char* end = nullptr;
        const long n = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && n >= 1) return static_cast<std::size_t>(n);
        log_warn(std::string("ignoring LOCTRANS_THREADS=") + env + " (expected a positive integer)");
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<std::optional<CellResult>> CellRunner::run_all(std::span<const Cell> cells,
                                                           bool collect_failures) const {
    std::vector<std::optional<CellResult>> results(cells.size());
    std::vector<std::exception_ptr> errors(cells.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            try {
                results[i] = run(cells[i].lambda, cells[i].seed);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n = std::min(worker_count(), cells.size());
    if (n <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (!errors[i]) continue;
        if (!collect_failures) std::rethrow_exception(errors[i]);
        try {
            std::rethrow_exception(errors[i]);
        } catch (const std::exception& e) {
            log_warn("cell lambda " + lambda_tag(cells[i].lambda) + " seed " + std::to_string(cells[i].seed) +
                     " failed: " + e.what());
        }
    }
    return results;
}

MetricsRow interpretability_row(const Checkpoint& ckpt, std::span<const std::int32_t> tokens,
                                const std::string& split, std::size_t sample_tokens, std::size_t samples) {
    if (samples == 0) throw ParameterError("need at least one interpretability sample");
    std::vector<double> entropy, weighted;
    double unweighted = 0.0, cross = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
        const InterpStats st =
            evaluate_interpretability(ckpt.params, ckpt.config, ckpt.partition, tokens, sample_tokens, s);
        entropy.push_back(st.entropy_bits);
        weighted.push_back(st.weighted_fidelity);
        unweighted += st.unweighted_fidelity;
        cross += st.cross_block_mass;
    }
    const MeanStd h = mean_std(entropy), w = mean_std(weighted);
    MetricsRow row;
    row.lambda = ckpt.meta.value("lambda", 0.0);
    row.split = split;
    row.entropy_bits = h.mean;
    row.entropy_std = h.std;
    row.weighted_fidelity = w.mean;
    row.weighted_fidelity_std = w.std;
    row.unweighted_fidelity = unweighted / static_cast<double>(samples);
    row.cross_block_mass = cross / static_cast<double>(samples);
    return row;
}

MetricsRow aggregate_splits(std::span<const MetricsRow> rows) {
    if (rows.empty()) throw ParameterError("no split rows to aggregate");
    std::vector<double> entropy, weighted;
    double unweighted = 0.0, cross = 0.0;
    for (const auto& r : rows) {
        entropy.push_back(r.entropy_bits);
        weighted.push_back(r.weighted_fidelity);
        unweighted += r.unweighted_fidelity;
        cross += r.cross_block_mass;
    }
    const MeanStd h = mean_std(entropy), w = mean_std(weighted);
    MetricsRow agg;
    agg.lambda = rows.front().lambda;
    agg.split = "mean";
    agg.entropy_bits = h.mean;
    agg.entropy_std = h.std;
    agg.weighted_fidelity = w.mean;
    agg.weighted_fidelity_std = w.std;
    agg.unweighted_fidelity = unweighted / static_cast<double>(rows.size());
    agg.cross_block_mass = cross / static_cast<double>(rows.size());
    return agg;
}

MissingCellsError::MissingCellsError(std::vector<double> lambdas)
    : Error([&] {
          std::string msg = "no trained model for lambda";
          for (double l : lambdas) msg += " " + lambda_tag(l);
          return msg + " (rerun with training enabled)";
      }()),
      lambdas_(std::move(lambdas)) {}

namespace {

std::vector<std::optional<CellResult>> resolve_cells(const CellRunner& runner,
                                                     std::span<const CellRunner::Cell> cells,
                                                     bool train_missing, bool collect_failures) {
    if (!train_missing) {
        std::vector<double> missing;
        std::vector<std::optional<CellResult>> out;
        for (const auto& c : cells) {
            out.push_back(runner.lookup(c.lambda, c.seed));
            if (!out.back() && std::find(missing.begin(), missing.end(), c.lambda) == missing.end()) {
                missing.push_back(c.lambda);
            }
        }
        if (!missing.empty()) throw MissingCellsError(missing);
        return out;
    }
    return runner.run_all(cells, collect_failures);
}

} // namespace

InterpSweep sweep_interpretability(const CellRunner& runner, bool train_missing) {
    const auto& spec = runner.spec();
    std::vector<CellRunner::Cell> cells;
    for (double l : spec.interp_grid) cells.push_back({l, spec.interp_seed});
    const auto results = resolve_cells(runner, cells, train_missing, false);

    const auto& splits = runner.corpus().splits;
    const std::pair<const char*, const std::vector<std::int32_t>*> named_splits[] = {
        {"train", &splits.train}, {"valid", &splits.valid}, {"test", &splits.test}};
    InterpSweep sweep;
    for (const auto& r : results) {
        const Checkpoint ckpt = load_checkpoint(r->checkpoint);
        std::vector<MetricsRow> rows;
        for (const auto& [name, tokens] : named_splits) {
            rows.push_back(interpretability_row(ckpt, *tokens, name, spec.sample_tokens, spec.interp_samples));
            rows.back().lambda = r->lambda;
        }
        sweep.aggregate.push_back(aggregate_splits(rows));
        sweep.rows.insert(sweep.rows.end(), rows.begin(), rows.end());
    }
    return sweep;
}

PerfSweep sweep_performance(const CellRunner& runner, bool train_missing) {
    const auto& spec = runner.spec();
    std::vector<CellRunner::Cell> cells;
    for (double l : spec.perf_grid) {
        for (std::uint64_t s : spec.seeds) cells.push_back({l, s});
    }
    const auto results = resolve_cells(runner, cells, train_missing, true);

    PerfSweep sweep;
    std::size_t i = 0;
    for (double l : spec.perf_grid) {
        const std::size_t first = i;
        const SeedAggregate agg = run_seeds(spec.seeds, [&](std::uint64_t seed) {
            const auto& r = results[i++];
            if (!r) throw DivergenceError("cell lambda " + lambda_tag(l) + " seed " + std::to_string(seed) + " failed");
            return SeedRun{seed,
                           true,
                           "",
                           r->test.loss,
                           r->test.accuracy,
                           r->test.perplexity,
                           static_cast<double>(r->best_epoch)};
        });
        i = first + spec.seeds.size();
        PerfRow row;
        row.lambda = l;
        row.loss = agg.loss.mean;
        row.loss_std = agg.loss.std;
        row.accuracy = agg.accuracy.mean;
        row.accuracy_std = agg.accuracy.std;
        row.perplexity = std::exp(agg.loss.mean);
        row.perplexity_std = agg.perplexity.std;
        row.epochs = agg.epochs.mean;
        sweep.rows.push_back(row);
        sweep.detail.push_back(agg);
    }
    return sweep;
}

json ThresholdReport::to_json() const {
    json j;
    j["lambda"] = lambda;
    j["constants_source"] = recomputed ? "checkpoint" : "post-warmup calibration";
    j["calibration"] = calibration.to_json();
    j["effective_penalties"] = effective;
    j["status"] = status;
    j["heads"] = effective.heads;
    j["blocks"] = effective.blocks;
    j["below_threshold"] = below;
    j["all_at_or_above"] = below == 0;
    j["anchor_count"] = anchor_count;
    j["entropy_bound"] = entropy_bound ? json(*entropy_bound) : json(nullptr);
    j["entropy_bound_applicable"] = entropy_bound.has_value();
    j["fidelity_bound"] = fidelity_bound;
    return j;
}

ThresholdReport threshold_report(const Checkpoint& ckpt, std::span<const std::int32_t> train_tokens,
                                 std::size_t calibration_sequences) {
    if (ckpt.partition.count() < 2) {
        throw DomainError("threshold report needs at least two blocks, the partition has " +
                          std::to_string(ckpt.partition.count()));
    }
    ThresholdReport rep;
    rep.lambda = ckpt.meta.value("lambda", 0.0);
    if (ckpt.meta.contains("calibration")) {
        rep.calibration = Calibration::from_json(ckpt.meta.at("calibration"));
    } else {
        rep.calibration =
            calibrate_penalties(ckpt.params, ckpt.config, ckpt.partition, train_tokens, calibration_sequences);
        rep.recomputed = true;
    }
    const std::size_t heads = ckpt.config.n_layers * ckpt.config.n_heads;
    const std::size_t blocks = ckpt.partition.count();
    rep.effective = ckpt.meta.contains("effective_penalties") ? ckpt.meta.at("effective_penalties").get<PenaltyTable>()
                                                              : PenaltyTable(heads, blocks);
    if (rep.effective.heads != heads || rep.effective.blocks != blocks ||
        rep.calibration.block_thresholds.size() != blocks) {
        throw ShapeError("checkpoint penalties do not match its heads and blocks");
    }
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t b = 0; b < blocks; ++b) {
            const double a = rep.effective.at(h, b);
            const double t = rep.calibration.block_thresholds[b];
            const char* s = std::abs(a - t) <= 1e-9 * t ? "at" : (a > t ? "above" : "below");
            if (s[0] == 'b') ++rep.below;
            rep.status.emplace_back(s);
        }
    }
    for (const auto& blk : ckpt.partition.blocks) rep.anchor_count = std::max(rep.anchor_count, blk.anchors.size());
    const double delta = rep.calibration.used.delta;
    const double tau = rep.calibration.used.tau;
    rep.entropy_bound = entropy_bound(std::max<std::size_t>(1, rep.anchor_count), ckpt.config.seq_len, delta, tau);
    rep.fidelity_bound = fidelity_bound(ckpt.config.seq_len, delta, tau);
    return rep;
}

std::string format_metrics_csv(std::span<const MetricsRow> rows) {
    std::ostringstream out;
    write_metrics_csv(out, rows);
    return out.str();
}

std::string format_perf_csv(std::span<const PerfRow> rows) {
    std::ostringstream out;
    write_perf_csv(out, rows);
    return out.str();
}

} // namespace loctrans
