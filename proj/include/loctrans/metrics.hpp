#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "loctrans/attention.hpp"
#include "loctrans/corpus.hpp"

namespace loctrans {

// Shannon entropy in bits; 0 log 0 = 0. Throws InputError unless the row sums
// to 1 within 1e-6 with non-negative entries.
double attention_entropy(std::span<const double> row);

// Per block, w_j = sum_{t in X_i} alpha_{t->j} / |X_i| over anchors j,
// averaged over every (layer, head) map and record, then renormalized within
// the block. Zero-total blocks get uniform weights.
std::vector<std::vector<double>> anchor_weights(std::span<const AttentionRecord> records,
                                                const BlockPartition& partition);
std::vector<std::vector<double>> anchor_weights(const AttentionRecord& record,
                                                const BlockPartition& partition);

// T_t = anchors of block(t).
std::vector<std::vector<std::size_t>> anchor_targets(const BlockPartition& partition);
// Importance weight of each position: its anchor weight, or 0 off-anchor.
std::vector<double> position_weights(const BlockPartition& partition);

struct Fidelity {
    double unweighted = 0.0; // E_t[sum_{j in T_t} alpha_{t->j}]
    double weighted = 0.0;   // sum over blocks of E_{t in X_i}[sum_{j in T_t} w_j alpha_{t->j}]
    std::size_t queries = 0;
    std::size_t skipped = 0; // queries with empty T_t
};

// attn is one [N, N] map. Weighted is only computed when weights are given.
Fidelity pointer_fidelity(std::span<const double> attn, const BlockPartition& partition,
                          const std::vector<std::vector<std::size_t>>& targets,
                          std::optional<std::span<const double>> weights = std::nullopt);

// Mean over queries of the attention mass outside the query's own block.
double cross_block_mass(std::span<const double> attn, const BlockPartition& partition);

double perplexity(double mean_loss);
// Fraction of rows whose argmax (lowest index on ties) equals the target.
double accuracy(std::span<const double> logits, std::size_t vocab,
                std::span<const std::int32_t> targets);

// Aggregate over the first `max_queries` query positions of the records taken
// in order (0 = all). Entropy skips position 0 of each sequence.
struct InterpStats {
    double entropy_bits = 0.0;
    double entropy_ceiling_bits = 0.0; // mean log2(t + 1) over the same queries
    double weighted_fidelity = 0.0;
    double unweighted_fidelity = 0.0;
    double cross_block_mass = 0.0;
    std::size_t queries = 0;
};

InterpStats interpretability_stats(std::span<const AttentionRecord> records,
                                   const BlockPartition& partition, std::size_t max_queries = 0);

struct MetricsRow {
    double lambda = 0.0;
    std::string split;
    double entropy_bits = 0.0;
    double entropy_std = 0.0;
    double weighted_fidelity = 0.0;
    double weighted_fidelity_std = 0.0;
    double unweighted_fidelity = 0.0;
    double cross_block_mass = 0.0;
};

struct PerfRow {
    double lambda = 0.0;
    double loss = 0.0;
    double loss_std = 0.0;
    double accuracy = 0.0;
    double accuracy_std = 0.0;
    double perplexity = 0.0;
    double perplexity_std = 0.0;
    double epochs = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "lambda,split,entropy_bits,entropy_std,weighted_fidelity,weighted_fidelity_std,"
    "unweighted_fidelity,cross_block_mass";
inline constexpr const char* kPerfHeader =
    "lambda,loss,loss_std,accuracy,accuracy_std,perplexity,perplexity_std,epochs";

// Numbers are written with %.10g so that parse -> re-emit is the identity.
void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows);
std::vector<MetricsRow> read_metrics_csv(std::istream& in);
void write_perf_csv(std::ostream& out, std::span<const PerfRow> rows);
std::vector<PerfRow> read_perf_csv(std::istream& in);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0; // sample standard deviation, 0 for a single value
};
MeanStd mean_std(std::span<const double> values);

} // namespace loctrans
