#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "loctrans/corpus.hpp"
#include "loctrans/model.hpp"
#include "loctrans/tensor.hpp"

namespace loctrans {

// Non-negative penalty per (head, block). Heads are flattened across layers as
// layer * n_heads + head.
struct PenaltyTable {
    std::size_t heads = 0;
    std::size_t blocks = 0;
    std::vector<double> alpha; // heads * blocks, row-major

    PenaltyTable() = default;
    PenaltyTable(std::size_t heads, std::size_t blocks, double fill = 0.0);

    double at(std::size_t head, std::size_t block) const { return alpha[head * blocks + block]; }
    double& at(std::size_t head, std::size_t block) { return alpha[head * blocks + block]; }
    double max() const;
    double mean() const;
};

void to_json(nlohmann::json& j, const PenaltyTable& t);
void from_json(const nlohmann::json& j, PenaltyTable& t);

struct LocalityConfig {
    double lambda_dial = 0.0;
    PenaltyTable base; // penalties at lambda = 1
    double beta = 1e-4; // value-matrix weight decay
    double tau = 1.0;

    void validate() const;
    PenaltyTable effective() const;
};

// Elementwise lambda * base. Throws ParameterError unless 0 <= lambda <= 1.
PenaltyTable dial_to_penalties(double lambda_dial, const PenaltyTable& base);

// sum_h sum_i alpha(h, i) (||Q_h[X_i]||_F + ||K_h[X_i]||_F), where Q_h[X_i]
// is the row slice of head h's [N, r] query structure belonging to block i.
// Throws StructureError unless the blocks tile rows [0, N) in order, and
// ShapeError when the table does not match the heads and blocks given.
Tensor group_penalty(std::span<const Tensor> queries, std::span<const Tensor> keys,
                     const BlockPartition& rows, const PenaltyTable& alpha);

// The per-head [N, r] query and key structures the penalty acts on, flattened
// as layer * n_heads + head: the offset tables, or the block positional
// encoding projected through W_Q and W_K.
struct PenaltyStructures {
    std::vector<Tensor> queries, keys;
};
PenaltyStructures penalty_structures(const ModelParams& params, const ModelConfig& config,
                                     const BlockPartition& partition);

// group_penalty over penalty_structures(); an all-zero table builds no graph.
Tensor model_group_penalty(const ModelParams& params, const ModelConfig& config,
                           const BlockPartition& partition, const PenaltyTable& alpha);

// Proximal step of the group penalty on the offset tables: each block's rows
// of R_Q and R_K are scaled by max(0, 1 - step * alpha(h, i) / ||rows||_F),
// which zeroes a group exactly once its norm falls below step * alpha.
// Returns the number of groups that are zero afterwards. Throws
// ParameterError for the projected target, whose structures are not
// parameters.
std::size_t proximal_group_shrink(const ModelParams& params, const ModelConfig& config,
                                  const BlockPartition& partition, const PenaltyTable& alpha,
                                  double step);

// sum over layers and heads of ||W_V||_F^2.
Tensor value_decay(const ModelParams& params);

struct ThresholdInputs {
    double L_loss = 0.0;
    double R_X = 0.0;
    double sigma_X = 0.0;
    double rho_max = 0.0;
    double delta = 0.0;
    std::size_t block_size = 1;
    double tau = 1.0;

    // Throws DomainError for rho_max >= 1 and ParameterError for the rest.
    void validate() const;
};

void to_json(nlohmann::json& j, const ThresholdInputs& in);
void from_json(const nlohmann::json& j, ThresholdInputs& in);

// (2 L R sigma sqrt|X_i|) / (tau (1 - rho_max)) * exp(-delta / tau).
double penalty_threshold(const ThresholdInputs& in);

// log2|A| + N exp(-delta/tau) (1 + log2 N) / ln 2, or nullopt when
// exp(delta/tau) < 2N and the bound does not apply.
std::optional<double> entropy_bound(std::size_t anchor_count, std::size_t n, double delta,
                                    double tau);

// max(0, 1 - N exp(-delta/tau)).
double fidelity_bound(std::size_t n, double delta, double tau);

// Largest eigenvalue of the population covariance of the rows of x [n, d], by
// power iteration (100 steps, stop when the Rayleigh quotient moves < 1e-9).
double top_covariance_eigenvalue(const Tensor& x);

struct ConstantsEstimate {
    ThresholdInputs inputs;               // block_size holds the largest block
    std::vector<std::size_t> block_sizes; // |X_i| per block
    bool near_collinear = false;          // some pair of block means has |cos| > 1 - 1e-6
};

// blocks[i] holds the embeddings [n_i, d] of block i; anchors[i] indexes rows
// of blocks[i] (empty = every row). Similarity is the dot product. delta is
// min over queries of (min own-anchor similarity - max other-block anchor
// similarity) and is reported even when not positive. L_loss is the largest
// of probe_grad_norms. rho_max is clamped just below 1.
// Throws DomainError for fewer than two blocks, InputError for an empty block.
ConstantsEstimate estimate_constants(std::span<const Tensor> blocks,
                                     std::span<const std::vector<std::size_t>> anchors,
                                     std::span<const double> probe_grad_norms, double tau);

// Synthetic block-structured embeddings with a planted margin.
struct SyntheticSpec {
    std::size_t p = 4;
    std::size_t block_size = 8;
    std::size_t d = 16;
    double delta = 6.0;   // planted similarity margin in the noiseless case
    double rho_max = 0.0; // exact pairwise cosine of block means
    double noise = 0.05;
    std::size_t anchors_per_block = 0; // 0 = every point
    std::uint64_t seed = 1;

    void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

struct SyntheticData {
    Tensor x; // [p * block_size, d]
    BlockPartition partition; // anchors = points nearest their block mean
    std::vector<Tensor> blocks;
    std::vector<std::vector<std::size_t>> block_anchors; // local row indices
    double planted_delta = 0.0;
};

// Block means m_b = a u_b + c u_p with orthonormal u from Gram-Schmidt on a
// seeded Gaussian matrix, a^2 = delta and c^2 = delta rho / (1 - rho), so every
// pair of means has cosine rho and the noiseless margin is delta. Points are
// mean + noise * N(0, I). Throws ParameterError when d < p (or d <= p when
// rho > 0).
SyntheticData generate_synthetic(const SyntheticSpec& spec);

// Single bidirectional attention layer over fixed embeddings:
//   s_tj = (x_t . x_j + U_t . V_j) / tau,  o_t = sum_j softmax(s_t)_j x_j,
// trained on 0.5 ||o_t - xbar||^2 (xbar is the global mean, which rewards
// spreading attention across blocks) plus the group penalty on U and V.
struct SyntheticTrainConfig {
    std::size_t steps = 1500;
    double lr = 0.01;
    std::size_t rank = 4;
    double init_scale = 0.1;
    double tau = 1.0;
    std::uint64_t seed = 1;
};

void to_json(nlohmann::json& j, const SyntheticTrainConfig& c);
void from_json(const nlohmann::json& j, SyntheticTrainConfig& c);

struct SyntheticRun {
    double alpha = 0.0;
    double cross_block_mass = 0.0;
    double mean_entropy_bits = 0.0;
    double max_entropy_bits = 0.0;
    double unweighted_fidelity = 0.0;
    double final_task_loss = 0.0;
    double final_penalty = 0.0;
    std::vector<double> attn; // [N, N]
};

SyntheticRun train_synthetic_attention(const SyntheticData& data, double alpha,
                                       const SyntheticTrainConfig& cfg);

// Per-example gradient norms ||o_t - xbar|| of the synthetic task at U = V = 0.
std::vector<double> synthetic_probe_grad_norms(const SyntheticData& data, double tau);

struct BoundCheckResult {
    ConstantsEstimate constants;
    double threshold = 0.0; // largest per-block threshold
    double alpha = 0.0;     // effective penalty used for the localized run
    bool preconditions_met = false;
    std::optional<double> entropy_bound;
    double fidelity_bound = 0.0;
    double mass_limit = 0.0; // N exp(-delta/tau) + 0.05
    SyntheticRun localized;
    SyntheticRun control;
    bool entropy_ok = false;
    bool fidelity_ok = false;
    bool mass_ok = false;
    bool control_ok = false; // control mass >= 2 * mass_limit
    bool pass = false;
    std::vector<std::string> violations;

    nlohmann::json to_json() const;
};

// Generates data, estimates constants, trains at alpha = lambda_scale * the
// largest block threshold and at alpha = 0, and checks the three bound
// properties plus the negative control. With lambda_scale = 0 the localized
// run is itself unpenalized.
BoundCheckResult run_bound_check(const SyntheticSpec& spec, const SyntheticTrainConfig& cfg,
                                 double lambda_scale = 1.0);

} // namespace loctrans
