#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "loctrans/attention.hpp"
#include "loctrans/corpus.hpp"
#include "loctrans/tensor.hpp"

namespace loctrans {

// Which per-block query/key structure the locality penalty acts on.
//   projected: rows P_{X_i} W_Q and P_{X_i} W_K, the block positional encoding
//              projected through each head's shared query/key matrices.
//   offset:    per-head position-indexed query/key tables R_Q, R_K [N, r]
//              whose product R_Q R_K^T is added to the attention scores on
//              top of a fixed same-block margin; rows are grouped by block.
enum class PenaltyTarget { projected, offset };

std::string to_string(PenaltyTarget target);
PenaltyTarget penalty_target_from_string(const std::string& name);

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t d_head = 32;
    std::size_t n_heads = 2;
    std::size_t n_layers = 2;
    std::size_t seq_len = 64;
    std::size_t vocab_size = 0;
    double tau = 1.0;
    std::size_t ffn_mult = 4;
    std::size_t block_window = 5;
    bool train_block_embedding = true;
    bool train_intra_sinusoid = false;
    PenaltyTarget penalty_target = PenaltyTarget::offset;
    // offset target only: same-block score margin and table width.
    double block_margin = 6.0;
    std::size_t offset_rank = 16;

    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct LayerParams {
    Tensor ln1_gain, ln1_bias;
    std::vector<Tensor> w_q, w_k, w_v; // per head, [d_model, d_head]
    std::vector<Tensor> r_q, r_k;      // per head, [N, offset_rank]; offset target only
    Tensor w_o;                        // [n_heads * d_head, d_model]
    Tensor ln2_gain, ln2_bias;
    Tensor w_ff1, b_ff1, w_ff2, b_ff2;
};

struct ModelParams {
    Tensor token_embedding; // [vocab, d_model]
    Tensor block_embedding; // [blocks, d_model]
    Tensor intra_sinusoid;  // [window, d_model]
    std::vector<LayerParams> layers;
    Tensor lnf_gain, lnf_bias;
    Tensor w_out; // [d_model, vocab]
    Tensor b_out; // [vocab]

    // Every tensor in declaration order, with a stable name.
    std::vector<std::pair<std::string, Tensor>> named() const;
    // The subset that receives gradient updates.
    std::vector<std::pair<std::string, Tensor>> trainable() const;
    std::size_t count() const;
    ModelParams clone() const;
};

// Closed-form parameter count for a configuration.
std::size_t parameter_count(const ModelConfig& config);

ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// Sinusoid of the offset within a window: row o, column 2c -> sin(o / 10000^(2c/d)),
// column 2c+1 -> cos of the same angle.
Tensor sinusoid_table(std::size_t rows, std::size_t d_model);

// [N, d_model]: block embedding of block(t) plus the sinusoid of t's offset
// within its block.
Tensor block_positional_encoding(const ModelParams& params, const BlockPartition& partition);

// Single-sequence reference attention built from primitive ops:
// softmax(scale * (x W_Q)(x W_K)^T / tau) (x W_V), causal when requested.
struct HeadOutput {
    Tensor values; // [N, d_head]
    Tensor attn;   // [N, N]
};
HeadOutput attention_head(const Tensor& x, const Tensor& w_q, const Tensor& w_k, const Tensor& w_v,
                          double tau, bool causal = true, double scale = 1.0);

// Score offset added to head h of a layer under the offset target:
// R_Q R_K^T + margin * [block(t) == block(j)].
Tensor offset_bias(const LayerParams& layer, std::size_t head, const BlockPartition& partition,
                   double margin);

struct ForwardOptions {
    bool record = false;
    // Overrides config.tau when positive (inference-time temperature).
    double tau = 0.0;
};

struct ForwardResult {
    Tensor logits; // [batch * N, vocab]
    std::vector<AttentionRecord> records;
};

// ids are row-major [batch, N]. Records one tape entry per op when a tape is
// active. Throws IndexError for ids outside the vocabulary.
ForwardResult forward(const ModelParams& params, const ModelConfig& config,
                      const BlockPartition& partition, std::span<const std::int32_t> ids,
                      std::size_t batch, const ForwardOptions& options = {});

// Token embedding plus block positional encoding, [batch * N, d_model]: the
// input embeddings of the residual stream.
Tensor input_embeddings(const ModelParams& params, const ModelConfig& config,
                        const BlockPartition& partition, std::span<const std::int32_t> ids,
                        std::size_t batch);

// forward() starting from precomputed input embeddings.
ForwardResult forward_embedded(const ModelParams& params, const ModelConfig& config,
                               const BlockPartition& partition, const Tensor& x0, std::size_t batch,
                               const ForwardOptions& options = {});

// Input to the first attention sublayer, LN1(token + position), [batch * N, d_model].
Tensor attention_inputs(const ModelParams& params, const ModelConfig& config,
                        const BlockPartition& partition, std::span<const std::int32_t> ids,
                        std::size_t batch);

// Checkpoint: "LTCKPT01", u32 header length, JSON header, then every tensor of
// named() as raw little-endian float64 in order.
struct Checkpoint {
    ModelConfig config;
    ModelParams params;
    BlockPartition partition;
    nlohmann::json meta; // lambda, epoch, seed, metric snapshot, ...
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json partition_to_json(const BlockPartition& p);
BlockPartition partition_from_json(const nlohmann::json& j);

} // namespace loctrans
