#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "loctrans/corpus.hpp"
#include "loctrans/metrics.hpp"
#include "loctrans/model.hpp"

namespace loctrans {

struct SplitEval {
    double loss = 0.0; // mean next-token cross-entropy
    double accuracy = 0.0;
    double perplexity = 0.0;
    std::size_t tokens = 0;
};

// Every window of the split in order, without a tape.
SplitEval evaluate_split(const ModelParams& params, const ModelConfig& config,
                         const BlockPartition& partition, std::span<const std::int32_t> tokens,
                         std::size_t batch_size = 32);

// Records attention on ceil(sample_tokens / N) windows drawn by seed from the
// split and averages entropy, fidelity and cross-block mass over the first
// sample_tokens query positions, every layer and head. Anchors and weights
// come from the partition. Throws ParameterError for sample_tokens = 0.
InterpStats evaluate_interpretability(const ModelParams& params, const ModelConfig& config,
                                      const BlockPartition& partition,
                                      std::span<const std::int32_t> tokens,
                                      std::size_t sample_tokens = 200, std::uint64_t seed = 0);

} // namespace loctrans
