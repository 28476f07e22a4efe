#include "loctrans/evaluate.hpp"

#include <algorithm>

#include "loctrans/error.hpp"
#include "loctrans/ops.hpp"

namespace loctrans {

SplitEval evaluate_split(const ModelParams& params, const ModelConfig& config,
                         const BlockPartition& partition, std::span<const std::int32_t> tokens,
                         std::size_t batch_size) {
    const std::size_t n = config.seq_len;
    Batcher batcher(tokens, n, batch_size, 0);
    const std::size_t windows = batcher.windows();
    double loss_sum = 0.0, correct = 0.0;
    std::vector<std::int32_t> ids, targets;
    for (std::size_t w0 = 0; w0 < windows; w0 += batch_size) {
        const std::size_t b = std::min(batch_size, windows - w0);
        ids.clear();
        targets.clear();
        for (std::size_t w = w0; w < w0 + b; ++w) {
            const Batch one = batcher.window(w);
            ids.insert(ids.end(), one.inputs.begin(), one.inputs.end());
            targets.insert(targets.end(), one.targets.begin(), one.targets.end());
        }
        const Tensor logits = forward(params, config, partition, ids, b).logits;
        const double rows = static_cast<double>(b * n);
        loss_sum += ops::cross_entropy(logits, targets).item() * rows;
        correct += accuracy(logits.values(), config.vocab_size, targets) * rows;
    }
    SplitEval e;
    e.tokens = windows * n;
    e.loss = loss_sum / static_cast<double>(e.tokens);
    e.accuracy = correct / static_cast<double>(e.tokens);
    e.perplexity = perplexity(e.loss);
    return e;
}

InterpStats evaluate_interpretability(const ModelParams& params, const ModelConfig& config,
                                      const BlockPartition& partition,
                                      std::span<const std::int32_t> tokens, std::size_t sample_tokens,
                                      std::uint64_t seed) {
    if (sample_tokens == 0) throw ParameterError("sample_tokens must be at least 1");
    const std::size_t n = config.seq_len;
    Batcher batcher(tokens, n, 1, 0);
    const std::size_t want = std::min((sample_tokens + n - 1) / n, batcher.windows());
    const auto order = shuffled_indices(batcher.windows(), seed);
    std::vector<std::int32_t> ids;
    for (std::size_t i = 0; i < want; ++i) {
        const Batch one = batcher.window(order[i]);
        ids.insert(ids.end(), one.inputs.begin(), one.inputs.end());
    }
    const auto result = forward(params, config, partition, ids, want, {.record = true});
    return interpretability_stats(result.records, partition, sample_tokens);
}

} // namespace loctrans
