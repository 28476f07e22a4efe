#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace loctrans {

// Attention maps of one sequence: for each (layer, head) an [N, N] row-major
// matrix of alpha_{t->j}. Rows are probability vectors over j <= t.
struct AttentionRecord {
    std::size_t seq_len = 0;
    std::size_t layers = 0;
    std::size_t heads = 0;
    std::vector<std::vector<double>> maps; // index layer * heads + head

    AttentionRecord() = default;
    AttentionRecord(std::size_t n, std::size_t n_layers, std::size_t n_heads)
        : seq_len(n), layers(n_layers), heads(n_heads),
          maps(n_layers * n_heads, std::vector<double>(n * n, 0.0)) {}

    std::span<const double> map(std::size_t layer, std::size_t head) const {
        return maps[layer * heads + head];
    }
    std::span<double> map(std::size_t layer, std::size_t head) {
        return maps[layer * heads + head];
    }
    double at(std::size_t layer, std::size_t head, std::size_t t, std::size_t j) const {
        return maps[layer * heads + head][t * seq_len + j];
    }
};

} // namespace loctrans
