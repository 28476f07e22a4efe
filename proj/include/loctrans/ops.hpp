#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "loctrans/tensor.hpp"

// Differentiable primitives. Every op validates shapes, checks that its output
// is finite, and records a backward closure when a tape is active.
namespace loctrans::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// a[m,n] + bias[n], broadcast over rows.
Tensor add_bias(const Tensor& a, const Tensor& bias);
// a[r*N, d] + tile[N, d], tile repeated r times down the rows.
Tensor add_tiled(const Tensor& a, const Tensor& tile);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_squares(const Tensor& a);
// Frobenius norm; the subgradient at an all-zero input is taken as 0.
Tensor frobenius_norm(const Tensor& a);

Tensor gelu(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Row-wise softmax of scores / tau with per-row max subtraction. With
// causal=true, entries above the diagonal of each square [N, N] tile get zero
// probability (scores must then have N columns and a multiple of N rows).
Tensor softmax_rows(const Tensor& scores, double tau, bool causal = false);

// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets);

Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& a, Shape shape);

// Fused causal attention over `batch` independent sequences of length N laid
// out as consecutive row tiles of q, k, v ([batch*N, d]). When probs_out is
// non-null it receives the attention matrices, [batch][N*N] row-major.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                        std::size_t seq_len, double tau,
                        std::vector<std::vector<double>>* probs_out = nullptr);

// Scores are (scale * q k^T + bias) / tau, with bias an [N, N] tensor shared by
// every sequence in the batch; entries above the diagonal are ignored.
struct AttentionOptions {
    double tau = 1.0;
    double scale = 1.0;
    const Tensor* bias = nullptr;
    std::vector<std::vector<double>>* probs_out = nullptr;
};

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                        std::size_t seq_len, const AttentionOptions& opts);

} // namespace loctrans::ops
