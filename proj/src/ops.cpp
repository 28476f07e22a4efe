#include "loctrans/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>

#include "loctrans/error.hpp"

namespace loctrans::ops {

namespace {

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (active_tape() == nullptr) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void check_finite(const Tensor& t, const char* op) {
    for (double v : t.values()) {
        if (!std::isfinite(v)) throw DomainError(std::string(op) + " produced a non-finite value");
    }
}

Tensor finish(Tensor out, const char* op) {
    check_finite(out, op);
    return out;
}

// C[m,n] = op(A) * op(B) + beta * C, row-major.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, double beta, double alpha = 1.0) {
    if (m == 0 || n == 0) return;
    if (k == 0) {
        if (beta == 0.0) std::fill(c, c + m * n, 0.0);
        return;
    }
    const auto lda = static_cast<int>(trans_a ? m : k);
    const auto ldb = static_cast<int>(trans_b ? k : n);
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, lda, b, ldb, beta, c,
                static_cast<int>(n));
}

void require_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2) throw ShapeError(std::string(op) + " expects a 2-D tensor, got " + shape_str(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
    }
}

void accumulate(const Tensor& dst, std::span<const double> src, double factor = 1.0) {
    auto g = dst.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * src[i];
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out(Shape{m, n});
    gemm(false, false, m, n, k, a.values().data(), b.values().data(), out.mutable_values().data(), 0.0);
    if (should_record({&a, &b})) {
        out.set_requires_grad(true);
        active_tape()->record([a, b, out, m, n, k]() mutable {
            if (!out.has_grad()) return;
            const double* dc = out.grad().data();
            if (a.requires_grad()) gemm(false, true, m, k, n, dc, b.values().data(), a.mutable_grad().data(), 1.0);
            if (b.requires_grad()) gemm(true, false, k, n, m, a.values().data(), dc, b.mutable_grad().data(), 1.0);
        });
    }
    return finish(std::move(out), "matmul");
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    Tensor out(Shape{c, r});
    auto o = out.mutable_values();
    auto v = a.values();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) o[j * r + i] = v[i * c + j];
    if (should_record({&a})) {
        out.set_requires_grad(true);
        active_tape()->record([a, out, r, c]() mutable {
            if (!out.has_grad()) return;
            auto g = a.mutable_grad();
            auto d = out.grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) g[i * c + j] += d[j * r + i];
        });
    }
    return out;
}

namespace {

template <typename Fwd>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, double sign_b,
                          bool product) {
    require_same(a, b, op);
    Tensor out(a.shape());
    auto o = out.mutable_values();
    auto va = a.values();
    auto vb = b.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(va[i], vb[i]);
    if (should_record({&a, &b})) {
        out.set_requires_grad(true);
        active_tape()->record([a, b, out, sign_b, product]() mutable {
            if (!out.has_grad()) return;
            auto d = out.grad();
            if (product) {
                if (a.requires_grad()) {
                    auto g = a.mutable_grad();
                    auto vb = b.values();
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * vb[i];
                }
                if (b.requires_grad()) {
                    auto g = b.mutable_grad();
                    auto va = a.values();
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * va[i];
                }
                return;
            }
            if (a.requires_grad()) accumulate(a, d);
            if (b.requires_grad()) accumulate(b, d, sign_b);
        });
    }
    return finish(std::move(out), op);
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return elementwise_binary(a, b, "add", [](double x, double y) { return x + y; }, 1.0, false);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return elementwise_binary(a, b, "sub", [](double x, double y) { return x - y; }, -1.0, false);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return elementwise_binary(a, b, "mul", [](double x, double y) { return x * y; }, 1.0, true);
}

Tensor scale(const Tensor& a, double factor) {
    Tensor out(a.shape());
    auto o = out.mutable_values();
    auto v = a.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = factor * v[i];
    if (should_record({&a})) {
        out.set_requires_grad(true);
        active_tape()->record([a, out, factor]() mutable {
            if (out.has_grad()) accumulate(a, out.grad(), factor);
        });
    }
    return finish(std::move(out), "scale");
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
    if (bias.size() != a.cols()) {
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not fit " + shape_str(a.shape()));
    }
    const std::size_t r = a.rows(), c = a.cols();
    Tensor out(a.shape());
    auto o = out.mutable_values();
    auto v = a.values();
    auto bv = bias.values();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) o[i * c + j] = v[i * c + j] + bv[j];
    if (should_record({&a, &bias})) {
        out.set_requires_grad(true);
        active_tape()->record([a, bias, out, r, c]() mutable {
            if (!out.has_grad()) return;
            auto d = out.grad();
            if (a.requires_grad()) accumulate(a, d);
            if (bias.requires_grad()) {
                auto g = bias.mutable_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) g[j] += d[i * c + j];
            }
        });
    }
    return finish(std::move(out), "add_bias");
}

Tensor add_tiled(const Tensor& a, const Tensor& tile) {
    const std::size_t c = a.cols();
    if (tile.cols() != c || tile.rows() == 0 || a.rows() % tile.rows() != 0) {
        throw ShapeError("add_tiled: tile " + shape_str(tile.shape()) + " does not tile " + shape_str(a.shape()));
    }
    const std::size_t n = tile.size();
    Tensor out(a.shape());
    auto o = out.mutable_values();
    auto v = a.values();
    auto tv = tile.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = v[i] + tv[i % n];
    if (should_record({&a, &tile})) {
        out.set_requires_grad(true);
        active_tape()->record([a, tile, out, n]() mutable {
            if (!out.has_grad()) return;
            auto d = out.grad();
            if (a.requires_grad()) accumulate(a, d);
            if (tile.requires_grad()) {
                auto g = tile.mutable_grad();
                for (std::size_t i = 0; i < d.size(); ++i) g[i % n] += d[i];
            }
        });
    }
    return finish(std::move(out), "add_tiled");
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    Tensor out = Tensor::scalar(s);
    if (should_record({&a})) {
        out.set_requires_grad(true);
        active_tape()->record([a, out]() mutable {
            if (!out.has_grad()) return;
            const double d = out.grad()[0];
            for (double& g : a.mutable_grad()) g += d;
        });
    }
    return finish(std::move(out), "sum");
}

Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ShapeError("mean of an empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor sum_squares(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v * v;
    Tensor out = Tensor::scalar(s);
    if (should_record({&a})) {
        out.set_requires_grad(true);
        active_tape()->record([a, out]() mutable {
            if (!out.has_grad()) return;
            const double d = out.grad()[0];
            auto g = a.mutable_grad();
            auto v = a.values();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * d * v[i];
        });
    }
    return finish(std::move(out), "sum_squares");
}

Tensor frobenius_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v * v;
    const double norm = std::sqrt(s);
    Tensor out = Tensor::scalar(norm);
    if (should_record({&a})) {
        out.set_requires_grad(true);
        active_tape()->record([a, out, norm]() mutable {
            if (!out.has_grad() || norm == 0.0) return;
            const double d = out.grad()[0] / norm;
            auto g = a.mutable_grad();
            auto v = a.values();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += d * v[i];
        });
    }
    return finish(std::move(out), "frobenius_norm");
}

Tensor gelu(const Tensor& a) {
    constexpr double kAlpha = 0.044715;
    const double c = std::sqrt(2.0 / std::numbers::pi);
    Tensor out(a.shape());
    auto o = out.mutable_values();
    auto v = a.values();
    for (std::size_t i = 0; i < o.size(); ++i) {
        const double x = v[i];
        o[i] = 0.5 * x * (1.0 + std::tanh(c * (x + kAlpha * x * x * x)));
    }
    if (should_record({&a})) {
        out.set_requires_grad(true);
        active_tape()->record([a, out, c]() mutable {
            if (!out.has_grad()) return;
            auto d = out.grad();
            auto g = a.mutable_grad();
            auto v = a.values();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double x = v[i];
                const double t = std::tanh(c * (x + kAlpha * x * x * x));
                const double dt = (1.0 - t * t) * c * (1.0 + 3.0 * kAlpha * x * x);
                g[i] += d[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
            }
        });
    }
    return finish(std::move(out), "gelu");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t r = x.rows(), c = x.cols();
    if (gamma.size() != c || beta.size() != c) {
        throw ShapeError("layer_norm: gain/bias do not match width of " + shape_str(x.shape()));
    }
    Tensor out(x.shape());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(r);
    auto o = out.mutable_values();
    auto v = x.values();
    auto gv = gamma.values();
    auto bv = beta.values();
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = v.data() + i * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(c);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat[i * c + j] = (row[j] - mu) * inv_std[i];
            o[i * c + j] = gv[j] * xhat[i * c + j] + bv[j];
        }
    }
    if (should_record({&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        active_tape()->record([x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), r,
                               c]() mutable {
            if (!out.has_grad()) return;
            auto d = out.grad();
            auto gv = gamma.values();
            if (gamma.requires_grad()) {
                auto g = gamma.mutable_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) g[j] += d[i * c + j] * xhat[i * c + j];
            }
            if (beta.requires_grad()) {
                auto g = beta.mutable_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) g[j] += d[i * c + j];
            }
            if (x.requires_grad()) {
                auto g = x.mutable_grad();
                const double inv_c = 1.0 / static_cast<double>(c);
                for (std::size_t i = 0; i < r; ++i) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = d[i * c + j] * gv[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[i * c + j];
                    }
                    mean_dxhat *= inv_c;
                    mean_dxhat_xhat *= inv_c;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = d[i * c + j] * gv[j];
                        g[i * c + j] += inv_std[i] * (dxh - mean_dxhat - xhat[i * c + j] * mean_dxhat_xhat);
                    }
                }
            }
        });
    }
    return finish(std::move(out), "layer_norm");
}

namespace {

void check_tau(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw ParameterError("temperature must be positive and finite, got " + std::to_string(tau));
    }
}

// Softmax of one row of raw scores divided by tau over the first `limit` entries;
// the remainder gets probability zero.
void softmax_row(const double* scores, double* probs, std::size_t width, std::size_t limit, double tau) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < limit; ++j) mx = std::max(mx, scores[j] / tau);
    double z = 0.0;
    for (std::size_t j = 0; j < limit; ++j) {
        probs[j] = std::exp(scores[j] / tau - mx);
        z += probs[j];
    }
    for (std::size_t j = 0; j < limit; ++j) probs[j] /= z;
    for (std::size_t j = limit; j < width; ++j) probs[j] = 0.0;
}

// d(softmax(s/tau))^T applied to dp, written into ds (accumulated).
void softmax_row_backward(const double* probs, const double* dp, double* ds, std::size_t limit, double tau) {
    double dot = 0.0;
    for (std::size_t j = 0; j < limit; ++j) dot += probs[j] * dp[j];
    for (std::size_t j = 0; j < limit; ++j) ds[j] += probs[j] * (dp[j] - dot) / tau;
}

} // namespace

Tensor softmax_rows(const Tensor& scores, double tau, bool causal) {
    check_tau(tau);
    const std::size_t r = scores.rows(), c = scores.cols();
    if (causal && (c == 0 || r % c != 0)) {
        throw ShapeError("softmax_rows: causal mask needs square tiles, got " + shape_str(scores.shape()));
    }
    Tensor out(scores.shape());
    auto o = out.mutable_values();
    auto s = scores.values();
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t limit = causal ? (i % c) + 1 : c;
        softmax_row(s.data() + i * c, o.data() + i * c, c, limit, tau);
    }
    if (should_record({&scores})) {
        out.set_requires_grad(true);
        active_tape()->record([scores, out, r, c, tau, causal]() mutable {
            if (!out.has_grad()) return;
            auto p = out.values();
            auto d = out.grad();
            auto g = scores.mutable_grad();
            for (std::size_t i = 0; i < r; ++i) {
                const std::size_t limit = causal ? (i % c) + 1 : c;
                softmax_row_backward(p.data() + i * c, d.data() + i * c, g.data() + i * c, limit, tau);
            }
        });
    }
    return finish(std::move(out), "softmax_rows");
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets) {
    const std::size_t m = logits.rows(), v = logits.cols();
    if (targets.size() != m) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
    }
    if (m == 0) throw ShapeError("cross_entropy over zero rows");
    for (auto t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= v) {
            throw IndexError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(v));
        }
    }
    std::vector<double> probs(logits.size());
    auto lv = logits.values();
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        softmax_row(lv.data() + i * v, probs.data() + i * v, v, v, 1.0);
        const double mx = *std::max_element(lv.begin() + static_cast<std::ptrdiff_t>(i * v),
                                            lv.begin() + static_cast<std::ptrdiff_t>((i + 1) * v));
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(lv[i * v + j] - mx);
        total += (mx + std::log(z)) - lv[i * v + static_cast<std::size_t>(targets[i])];
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(m));
    if (should_record({&logits})) {
        out.set_requires_grad(true);
        std::vector<std::int32_t> tgt(targets.begin(), targets.end());
        active_tape()->record([logits, out, probs = std::move(probs), tgt = std::move(tgt), m, v]() mutable {
            if (!out.has_grad()) return;
            const double d = out.grad()[0] / static_cast<double>(m);
            auto g = logits.mutable_grad();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < v; ++j) g[i * v + j] += d * probs[i * v + j];
                g[i * v + static_cast<std::size_t>(tgt[i])] -= d;
            }
        });
    }
    return finish(std::move(out), "cross_entropy");
}

Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids) {
    require_2d(table, "gather_rows");
    const std::size_t vocab = table.shape()[0], c = table.shape()[1];
    Tensor out(Shape{ids.size(), c});
    auto o = out.mutable_values();
    auto tv = table.values();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw IndexError("token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                             std::to_string(vocab));
        }
        std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[i]) * c), c,
                    o.begin() + static_cast<std::ptrdiff_t>(i * c));
    }
    if (should_record({&table})) {
        out.set_requires_grad(true);
        std::vector<std::int32_t> idx(ids.begin(), ids.end());
        active_tape()->record([table, out, idx = std::move(idx), c]() mutable {
            if (!out.has_grad()) return;
            auto d = out.grad();
            auto g = table.mutable_grad();
            for (std::size_t i = 0; i < idx.size(); ++i) {
                double* row = g.data() + static_cast<std::size_t>(idx[i]) * c;
                for (std::size_t j = 0; j < c; ++j) row[j] += d[i * c + j];
            }
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    const std::size_t c = a.cols();
    if (begin > end || end > a.rows()) {
        throw ShapeError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                         shape_str(a.shape()));
    }
    Tensor out(Shape{end - begin, c});
    auto v = a.values();
    std::copy(v.begin() + static_cast<std::ptrdiff_t>(begin * c), v.begin() + static_cast<std::ptrdiff_t>(end * c),
              out.mutable_values().begin());
    if (should_record({&a})) {
        out.set_requires_grad(true);
        active_tape()->record([a, out, begin, c]() mutable {
            if (!out.has_grad()) return;
            auto d = out.grad();
            auto g = a.mutable_grad();
            for (std::size_t i = 0; i < d.size(); ++i) g[begin * c + i] += d[i];
        });
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols of nothing");
    const std::size_t r = parts.front().rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rows() != r) throw ShapeError("concat_cols: row counts differ");
        total += p.cols();
    }
    Tensor out(Shape{r, total});
    auto o = out.mutable_values();
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t c = p.cols();
        auto v = p.values();
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(i * c), c,
                        o.begin() + static_cast<std::ptrdiff_t>(i * total + offset));
        offset += c;
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (any && active_tape() != nullptr) {
        out.set_requires_grad(true);
        active_tape()->record([parts, out, r, total]() mutable {
            if (!out.has_grad()) return;
            auto d = out.grad();
            std::size_t offset = 0;
            for (auto& p : parts) {
                const std::size_t c = p.cols();
                if (p.requires_grad()) {
                    auto g = p.mutable_grad();
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += d[i * total + offset + j];
                }
                offset += c;
            }
        });
    }
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_size(shape) != a.size()) {
        throw ShapeError("reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    Tensor out(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()));
    if (should_record({&a})) {
        out.set_requires_grad(true);
        active_tape()->record([a, out]() mutable {
            if (out.has_grad()) accumulate(a, out.grad());
        });
    }
    return out;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch, std::size_t seq_len,
                        double tau, std::vector<std::vector<double>>* probs_out) {
    AttentionOptions opts;
    opts.tau = tau;
    opts.probs_out = probs_out;
    return causal_attention(q, k, v, batch, seq_len, opts);
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch, std::size_t seq_len,
                        const AttentionOptions& opts) {
    const double tau = opts.tau;
    const double scale = opts.scale;
    check_tau(tau);
    const std::size_t n = seq_len;
    if (q.rows() != batch * n || k.rows() != batch * n || v.rows() != batch * n || q.cols() != k.cols()) {
        throw ShapeError("causal_attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()) + " for batch " + std::to_string(batch) + " x " + std::to_string(n));
    }
    std::optional<Tensor> bias;
    if (opts.bias != nullptr) {
        bias = *opts.bias;
        if (bias->rows() != n || bias->cols() != n)
            throw ShapeError("causal_attention: bias " + shape_str(bias->shape()) + " is not [N, N] for N = " +
                             std::to_string(n));
    }
    const std::size_t dk = q.cols(), dv = v.cols();
    Tensor out(Shape{batch * n, dv});
    std::vector<double> probs(batch * n * n);
    std::vector<double> scores(n * n);
    for (std::size_t b = 0; b < batch; ++b) {
        const double* qb = q.values().data() + b * n * dk;
        const double* kb = k.values().data() + b * n * dk;
        const double* vb = v.values().data() + b * n * dv;
        double* pb = probs.data() + b * n * n;
        if (bias) std::copy(bias->values().begin(), bias->values().end(), scores.begin());
        gemm(false, true, n, n, dk, qb, kb, scores.data(), bias ? 1.0 : 0.0, scale);
        for (std::size_t t = 0; t < n; ++t) softmax_row(scores.data() + t * n, pb + t * n, n, t + 1, tau);
        gemm(false, false, n, dv, n, pb, vb, out.mutable_values().data() + b * n * dv, 0.0);
    }
    if (opts.probs_out != nullptr) {
        opts.probs_out->assign(batch, {});
        for (std::size_t b = 0; b < batch; ++b)
            (*opts.probs_out)[b].assign(probs.begin() + static_cast<std::ptrdiff_t>(b * n * n),
                                        probs.begin() + static_cast<std::ptrdiff_t>((b + 1) * n * n));
    }
    const bool bias_grad = bias && bias->requires_grad();
    if (should_record({&q, &k, &v}) || (bias_grad && active_tape() != nullptr)) {
        out.set_requires_grad(true);
        active_tape()->record(
            [q, k, v, out, bias, probs = std::move(probs), batch, n, dk, dv, tau, scale]() mutable {
                if (!out.has_grad()) return;
                const bool want_bias = bias && bias->requires_grad();
                std::vector<double> dp(n * n), ds(n * n);
                for (std::size_t b = 0; b < batch; ++b) {
                    const double* pb = probs.data() + b * n * n;
                    const double* dob = out.grad().data() + b * n * dv;
                    const double* qb = q.values().data() + b * n * dk;
                    const double* kb = k.values().data() + b * n * dk;
                    const double* vb = v.values().data() + b * n * dv;
                    if (v.requires_grad())
                        gemm(true, false, n, dv, n, pb, dob, v.mutable_grad().data() + b * n * dv, 1.0);
                    if (!q.requires_grad() && !k.requires_grad() && !want_bias) continue;
                    gemm(false, true, n, n, dv, dob, vb, dp.data(), 0.0);
                    std::fill(ds.begin(), ds.end(), 0.0);
                    for (std::size_t t = 0; t < n; ++t)
                        softmax_row_backward(pb + t * n, dp.data() + t * n, ds.data() + t * n, t + 1, tau);
                    if (want_bias) {
                        auto g = bias->mutable_grad();
                        for (std::size_t i = 0; i < n * n; ++i) g[i] += ds[i];
                    }
                    if (q.requires_grad())
                        gemm(false, false, n, dk, n, ds.data(), kb, q.mutable_grad().data() + b * n * dk, 1.0, scale);
                    if (k.requires_grad())
                        gemm(true, false, n, dk, n, ds.data(), qb, k.mutable_grad().data() + b * n * dk, 1.0, scale);
                }
            });
    }
    return finish(std::move(out), "causal_attention");
}

} // namespace loctrans::ops
