#include "loctrans/locality.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "loctrans/adam.hpp"
#include "loctrans/error.hpp"
#include "loctrans/log.hpp"
#include "loctrans/metrics.hpp"
#include "loctrans/ops.hpp"

namespace loctrans {

using nlohmann::json;

PenaltyTable::PenaltyTable(std::size_t h, std::size_t b, double fill)
    : heads(h), blocks(b), alpha(h * b, fill) {}

double PenaltyTable::max() const {
    return alpha.empty() ? 0.0 : *std::max_element(alpha.begin(), alpha.end());
}

double PenaltyTable::mean() const {
    if (alpha.empty()) return 0.0;
    return std::accumulate(alpha.begin(), alpha.end(), 0.0) / static_cast<double>(alpha.size());
}

void to_json(json& j, const PenaltyTable& t) {
    j = json{{"heads", t.heads}, {"blocks", t.blocks}, {"alpha", t.alpha}};
}

void from_json(const json& j, PenaltyTable& t) {
    t.heads = j.at("heads").get<std::size_t>();
    t.blocks = j.at("blocks").get<std::size_t>();
    t.alpha = j.at("alpha").get<std::vector<double>>();
    if (t.alpha.size() != t.heads * t.blocks) {
        throw InputError("penalty table holds " + std::to_string(t.alpha.size()) +
                         " entries for " + std::to_string(t.heads) + " heads x " +
                         std::to_string(t.blocks) + " blocks");
    }
}

void LocalityConfig::validate() const {
    if (!(lambda_dial >= 0.0 && lambda_dial <= 1.0)) {
        throw ParameterError("locality dial must lie in [0, 1], got " + std::to_string(lambda_dial));
    }
    for (double a : base.alpha) {
        if (!(a >= 0.0) || !std::isfinite(a)) throw ParameterError("base penalties must be finite and >= 0");
    }
    if (!(beta >= 0.0)) throw ParameterError("value decay beta must be >= 0");
    if (!(tau > 0.0)) throw ParameterError("temperature must be positive");
}

PenaltyTable LocalityConfig::effective() const { return dial_to_penalties(lambda_dial, base); }

PenaltyTable dial_to_penalties(double lambda_dial, const PenaltyTable& base) {
    if (!(lambda_dial >= 0.0 && lambda_dial <= 1.0)) {
        throw ParameterError("locality dial must lie in [0, 1], got " + std::to_string(lambda_dial));
    }
    PenaltyTable out = base;
    // lambda = 0 must give exact zeros even for infinite base entries.
    for (double& a : out.alpha) a = lambda_dial == 0.0 ? 0.0 : lambda_dial * a;
    return out;
}

namespace {

void check_row_partition(const BlockPartition& rows, std::size_t n) {
    std::size_t next = 0;
    for (const auto& b : rows.blocks) {
        if (b.begin != next || b.end <= b.begin) {
            throw StructureError("row grouping is not a partition: block [" +
                                 std::to_string(b.begin) + ", " + std::to_string(b.end) +
                                 ") does not continue at row " + std::to_string(next));
        }
        next = b.end;
    }
    if (next != n) {
        throw StructureError("row grouping covers " + std::to_string(next) + " rows of " +
                             std::to_string(n));
    }
}

} // namespace

Tensor group_penalty(std::span<const Tensor> queries, std::span<const Tensor> keys,
                     const BlockPartition& rows, const PenaltyTable& alpha) {
    if (queries.size() != keys.size()) {
        throw ShapeError("group penalty needs one key structure per query structure");
    }
    if (alpha.heads != queries.size() || alpha.blocks != rows.blocks.size()) {
        throw ShapeError("penalty table is " + std::to_string(alpha.heads) + " x " +
                         std::to_string(alpha.blocks) + " but there are " +
                         std::to_string(queries.size()) + " heads and " +
                         std::to_string(rows.blocks.size()) + " blocks");
    }
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t h = 0; h < queries.size(); ++h) {
        check_row_partition(rows, queries[h].rows());
        check_row_partition(rows, keys[h].rows());
        for (std::size_t i = 0; i < rows.blocks.size(); ++i) {
            const double a = alpha.at(h, i);
            if (a == 0.0) continue;
            const auto& b = rows.blocks[i];
            Tensor pair = ops::add(ops::frobenius_norm(ops::slice_rows(queries[h], b.begin, b.end)),
                                   ops::frobenius_norm(ops::slice_rows(keys[h], b.begin, b.end)));
            total = ops::add(total, ops::scale(pair, a));
        }
    }
    return total;
}

PenaltyStructures penalty_structures(const ModelParams& params, const ModelConfig& config,
                                     const BlockPartition& partition) {
    PenaltyStructures s;
    if (config.penalty_target == PenaltyTarget::offset) {
        for (const auto& L : params.layers) {
            s.queries.insert(s.queries.end(), L.r_q.begin(), L.r_q.end());
            s.keys.insert(s.keys.end(), L.r_k.begin(), L.r_k.end());
        }
        return s;
    }
    const Tensor pe = block_positional_encoding(params, partition);
    for (const auto& L : params.layers) {
        for (std::size_t h = 0; h < L.w_q.size(); ++h) {
            s.queries.push_back(ops::matmul(pe, L.w_q[h]));
            s.keys.push_back(ops::matmul(pe, L.w_k[h]));
        }
    }
    return s;
}

Tensor model_group_penalty(const ModelParams& params, const ModelConfig& config,
                           const BlockPartition& partition, const PenaltyTable& alpha) {
    if (alpha.max() == 0.0) return Tensor::scalar(0.0);
    const auto s = penalty_structures(params, config, partition);
    return group_penalty(s.queries, s.keys, partition, alpha);
}

std::size_t proximal_group_shrink(const ModelParams& params, const ModelConfig& config,
                                  const BlockPartition& partition, const PenaltyTable& alpha,
                                  double step) {
    if (config.penalty_target != PenaltyTarget::offset) {
        throw ParameterError("the proximal penalty step needs the offset target");
    }
    if (!(step >= 0.0)) throw ParameterError("proximal step must be non-negative");
    const std::size_t heads = config.n_layers * config.n_heads;
    if (alpha.heads != heads || alpha.blocks != partition.count()) {
        throw ShapeError("penalty table is " + std::to_string(alpha.heads) + "x" + std::to_string(alpha.blocks) +
                         " but the model has " + std::to_string(heads) + " heads and " +
                         std::to_string(partition.count()) + " blocks");
    }
    std::size_t zero = 0;
    auto shrink = [&](Tensor table, const Block& blk, double threshold) {
        const std::size_t r = table.shape()[1];
        auto v = table.mutable_values();
        double ss = 0.0;
        for (std::size_t k = blk.begin * r; k < blk.end * r; ++k) ss += v[k] * v[k];
        const double norm = std::sqrt(ss);
        const double factor = norm > threshold ? 1.0 - threshold / norm : 0.0;
        if (factor == 0.0) ++zero;
        if (factor == 1.0) return;
        for (std::size_t k = blk.begin * r; k < blk.end * r; ++k) v[k] *= factor;
    };
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        const auto& L = params.layers[l];
        for (std::size_t h = 0; h < config.n_heads; ++h) {
            for (std::size_t i = 0; i < partition.count(); ++i) {
                const double t = step * alpha.at(l * config.n_heads + h, i);
                shrink(L.r_q[h], partition.blocks[i], t);
                shrink(L.r_k[h], partition.blocks[i], t);
            }
        }
    }
    return zero;
}

Tensor value_decay(const ModelParams& params) {
    Tensor total = Tensor::scalar(0.0);
    for (const auto& L : params.layers) {
        for (const auto& w : L.w_v) total = ops::add(total, ops::sum_squares(w));
    }
    return total;
}

void ThresholdInputs::validate() const {
    if (!(rho_max < 1.0)) {
        throw DomainError("rho_max = " + std::to_string(rho_max) +
                          " >= 1: blocks are nearly collinear and no threshold exists");
    }
    if (!(delta > 0.0)) throw ParameterError("margin delta must be positive, got " + std::to_string(delta));
    if (!(tau > 0.0)) throw ParameterError("temperature must be positive");
    if (!(L_loss >= 0.0 && R_X >= 0.0 && sigma_X >= 0.0 && rho_max >= 0.0)) {
        throw ParameterError("threshold constants must be non-negative");
    }
}

void to_json(json& j, const ThresholdInputs& in) {
    j = json{{"L_loss", in.L_loss}, {"R_X", in.R_X},         {"sigma_X", in.sigma_X},
             {"rho_max", in.rho_max}, {"delta", in.delta},   {"block_size", in.block_size},
             {"tau", in.tau}};
}

void from_json(const json& j, ThresholdInputs& in) {
    j.at("L_loss").get_to(in.L_loss);
    j.at("R_X").get_to(in.R_X);
    j.at("sigma_X").get_to(in.sigma_X);
    j.at("rho_max").get_to(in.rho_max);
    j.at("delta").get_to(in.delta);
    j.at("block_size").get_to(in.block_size);
    j.at("tau").get_to(in.tau);
}

double penalty_threshold(const ThresholdInputs& in) {
    in.validate();
    return 2.0 * in.L_loss * in.R_X * in.sigma_X * std::sqrt(static_cast<double>(in.block_size)) /
           (in.tau * (1.0 - in.rho_max)) * std::exp(-in.delta / in.tau);
}

std::optional<double> entropy_bound(std::size_t anchor_count, std::size_t n, double delta,
                                    double tau) {
    if (anchor_count < 1) throw ParameterError("entropy bound needs at least one anchor");
    if (!(tau > 0.0)) throw ParameterError("temperature must be positive");
    const double nn = static_cast<double>(n);
    // Compare in log space so large margins do not overflow.
    if (delta / tau < std::log(2.0 * nn)) return std::nullopt;
    return std::log2(static_cast<double>(anchor_count)) +
           nn * std::exp(-delta / tau) * (1.0 + std::log2(nn)) / std::log(2.0);
}

double fidelity_bound(std::size_t n, double delta, double tau) {
    if (n < 1) throw ParameterError("fidelity bound needs N >= 1");
    return std::max(0.0, 1.0 - static_cast<double>(n) * std::exp(-delta / tau));
}

double top_covariance_eigenvalue(const Tensor& x) {
    const std::size_t n = x.rows(), d = x.cols();
    if (n == 0 || d == 0) return 0.0;
    std::vector<double> mean(d, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) mean[c] += x.at(r, c);
    }
    for (double& m : mean) m /= static_cast<double>(n);
    std::vector<double> cov(d * d, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t a = 0; a < d; ++a) {
            const double ua = x.at(r, a) - mean[a];
            for (std::size_t b = 0; b < d; ++b) cov[a * d + b] += ua * (x.at(r, b) - mean[b]);
        }
    }
    for (double& c : cov) c /= static_cast<double>(n);

    // A start vector with distinct entries avoids the symmetric subspaces that
    // an all-ones vector can be orthogonal to.
    std::vector<double> v(d), w(d);
    for (std::size_t i = 0; i < d; ++i) v[i] = 1.0 + 0.37 * static_cast<double>(i % 7) - 0.11 * static_cast<double>(i);
    double lambda = 0.0;
    for (int step = 0; step < 100; ++step) {
        double norm = 0.0;
        for (double e : v) norm += e * e;
        norm = std::sqrt(norm);
        if (norm == 0.0) return 0.0;
        for (double& e : v) e /= norm;
        double rq = 0.0;
        for (std::size_t a = 0; a < d; ++a) {
            w[a] = 0.0;
            for (std::size_t b = 0; b < d; ++b) w[a] += cov[a * d + b] * v[b];
            rq += v[a] * w[a];
        }
        const bool done = step > 0 && std::abs(rq - lambda) < 1e-9;
        lambda = rq;
        v.swap(w);
        if (done) break;
    }
    return std::max(0.0, lambda);
}

namespace {

double dot_rows(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
    double s = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) s += a.at(i, c) * b.at(j, c);
    return s;
}

std::vector<std::size_t> all_rows(std::size_t n) {
    std::vector<std::size_t> r(n);
    std::iota(r.begin(), r.end(), 0);
    return r;
}

} // namespace

ConstantsEstimate estimate_constants(std::span<const Tensor> blocks,
                                     std::span<const std::vector<std::size_t>> anchors,
                                     std::span<const double> probe_grad_norms, double tau) {
    if (blocks.size() < 2) {
        throw DomainError("constant estimation needs at least two blocks, got " +
                          std::to_string(blocks.size()));
    }
    if (!anchors.empty() && anchors.size() != blocks.size()) {
        throw ShapeError("anchor lists do not match the number of blocks");
    }
    const std::size_t d = blocks[0].cols();
    ConstantsEstimate out;
    ThresholdInputs& in = out.inputs;
    in.tau = tau;

    std::vector<std::vector<std::size_t>> anc(blocks.size());
    std::vector<std::vector<double>> means(blocks.size(), std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const Tensor& b = blocks[i];
        if (b.rows() == 0) throw InputError("block " + std::to_string(i) + " is empty");
        if (b.cols() != d) throw ShapeError("blocks disagree on embedding width");
        anc[i] = anchors.empty() || anchors[i].empty() ? all_rows(b.rows()) : anchors[i];
        for (std::size_t a : anc[i]) {
            if (a >= b.rows()) throw IndexError("anchor row out of range in block " + std::to_string(i));
        }
        out.block_sizes.push_back(b.rows());
        in.block_size = std::max(in.block_size, b.rows());
        for (std::size_t r = 0; r < b.rows(); ++r) {
            in.R_X = std::max(in.R_X, std::sqrt(dot_rows(b, r, b, r)));
            for (std::size_t c = 0; c < d; ++c) means[i][c] += b.at(r, c);
        }
        for (double& m : means[i]) m /= static_cast<double>(b.rows());
        in.sigma_X = std::max(in.sigma_X, std::sqrt(top_covariance_eigenvalue(b)));
    }

    double rho = 0.0;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        for (std::size_t j = i + 1; j < blocks.size(); ++j) {
            double ab = 0.0, aa = 0.0, bb = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                ab += means[i][c] * means[j][c];
                aa += means[i][c] * means[i][c];
                bb += means[j][c] * means[j][c];
            }
            // A zero mean has no direction; treat it as maximally correlated.
            const double cosine = aa > 0.0 && bb > 0.0 ? std::abs(ab) / std::sqrt(aa * bb) : 1.0;
            rho = std::max(rho, cosine);
        }
    }
    out.near_collinear = rho > 1.0 - 1e-6;
    in.rho_max = std::min(rho, 1.0 - 1e-9);
    if (out.near_collinear) log_warn("block means are nearly collinear (rho_max = " + std::to_string(rho) + ")");

    double delta = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        for (std::size_t t = 0; t < blocks[i].rows(); ++t) {
            double own = std::numeric_limits<double>::infinity();
            for (std::size_t a : anc[i]) own = std::min(own, dot_rows(blocks[i], t, blocks[i], a));
            double other = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < blocks.size(); ++j) {
                if (j == i) continue;
                for (std::size_t a : anc[j]) other = std::max(other, dot_rows(blocks[i], t, blocks[j], a));
            }
            delta = std::min(delta, own - other);
        }
    }
    in.delta = delta;
    for (double g : probe_grad_norms) in.L_loss = std::max(in.L_loss, g);
    return out;
}

void SyntheticSpec::validate() const {
    if (p < 1 || block_size < 1) throw ParameterError("synthetic spec needs p >= 1 and block_size >= 1");
    if (d < p || (rho_max > 0.0 && d <= p)) {
        throw ParameterError("cannot place " + std::to_string(p) + " near-orthogonal block means in " +
                             std::to_string(d) + " dimensions");
    }
    if (!(rho_max >= 0.0 && rho_max < 1.0)) throw ParameterError("rho_max target must lie in [0, 1)");
    if (!(delta >= 0.0) || !(noise >= 0.0)) throw ParameterError("delta and noise must be >= 0");
    if (anchors_per_block > block_size) throw ParameterError("more anchors than points per block");
}

void to_json(json& j, const SyntheticSpec& s) {
    j = json{{"p", s.p},         {"block_size", s.block_size}, {"d", s.d},
             {"delta", s.delta}, {"rho_max", s.rho_max},       {"noise", s.noise},
             {"anchors_per_block", s.anchors_per_block},       {"seed", s.seed}};
}

void from_json(const json& j, SyntheticSpec& s) {
    SyntheticSpec d;
    s.p = j.value("p", d.p);
    s.block_size = j.value("block_size", d.block_size);
    s.d = j.value("d", d.d);
    s.delta = j.value("delta", d.delta);
    s.rho_max = j.value("rho_max", d.rho_max);
    s.noise = j.value("noise", d.noise);
    s.anchors_per_block = j.value("anchors_per_block", d.anchors_per_block);
    s.seed = j.value("seed", d.seed);
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const std::size_t basis = std::min(spec.d, spec.p + 1);
    std::vector<std::vector<double>> u;
    while (u.size() < basis) {
        std::vector<double> v(spec.d);
        for (double& e : v) e = gauss(rng);
        for (const auto& w : u) {
            double proj = 0.0;
            for (std::size_t c = 0; c < spec.d; ++c) proj += v[c] * w[c];
            for (std::size_t c = 0; c < spec.d; ++c) v[c] -= proj * w[c];
        }
        double norm = 0.0;
        for (double e : v) norm += e * e;
        norm = std::sqrt(norm);
        if (norm < 1e-8) continue;
        for (double& e : v) e /= norm;
        u.push_back(std::move(v));
    }

    const double a = std::sqrt(spec.delta);
    const double c = spec.rho_max > 0.0 ? std::sqrt(spec.delta * spec.rho_max / (1.0 - spec.rho_max)) : 0.0;
    const std::size_t n = spec.p * spec.block_size;

    SyntheticData out;
    out.planted_delta = spec.delta;
    out.x = Tensor({n, spec.d});
    out.partition = make_partition(n, spec.block_size);
    std::vector<std::vector<double>> means(spec.p, std::vector<double>(spec.d));
    for (std::size_t b = 0; b < spec.p; ++b) {
        for (std::size_t k = 0; k < spec.d; ++k) {
            means[b][k] = a * u[b][k] + (c > 0.0 ? c * u[spec.p][k] : 0.0);
        }
    }
    for (std::size_t t = 0; t < n; ++t) {
        const std::size_t b = t / spec.block_size;
        for (std::size_t k = 0; k < spec.d; ++k) out.x.at(t, k) = means[b][k] + spec.noise * gauss(rng);
    }

    const std::size_t k_anchors = spec.anchors_per_block == 0 ? spec.block_size : spec.anchors_per_block;
    for (std::size_t b = 0; b < spec.p; ++b) {
        auto& blk = out.partition.blocks[b];
        out.blocks.push_back(ops::slice_rows(out.x, blk.begin, blk.end).clone());
        std::vector<std::pair<double, std::size_t>> dist;
        for (std::size_t t = blk.begin; t < blk.end; ++t) {
            double s = 0.0;
            for (std::size_t k = 0; k < spec.d; ++k) {
                const double e = out.x.at(t, k) - means[b][k];
                s += e * e;
            }
            dist.emplace_back(s, t);
        }
        std::stable_sort(dist.begin(), dist.end());
        std::vector<std::size_t> local;
        blk.anchors.clear();
        for (std::size_t i = 0; i < k_anchors; ++i) blk.anchors.push_back(dist[i].second);
        std::sort(blk.anchors.begin(), blk.anchors.end());
        for (std::size_t g : blk.anchors) local.push_back(g - blk.begin);
        blk.weights.assign(k_anchors, 1.0 / static_cast<double>(k_anchors));
        out.block_anchors.push_back(std::move(local));
    }
    return out;
}

void to_json(json& j, const SyntheticTrainConfig& c) {
    j = json{{"steps", c.steps},   {"lr", c.lr},   {"rank", c.rank},
             {"init_scale", c.init_scale}, {"tau", c.tau}, {"seed", c.seed}};
}

void from_json(const json& j, SyntheticTrainConfig& c) {
    SyntheticTrainConfig d;
    c.steps = j.value("steps", d.steps);
    c.lr = j.value("lr", d.lr);
    c.rank = j.value("rank", d.rank);
    c.init_scale = j.value("init_scale", d.init_scale);
    c.tau = j.value("tau", d.tau);
    c.seed = j.value("seed", d.seed);
}

namespace {

Tensor global_mean_tile(const Tensor& x) {
    const std::size_t n = x.rows(), d = x.cols();
    std::vector<double> mean(d, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t k = 0; k < d; ++k) mean[k] += x.at(t, k) / static_cast<double>(n);
    }
    Tensor tile({n, d});
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t k = 0; k < d; ++k) tile.at(t, k) = mean[k];
    }
    return tile;
}

struct SyntheticGraph {
    Tensor probs, loss, penalty;
};

SyntheticGraph synthetic_forward(const Tensor& x, const Tensor& content, const Tensor& target,
                                 const Tensor& u, const Tensor& v, const BlockPartition& partition,
                                 const PenaltyTable& alpha, double tau) {
    SyntheticGraph g;
    Tensor scores = ops::add(content, ops::matmul(u, ops::transpose(v)));
    g.probs = ops::softmax_rows(scores, tau, false);
    Tensor out = ops::matmul(g.probs, x);
    const double n = static_cast<double>(x.rows());
    g.loss = ops::scale(ops::sum_squares(ops::sub(out, target)), 0.5 / n);
    const Tensor qs[] = {u};
    const Tensor ks[] = {v};
    g.penalty = group_penalty(qs, ks, partition, alpha);
    return g;
}

} // namespace

SyntheticRun train_synthetic_attention(const SyntheticData& data, double alpha,
                                       const SyntheticTrainConfig& cfg) {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ParameterError("synthetic penalty must be finite and >= 0");
    if (cfg.rank == 0 || !(cfg.lr > 0.0) || !(cfg.tau > 0.0)) {
        throw ParameterError("synthetic trainer needs rank >= 1, lr > 0 and tau > 0");
    }
    const Tensor& x = data.x;
    const std::size_t n = x.rows();
    const Tensor content = ops::matmul(x, ops::transpose(x));
    const Tensor target = global_mean_tile(x);
    const PenaltyTable table(1, data.partition.blocks.size(), alpha);

    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> gauss(0.0, cfg.init_scale);
    Tensor u({n, cfg.rank}), v({n, cfg.rank});
    for (auto& e : u.mutable_values()) e = gauss(rng);
    for (auto& e : v.mutable_values()) e = gauss(rng);
    u.set_requires_grad(true);
    v.set_requires_grad(true);
    const NamedTensors params = {{"U", u}, {"V", v}};

    AdamState adam;
    Tape tape;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        tape.clear();
        u.zero_grad();
        v.zero_grad();
        {
            TapeScope scope(tape);
            auto g = synthetic_forward(x, content, target, u, v, data.partition, table, cfg.tau);
            Tensor total = ops::add(g.loss, g.penalty);
            tape.backward(total);
        }
        adam_step(params, adam, cfg.lr);
    }
    u.drop_grad();
    v.drop_grad();

    auto g = synthetic_forward(x, content, target, u, v, data.partition, table, cfg.tau);
    SyntheticRun run;
    run.alpha = alpha;
    run.final_task_loss = g.loss.item();
    run.final_penalty = g.penalty.item();
    run.attn.assign(g.probs.values().begin(), g.probs.values().end());
    run.cross_block_mass = cross_block_mass(run.attn, data.partition);
    double hsum = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        const double h = attention_entropy(std::span<const double>(run.attn).subspan(t * n, n));
        hsum += h;
        run.max_entropy_bits = std::max(run.max_entropy_bits, h);
    }
    run.mean_entropy_bits = hsum / static_cast<double>(n);
    run.unweighted_fidelity = pointer_fidelity(run.attn, data.partition, anchor_targets(data.partition)).unweighted;
    return run;
}

std::vector<double> synthetic_probe_grad_norms(const SyntheticData& data, double tau) {
    const Tensor& x = data.x;
    const Tensor probs = ops::softmax_rows(ops::matmul(x, ops::transpose(x)), tau, false);
    const Tensor out = ops::matmul(probs, x);
    const Tensor target = global_mean_tile(x);
    std::vector<double> norms(x.rows(), 0.0);
    for (std::size_t t = 0; t < x.rows(); ++t) {
        double s = 0.0;
        for (std::size_t k = 0; k < x.cols(); ++k) {
            const double e = out.at(t, k) - target.at(t, k);
            s += e * e;
        }
        norms[t] = std::sqrt(s);
    }
    return norms;
}

json BoundCheckResult::to_json() const {
    auto run_json = [](const SyntheticRun& r) {
        return json{{"alpha", r.alpha},
                    {"cross_block_mass", r.cross_block_mass},
                    {"mean_entropy_bits", r.mean_entropy_bits},
                    {"max_entropy_bits", r.max_entropy_bits},
                    {"unweighted_fidelity", r.unweighted_fidelity},
                    {"final_task_loss", r.final_task_loss},
                    {"final_penalty", r.final_penalty}};
    };
    json j;
    j["constants"] = constants.inputs;
    j["constants"]["near_collinear"] = constants.near_collinear;
    j["threshold"] = threshold;
    j["alpha"] = alpha;
    j["preconditions_met"] = preconditions_met;
    j["entropy_bound"] = entropy_bound ? json(*entropy_bound) : json("not-applicable");
    j["fidelity_bound"] = fidelity_bound;
    j["mass_limit"] = mass_limit;
    j["localized"] = run_json(localized);
    j["control"] = run_json(control);
    j["checks"] = {{"entropy", entropy_ok}, {"fidelity", fidelity_ok}, {"mass", mass_ok}, {"control", control_ok}};
    j["violations"] = violations;
    j["verdict"] = pass ? "pass" : "fail";
    return j;
}

BoundCheckResult run_bound_check(const SyntheticSpec& spec, const SyntheticTrainConfig& cfg,
                                 double lambda_scale) {
    if (!(lambda_scale >= 0.0)) throw ParameterError("penalty scale must be >= 0");
    BoundCheckResult r;
    const SyntheticData data = generate_synthetic(spec);
    const auto norms = synthetic_probe_grad_norms(data, cfg.tau);
    r.constants = estimate_constants(data.blocks, data.block_anchors, norms, cfg.tau);
    const ThresholdInputs& c = r.constants.inputs;
    const std::size_t n = data.x.rows();
    const std::size_t anchors = data.block_anchors.front().size();

    r.preconditions_met = c.delta > 0.0 && c.delta / c.tau >= std::log(2.0 * static_cast<double>(n)) &&
                          !r.constants.near_collinear;
    if (c.delta > 0.0) {
        for (std::size_t size : r.constants.block_sizes) {
            ThresholdInputs in = c;
            in.block_size = size;
            r.threshold = std::max(r.threshold, penalty_threshold(in));
        }
        r.entropy_bound = entropy_bound(anchors, n, c.delta, c.tau);
        r.fidelity_bound = fidelity_bound(n, c.delta, c.tau);
        r.mass_limit = static_cast<double>(n) * std::exp(-c.delta / c.tau) + 0.05;
    }
    if (!r.preconditions_met) {
        log_warn("bound preconditions not met (delta = " + std::to_string(c.delta) +
                 ", need exp(delta/tau) >= 2N); bounds are not applicable");
        r.pass = true;
        return r;
    }

    r.alpha = lambda_scale * r.threshold;
    r.localized = train_synthetic_attention(data, r.alpha, cfg);
    r.control = train_synthetic_attention(data, 0.0, cfg);

    auto check = [&](bool ok, const std::string& what, double lhs, const char* op, double rhs) {
        if (!ok) {
            r.violations.push_back(what + ": " + std::to_string(lhs) + " " + op + " " + std::to_string(rhs) +
                                   " does not hold");
        }
        return ok;
    };
    r.entropy_ok = check(r.localized.mean_entropy_bits <= *r.entropy_bound, "mean entropy <= entropy bound",
                         r.localized.mean_entropy_bits, "<=", *r.entropy_bound);
    r.fidelity_ok = check(r.localized.unweighted_fidelity >= r.fidelity_bound, "fidelity >= fidelity bound",
                          r.localized.unweighted_fidelity, ">=", r.fidelity_bound);
    r.mass_ok = check(r.localized.cross_block_mass <= r.mass_limit, "cross-block mass <= N exp(-delta/tau) + 0.05",
                      r.localized.cross_block_mass, "<=", r.mass_limit);
    r.control_ok = check(r.control.cross_block_mass >= 2.0 * r.mass_limit,
                         "unpenalized cross-block mass >= 2 x limit", r.control.cross_block_mass, ">=",
                         2.0 * r.mass_limit);
    r.pass = r.entropy_ok && r.fidelity_ok && r.mass_ok && r.control_ok;
    return r;
}

} // namespace loctrans
