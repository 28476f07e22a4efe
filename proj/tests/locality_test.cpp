#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "loctrans/error.hpp"
#include "loctrans/locality.hpp"
#include "loctrans/model.hpp"
#include "loctrans/ops.hpp"

using namespace loctrans;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, scale);
    Tensor t({r, c});
    for (auto& x : t.mutable_values()) x = g(rng);
    return t;
}

// Symmetric eigenvalues by cyclic Jacobi rotations; independent of the power
// iteration under test.
std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t n) {
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> ev(n);
    for (std::size_t i = 0; i < n; ++i) ev[i] = a[i * n + i];
    return ev;
}

double brute_sigma(const Tensor& x) {
    const std::size_t n = x.rows(), d = x.cols();
    std::vector<double> mean(d, 0.0), cov(d * d, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) mean[c] += x.at(r, c) / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = 0; b < d; ++b)
                cov[a * d + b] += (x.at(r, a) - mean[a]) * (x.at(r, b) - mean[b]) / static_cast<double>(n);
    auto ev = jacobi_eigenvalues(cov, d);
    return std::sqrt(*std::max_element(ev.begin(), ev.end()));
}

ThresholdInputs worked_inputs() {
    ThresholdInputs in;
    in.L_loss = 2.0;
    in.R_X = 1.0;
    in.sigma_X = 0.5;
    in.block_size = 4;
    in.tau = 0.5;
    in.rho_max = 0.5;
    in.delta = 1.0;
    return in;
}

} // namespace

TEST(DialToPenalties, Examples) {
    PenaltyTable base(2, 3, 2.0);
    EXPECT_EQ(dial_to_penalties(0.0, base).max(), 0.0);
    EXPECT_EQ(dial_to_penalties(1.0, base).alpha, base.alpha);
    EXPECT_DOUBLE_EQ(dial_to_penalties(0.6, base).at(1, 2), 1.2);
    EXPECT_THROW(dial_to_penalties(1.01, base), ParameterError);
    EXPECT_THROW(dial_to_penalties(-0.1, base), ParameterError);
    EXPECT_THROW(dial_to_penalties(std::nan(""), base), ParameterError);
}

TEST(DialToPenalties, ZeroDialZeroesInfiniteBase) {
    PenaltyTable base(1, 2, std::numeric_limits<double>::infinity());
    EXPECT_EQ(dial_to_penalties(0.0, base).max(), 0.0);
}

TEST(GroupPenalty, WorkedExample) {
    auto part = make_partition(2, 2);
    Tensor q({2, 3}, 1.0), k({2, 3}, 1.0);
    const Tensor qs[] = {q}, ks[] = {k};
    EXPECT_NEAR(group_penalty(qs, ks, part, PenaltyTable(1, 1, 0.5)).item(), 2.449490, 1e-6);
    EXPECT_NEAR(group_penalty(qs, ks, part, PenaltyTable(1, 1, 0.5)).item(), std::sqrt(6.0), 1e-12);
    EXPECT_EQ(group_penalty(qs, ks, part, dial_to_penalties(0.0, PenaltyTable(1, 1, 0.5))).item(), 0.0);
}

TEST(GroupPenalty, AllZeroWeightsGiveZero) {
    auto part = make_partition(10, 5);
    Tensor q({10, 4}), k({10, 4});
    const Tensor qs[] = {q, q}, ks[] = {k, k};
    EXPECT_EQ(group_penalty(qs, ks, part, PenaltyTable(2, 2, 3.0)).item(), 0.0);
}

TEST(GroupPenalty, PerBlockSumMatchesHandComputation) {
    auto part = make_partition(7, 3); // blocks [0,3) [3,6) [6,7)
    Tensor q = random_matrix(7, 2, 1), k = random_matrix(7, 2, 2);
    PenaltyTable a(1, 3);
    a.at(0, 0) = 0.1;
    a.at(0, 1) = 0.7;
    a.at(0, 2) = 2.0;
    double expect = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        double sq = 0.0, sk = 0.0;
        for (std::size_t t = part.blocks[i].begin; t < part.blocks[i].end; ++t)
            for (std::size_t c = 0; c < 2; ++c) {
                sq += q.at(t, c) * q.at(t, c);
                sk += k.at(t, c) * k.at(t, c);
            }
        expect += a.at(0, i) * (std::sqrt(sq) + std::sqrt(sk));
    }
    const Tensor qs[] = {q}, ks[] = {k};
    EXPECT_NEAR(group_penalty(qs, ks, part, a).item(), expect, 1e-12);
}

TEST(GroupPenalty, AbsolutelyHomogeneous) {
    auto part = make_partition(12, 5);
    PenaltyTable a(2, 3);
    for (std::size_t i = 0; i < a.alpha.size(); ++i) a.alpha[i] = 0.1 * static_cast<double>(i + 1);
    for (std::uint64_t trial = 0; trial < 20; ++trial) {
        Tensor q0 = random_matrix(12, 3, trial), q1 = random_matrix(12, 3, trial + 100);
        Tensor k0 = random_matrix(12, 3, trial + 200), k1 = random_matrix(12, 3, trial + 300);
        const Tensor qs[] = {q0, q1}, ks[] = {k0, k1};
        const double base = group_penalty(qs, ks, part, a).item();
        const double c = 0.25 * static_cast<double>(trial);
        const Tensor sq[] = {ops::scale(q0, c), ops::scale(q1, c)};
        const Tensor sk[] = {ops::scale(k0, c), ops::scale(k1, c)};
        EXPECT_NEAR(group_penalty(sq, sk, part, a).item(), c * base, 1e-10 * (1.0 + c * base));
    }
}

TEST(GroupPenalty, GradientMatchesFiniteDifferenceAndZeroSubgradient) {
    auto part = make_partition(6, 3);
    Tensor q = random_matrix(6, 2, 5), k = random_matrix(6, 2, 6);
    for (std::size_t t = 3; t < 6; ++t)
        for (std::size_t c = 0; c < 2; ++c) k.at(t, c) = 0.0;
    PenaltyTable a(1, 2, 0.8);
    auto f = [&](const Tensor&) {
        const Tensor qs[] = {q}, ks[] = {k};
        return group_penalty(qs, ks, part, a);
    };
    EXPECT_LE(grad_check(f, q, 1e-6), 1e-7);

    k.set_requires_grad(true);
    k.zero_grad();
    Tape tape;
    {
        TapeScope scope(tape);
        const Tensor qs[] = {q}, ks[] = {k};
        tape.backward(group_penalty(qs, ks, part, a));
    }
    for (std::size_t i = 6; i < 12; ++i) EXPECT_EQ(k.grad()[i], 0.0);
}

TEST(GroupPenalty, RejectsGroupingThatIsNotAPartition) {
    Tensor q({6, 2}, 1.0);
    const Tensor qs[] = {q}, ks[] = {q};
    auto gap = make_partition(6, 3);
    gap.blocks[1].begin = 4;
    EXPECT_THROW(group_penalty(qs, ks, gap, PenaltyTable(1, 2, 1.0)), StructureError);
    auto overlap = make_partition(6, 3);
    overlap.blocks[0].end = 4;
    EXPECT_THROW(group_penalty(qs, ks, overlap, PenaltyTable(1, 2, 1.0)), StructureError);
    auto short_cover = make_partition(5, 5);
    EXPECT_THROW(group_penalty(qs, ks, short_cover, PenaltyTable(1, 1, 1.0)), StructureError);
    EXPECT_THROW(group_penalty(qs, ks, make_partition(6, 3), PenaltyTable(2, 2, 1.0)), ShapeError);
}

namespace {

ModelConfig offset_config() {
    ModelConfig c;
    c.d_model = 8;
    c.d_head = 4;
    c.n_heads = 2;
    c.n_layers = 1;
    c.seq_len = 6;
    c.vocab_size = 5;
    c.block_window = 3;
    c.offset_rank = 2;
    return c;
}

double block_norm(const Tensor& t, const Block& b) {
    double ss = 0.0;
    for (std::size_t r = b.begin; r < b.end; ++r)
        for (std::size_t c = 0; c < t.cols(); ++c) ss += t.at(r, c) * t.at(r, c);
    return std::sqrt(ss);
}

} // namespace

TEST(ProximalShrink, ScalesShrinksAndZeroesGroups) {
    const auto c = offset_config();
    const auto part = make_partition(c.seq_len, c.block_window);
    ModelParams p = init_params(c, 3);
    Tensor rq = p.layers[0].r_q[0];
    // Block 0 rows norm 2 (3-4-0 pattern scaled), block 1 rows norm 0.3.
    auto v = rq.mutable_values();
    std::fill(v.begin(), v.end(), 0.0);
    v[0] = 1.2;
    v[1] = 1.6;
    v[6] = 0.3;
    PenaltyTable alpha(2, 2, 0.0);
    alpha.at(0, 0) = 0.5;
    alpha.at(0, 1) = 0.5;
    const Tensor untouched = p.layers[0].r_q[1].clone();
    proximal_group_shrink(p, c, part, alpha, 1.0);
    EXPECT_NEAR(rq.at(0, 0), 1.2 * 0.75, 1e-15);
    EXPECT_NEAR(rq.at(0, 1), 1.6 * 0.75, 1e-15);
    EXPECT_EQ(block_norm(rq, part.blocks[1]), 0.0);
    // Zero penalty leaves the other head alone.
    EXPECT_TRUE(std::equal(untouched.values().begin(), untouched.values().end(),
                           p.layers[0].r_q[1].values().begin()));
}

TEST(ProximalShrink, IsTheProximalOperatorOfTheGroupNorm) {
    // prox minimizes 0.5 ||x - v||^2 + t ||x|| over each group; no random
    // perturbation of the result may do better.
    const auto c = offset_config();
    const auto part = make_partition(c.seq_len, c.block_window);
    std::mt19937_64 rng(8);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        ModelParams p = init_params(c, 100 + trial);
        const Tensor before = p.layers[0].r_k[1].clone();
        const double t = 0.2 + 0.1 * trial;
        PenaltyTable alpha(2, 2, 1.0);
        proximal_group_shrink(p, c, part, alpha, t);
        const Tensor after = p.layers[0].r_k[1];
        for (const auto& b : part.blocks) {
            auto objective = [&](const std::vector<double>& x) {
                double fit = 0.0, norm = 0.0;
                std::size_t k = 0;
                for (std::size_t r = b.begin; r < b.end; ++r)
                    for (std::size_t col = 0; col < after.cols(); ++col, ++k) {
                        const double d = x[k] - before.at(r, col);
                        fit += d * d;
                        norm += x[k] * x[k];
                    }
                return 0.5 * fit + t * std::sqrt(norm);
            };
            std::vector<double> x;
            for (std::size_t r = b.begin; r < b.end; ++r)
                for (std::size_t col = 0; col < after.cols(); ++col) x.push_back(after.at(r, col));
            const double best = objective(x);
            for (int k = 0; k < 50; ++k) {
                auto y = x;
                for (auto& e : y) e += 1e-3 * g(rng);
                EXPECT_GE(objective(y), best - 1e-12);
            }
        }
    }
}

TEST(ProximalShrink, ZeroCountAndErrors) {
    auto c = offset_config();
    const auto part = make_partition(c.seq_len, c.block_window);
    ModelParams p = init_params(c, 4);
    EXPECT_EQ(proximal_group_shrink(p, c, part, PenaltyTable(2, 2, 1e9), 1.0), 8u);
    EXPECT_EQ(model_group_penalty(p, c, part, PenaltyTable(2, 2, 1.0)).item(), 0.0);
    EXPECT_THROW(proximal_group_shrink(p, c, part, PenaltyTable(3, 2, 1.0), 1.0), ShapeError);
    EXPECT_THROW(proximal_group_shrink(p, c, part, PenaltyTable(2, 2, 1.0), -1.0), ParameterError);
    c.penalty_target = PenaltyTarget::projected;
    ModelParams q = init_params(c, 4);
    EXPECT_THROW(proximal_group_shrink(q, c, part, PenaltyTable(2, 2, 1.0), 1.0), ParameterError);
}

TEST(PenaltyThreshold, WorkedExample) {
    // Independent evaluation: 2*2*1*0.5*sqrt(4) / (0.5 * 0.5) * exp(-1/0.5) = 16 e^-2.
    const double oracle = 16.0 * std::exp(-2.0);
    EXPECT_NEAR(oracle, 2.165364, 1e-6);
    EXPECT_NEAR(penalty_threshold(worked_inputs()), 2.165364, 1e-5);
    EXPECT_NEAR(penalty_threshold(worked_inputs()), oracle, 1e-12);
}

TEST(PenaltyThreshold, LimitsAndScaling) {
    auto in = worked_inputs();
    in.tau = 1.0;
    in.delta = 1e6;
    EXPECT_LT(penalty_threshold(in), 1e-300);
    auto a = worked_inputs(), b = worked_inputs();
    b.block_size = 16;
    EXPECT_NEAR(penalty_threshold(b), 2.0 * penalty_threshold(a), 1e-12);
}

TEST(PenaltyThreshold, MonotoneOverGrids) {
    const auto base = worked_inputs();
    auto eval = [](ThresholdInputs in) { return penalty_threshold(in); };
    for (int i = 0; i < 20; ++i) {
        const double s = 0.1 + 0.2 * i;
        auto lo = base, hi = base;
        lo.delta = s;
        hi.delta = s + 0.1;
        EXPECT_GT(eval(lo), eval(hi)) << "delta " << s;
        lo = hi = base;
        lo.rho_max = 0.04 * i;
        hi.rho_max = 0.04 * i + 0.02;
        EXPECT_LT(eval(lo), eval(hi)) << "rho " << lo.rho_max;
        lo = hi = base;
        lo.L_loss = s;
        hi.L_loss = s + 0.1;
        EXPECT_LT(eval(lo), eval(hi));
        lo = hi = base;
        lo.R_X = s;
        hi.R_X = s + 0.1;
        EXPECT_LT(eval(lo), eval(hi));
        lo = hi = base;
        lo.sigma_X = s;
        hi.sigma_X = s + 0.1;
        EXPECT_LT(eval(lo), eval(hi));
        lo = hi = base;
        lo.block_size = static_cast<std::size_t>(i + 1);
        hi.block_size = static_cast<std::size_t>(i + 2);
        EXPECT_LT(eval(lo), eval(hi));
    }
    // tau: for delta >= tau the exponential dominates and smaller tau shrinks the threshold.
    for (int i = 0; i < 10; ++i) {
        auto lo = base, hi = base;
        lo.delta = hi.delta = 5.0;
        lo.tau = 0.2 + 0.1 * i;
        hi.tau = lo.tau + 0.05;
        EXPECT_LT(eval(lo), eval(hi)) << "tau " << lo.tau;
    }
}

TEST(PenaltyThreshold, InvalidInputs) {
    auto in = worked_inputs();
    in.rho_max = 1.0;
    EXPECT_THROW(penalty_threshold(in), DomainError);
    in = worked_inputs();
    in.delta = 0.0;
    EXPECT_THROW(penalty_threshold(in), ParameterError);
    in = worked_inputs();
    in.tau = 0.0;
    EXPECT_THROW(penalty_threshold(in), ParameterError);
    in = worked_inputs();
    in.sigma_X = -1.0;
    EXPECT_THROW(penalty_threshold(in), ParameterError);
}

TEST(EntropyBound, WorkedExample) {
    const auto b = entropy_bound(4, 16, std::log(64.0), 1.0);
    ASSERT_TRUE(b.has_value());
    EXPECT_NEAR(*b, 2.0 + 16.0 / 64.0 * 5.0 / std::log(2.0), 1e-12);
    EXPECT_NEAR(*b, 3.803369, 1e-6);
}

TEST(EntropyBound, SingleAnchorLargeMarginVanishes) {
    const auto b = entropy_bound(1, 16, 200.0, 1.0);
    ASSERT_TRUE(b.has_value());
    EXPECT_LT(*b, 1e-80);
}

TEST(EntropyBound, PreconditionBoundary) {
    EXPECT_FALSE(entropy_bound(4, 16, std::log(31.0), 1.0).has_value());
    EXPECT_TRUE(entropy_bound(4, 16, std::log(32.0) + 1e-12, 1.0).has_value());
    EXPECT_THROW(entropy_bound(0, 16, 10.0, 1.0), ParameterError);
}

TEST(FidelityBound, Examples) {
    EXPECT_NEAR(fidelity_bound(16, std::log(64.0), 1.0), 0.75, 1e-12);
    EXPECT_EQ(fidelity_bound(16, 1e6, 1.0), 1.0);
    EXPECT_EQ(fidelity_bound(16, std::log(8.0), 1.0), 0.0);
    EXPECT_EQ(fidelity_bound(16, 0.0, 1.0), 0.0);
}

TEST(EstimateConstants, OrthogonalOnePointBlocks) {
    std::vector<Tensor> blocks = {Tensor::matrix({{1.0, 0.0}}), Tensor::matrix({{0.0, 1.0}})};
    const double norms[] = {0.3, 1.7, 0.9};
    auto est = estimate_constants(blocks, {}, norms, 1.0);
    EXPECT_EQ(est.inputs.rho_max, 0.0);
    EXPECT_EQ(est.inputs.sigma_X, 0.0);
    EXPECT_EQ(est.inputs.R_X, 1.0);
    EXPECT_EQ(est.inputs.L_loss, 1.7);
    EXPECT_EQ(est.inputs.delta, 1.0);
    EXPECT_FALSE(est.near_collinear);
}

TEST(EstimateConstants, DuplicatedBlocksAreNearCollinear) {
    Tensor b = random_matrix(4, 3, 9);
    std::vector<Tensor> blocks = {b, b.clone()};
    auto est = estimate_constants(blocks, {}, {}, 1.0);
    EXPECT_TRUE(est.near_collinear);
    EXPECT_LT(est.inputs.rho_max, 1.0);
    EXPECT_GT(est.inputs.rho_max, 1.0 - 1e-6);
}

TEST(EstimateConstants, SigmaMatchesDenseEigensolver) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::vector<Tensor> blocks;
        for (std::size_t i = 0; i < 3; ++i) blocks.push_back(random_matrix(9 + i, 5, seed * 10 + i, 1.0 + i));
        double oracle = 0.0;
        for (const auto& b : blocks) oracle = std::max(oracle, brute_sigma(b));
        auto est = estimate_constants(blocks, {}, {}, 1.0);
        EXPECT_NEAR(est.inputs.sigma_X, oracle, 1e-6) << "seed " << seed;
    }
}

TEST(EstimateConstants, MarginUsesAnchorsAndMayBeNegative) {
    // Block 0: (2,0),(1,0); block 1: (0,1),(1.5,0.1).
    std::vector<Tensor> blocks = {Tensor::matrix({{2, 0}, {1, 0}}), Tensor::matrix({{0, 1}, {1.5, 0.1}})};
    std::vector<std::vector<std::size_t>> anchors = {{0}, {0}};
    auto est = estimate_constants(blocks, anchors, {}, 1.0);
    // Queries: (2,0): 4-0; (1,0): 2-0; (0,1): 1-0; (1.5,0.1): 0.1-3 = -2.9.
    EXPECT_NEAR(est.inputs.delta, -2.9, 1e-12);
    EXPECT_EQ(est.block_sizes, (std::vector<std::size_t>{2, 2}));
}

TEST(EstimateConstants, Errors) {
    std::vector<Tensor> one = {random_matrix(3, 2, 1)};
    EXPECT_THROW(estimate_constants(one, {}, {}, 1.0), DomainError);
    std::vector<Tensor> empty = {random_matrix(3, 2, 1), Tensor({0, 2})};
    EXPECT_THROW(estimate_constants(empty, {}, {}, 1.0), InputError);
}

TEST(GenerateSynthetic, NoiselessMarginIsExact) {
    for (double rho : {0.0, 0.3}) {
        SyntheticSpec s;
        s.noise = 0.0;
        s.rho_max = rho;
        s.delta = 4.5;
        auto data = generate_synthetic(s);
        auto est = estimate_constants(data.blocks, data.block_anchors, {}, 1.0);
        EXPECT_NEAR(est.inputs.delta, 4.5, 1e-9);
        EXPECT_NEAR(est.inputs.rho_max, rho, 1e-9);
        EXPECT_NEAR(est.inputs.sigma_X, 0.0, 1e-12);
    }
}

TEST(GenerateSynthetic, CorrelationHitsTarget) {
    for (double rho : {0.0, 0.2, 0.5}) {
        SyntheticSpec s;
        s.rho_max = rho;
        s.noise = 0.05;
        auto est = estimate_constants(generate_synthetic(s).blocks, {}, {}, 1.0);
        EXPECT_NEAR(est.inputs.rho_max, rho, 0.05) << "target " << rho;
    }
}

TEST(GenerateSynthetic, DeterministicAndAnchorsNearMean) {
    SyntheticSpec s;
    s.anchors_per_block = 2;
    auto a = generate_synthetic(s), b = generate_synthetic(s);
    EXPECT_TRUE(std::equal(a.x.values().begin(), a.x.values().end(), b.x.values().begin()));
    s.seed = 2;
    auto c = generate_synthetic(s);
    EXPECT_FALSE(std::equal(a.x.values().begin(), a.x.values().end(), c.x.values().begin()));
    for (const auto& blk : a.partition.blocks) {
        EXPECT_EQ(blk.anchors.size(), 2u);
        EXPECT_NEAR(blk.weights[0] + blk.weights[1], 1.0, 1e-15);
    }
}

TEST(GenerateSynthetic, TooFewDimensions) {
    SyntheticSpec s;
    s.p = 5;
    s.d = 4;
    EXPECT_THROW(generate_synthetic(s), ParameterError);
    s.d = 5;
    s.rho_max = 0.2;
    EXPECT_THROW(generate_synthetic(s), ParameterError);
}

TEST(BoundCheck, DefaultSpecPasses) {
    auto r = run_bound_check(SyntheticSpec{}, SyntheticTrainConfig{});
    EXPECT_TRUE(r.preconditions_met);
    EXPECT_TRUE(r.pass) << r.to_json().dump(1);
    EXPECT_LE(r.localized.mean_entropy_bits, *r.entropy_bound);
    EXPECT_GE(r.localized.unweighted_fidelity, r.fidelity_bound);
    EXPECT_LE(r.localized.cross_block_mass, r.mass_limit);
    EXPECT_GE(r.control.cross_block_mass, 2.0 * r.mass_limit);
}

TEST(BoundCheck, ZeroMarginIsNotApplicable) {
    SyntheticSpec s;
    s.delta = 0.0;
    auto r = run_bound_check(s, SyntheticTrainConfig{});
    EXPECT_FALSE(r.preconditions_met);
    EXPECT_FALSE(r.entropy_bound.has_value());
    EXPECT_TRUE(r.pass);
}

TEST(BoundCheck, ZeroPenaltyFailsLocalization) {
    auto r = run_bound_check(SyntheticSpec{}, SyntheticTrainConfig{}, 0.0);
    EXPECT_FALSE(r.mass_ok);
    EXPECT_FALSE(r.pass);
    EXPECT_FALSE(r.violations.empty());
}
