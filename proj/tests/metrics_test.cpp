#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "loctrans/error.hpp"
#include "loctrans/log.hpp"
#include "loctrans/metrics.hpp"
#include "loctrans/ops.hpp"

using namespace loctrans;

namespace {

std::vector<double> random_causal_map(std::size_t n, std::mt19937& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> m(n * n, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        double total = 0.0;
        for (std::size_t j = 0; j <= t; ++j) total += (m[t * n + j] = u(rng) + 1e-3);
        for (std::size_t j = 0; j <= t; ++j) m[t * n + j] /= total;
    }
    return m;
}

} // namespace

TEST(Entropy, UniformOverEightIsThreeBits) {
    std::vector<double> row(8, 0.125);
    EXPECT_NEAR(attention_entropy(row), 3.0, 1e-12);
}

TEST(Entropy, OneHotIsZero) {
    std::vector<double> row = {0, 0, 1, 0};
    EXPECT_EQ(attention_entropy(row), 0.0);
}

TEST(Entropy, HandEvaluatedMixture) {
    std::vector<double> row = {0.5, 0.25, 0.25};
    EXPECT_NEAR(attention_entropy(row), 1.5, 1e-12);
}

TEST(Entropy, UnnormalizedRowRejected) {
    std::vector<double> row = {0.5, 0.4};
    EXPECT_THROW(attention_entropy(row), InputError);
    std::vector<double> neg = {1.5, -0.5};
    EXPECT_THROW(attention_entropy(neg), InputError);
}

TEST(Entropy, UniformIsMaximalUnderPerturbation) {
    std::mt19937 rng(3);
    std::normal_distribution<double> g(0.0, 0.05);
    for (std::size_t n : {2u, 5u, 16u, 64u}) {
        const double hmax = std::log2(static_cast<double>(n));
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<double> row(n);
            double total = 0.0;
            for (auto& v : row) total += (v = std::max(1e-9, 1.0 / n + g(rng) / n));
            for (auto& v : row) v /= total;
            EXPECT_LE(attention_entropy(row), hmax + 1e-12);
        }
    }
}

TEST(AnchorWeights, SingleReceiverGetsAllWeight) {
    auto p = make_partition(10, 5);
    p.blocks[0].anchors = {0, 3};
    p.blocks[0].weights = {0.5, 0.5};
    AttentionRecord rec(10, 1, 1);
    for (std::size_t t = 0; t < 10; ++t) rec.map(0, 0)[t * 10 + (t < 5 ? 0 : 5)] = 1.0;
    auto w = anchor_weights(rec, p);
    EXPECT_DOUBLE_EQ(w[0][0], 1.0);
    EXPECT_DOUBLE_EQ(w[0][1], 0.0);
}

TEST(AnchorWeights, UniformOverFourAnchors) {
    auto p = make_partition(8, 4);
    AttentionRecord rec(8, 1, 1);
    for (std::size_t t = 0; t < 8; ++t) {
        const std::size_t b = t / 4 * 4;
        for (std::size_t j = b; j < b + 4; ++j) rec.map(0, 0)[t * 8 + j] = 0.25;
    }
    for (const auto& w : anchor_weights(rec, p)) {
        for (double x : w) EXPECT_DOUBLE_EQ(x, 0.25);
    }
}

TEST(AnchorWeights, MatchesDirectSumAndIsProbabilityVector) {
    std::mt19937 rng(17);
    auto p = make_partition(9, 4); // blocks 4, 4, 1
    p.blocks[0].anchors = {1, 3};
    p.blocks[1].anchors = {4, 5, 7};
    p.blocks[2].anchors = {8};
    AttentionRecord rec(9, 2, 1);
    rec.maps[0] = random_causal_map(9, rng);
    rec.maps[1] = random_causal_map(9, rng);
    auto w = anchor_weights(rec, p);
    for (std::size_t i = 0; i < p.count(); ++i) {
        const auto& b = p.blocks[i];
        std::vector<double> raw;
        double total = 0.0;
        for (std::size_t j : b.anchors) {
            double s = 0.0;
            for (const auto& m : rec.maps) {
                for (std::size_t t = b.begin; t < b.end; ++t) s += m[t * 9 + j];
            }
            raw.push_back(s);
            total += s;
        }
        double sum = 0.0;
        for (std::size_t a = 0; a < raw.size(); ++a) {
            EXPECT_NEAR(w[i][a], raw[a] / total, 1e-12);
            EXPECT_GE(w[i][a], 0.0);
            sum += w[i][a];
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
}

TEST(AnchorWeights, ZeroMassBlockIsUniform) {
    auto p = make_partition(6, 3);
    p.blocks[1].anchors = {4, 5};
    AttentionRecord rec(6, 1, 1);
    for (std::size_t t = 0; t < 6; ++t) rec.map(0, 0)[t * 6] = 1.0;
    auto w = anchor_weights(rec, p);
    EXPECT_DOUBLE_EQ(w[1][0], 0.5);
    EXPECT_DOUBLE_EQ(w[1][1], 0.5);
}

TEST(Fidelity, AllMassOnTargetsIsOne) {
    auto p = make_partition(10, 5);
    std::vector<double> m(100, 0.0);
    for (std::size_t t = 0; t < 10; ++t) m[t * 10 + (t < 5 ? 0 : 5)] = 1.0;
    auto targets = anchor_targets(p);
    EXPECT_DOUBLE_EQ(pointer_fidelity(m, p, targets).unweighted, 1.0);
}

TEST(Fidelity, UniformOverTenWithTwoTargetsIsPointTwo) {
    auto p = make_partition(10, 5);
    std::vector<double> m(100, 0.1);
    std::vector<std::vector<std::size_t>> targets(10);
    for (std::size_t t = 0; t < 10; ++t) targets[t] = {t % 10, (t + 3) % 10};
    EXPECT_NEAR(pointer_fidelity(m, p, targets).unweighted, 0.2, 1e-12);
}

TEST(Fidelity, OnTargetPlusOffTargetIsOne) {
    std::mt19937 rng(8);
    auto p = make_partition(12, 5);
    auto m = random_causal_map(12, rng);
    auto targets = anchor_targets(p);
    double off = 0.0;
    for (std::size_t t = 0; t < 12; ++t) {
        for (std::size_t j = 0; j < 12; ++j) {
            if (std::find(targets[t].begin(), targets[t].end(), j) == targets[t].end()) {
                off += m[t * 12 + j];
            }
        }
    }
    EXPECT_NEAR(pointer_fidelity(m, p, targets).unweighted + off / 12.0, 1.0, 1e-12);
}

TEST(Fidelity, WeightedAggregatesAcrossBlocks) {
    // Every query puts all mass on the first anchor of its own block, whose
    // weight is 1: each of the 3 blocks contributes 1.
    auto p = make_partition(9, 3);
    for (auto& b : p.blocks) {
        b.anchors = {b.begin};
        b.weights = {1.0};
    }
    std::vector<double> m(81, 0.0);
    for (std::size_t t = 0; t < 9; ++t) m[t * 9 + t / 3 * 3] = 1.0;
    auto w = position_weights(p);
    auto f = pointer_fidelity(m, p, anchor_targets(p), std::span<const double>(w));
    EXPECT_DOUBLE_EQ(f.unweighted, 1.0);
    EXPECT_DOUBLE_EQ(f.weighted, 3.0);
}

TEST(Fidelity, EmptyTargetSetsAreSkipped) {
    set_log_level(LogLevel::quiet);
    auto p = make_partition(4, 2);
    std::vector<double> m(16, 0.25);
    std::vector<std::vector<std::size_t>> targets = {{0}, {}, {0, 1}, {}};
    auto f = pointer_fidelity(m, p, targets);
    EXPECT_EQ(f.skipped, 2u);
    EXPECT_EQ(f.queries, 2u);
    EXPECT_NEAR(f.unweighted, (0.25 + 0.5) / 2.0, 1e-12);
    set_log_level(LogLevel::warn);
}

TEST(CrossBlockMass, BlockDiagonalIsZeroUniformIsCounted) {
    auto p = make_partition(4, 2);
    std::vector<double> diag(16, 0.0);
    for (std::size_t t = 0; t < 4; ++t) diag[t * 4 + t] = 1.0;
    EXPECT_DOUBLE_EQ(cross_block_mass(diag, p), 0.0);
    std::vector<double> uni(16, 0.25);
    EXPECT_DOUBLE_EQ(cross_block_mass(uni, p), 0.5);
}

TEST(Perplexity, Oracles) {
    EXPECT_DOUBLE_EQ(perplexity(0.0), 1.0);
    EXPECT_NEAR(perplexity(1.54), 4.66, 0.01);
    EXPECT_NEAR(perplexity(std::log(10.0)), 10.0, 1e-12);
    EXPECT_THROW(perplexity(std::nan("")), InputError);
}

TEST(Perplexity, UniformModelGivesVocabularySize) {
    for (std::size_t v : {2u, 7u, 1000u}) {
        Tensor logits({3, v}, 0.25);
        std::vector<std::int32_t> targets = {0, 1, static_cast<std::int32_t>(v - 1)};
        const double loss = ops::cross_entropy(logits, targets).item();
        EXPECT_NEAR(perplexity(loss), static_cast<double>(v), 1e-9);
    }
}

TEST(Accuracy, Oracles) {
    std::vector<double> onehot = {1, 0, 0, 0, 1, 0};
    std::vector<std::int32_t> t = {0, 1};
    EXPECT_DOUBLE_EQ(accuracy(onehot, 3, t), 1.0);
    std::vector<double> anti = {0, 1, 1, 1, 0, 1};
    EXPECT_DOUBLE_EQ(accuracy(anti, 3, t), 0.0);
    // Rows 0 and 3 correct, row 1 wrong, row 2 tied (lowest index 0 != 2).
    std::vector<double> mixed = {3, 1, 0, 0, 1, 2, 5, 0, 5, 0, 0, 9};
    std::vector<std::int32_t> t4 = {0, 0, 2, 2};
    EXPECT_DOUBLE_EQ(accuracy(mixed, 3, t4), 0.5);
}

TEST(InterpStats, UniformCausalRecord) {
    const std::size_t n = 10;
    auto p = make_partition(n, 5);
    AttentionRecord rec(n, 1, 2);
    for (auto& m : rec.maps) {
        for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t j = 0; j <= t; ++j) m[t * n + j] = 1.0 / static_cast<double>(t + 1);
        }
    }
    std::vector<AttentionRecord> recs = {rec};
    auto s = interpretability_stats(recs, p);
    double h = 0.0, uw = 0.0;
    for (std::size_t t = 1; t < n; ++t) h += std::log2(static_cast<double>(t + 1));
    for (std::size_t t = 0; t < n; ++t) {
        const std::size_t b = t / 5 * 5;
        uw += static_cast<double>(t - b + 1) / static_cast<double>(t + 1);
    }
    EXPECT_NEAR(s.entropy_bits, h / 9.0, 1e-12);
    EXPECT_NEAR(s.entropy_ceiling_bits, h / 9.0, 1e-12);
    EXPECT_NEAR(s.unweighted_fidelity, uw / 10.0, 1e-12);
    EXPECT_NEAR(s.cross_block_mass, 1.0 - uw / 10.0, 1e-12);
    EXPECT_EQ(s.queries, n);
}

TEST(InterpStats, QueryBudgetTruncates) {
    const std::size_t n = 8;
    auto p = make_partition(n, 4);
    std::mt19937 rng(1);
    std::vector<AttentionRecord> recs(3, AttentionRecord(n, 1, 1));
    for (auto& r : recs) r.maps[0] = random_causal_map(n, rng);
    auto s = interpretability_stats(recs, p, 20);
    EXPECT_EQ(s.queries, 20u);
    auto again = interpretability_stats(recs, p, 20);
    EXPECT_EQ(s.entropy_bits, again.entropy_bits);
    EXPECT_EQ(s.weighted_fidelity, again.weighted_fidelity);
}

TEST(Csv, MetricsRoundTrip) {
    std::vector<MetricsRow> rows = {{1.0, "train", 5.36, 0.01, 5.4, 0.03, 0.91, 0.02},
                                    {0.0, "test", 7.18, 0.003, 1.07, 0.1, 0.31234567891, 0.7}};
    std::ostringstream a;
    write_metrics_csv(a, rows);
    std::istringstream in(a.str());
    auto back = read_metrics_csv(in);
    std::ostringstream b;
    write_metrics_csv(b, back);
    EXPECT_EQ(a.str(), b.str());
    EXPECT_EQ(a.str().substr(0, a.str().find('\n')), kMetricsHeader);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[1].split, "test");
}

TEST(Csv, PerfRoundTripAndHeaderCheck) {
    std::vector<PerfRow> rows = {{0.6, 1.537, 0.004, 0.847, 0.006, 4.65, 0.02, 6}};
    std::ostringstream a;
    write_perf_csv(a, rows);
    std::istringstream in(a.str());
    auto back = read_perf_csv(in);
    std::ostringstream b;
    write_perf_csv(b, back);
    EXPECT_EQ(a.str(), b.str());
    std::istringstream bad("lambda,oops\n1,2\n");
    EXPECT_THROW(read_perf_csv(bad), InputError);
}

TEST(MeanStd, SampleStandardDeviation) {
    std::vector<double> one = {3.0};
    EXPECT_EQ(mean_std(one).std, 0.0);
    std::vector<double> v = {1.0, 2.0, 3.0};
    EXPECT_DOUBLE_EQ(mean_std(v).mean, 2.0);
    EXPECT_DOUBLE_EQ(mean_std(v).std, 1.0);
}
