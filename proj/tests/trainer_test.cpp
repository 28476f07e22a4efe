#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "loctrans/adam.hpp"
#include "loctrans/error.hpp"
#include "loctrans/evaluate.hpp"
#include "loctrans/ops.hpp"
#include "loctrans/trainer.hpp"

using namespace loctrans;

namespace {

// Order-1 Markov chain with a few strongly preferred successors.
std::vector<std::int32_t> markov_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::int32_t> out(n);
    std::int32_t cur = 0;
    for (auto& t : out) {
        const auto r = rng() % 10;
        cur = r < 7 ? static_cast<std::int32_t>((cur * 3 + 1) % vocab)
                    : static_cast<std::int32_t>(rng() % vocab);
        t = cur;
    }
    return out;
}

ModelConfig tiny_model() {
    ModelConfig c;
    c.d_model = 8;
    c.d_head = 4;
    c.n_heads = 2;
    c.n_layers = 2;
    c.seq_len = 10;
    c.vocab_size = 12;
    c.block_window = 5;
    c.offset_rank = 2;
    c.block_margin = 2.0;
    return c;
}

TrainConfig tiny_train() {
    TrainConfig t;
    t.lr = 3e-3;
    t.batch_size = 4;
    t.max_epochs = 4;
    t.warmup_epochs = 1;
    t.calibration_sequences = 4;
    t.seed = 3;
    return t;
}

struct TinyCorpus {
    std::vector<std::int32_t> train = markov_tokens(1200, 12, 1);
    std::vector<std::int32_t> valid = markov_tokens(300, 12, 2);
};

Tensor param(std::vector<double> v) {
    const std::size_t n = v.size();
    Tensor t(Shape{n}, std::move(v));
    t.set_requires_grad(true);
    return t;
}

} // namespace

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    Tensor p = param({1.0, -2.0, 3.0});
    p.zero_grad();
    AdamState s;
    for (int i = 0; i < 5; ++i) adam_step({{"p", p}}, s, 0.1);
    EXPECT_EQ(p[0], 1.0);
    EXPECT_EQ(p[1], -2.0);
    EXPECT_EQ(p[2], 3.0);
    EXPECT_EQ(s.step, 5u);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstSign) {
    Tensor p = param({0.5, 0.5, 0.5});
    auto g = p.mutable_grad();
    g[0] = 3.0;
    g[1] = -0.01;
    g[2] = 1e-3;
    AdamState s;
    adam_step({{"p", p}}, s, 0.01);
    // m/(sqrt(v)+eps) = g/(|g|+eps) after bias correction.
    EXPECT_NEAR(p[0], 0.5 - 0.01, 1e-9);
    EXPECT_NEAR(p[1], 0.5 + 0.01, 1e-8);
    EXPECT_NEAR(p[2], 0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8), 1e-15);
}

TEST(Adam, ConstantGradientStepApproachesLearningRate) {
    Tensor p = param({0.0});
    AdamState s;
    double prev = 0.0, last_step = 0.0;
    for (int i = 0; i < 2000; ++i) {
        p.mutable_grad()[0] = 0.7;
        adam_step({{"p", p}}, s, 1e-3);
        last_step = prev - p[0];
        prev = p[0];
    }
    EXPECT_NEAR(last_step, 1e-3, 1e-9);
}

TEST(Adam, NonFiniteGradientNamesTheParameterAndChangesNothing) {
    Tensor a = param({1.0}), b = param({2.0});
    a.mutable_grad()[0] = 0.5;
    b.mutable_grad()[0] = std::nan("");
    AdamState s;
    try {
        adam_step({{"layer0.w_q", a}, {"layer1.w_k", b}}, s, 0.1);
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError& e) {
        EXPECT_NE(std::string(e.what()).find("layer1.w_k"), std::string::npos);
    }
    EXPECT_EQ(a[0], 1.0);
    EXPECT_EQ(s.step, 0u);
}

TEST(Adam, OneStepDecreasesQuadraticBelowStabilityBound) {
    // f(x) = 0.5 c x^2; the first Adam step moves lr against the sign, which
    // decreases f whenever lr < 2|x|.
    for (double x0 : {-3.0, -0.2, 0.05, 1.0, 4.0}) {
        const double bound = 2.0 * std::abs(x0);
        for (double frac : {0.01, 0.5, 0.99}) {
            Tensor x = param({x0});
            x.mutable_grad()[0] = 1.7 * x0;
            AdamState s;
            adam_step({{"x", x}}, s, frac * bound);
            EXPECT_LT(x[0] * x[0], x0 * x0) << x0 << " " << frac;
        }
    }
}

TEST(Adam, LearningRateScaleAppliesPerParameter) {
    Tensor a = param({0.0}), b = param({0.0});
    a.mutable_grad()[0] = 1.0;
    b.mutable_grad()[0] = 1.0;
    AdamState s;
    const std::vector<double> scale{1.0, 10.0};
    adam_step({{"a", a}, {"b", b}}, s, 1e-3, scale);
    EXPECT_NEAR(a[0], -1e-3, 1e-9);
    EXPECT_DOUBLE_EQ(b[0], 10.0 * a[0]);
    const std::vector<double> wrong{1.0};
    EXPECT_THROW(adam_step({{"a", a}, {"b", b}}, s, 1e-3, wrong), ShapeError);
}

TEST(ClipGradNorm, RescalesOnlyAboveThreshold) {
    Tensor a = param({0.0, 0.0}), b = param({0.0});
    a.mutable_grad()[0] = 3.0;
    a.mutable_grad()[1] = 0.0;
    b.mutable_grad()[0] = 4.0;
    const NamedTensors ps = {{"a", a}, {"b", b}};
    EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
    EXPECT_NEAR(grad_norm(ps), 1.0, 1e-15);
    EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
    EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 2.0), grad_norm(ps));
    EXPECT_NEAR(b.grad()[0], 0.8, 1e-15);
}

TEST(Train, DialOffMatchesReferenceLoopBitForBit) {
    const TinyCorpus corpus;
    const auto mc = tiny_model();
    auto part = make_partition(mc.seq_len, mc.block_window);
    TrainConfig tc = tiny_train();
    tc.max_epochs = 2; // 2 x 30 batches
    LocalityConfig lc;
    lc.lambda_dial = 0.0;
    lc.beta = 0.0;

    std::vector<double> trainer_losses;
    TrainHooks hooks;
    hooks.on_step = [&](const StepRecord& r) { trainer_losses.push_back(r.objective); };
    const auto result = train(mc, init_params(mc, 7), corpus.train, corpus.valid, part, lc, tc, hooks);

    // Reference: plain next-token training with no penalty code at all.
    ModelParams p = init_params(mc, 7);
    const auto trainable = p.trainable();
    AdamState adam;
    Batcher batcher(corpus.train, mc.seq_len, tc.batch_size, tc.seed);
    std::vector<double> ref_losses;
    for (std::size_t epoch = 0; epoch < tc.max_epochs; ++epoch) {
        batcher.start_epoch(epoch);
        Batch b;
        Tape tape;
        while (batcher.next(b)) {
            tape.clear();
            for (const auto& [n, t] : trainable) t.zero_grad();
            {
                TapeScope scope(tape);
                const Tensor loss = ops::cross_entropy(forward(p, mc, part, b.inputs, b.batch).logits, b.targets);
                ref_losses.push_back(loss.item());
                tape.backward(loss);
            }
            clip_grad_norm(trainable, tc.clip_norm);
            adam_step(trainable, adam, tc.lr);
        }
    }
    ASSERT_GE(ref_losses.size(), 50u);
    ASSERT_EQ(trainer_losses.size(), ref_losses.size());
    for (std::size_t i = 0; i < ref_losses.size(); ++i) EXPECT_EQ(trainer_losses[i], ref_losses[i]) << "step " << i;
    // The final epoch is the only post-warmup epoch, so it is the returned model.
    const auto named_ref = p.named();
    const auto named_run = result.best.params.named();
    for (std::size_t i = 0; i < named_ref.size(); ++i) {
        EXPECT_TRUE(std::equal(named_ref[i].second.values().begin(), named_ref[i].second.values().end(),
                               named_run[i].second.values().begin()))
            << named_ref[i].first;
    }
}

TEST(Train, LoggedObjectiveMatchesIndependentRecomputation) {
    const TinyCorpus corpus;
    const auto mc = tiny_model();
    auto part = make_partition(mc.seq_len, mc.block_window);
    TrainConfig tc = tiny_train();
    tc.max_epochs = 2;
    LocalityConfig lc;
    lc.lambda_dial = 0.7;
    lc.beta = 1e-2;
    lc.base = PenaltyTable(4, 2, 0.05);
    ModelParams params = init_params(mc, 2);
    ModelParams view = params; // shares storage with the parameters being trained
    std::size_t checked = 0;
    TrainHooks hooks;
    hooks.on_step = [&](const StepRecord& r) {
        if (r.epoch < 2) return;
        const double task = ops::cross_entropy(forward(view, mc, part, r.batch->inputs, r.batch->batch).logits,
                                               r.batch->targets)
                                .item();
        double pen = 0.0;
        for (std::size_t l = 0; l < 2; ++l)
            for (std::size_t h = 0; h < 2; ++h)
                for (std::size_t i = 0; i < 2; ++i) {
                    double sq = 0.0, sk = 0.0;
                    const auto& L = view.layers[l];
                    for (std::size_t t = 5 * i; t < 5 * i + 5; ++t)
                        for (std::size_t c = 0; c < mc.offset_rank; ++c) {
                            sq += L.r_q[h].at(t, c) * L.r_q[h].at(t, c);
                            sk += L.r_k[h].at(t, c) * L.r_k[h].at(t, c);
                        }
                    pen += 0.7 * 0.05 * (std::sqrt(sq) + std::sqrt(sk));
                }
        double vd = 0.0;
        for (const auto& L : view.layers)
            for (const auto& w : L.w_v)
                for (double x : w.values()) vd += x * x;
        EXPECT_NEAR(r.objective, task + pen + 1e-2 * vd, 1e-9);
        ++checked;
    };
    train(mc, params, corpus.train, corpus.valid, part, lc, tc, hooks);
    EXPECT_GT(checked, 20u);
}

TEST(Train, PenaltyPressureShrinksTheGroupPenalty) {
    const TinyCorpus corpus;
    const auto mc = tiny_model();
    auto part = make_partition(mc.seq_len, mc.block_window);
    TrainConfig tc = tiny_train();
    LocalityConfig lc;
    lc.lambda_dial = 1.0;
    lc.base = PenaltyTable(4, 2, 0.5);
    const ModelParams init = init_params(mc, 4);
    const double before = model_group_penalty(init, mc, part, lc.effective()).item();
    const auto r = train(mc, init.clone(), corpus.train, corpus.valid, part, lc, tc);
    const double after = model_group_penalty(r.best.params, mc, part, lc.effective()).item();
    EXPECT_LT(after, before);
}

// Under the proximal update the shrink per step is proportional to the
// penalty, so the dial orders the surviving table mass; the subgradient
// update inside Adam does not separate the same two dials nearly as much.
TEST(Train, ProximalUpdateOrdersTableMassByDial) {
    const TinyCorpus corpus;
    const auto mc = tiny_model();
    auto part = make_partition(mc.seq_len, mc.block_window);
    TrainConfig tc = tiny_train();
    tc.max_epochs = 3;
    tc.penalty_update = PenaltyUpdate::proximal;
    tc.penalty_step = 0.05;
    const PenaltyTable unit(4, 2, 1.0);
    auto mass = [&](double lambda) {
        LocalityConfig lc;
        lc.lambda_dial = lambda;
        lc.base = unit;
        const auto r = train(mc, init_params(mc, 6), corpus.train, corpus.valid, part, lc, tc);
        return model_group_penalty(r.best.params, mc, part, unit).item();
    };
    const double m0 = mass(0.0), m_half = mass(0.5), m1 = mass(1.0);
    EXPECT_GT(m0, m_half);
    EXPECT_GT(m_half, m1);
}

TEST(Train, ProximalUpdateNeedsOffsetTarget) {
    const TinyCorpus corpus;
    auto mc = tiny_model();
    mc.penalty_target = PenaltyTarget::projected;
    auto part = make_partition(mc.seq_len, mc.block_window);
    TrainConfig tc = tiny_train();
    tc.penalty_update = PenaltyUpdate::proximal;
    EXPECT_THROW(train(mc, init_params(mc, 1), corpus.train, corpus.valid, part, LocalityConfig{}, tc),
                 ParameterError);
    nlohmann::json j = tc;
    EXPECT_EQ(j.at("penalty_update"), "proximal");
    j["penalty_update"] = "bogus";
    EXPECT_THROW(j.get<TrainConfig>(), ParameterError);
}

TEST(Train, BestCheckpointIsNeverWorseThanAnObservedEpoch) {
    const TinyCorpus corpus;
    const auto mc = tiny_model();
    auto part = make_partition(mc.seq_len, mc.block_window);
    TrainConfig tc = tiny_train();
    tc.max_epochs = 8;
    tc.patience = 2;
    tc.ppl_gate = 1e9; // armed from the first epoch
    tc.lr = 2e-2;
    LocalityConfig lc;
    const auto r = train(mc, init_params(mc, 5), corpus.train, corpus.valid, part, lc, tc);
    double best_seen = std::numeric_limits<double>::infinity();
    for (const auto& e : r.history) {
        if (e.epoch > tc.warmup_epochs) best_seen = std::min(best_seen, e.val_ppl);
    }
    EXPECT_DOUBLE_EQ(r.best.meta.at("val_ppl").get<double>(), best_seen);
    const double evaluated = evaluate_split(r.best.params, mc, r.best.partition, corpus.valid, tc.batch_size).perplexity;
    EXPECT_NEAR(evaluated, best_seen, 1e-12);
    if (r.early_stopped) EXPECT_GE(r.epochs_run - r.best_epoch, tc.patience);
}

TEST(Train, GateKeepsPatienceDisarmed) {
    const TinyCorpus corpus;
    const auto mc = tiny_model();
    auto part = make_partition(mc.seq_len, mc.block_window);
    TrainConfig tc = tiny_train();
    tc.max_epochs = 5;
    tc.patience = 1;
    tc.ppl_gate = 1.0; // unreachable
    const auto r = train(mc, init_params(mc, 5), corpus.train, corpus.valid, part, LocalityConfig{}, tc);
    EXPECT_FALSE(r.early_stopped);
    EXPECT_EQ(r.epochs_run, 5u);
}

TEST(Train, DeterministicHistoryAndArtifacts) {
    const TinyCorpus corpus;
    const auto mc = tiny_model();
    auto part = make_partition(mc.seq_len, mc.block_window);
    TrainConfig tc = tiny_train();
    LocalityConfig lc;
    lc.lambda_dial = 0.6;
    auto dir = std::filesystem::temp_directory_path() / "loctrans_trainer_test";
    std::filesystem::create_directories(dir);
    auto run = [&](const std::string& tag) {
        TrainHooks h;
        h.history_path = dir / (tag + ".jsonl");
        h.checkpoint_path = dir / (tag + ".ckpt");
        return train(mc, init_params(mc, 9), corpus.train, corpus.valid, part, lc, tc, h);
    };
    const auto a = run("a");
    const auto b = run("b");
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].val_loss, b.history[i].val_loss);
    auto slurp = [](const std::filesystem::path& f) {
        std::ifstream in(f, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
    EXPECT_EQ(slurp(dir / "a.jsonl"), slurp(dir / "b.jsonl"));

    std::ifstream hist(dir / "a.jsonl");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(hist, line)) {
        const auto j = nlohmann::json::parse(line);
        for (const char* key : {"epoch", "train_loss", "val_loss", "val_ppl", "penalty_value", "lambda"}) {
            EXPECT_TRUE(j.contains(key)) << key;
        }
        ++lines;
    }
    EXPECT_EQ(lines, a.history.size());
    ASSERT_TRUE(a.calibration.has_value());
    EXPECT_EQ(a.calibration->base.heads, 4u);
    EXPECT_GT(a.effective.max(), 0.0);
    EXPECT_NEAR(a.effective.max(), 0.6 * a.calibration->base.max(), 1e-15);
}

TEST(Train, DivergenceAbortsWithLastGoodCheckpoint) {
    const TinyCorpus corpus;
    auto mc = tiny_model();
    auto part = make_partition(mc.seq_len, mc.block_window);
    TrainConfig tc = tiny_train();
    tc.lr = 1e4;
    tc.max_epochs = 6;
    auto path = std::filesystem::temp_directory_path() / "loctrans_diverged.ckpt";
    std::filesystem::remove(path);
    TrainHooks h;
    h.checkpoint_path = path;
    EXPECT_THROW(train(mc, init_params(mc, 1), corpus.train, corpus.valid, part, LocalityConfig{}, tc, h),
                 DivergenceError);
    EXPECT_TRUE(std::filesystem::exists(path));
    EXPECT_NO_THROW(load_checkpoint(path));
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    c.lr = 0.0;
    EXPECT_THROW(c.validate(), ParameterError);
    c = TrainConfig{};
    c.max_epochs = 0;
    EXPECT_THROW(c.validate(), ParameterError);
    c = TrainConfig{};
    c.anchor_k_min = 6;
    EXPECT_THROW(c.validate(), ParameterError);
    nlohmann::json j = TrainConfig{};
    EXPECT_EQ(j.get<TrainConfig>().patience, 7u);
    EXPECT_EQ(j.at("lr").get<double>(), 3e-4);
}

TEST(RunSeeds, SingleSeedIsFlaggedWithZeroStd) {
    const std::vector<std::uint64_t> seeds = {4};
    auto agg = run_seeds(seeds, [](std::uint64_t s) {
        SeedRun r;
        r.loss = 1.5 + static_cast<double>(s);
        r.perplexity = std::exp(r.loss);
        return r;
    });
    EXPECT_TRUE(agg.single_seed);
    EXPECT_EQ(agg.loss.std, 0.0);
    EXPECT_EQ(agg.loss.mean, 5.5);
}

TEST(RunSeeds, RepeatedSeedsGiveZeroSpreadAndFailuresMarkPartial) {
    const TinyCorpus corpus;
    const auto mc = tiny_model();
    auto part = make_partition(mc.seq_len, mc.block_window);
    TrainConfig tc = tiny_train();
    tc.max_epochs = 2;
    auto one = [&](std::uint64_t seed) {
        TrainConfig t = tc;
        t.seed = seed;
        const auto r = train(mc, init_params(mc, seed), corpus.train, corpus.valid, part, LocalityConfig{}, t);
        const auto e = evaluate_split(r.best.params, mc, r.best.partition, corpus.valid, 4);
        return SeedRun{seed, true, "", e.loss, e.accuracy, e.perplexity, static_cast<double>(r.epochs_run)};
    };
    const std::vector<std::uint64_t> same = {3, 3};
    auto agg = run_seeds(same, one);
    EXPECT_EQ(agg.runs[0].loss, agg.runs[1].loss);
    EXPECT_EQ(agg.loss.std, 0.0);
    EXPECT_FALSE(agg.partial);

    const std::vector<std::uint64_t> mixed = {1, 2, 3};
    auto failing = run_seeds(mixed, [&](std::uint64_t s) {
        if (s == 2) throw DivergenceError("boom");
        return one(s);
    });
    EXPECT_TRUE(failing.partial);
    EXPECT_FALSE(failing.runs[1].ok);
    EXPECT_EQ(failing.runs[1].error, "boom");
    EXPECT_GT(failing.loss.std, 0.0);
    EXPECT_THROW(run_seeds(std::span<const std::uint64_t>{}, one), ParameterError);
}
