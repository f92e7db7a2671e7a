#include <gtest/gtest.h>

#include <cmath>

#include "nightfuse/model.hpp"
#include "nightfuse/train.hpp"

using namespace nightfuse;

namespace {

NetConfig tiny()
{
    NetConfig c;
    c.base_width = 8;
    c.t_embed_dim = 32;
    c.blocks_per_level = 1;
    return c;
}

std::vector<PatchPair> random_pairs(std::size_t n, std::uint64_t seed)
{
    Rng rng(seed);
    std::vector<PatchPair> out(n);
    for (std::size_t k = 0; k < n; ++k) {
        out[k].cond = Patch(1, 32, 32);
        out[k].target = Patch(1, 32, 32);
        for (auto& v : out[k].cond.data) v = static_cast<float>(2 * rng.uniform() - 1);
        for (auto& v : out[k].target.data) v = static_cast<float>(2 * rng.uniform() - 1);
        out[k].row0 = static_cast<std::uint32_t>(k);
    }
    return out;
}

// Scalar toy problem: params = {w}, loss = mean over pairs of (w - target mean)^2.
LossFn toy_loss()
{
    return [](const ParamStore<float>& p, ParamStore<float>* g, std::span<const PatchPair> b, Rng&) {
        double target = 0;
        for (const auto& pp : b) target += pp.target[0];
        target /= static_cast<double>(b.size());
        const double d = p[0][0] - target;
        if (g) (*g)[0][0] += static_cast<float>(2 * d);
        return d * d;
    };
}

} // namespace

TEST(LearningRate, CosineExamples)
{
    TrainConfig c;
    c.max_epochs = 1500;
    EXPECT_DOUBLE_EQ(lr_at(0, c), 1e-3);
    EXPECT_NEAR(lr_at(1500, c), 1e-6, 1e-18);
    EXPECT_NEAR(lr_at(750, c), 0.5 * (1e-3 + 1e-6), 1e-15);
    for (int e = 1; e <= 1500; ++e) EXPECT_LE(lr_at(e, c), lr_at(e - 1, c));
    EXPECT_THROW(lr_at(-1, c), ParameterError);
    EXPECT_THROW(lr_at(1501, c), ParameterError);
}

TEST(TrainConfig, Validation)
{
    TrainConfig c;
    c.lr_min = c.lr0;
    EXPECT_THROW(c.validate(), ParameterError);
    c = {};
    c.patience = 0;
    EXPECT_THROW(c.validate(), ParameterError);
    c = {};
    c.batch = 0;
    EXPECT_THROW(c.validate(), ParameterError);
}

TEST(Objectives, DiffusionExamplesFollowForwardProcess)
{
    const auto pairs = random_pairs(4, 1);
    const NoiseSchedule s = make_linear();
    Rng rng(2);
    const auto ex = draw_diffusion_examples(pairs, s, rng);
    ASSERT_EQ(ex.size(), 4u);
    for (std::size_t k = 0; k < ex.size(); ++k) {
        const int t = static_cast<int>(ex[k].time);
        EXPECT_EQ(ex[k].time, t);
        EXPECT_GE(t, 1);
        EXPECT_LE(t, 1000);
        const double ab = s.alpha_bar_at(t);
        for (std::size_t i = 0; i < ex[k].input.size(); i += 97)
            EXPECT_NEAR(ex[k].input[i], std::sqrt(ab) * pairs[k].target[i] + std::sqrt(1 - ab) * ex[k].target[i], 1e-5);
        EXPECT_EQ(ex[k].cond.data, pairs[k].cond.data);
        EXPECT_EQ(ex[k].skip, noise_skip(s, t));
    }
}

TEST(Objectives, FlowExamplesFollowStraightPath)
{
    const auto pairs = random_pairs(3, 3);
    Rng rng(4);
    const auto ex = draw_flow_examples(pairs, rng);
    for (std::size_t k = 0; k < ex.size(); ++k) {
        const double t = ex[k].time / 1000.0;
        EXPECT_GE(t, 0.0);
        EXPECT_LT(t, 1.0);
        for (std::size_t i = 0; i < ex[k].input.size(); i += 89) {
            const double eps = ex[k].target[i] + pairs[k].target[i];
            EXPECT_NEAR(ex[k].input[i], (1 - t) * pairs[k].target[i] + t * eps, 1e-5);
        }
    }
}

// Monte Carlo check of the noise objective: the oracle that returns the true
// epsilon scores 0, the zero predictor scores E[eps^2] = 1.
TEST(Objectives, OracleAndZeroPredictorLoss)
{
    const auto pairs = random_pairs(10, 5);
    Rng rng(6);
    const auto ex = draw_diffusion_examples(pairs, make_linear(), rng);
    const std::span<const TrainingExample> s(ex);
    EXPECT_EQ(regression_loss(s, [](const TrainingExample& e) { return e.target; }), 0.0);
    const double zero = regression_loss(s, [](const TrainingExample& e) { return Patch(1, e.target.h, e.target.w); });
    EXPECT_GE(zero, 0.97);
    EXPECT_LE(zero, 1.03);

    const auto fx = draw_flow_examples(pairs, rng);
    const std::span<const TrainingExample> f(fx);
    // Velocity eps - x0 with x0 ~ U(-1,1): E = 1 + 1/3.
    const double fz = regression_loss(f, [](const TrainingExample& e) { return Patch(1, e.target.h, e.target.w); });
    EXPECT_NEAR(fz, 4.0 / 3.0, 0.05);
}

TEST(Objectives, NetworkLossMatchesRegressionLoss)
{
    const Checkpoint ck = init(tiny(), 7, Objective::noise, {}, false);
    const UNet<float> net(UNetLayout::build(ck.net));
    const auto params = materialize<float>(ck);
    const auto pairs = random_pairs(2, 8);
    Rng rng(9);
    const auto ex = draw_diffusion_examples(pairs, make_linear(), rng);
    const double a = network_loss<float>(net, params, nullptr, ex);
    const PreparedModel m(ck, PrecisionMode::full32);
    const double b = regression_loss(std::span<const TrainingExample>(ex),
                                     [&](const TrainingExample& e) { return m.predict(e.input, e.cond, e.time); });
    EXPECT_NEAR(a, b, 1e-6 * b);
    EXPECT_THROW(network_loss<float>(net, params, nullptr, {}), ParameterError);
}

TEST(Adam, ZeroLearningRateLeavesParamsUnchanged)
{
    ParamStore<float> p{{1.0f, -2.0f, 3.5f}};
    const ParamStore<float> before = p;
    Adam opt(p, 0.9, 0.999, 1e-8);
    for (int i = 0; i < 5; ++i) opt.step(p, {{0.3f, -1.0f, 7.0f}}, 0.0);
    EXPECT_EQ(p, before);
}

TEST(Adam, FirstStepMovesByLearningRate)
{
    ParamStore<float> p{{0.0f, 0.0f}};
    Adam opt(p, 0.9, 0.999, 1e-8);
    opt.step(p, {{4.0f, -0.01f}}, 0.1);
    EXPECT_NEAR(p[0][0], -0.1, 1e-6);
    EXPECT_NEAR(p[0][1], 0.1, 1e-4);
}

TEST(TrainLoop, EarlyStopsOnFlatValidation)
{
    DatasetSplit d{random_pairs(6, 10), random_pairs(2, 11)};
    TrainConfig c;
    c.max_epochs = 100;
    c.patience = 7;
    c.batch = 4;
    const LossFn flat = [](const ParamStore<float>&, ParamStore<float>*, std::span<const PatchPair>, Rng&) {
        return 1.0;
    };
    const auto r = train_loop({{0.0f}}, flat, d, c);
    EXPECT_EQ(r.history.epochs.size(), 8u);
    EXPECT_EQ(r.history.best_epoch, 0);
}

TEST(TrainLoop, KeepsBestCheckpointAndIsDeterministic)
{
    DatasetSplit d{random_pairs(8, 12), random_pairs(3, 13)};
    TrainConfig c;
    c.max_epochs = 60;
    c.patience = 60;
    c.batch = 3;
    c.lr0 = 0.05;
    std::vector<EpochRecord> seen;
    const auto r = train_loop({{2.0f}}, toy_loss(), d, c, [&](const EpochRecord& e) { seen.push_back(e); });
    ASSERT_EQ(seen.size(), r.history.epochs.size());
    double best = 1e300;
    int arg = -1;
    for (const auto& e : r.history.epochs) {
        if (e.val_loss < best) {
            best = e.val_loss;
            arg = e.epoch;
        }
        EXPECT_DOUBLE_EQ(e.lr, lr_at(e.epoch, c));
    }
    EXPECT_EQ(r.history.best_epoch, arg);
    EXPECT_EQ(r.history.best_val_loss, best);
    EXPECT_LT(best, r.history.epochs.front().val_loss);

    const auto again = train_loop({{2.0f}}, toy_loss(), d, c);
    EXPECT_EQ(again.best_params, r.best_params);
    EXPECT_EQ(again.history.epochs.size(), r.history.epochs.size());
    EXPECT_THROW(train_loop({{0.0f}}, toy_loss(), {d.train, {}}, c), ParameterError);
}

TEST(Train, NonFiniteLossNamesEpoch)
{
    DatasetSplit d{random_pairs(2, 14), random_pairs(1, 15)};
    TrainConfig c;
    c.max_epochs = 5;
    c.patience = 5;
    const LossFn bad = [](const ParamStore<float>&, ParamStore<float>*, std::span<const PatchPair>, Rng&) {
        return std::nan("");
    };
    try {
        train_loop({{0.0f}}, bad, d, c);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos);
    }
}

TEST(Train, RealNetworkShortRunDeterministic)
{
    DatasetSplit d{random_pairs(4, 16), random_pairs(2, 17)};
    TrainConfig c;
    c.max_epochs = 3;
    c.patience = 3;
    c.batch = 2;
    c.seed = 5;
    const Checkpoint start = init(tiny(), 18);
    const auto a = train(start, d, make_linear(), c);
    const auto b = train(start, d, make_linear(), c);
    EXPECT_EQ(a.history.epochs.size(), 3u);
    EXPECT_EQ(a.best.meta.best_epoch, a.history.best_epoch);
    EXPECT_EQ(a.best.meta.seed, 5u);
    for (std::size_t i = 0; i < a.best.params.size(); ++i) EXPECT_EQ(a.best.params[i].to_float(), b.best.params[i].to_float());
    c.objective = Objective::velocity;
    EXPECT_THROW(train(start, d, make_linear(), c), ParameterError);
}

// The network can fit a fixed pair of examples: Adam drives the loss well
// below its starting value.
TEST(Train, OverfitsFixedExamples)
{
    const Checkpoint ck = init(tiny(), 19);
    const UNet<float> net(UNetLayout::build(ck.net));
    auto params = materialize<float>(ck);
    const auto pairs = random_pairs(2, 20);
    Rng rng(21);
    auto ex = draw_diffusion_examples(pairs, make_linear(), rng);
    for (auto& e : ex) {
        e.time = 500; // same time for both
        e.skip = noise_skip(make_linear(), 500);
    }
    ParamStore<float> grads;
    for (const auto& p : params) grads.emplace_back(p.size(), 0.0f);
    Adam opt(params, 0.9, 0.999, 1e-8);
    const double first = network_loss<float>(net, params, nullptr, ex);
    double last = first;
    for (int step = 0; step < 2000 && last >= 0.01; ++step) {
        for (auto& g : grads) std::fill(g.begin(), g.end(), 0.0f);
        last = network_loss<float>(net, params, &grads, ex);
        opt.step(params, grads, 3e-3);
    }
    EXPECT_LT(last, 0.01) << "first " << first;
}
