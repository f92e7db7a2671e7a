#include <gtest/gtest.h>

#include <sstream>

#include "nightfuse/bench.hpp"

using namespace nightfuse;

namespace {

Checkpoint tiny_ck(Objective o, std::uint64_t seed)
{
    NetConfig c;
    c.base_width = 8;
    c.t_embed_dim = 32;
    c.blocks_per_level = 1;
    return init(c, seed, o, {}, false);
}

Grid cond_grid(std::uint32_t w, std::uint32_t h)
{
    std::vector<float> v(static_cast<std::size_t>(w) * h);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>((i * 5) % 64);
    return Grid(w, h, Units::dn, v);
}

} // namespace

TEST(TimeMethod, CountsMatchLedgerAndOutputMatchesFuse)
{
    const Checkpoint ck = tiny_ck(Objective::noise, 1);
    const Grid cond = cond_grid(64, 32);
    const SamplerSpec spec{Method::pf_heun, 3, 5};
    const auto run = time_method(ck, cond, spec, PrecisionMode::full32, &cond);
    EXPECT_EQ(run.record.net_evals, 2 * 6);
    EXPECT_EQ(run.record.steps, 3);
    EXPECT_GT(run.record.wall_seconds, 0.0);
    EXPECT_FALSE(run.record.emulated);
    EXPECT_TRUE(run.output == fuse_full(cond, ck, spec));
    EXPECT_NEAR(run.record.ssim, evaluate_pair(run.output, cond).ssim, 1e-12);

    const auto half = time_method(ck, cond, {Method::edm_heun, 3, 5}, PrecisionMode::half16);
    EXPECT_EQ(half.record.net_evals, 2 * 5);
    EXPECT_TRUE(half.record.emulated);
}

TEST(PrecisionReport, RowsAndDeltas)
{
    const Checkpoint n = tiny_ck(Objective::noise, 2), v = tiny_ck(Objective::velocity, 3);
    const Grid cond = cond_grid(32, 32);
    PrecisionSweep sweep;
    sweep.specs = {{Method::ddim, 2, 1}, {Method::fm_euler, 2, 1}, {Method::ddim, 3, 1}};
    const auto rows = precision_report(n, v, cond, cond, sweep);
    // ddim: full32, half16, int8; fm_euler: full32, half16; second ddim: full32, half16.
    ASSERT_EQ(rows.size(), 7u);
    EXPECT_EQ(rows[0].precision, PrecisionMode::full32);
    EXPECT_EQ(rows[0].ssim_delta, 0.0);
    EXPECT_EQ(rows[2].precision, PrecisionMode::weights_int8);
    EXPECT_EQ(rows[3].method, Method::fm_euler);
    EXPECT_EQ(rows[6].precision, PrecisionMode::half16);
    for (const auto& r : rows) EXPECT_LT(std::abs(r.ssim_delta), 0.05);

    sweep.precisions = {PrecisionMode::half16};
    sweep.int8_method.reset();
    EXPECT_EQ(precision_report(n, v, cond, cond, sweep).size(), 3u);
}

TEST(BenchCsv, Layout)
{
    BenchRecord r;
    r.method = Method::lcm;
    r.precision = PrecisionMode::half16;
    r.steps = 4;
    r.net_evals = 400;
    r.wall_seconds = 1.5;
    r.ssim_delta = -0.002;
    r.emulated = true;
    std::ostringstream a, b;
    write_bench_csv(a, {r});
    write_bench_csv(b, {r}, true);
    EXPECT_EQ(a.str(), "method,precision,steps,net_evals,wall_seconds,ssim_delta,emulated\n"
                       "lcm,half16,4,400,1.5,-0.002,true\n");
    EXPECT_EQ(b.str().substr(b.str().find('\n') + 1), "lcm,half16,4,400,-,-0.002,true\n");
}
