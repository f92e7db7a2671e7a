#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <memory>
#include <optional>
#include <ostream>
#include <vector>

#include "nightfuse/evaluate.hpp"
#include "nightfuse/sample.hpp"

namespace nightfuse {

/// Network evaluations one sampler run performs.
inline long count_evals(const SamplerSpec& spec, int T)
{
    validate_spec(spec, T);
    const long n = resolved_steps(spec, T);
    switch (spec.method) {
    case Method::ddim:
    case Method::lcm:
    case Method::pf_euler:
    case Method::fm_euler: return n;
    case Method::ancestral: return T;
    case Method::edm_heun: return 2 * n - 1;
    case Method::pf_heun: return 2 * n;
    }
    throw ParameterError("count_evals: unknown method");
}

/// Wraps a predictor so every call bumps `counter`.
inline Predictor counting(Predictor inner, std::shared_ptr<std::atomic<long>> counter)
{
    return {inner.objective, [inner = std::move(inner), counter](const Patch& x, const Patch& c, double t) {
                counter->fetch_add(1, std::memory_order_relaxed);
                return inner(x, c, t);
            }};
}

struct BenchRecord {
    Method method = Method::ddim;
    PrecisionMode precision = PrecisionMode::full32;
    int steps = 0;
    long net_evals = 0;
    double wall_seconds = 0.0;
    double ssim = 0.0; // against truth, when given
    double ssim_delta = 0.0;
    bool emulated = false;
};

struct TimedRun {
    BenchRecord record;
    Grid output;
};

struct BenchOptions {
    int threads = 1; // >1 overlaps tiles; timings then include contention
};

/// Untimed single-tile warmup, then one timed fuse_full. The measured call
/// count must equal count_evals x tiles.
inline TimedRun time_method(const Checkpoint& ck, const Grid& cond, const SamplerSpec& spec, PrecisionMode precision,
                            const Grid* truth = nullptr, BenchOptions opt = {})
{
    auto model = std::make_shared<const PreparedModel>(ck, precision);
    const NoiseSchedule sched = make_schedule(ck.schedule);
    const int p = ck.net.patch;
    const long tiles = static_cast<long>(cond.width() / p) * static_cast<long>(cond.height() / p);

    const Predictor base = model->predictor(model);
    {
        const Grid tile = crop(cond, static_cast<std::uint32_t>(p), static_cast<std::uint32_t>(p));
        fuse_full(tile, base, sched, spec, {p, 1});
    }
    auto counter = std::make_shared<std::atomic<long>>(0);
    const Predictor counted = counting(base, counter);
    const auto t0 = std::chrono::steady_clock::now();
    Grid out = fuse_full(cond, counted, sched, spec, {p, opt.threads});
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    BenchRecord r;
    r.method = spec.method;
    r.precision = precision;
    r.steps = resolved_steps(spec, sched.T);
    r.net_evals = count_evals(spec, sched.T) * tiles;
    if (counter->load() != r.net_evals)
        throw VerificationError("time_method: measured " + std::to_string(counter->load()) +
                                " network calls, ledger says " + std::to_string(r.net_evals));
    r.wall_seconds = std::max(secs, 1e-9);
    r.emulated = model->emulated();
    if (truth) r.ssim = evaluate_pair(out, *truth).ssim;
    return {r, std::move(out)};
}

struct PrecisionSweep {
    std::vector<SamplerSpec> specs;
    std::vector<PrecisionMode> precisions{PrecisionMode::full32, PrecisionMode::half16};
    std::optional<Method> int8_method = Method::ddim; // first spec with this method also runs weights_int8
};

/// Each spec x precision, plus weights_int8 for the designated method.
/// ssim_delta is the SSIM-vs-truth change relative to the full32 run of the
/// same spec on identical seeds.
inline std::vector<BenchRecord> precision_report(const Checkpoint& noise_ck, const Checkpoint& velocity_ck,
                                                 const Grid& cond, const Grid& truth, const PrecisionSweep& sweep,
                                                 BenchOptions opt = {})
{
    std::vector<BenchRecord> rows;
    bool int8_done = false;
    const bool keep_full =
        std::find(sweep.precisions.begin(), sweep.precisions.end(), PrecisionMode::full32) != sweep.precisions.end();
    for (const SamplerSpec& spec : sweep.specs) {
        const Checkpoint& ck = required_objective(spec.method) == Objective::noise ? noise_ck : velocity_ck;
        std::vector<PrecisionMode> modes;
        for (PrecisionMode pm : sweep.precisions)
            if (pm != PrecisionMode::full32) modes.push_back(pm);
        if (!int8_done && sweep.int8_method && *sweep.int8_method == spec.method) {
            modes.push_back(PrecisionMode::weights_int8);
            int8_done = true;
        }

        const BenchRecord ref = time_method(ck, cond, spec, PrecisionMode::full32, &truth, opt).record;
        if (keep_full) rows.push_back(ref);
        for (PrecisionMode pm : modes) {
            BenchRecord r = time_method(ck, cond, spec, pm, &truth, opt).record;
            r.ssim_delta = r.ssim - ref.ssim;
            rows.push_back(r);
        }
    }
    return rows;
}

inline void write_bench_csv(std::ostream& os, const std::vector<BenchRecord>& rows, bool deterministic = false)
{
    os << "method,precision,steps,net_evals,wall_seconds,ssim_delta,emulated\n";
    for (const auto& r : rows)
        os << method_name(r.method) << ',' << precision_name(r.precision) << ',' << r.steps << ',' << r.net_evals << ','
           << (deterministic ? std::string("-") : format_number(r.wall_seconds)) << ',' << format_number(r.ssim_delta)
           << ',' << (r.emulated ? "true" : "false") << '\n';
}

} // namespace nightfuse
