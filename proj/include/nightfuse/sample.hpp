#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "nightfuse/model.hpp"
#include "nightfuse/raster.hpp"
#include "nightfuse/rng.hpp"
#include "nightfuse/schedule.hpp"

namespace nightfuse {

enum class Method { ddim, ancestral, lcm, edm_heun, pf_euler, pf_heun, fm_euler };

inline std::string method_name(Method m)
{
    switch (m) {
    case Method::ddim: return "ddim";
    case Method::ancestral: return "ancestral";
    case Method::lcm: return "lcm";
    case Method::edm_heun: return "edm_heun";
    case Method::pf_euler: return "pf_euler";
    case Method::pf_heun: return "pf_heun";
    case Method::fm_euler: return "fm_euler";
    }
    return "?";
}

inline Method parse_method(const std::string& s)
{
    for (Method m : {Method::ddim, Method::ancestral, Method::lcm, Method::edm_heun, Method::pf_euler, Method::pf_heun,
                     Method::fm_euler})
        if (method_name(m) == s) return m;
    throw ParameterError("unknown sampling method '" + s + "'");
}

inline Objective required_objective(Method m) { return m == Method::fm_euler ? Objective::velocity : Objective::noise; }

/// `steps == 0` selects the method default (ancestral: T, lcm: 4, others: 30).
struct SamplerSpec {
    Method method = Method::ddim;
    int steps = 0;
    std::uint64_t seed = 0;
    double eta = 0.0;
    double karras_rho = 7.0;
    double karras_sigma_min = 0.002;
    double karras_sigma_max = 80.0;
};

inline int default_steps(Method m, int T)
{
    switch (m) {
    case Method::ancestral: return T;
    case Method::lcm: return 4;
    default: return 30;
    }
}

inline int resolved_steps(const SamplerSpec& spec, int T) { return spec.steps > 0 ? spec.steps : default_steps(spec.method, T); }

inline void validate_spec(const SamplerSpec& spec, int T)
{
    if (spec.steps < 0) throw SpecError("steps must be >= 1");
    if (spec.eta < 0.0 || spec.eta > 1.0) throw SpecError("eta must lie in [0,1]");
    const int steps = resolved_steps(spec, T);
    if (spec.method == Method::ancestral && steps != T) throw SpecError("ancestral sampling runs all T steps");
    if ((spec.method == Method::ddim || spec.method == Method::lcm) && steps > T)
        throw SpecError("steps exceed the schedule length");
    if (spec.method == Method::edm_heun && steps < 2) throw SpecError("edm_heun needs at least 2 noise levels");
}

namespace detail {

inline Patch noise_patch(Rng& rng, int size)
{
    Patch x(1, size, size);
    rng.fill_normal(x.data);
    return x;
}

// out = a*x + b*y, elementwise.
inline Patch lincomb(double a, const Patch& x, double b, const Patch& y)
{
    Patch out(x.c, x.h, x.w);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<float>(a * static_cast<double>(x[i]) + b * static_cast<double>(y[i]));
    return out;
}

inline Patch clamped(Patch x)
{
    for (auto& v : x.data) v = std::clamp(v, -1.0f, 1.0f);
    return x;
}

inline void require_objective(const Predictor& model, Method m)
{
    if (model.objective != required_objective(m))
        throw SpecError(method_name(m) + " requires a " + objective_name(required_objective(m)) +
                        " checkpoint, got " + objective_name(model.objective));
}

inline int patch_size(const Patch& cond) { return cond.h; }

} // namespace detail

/// Deterministic (eta = 0) or partially stochastic DDIM over an evenly
/// strided timestep subsequence. One network call per step.
inline Patch ddim(const Predictor& model, const Patch& cond, const NoiseSchedule& sched, const SamplerSpec& spec)
{
    detail::require_objective(model, Method::ddim);
    validate_spec(spec, sched.T);
    Rng rng(spec.seed);
    Patch x = detail::noise_patch(rng, detail::patch_size(cond));
    const auto taus = subset_timesteps(sched.T, resolved_steps(spec, sched.T));
    for (std::size_t i = 0; i < taus.size(); ++i) {
        const double ab = sched.alpha_bar_at(taus[i]);
        const Patch eps = model(x, cond, taus[i]);
        const Patch x0 = detail::lincomb(1.0 / std::sqrt(ab), x, -std::sqrt(1.0 - ab) / std::sqrt(ab), eps);
        if (i + 1 == taus.size()) return detail::clamped(x0);
        const double ab_next = sched.alpha_bar_at(taus[i + 1]);
        const double sigma =
            spec.eta * std::sqrt((1.0 - ab_next) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_next);
        x = detail::lincomb(std::sqrt(ab_next), x0, std::sqrt(std::max(0.0, 1.0 - ab_next - sigma * sigma)), eps);
        if (sigma > 0.0)
            for (auto& v : x.data) v += static_cast<float>(sigma * rng.normal());
    }
    return detail::clamped(x);
}

/// DDPM ancestral sampling over every timestep; the t = 1 step adds no noise.
inline Patch ancestral(const Predictor& model, const Patch& cond, const NoiseSchedule& sched, const SamplerSpec& spec)
{
    detail::require_objective(model, Method::ancestral);
    validate_spec(spec, sched.T);
    Rng rng(spec.seed);
    Patch x = detail::noise_patch(rng, detail::patch_size(cond));
    for (int t = sched.T; t >= 1; --t) {
        const double beta = sched.beta_at(t);
        const double ab = sched.alpha_bar_at(t);
        const Patch eps = model(x, cond, t);
        x = detail::lincomb(1.0 / std::sqrt(sched.alpha_at(t)), x,
                            -beta / (std::sqrt(sched.alpha_at(t)) * std::sqrt(1.0 - ab)), eps);
        if (t > 1) {
            const double var = (1.0 - sched.alpha_bar_at(t - 1)) / (1.0 - ab) * beta;
            const double sd = std::sqrt(var);
            for (auto& v : x.data) v += static_cast<float>(sd * rng.normal());
        }
    }
    return detail::clamped(x);
}

/// Few-step consistency-style sampling: predict x0, clamp, re-noise to the
/// next timestep with fresh noise, repeat; returns the last clamped x0.
inline Patch lcm(const Predictor& model, const Patch& cond, const NoiseSchedule& sched, const SamplerSpec& spec)
{
    detail::require_objective(model, Method::lcm);
    validate_spec(spec, sched.T);
    Rng rng(spec.seed);
    Patch x = detail::noise_patch(rng, detail::patch_size(cond));
    const auto taus = subset_timesteps(sched.T, resolved_steps(spec, sched.T));
    Patch x0;
    for (std::size_t i = 0; i < taus.size(); ++i) {
        const double ab = sched.alpha_bar_at(taus[i]);
        const Patch eps = model(x, cond, taus[i]);
        x0 = detail::clamped(detail::lincomb(1.0 / std::sqrt(ab), x, -std::sqrt(1.0 - ab) / std::sqrt(ab), eps));
        if (i + 1 < taus.size()) {
            const double ab_next = sched.alpha_bar_at(taus[i + 1]);
            const Patch fresh = detail::noise_patch(rng, x.h);
            x = detail::lincomb(std::sqrt(ab_next), x0, std::sqrt(1.0 - ab_next), fresh);
        }
    }
    return x0;
}

/// Karras-ladder Heun sampler driving an epsilon model through the VP
/// sigma bridge. 2N - 1 network calls (no corrector into sigma = 0).
inline Patch edm_heun(const Predictor& model, const Patch& cond, const NoiseSchedule& sched, const KarrasSigmas& ladder,
                      const SamplerSpec& spec)
{
    detail::require_objective(model, Method::edm_heun);
    validate_spec(spec, sched.T);
    Rng rng(spec.seed);
    const auto& sig = ladder.sigma;
    Patch x = detail::noise_patch(rng, detail::patch_size(cond));
    for (auto& v : x.data) v = static_cast<float>(v * sig[0]);

    const auto denoise = [&](const Patch& xs, double sigma) {
        const int t = nearest_timestep(sched, sigma);
        const double ab = sched.alpha_bar_at(t);
        const Patch x_vp = detail::lincomb(1.0 / std::sqrt(1.0 + sigma * sigma), xs, 0.0, xs);
        const Patch eps = model(x_vp, cond, t);
        return detail::lincomb(1.0 / std::sqrt(ab), x_vp, -std::sqrt(1.0 - ab) / std::sqrt(ab), eps);
    };

    for (int i = 0; i < ladder.N; ++i) {
        const double s_cur = sig[i], s_next = sig[i + 1];
        const Patch d = detail::lincomb(1.0 / s_cur, x, -1.0 / s_cur, denoise(x, s_cur));
        Patch x_pred = detail::lincomb(1.0, x, s_next - s_cur, d);
        if (s_next > 0.0) {
            const Patch d2 = detail::lincomb(1.0 / s_next, x_pred, -1.0 / s_next, denoise(x_pred, s_next));
            Patch avg = detail::lincomb(0.5, d, 0.5, d2);
            x = detail::lincomb(1.0, x, s_next - s_cur, avg);
        } else {
            x = std::move(x_pred);
        }
    }
    return detail::clamped(x);
}

inline Patch edm_heun(const Predictor& model, const Patch& cond, const NoiseSchedule& sched, const SamplerSpec& spec)
{
    detail::require_objective(model, Method::edm_heun);
    validate_spec(spec, sched.T);
    const auto ladder =
        make_karras(resolved_steps(spec, sched.T), spec.karras_rho, spec.karras_sigma_min, spec.karras_sigma_max);
    return edm_heun(model, cond, sched, ladder, spec);
}

/// Variance-preserving process as seen by the probability-flow integrator,
/// parameterized by normalized time s in [0, 1].
struct VpProcess {
    std::function<double(double)> rate;       // beta(s)
    std::function<double(double)> alpha_bar;  // alpha_bar(s)
    std::function<double(double)> model_time; // time argument handed to the predictor
};

/// Piecewise-constant embedding of a discrete schedule:
/// t(s) = max(1, round(s T)), beta(s) = T beta_t(s).
inline VpProcess discrete_vp(const NoiseSchedule& sched)
{
    const auto t_of = [T = sched.T](double s) { return std::clamp(static_cast<int>(std::lround(s * T)), 1, T); };
    return {[&sched, t_of](double s) { return sched.T * sched.beta_at(t_of(s)); },
            [&sched, t_of](double s) { return sched.alpha_bar_at(t_of(s)); },
            [t_of](double s) { return static_cast<double>(t_of(s)); }};
}

/// Integrates dx/ds = -1/2 beta(s) (x - eps_hat / sqrt(1 - alpha_bar(s)))
/// from s = 1 down to s = 0 in `steps` uniform steps. Euler: one call per
/// step; Heun: predictor plus corrector on every step.
inline Patch integrate_probability_flow(const Predictor& model, const Patch& cond, const VpProcess& proc, Patch x,
                                        int steps, bool heun)
{
    if (steps < 1) throw SpecError("steps must be >= 1");
    const double ds = 1.0 / steps;
    const auto drift = [&](const Patch& xs, double s) {
        const Patch eps = model(xs, cond, proc.model_time(s));
        const double beta = proc.rate(s);
        const double inv = 1.0 / std::sqrt(1.0 - proc.alpha_bar(s));
        return detail::lincomb(-0.5 * beta, xs, 0.5 * beta * inv, eps);
    };
    for (int k = 0; k < steps; ++k) {
        const double s = 1.0 - k * ds;
        const Patch f = drift(x, s);
        if (!heun) {
            x = detail::lincomb(1.0, x, -ds, f);
            continue;
        }
        const Patch xp = detail::lincomb(1.0, x, -ds, f);
        const Patch f2 = drift(xp, std::max(0.0, s - ds));
        x = detail::lincomb(1.0, x, -ds, detail::lincomb(0.5, f, 0.5, f2));
    }
    return x;
}

inline Patch pf_euler(const Predictor& model, const Patch& cond, const NoiseSchedule& sched, const SamplerSpec& spec)
{
    detail::require_objective(model, Method::pf_euler);
    validate_spec(spec, sched.T);
    Rng rng(spec.seed);
    Patch x = detail::noise_patch(rng, detail::patch_size(cond));
    return detail::clamped(
        integrate_probability_flow(model, cond, discrete_vp(sched), std::move(x), resolved_steps(spec, sched.T), false));
}

inline Patch pf_heun(const Predictor& model, const Patch& cond, const NoiseSchedule& sched, const SamplerSpec& spec)
{
    detail::require_objective(model, Method::pf_heun);
    validate_spec(spec, sched.T);
    Rng rng(spec.seed);
    Patch x = detail::noise_patch(rng, detail::patch_size(cond));
    return detail::clamped(
        integrate_probability_flow(model, cond, discrete_vp(sched), std::move(x), resolved_steps(spec, sched.T), true));
}

/// Euler integration of a learned velocity field from t = 1 (noise) to 0.
inline Patch fm_euler(const Predictor& model, const Patch& cond, const SamplerSpec& spec, int T = 1000)
{
    detail::require_objective(model, Method::fm_euler);
    validate_spec(spec, T);
    Rng rng(spec.seed);
    Patch x = detail::noise_patch(rng, detail::patch_size(cond));
    const int steps = resolved_steps(spec, T);
    const double dt = 1.0 / steps;
    for (int k = 0; k < steps; ++k) {
        const double t = 1.0 - k * dt;
        x = detail::lincomb(1.0, x, -dt, model(x, cond, t));
    }
    return detail::clamped(x);
}

/// Dispatch on spec.method.
inline Patch sample(const Predictor& model, const Patch& cond, const NoiseSchedule& sched, const SamplerSpec& spec)
{
    switch (spec.method) {
    case Method::ddim: return ddim(model, cond, sched, spec);
    case Method::ancestral: return ancestral(model, cond, sched, spec);
    case Method::lcm: return lcm(model, cond, sched, spec);
    case Method::edm_heun: return edm_heun(model, cond, sched, spec);
    case Method::pf_euler: return pf_euler(model, cond, sched, spec);
    case Method::pf_heun: return pf_heun(model, cond, sched, spec);
    case Method::fm_euler: return fm_euler(model, cond, spec, sched.T);
    }
    throw SpecError("unknown method");
}

struct EnsembleResult {
    Grid mean;
    Grid std;
    int n;
};

/// n members with seeds spec.seed + i; per-pixel mean and population std.
inline EnsembleResult ensemble(const Predictor& model, const Patch& cond, const NoiseSchedule& sched, SamplerSpec spec,
                               int n = 5)
{
    if (n < 1) throw ParameterError("ensemble: n must be >= 1");
    const std::uint64_t base = spec.seed;
    std::vector<double> sum(cond.size(), 0.0), sq(cond.size(), 0.0);
    for (int i = 0; i < n; ++i) {
        spec.seed = base + static_cast<std::uint64_t>(i);
        const Patch m = sample(model, cond, sched, spec);
        for (std::size_t k = 0; k < m.size(); ++k) {
            sum[k] += m[k];
            sq[k] += static_cast<double>(m[k]) * m[k];
        }
    }
    std::vector<float> mean(cond.size()), sd(cond.size());
    for (std::size_t k = 0; k < mean.size(); ++k) {
        const double mu = sum[k] / n;
        mean[k] = static_cast<float>(mu);
        sd[k] = static_cast<float>(std::sqrt(std::max(0.0, sq[k] / n - mu * mu)));
    }
    if (n == 1) std::fill(sd.begin(), sd.end(), 0.0f);
    const auto w = static_cast<std::uint32_t>(cond.w), h = static_cast<std::uint32_t>(cond.h);
    return {signed_grid_from(w, h, std::move(mean)), Grid(w, h, Units::unit, std::move(sd)), n};
}

struct FuseOptions {
    int patch = 32;
    int threads = 1;
};

inline std::uint64_t tile_seed(std::uint64_t seed, std::uint64_t tile_index) { return seed ^ tile_index; }

/// Tile the condition grid (dn or signed) into non-overlapping patches, sample
/// each tile with seed (spec.seed XOR tile index), stitch in raster order and
/// map back to DN. Partial edge tiles are cropped away.
inline Grid fuse_full(const Grid& cond, const Predictor& model, const NoiseSchedule& sched, const SamplerSpec& spec,
                      FuseOptions opt = {})
{
    const int p = opt.patch;
    if (cond.width() < static_cast<std::uint32_t>(p) || cond.height() < static_cast<std::uint32_t>(p))
        throw ShapeError("fuse_full: grid smaller than one patch");
    const Grid sgn = cond.units() == Units::signed_unit ? cond : normalize_signed(cond);
    if (sgn.has_missing()) throw EvaluationError("fuse_full: condition has missing samples");
    const std::uint32_t tx = sgn.width() / p, ty = sgn.height() / p;
    const std::uint32_t w = tx * p, h = ty * p;
    std::vector<float> out(static_cast<std::size_t>(w) * h);
    validate_spec(spec, sched.T);

    const auto run_tile = [&](std::uint32_t idx) {
        const std::uint32_t r0 = (idx / tx) * p, c0 = (idx % tx) * p;
        Patch y(1, p, p);
        for (int r = 0; r < p; ++r)
            for (int c = 0; c < p; ++c) y.at(0, r, c) = sgn.at(r0 + r, c0 + c);
        SamplerSpec s = spec;
        s.seed = tile_seed(spec.seed, idx);
        const Patch x = sample(model, y, sched, s);
        for (int r = 0; r < p; ++r)
            for (int c = 0; c < p; ++c) out[static_cast<std::size_t>(r0 + r) * w + c0 + c] = x.at(0, r, c);
    };

    const std::uint32_t tiles = tx * ty;
    if (opt.threads <= 1) {
        for (std::uint32_t i = 0; i < tiles; ++i) run_tile(i);
    } else {
        std::atomic<std::uint32_t> next{0};
        std::exception_ptr failure;
        std::atomic<bool> failed{false};
        {
            std::vector<std::jthread> pool;
            for (int t = 0; t < opt.threads; ++t)
                pool.emplace_back([&] {
                    for (std::uint32_t i = next++; i < tiles && !failed; i = next++) {
                        try {
                            run_tile(i);
                        } catch (...) {
                            if (!failed.exchange(true)) failure = std::current_exception();
                        }
                    }
                });
        }
        if (failure) std::rethrow_exception(failure);
    }
    return denormalize_dn(signed_grid_from(w, h, std::move(out)));
}

inline Grid fuse_full(const Grid& cond, const Checkpoint& ck, const SamplerSpec& spec,
                      PrecisionMode mode = PrecisionMode::full32, FuseOptions opt = {})
{
    opt.patch = ck.net.patch;
    return fuse_full(cond, make_predictor(ck, mode), make_schedule(ck.schedule), spec, opt);
}

} // namespace nightfuse
