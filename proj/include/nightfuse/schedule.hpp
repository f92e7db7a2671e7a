#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "nightfuse/error.hpp"

namespace nightfuse {

enum class ScheduleKind { linear, cosine };

inline std::string schedule_kind_name(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

inline ScheduleKind parse_schedule_kind(const std::string& s)
{
    if (s == "linear") return ScheduleKind::linear;
    if (s == "cosine") return ScheduleKind::cosine;
    throw ParameterError("unknown schedule kind '" + s + "'");
}

/// Reproducible description of a discrete schedule, stored in checkpoints.
struct ScheduleConfig {
    ScheduleKind kind = ScheduleKind::linear;
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    double cosine_s = 0.008;
    double beta_max = 0.999;
};

/// Discrete variance schedule indexed by timestep t = 1..T. Vectors are stored
/// zero-based, so beta(t) reads `beta[t - 1]`.
struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::linear;
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    double beta_at(int t) const { return beta[index(t)]; }
    double alpha_at(int t) const { return alpha[index(t)]; }
    double alpha_bar_at(int t) const { return alpha_bar[index(t)]; }

private:
    std::size_t index(int t) const
    {
        if (t < 1 || t > T) throw ParameterError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
        return static_cast<std::size_t>(t - 1);
    }
};

namespace detail {

inline NoiseSchedule from_betas(ScheduleKind kind, std::vector<double> beta)
{
    NoiseSchedule s;
    s.kind = kind;
    s.T = static_cast<int>(beta.size());
    s.alpha.resize(beta.size());
    s.alpha_bar.resize(beta.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < beta.size(); ++i) {
        s.alpha[i] = 1.0 - beta[i];
        prod *= s.alpha[i];
        s.alpha_bar[i] = prod;
    }
    s.beta = std::move(beta);
    return s;
}

} // namespace detail

inline NoiseSchedule make_linear(int T = 1000, double b1 = 1e-4, double bT = 0.02)
{
    if (T < 2) throw ParameterError("make_linear: T must be >= 2");
    if (!(b1 > 0.0 && b1 <= bT && bT < 1.0)) throw ParameterError("make_linear: need 0 < b1 <= bT < 1");
    std::vector<double> beta(static_cast<std::size_t>(T));
    for (int t = 1; t <= T; ++t)
        beta[t - 1] = b1 + static_cast<double>(t - 1) / static_cast<double>(T - 1) * (bT - b1);
    beta.back() = bT;
    return detail::from_betas(ScheduleKind::linear, std::move(beta));
}

/// Cosine schedule: alpha_bar from the squared-cosine curve, betas from the
/// alpha_bar ratio clipped at beta_max, alpha_bar then rebuilt from the
/// clipped betas.
inline NoiseSchedule make_cosine(int T = 1000, double s = 0.008, double beta_max = 0.999)
{
    if (T < 2) throw ParameterError("make_cosine: T must be >= 2");
    if (!(s > 0.0)) throw ParameterError("make_cosine: s must be > 0");
    if (!(beta_max > 0.0 && beta_max < 1.0)) throw ParameterError("make_cosine: beta_max must lie in (0,1)");
    const auto f = [&](double t) {
        const double c = std::cos((t / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
        return c * c;
    };
    const double f0 = f(0.0);
    std::vector<double> beta(static_cast<std::size_t>(T));
    double prev = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double ab = f(t) / f0;
        beta[t - 1] = std::min(1.0 - ab / prev, beta_max);
        prev = ab;
    }
    return detail::from_betas(ScheduleKind::cosine, std::move(beta));
}

inline NoiseSchedule make_schedule(const ScheduleConfig& c)
{
    return c.kind == ScheduleKind::linear ? make_linear(c.T, c.beta_start, c.beta_end)
                                          : make_cosine(c.T, c.cosine_s, c.beta_max);
}

/// Noise checkpoints predict eps-hat = sqrt(1 - abar_t) x_t + network output;
/// the skip is the posterior-mean noise for unit-variance data.
inline double noise_skip(const NoiseSchedule& sched, double time)
{
    const int t = std::clamp(static_cast<int>(std::lround(time)), 1, sched.T);
    return std::sqrt(1.0 - sched.alpha_bar_at(t));
}

/// Karras noise-level ladder: N warped levels plus a terminal zero.
struct KarrasSigmas {
    int N = 0;
    double rho = 7.0;
    double sigma_min = 0.002;
    double sigma_max = 80.0;
    std::vector<double> sigma; // size N + 1, sigma[N] == 0
};

inline KarrasSigmas make_karras(int N = 30, double rho = 7.0, double sigma_min = 0.002, double sigma_max = 80.0)
{
    if (N < 2) throw ParameterError("make_karras: N must be >= 2");
    if (!(sigma_min > 0.0 && sigma_min < sigma_max)) throw ParameterError("make_karras: need 0 < sigma_min < sigma_max");
    if (!(rho > 0.0)) throw ParameterError("make_karras: rho must be > 0");
    KarrasSigmas k{N, rho, sigma_min, sigma_max, std::vector<double>(static_cast<std::size_t>(N) + 1, 0.0)};
    const double hi = std::pow(sigma_max, 1.0 / rho);
    const double lo = std::pow(sigma_min, 1.0 / rho);
    for (int i = 0; i < N; ++i)
        k.sigma[i] = std::pow(hi + static_cast<double>(i) / (N - 1) * (lo - hi), rho);
    k.sigma[0] = sigma_max;
    k.sigma[N - 1] = sigma_min;
    return k;
}

/// Variance-exploding noise level equivalent to VP timestep t.
inline double vp_sigma(const NoiseSchedule& s, int t)
{
    const double ab = s.alpha_bar_at(t);
    return std::sqrt((1.0 - ab) / ab);
}

/// argmin_t |vp_sigma(t) - sigma|, ties resolved toward the smaller t.
inline int nearest_timestep(const NoiseSchedule& s, double sigma)
{
    if (!(sigma >= 0.0)) throw ParameterError("nearest_timestep: sigma must be >= 0");
    // vp_sigma is increasing in t: binary search for the first t with
    // vp_sigma(t) >= sigma, then compare with its left neighbour.
    int lo = 1, hi = s.T;
    while (lo < hi) {
        const int mid = lo + (hi - lo) / 2;
        if (vp_sigma(s, mid) < sigma) lo = mid + 1;
        else hi = mid;
    }
    if (lo > 1 && std::abs(vp_sigma(s, lo - 1) - sigma) <= std::abs(vp_sigma(s, lo) - sigma)) return lo - 1;
    return lo;
}

/// n descending timesteps T, T - k, T - 2k, ... with stride k = floor(T / n).
inline std::vector<int> subset_timesteps(int T, int n)
{
    if (T < 1) throw ParameterError("subset_timesteps: T must be >= 1");
    if (n < 1 || n > T) throw ParameterError("subset_timesteps: need 1 <= n <= T");
    const int stride = T / n;
    std::vector<int> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out[i] = T - i * stride;
    return out;
}

} // namespace nightfuse
