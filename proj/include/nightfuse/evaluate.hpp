#pragma once

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <mutex>
#include <ostream>
#include <string>
#include <vector>

#include "nightfuse/raster.hpp"

namespace nightfuse {

struct PixelErrors {
    double mae = 0.0;
    double mse = 0.0;
    double rmse = 0.0;
};

struct MetricsReport {
    double ssim = 0.0;
    double psnr_db = 0.0;
    double mae = 0.0;
    double mse = 0.0;
    double rmse = 0.0;
};

/// Missing pixels are excluded pairwise.
inline PixelErrors pixel_metrics(const Grid& pred, const Grid& truth)
{
    require_same_shape(pred, truth, "pixel_metrics");
    if (pred.units() != Units::unit || truth.units() != Units::unit)
        throw UnitsError("pixel_metrics: expects unit-normalized grids");
    const auto a = pred.values(), b = truth.values();
    double abs_sum = 0.0, sq_sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (is_missing(a[i]) || is_missing(b[i])) continue;
        const double d = static_cast<double>(a[i]) - b[i];
        abs_sum += std::abs(d);
        sq_sum += d * d;
        ++n;
    }
    if (n == 0) throw EvaluationError("pixel_metrics: no valid pixel pairs");
    const double mse = sq_sum / static_cast<double>(n);
    return {abs_sum / static_cast<double>(n), mse, std::sqrt(mse)};
}

/// +inf when mse is zero.
inline double psnr(double mse, double range = 1.0)
{
    if (mse < 0.0 || std::isnan(mse)) throw ParameterError("psnr: mse must be >= 0");
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(range * range / mse);
}

struct SsimParams {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double range = 1.0;
};

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
inline std::vector<double> gaussian_taps(int size, double sigma)
{
    std::vector<double> w(static_cast<std::size_t>(size));
    const double c = (size - 1) / 2.0;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        w[static_cast<std::size_t>(i)] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
        sum += w[static_cast<std::size_t>(i)];
    }
    for (auto& v : w) v /= sum;
    return w;
}

namespace detail {

/// Separable valid-mode filter of a row-major w x h image.
inline std::vector<double> filter_valid(const std::vector<double>& img, std::size_t w, std::size_t h,
                                        const std::vector<double>& taps)
{
    const std::size_t k = taps.size(), ow = w - k + 1, oh = h - k + 1;
    std::vector<double> tmp(ow * h), out(ow * oh);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < ow; ++c) {
            double s = 0.0;
            for (std::size_t j = 0; j < k; ++j) s += taps[j] * img[r * w + c + j];
            tmp[r * ow + c] = s;
        }
    for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t c = 0; c < ow; ++c) {
            double s = 0.0;
            for (std::size_t j = 0; j < k; ++j) s += taps[j] * tmp[(r + j) * ow + c];
            out[r * ow + c] = s;
        }
    return out;
}

inline std::vector<double> to_double(const Grid& g, const char* what)
{
    std::vector<double> out(g.size());
    const auto v = g.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (is_missing(v[i])) throw EvaluationError(std::string(what) + ": missing samples are not supported");
        out[i] = v[i];
    }
    return out;
}

} // namespace detail

/// Mean SSIM over every valid window position (no padding).
inline double ssim(const Grid& pred, const Grid& truth, const SsimParams& p = {})
{
    require_same_shape(pred, truth, "ssim");
    if (pred.width() < static_cast<std::uint32_t>(p.window) || pred.height() < static_cast<std::uint32_t>(p.window))
        throw ShapeError("ssim: grid smaller than the window");
    const std::size_t w = pred.width(), h = pred.height();
    const auto x = detail::to_double(pred, "ssim"), y = detail::to_double(truth, "ssim");
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto taps = gaussian_taps(p.window, p.sigma);
    const auto mx = detail::filter_valid(x, w, h, taps), my = detail::filter_valid(y, w, h, taps);
    const auto sxx = detail::filter_valid(xx, w, h, taps), syy = detail::filter_valid(yy, w, h, taps);
    const auto sxy = detail::filter_valid(xy, w, h, taps);
    const double c1 = (p.k1 * p.range) * (p.k1 * p.range), c2 = (p.k2 * p.range) * (p.k2 * p.range);
    double total = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
        total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) /
                 ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    return total / static_cast<double>(mx.size());
}

/// Grids in dn are divided by 63 (signed grids mapped to [0,1]) before scoring.
inline MetricsReport evaluate_pair(const Grid& pred, const Grid& truth)
{
    const Grid a = to_unit(pred), b = to_unit(truth);
    const PixelErrors e = pixel_metrics(a, b);
    return {ssim(a, b), psnr(e.mse), e.mae, e.mse, e.rmse};
}

// ---------------------------------------------------------------------------
// Radial power spectrum

struct RadialSpectrum {
    std::vector<int> wavenumber;
    std::vector<double> mean_power;
    std::vector<std::size_t> count;

    std::size_t n_bins() const noexcept { return mean_power.size(); }
    /// Per-annulus summed power, the zonal-energy view.
    double energy(std::size_t bin) const { return mean_power.at(bin) * static_cast<double>(count.at(bin)); }
};

namespace detail {

/// FFTW's planner is not re-entrant.
inline std::mutex& fftw_planner_mutex()
{
    static std::mutex m;
    return m;
}

/// Signed frequency of DFT index u in an n-point transform.
inline int centered_frequency(std::size_t u, std::size_t n)
{
    const auto i = static_cast<long>(u), nn = static_cast<long>(n);
    return static_cast<int>(i <= (nn - 1) / 2 ? i : i - nn);
}

} // namespace detail

/// 2-D DFT power P(k) = |F(k)|^2 / (w h)^2 binned by rounded radial
/// wavenumber. With this normalization the binned total equals the mean
/// squared pixel value.
inline RadialSpectrum radial_psd(const Grid& g)
{
    if (g.width() < 2 || g.height() < 2) throw ShapeError("radial_psd: grid must be at least 2x2");
    const auto x = detail::to_double(g, "radial_psd");
    const std::size_t w = g.width(), h = g.height(), n = w * h;

    auto* buf = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n));
    if (!buf) throw std::bad_alloc();
    fftw_plan plan;
    {
        std::lock_guard lock(detail::fftw_planner_mutex());
        plan = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w), buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
    }
    for (std::size_t i = 0; i < n; ++i) {
        buf[i][0] = x[i];
        buf[i][1] = 0.0;
    }
    fftw_execute(plan);

    const double norm = 1.0 / (static_cast<double>(n) * static_cast<double>(n));
    std::vector<double> sum;
    std::vector<std::size_t> count;
    for (std::size_t r = 0; r < h; ++r) {
        const int ky = detail::centered_frequency(r, h);
        for (std::size_t c = 0; c < w; ++c) {
            const int kx = detail::centered_frequency(c, w);
            const auto bin = static_cast<std::size_t>(std::lround(std::sqrt(double(kx) * kx + double(ky) * ky)));
            if (bin >= sum.size()) {
                sum.resize(bin + 1, 0.0);
                count.resize(bin + 1, 0);
            }
            const double re = buf[r * w + c][0], im = buf[r * w + c][1];
            sum[bin] += (re * re + im * im) * norm;
            ++count[bin];
        }
    }
    {
        std::lock_guard lock(detail::fftw_planner_mutex());
        fftw_destroy_plan(plan);
    }
    fftw_free(buf);

    RadialSpectrum s;
    s.count = std::move(count);
    s.mean_power.resize(sum.size());
    s.wavenumber.resize(sum.size());
    for (std::size_t b = 0; b < sum.size(); ++b) {
        s.wavenumber[b] = static_cast<int>(b);
        s.mean_power[b] = s.count[b] ? sum[b] / static_cast<double>(s.count[b]) : 0.0;
    }
    return s;
}

/// Inclusive bin range.
struct Band {
    std::size_t lo = 0;
    std::size_t hi = 0;
};

/// Highest quarter of the bins.
inline Band top_quartile(const RadialSpectrum& s)
{
    if (s.n_bins() < 4) throw ParameterError("top_quartile: fewer than four bins");
    return {(3 * s.n_bins()) / 4, s.n_bins() - 1};
}

/// Mean over the band of |log10(a/b)|.
inline double spectrum_distance(const RadialSpectrum& a, const RadialSpectrum& b, Band band)
{
    if (a.n_bins() != b.n_bins()) throw ParameterError("spectrum_distance: spectra have different binning");
    if (band.lo > band.hi || band.hi >= a.n_bins()) throw ParameterError("spectrum_distance: band outside available bins");
    double total = 0.0;
    for (std::size_t i = band.lo; i <= band.hi; ++i) {
        if (!(a.mean_power[i] > 0.0) || !(b.mean_power[i] > 0.0))
            throw EvaluationError("spectrum_distance: zero power in bin " + std::to_string(i) +
                                  "; exclude empty bins from the band");
        total += std::abs(std::log10(a.mean_power[i] / b.mean_power[i]));
    }
    return total / static_cast<double>(band.hi - band.lo + 1);
}

// ---------------------------------------------------------------------------
// CSV output

/// Shortest-roundtrip-ish fixed formatting; "inf" for the PSNR sentinel.
inline std::string format_number(double v)
{
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    std::array<char, 64> buf{};
    std::snprintf(buf.data(), buf.size(), "%.10g", v);
    return buf.data();
}

/// Columns: bin, wavenumber, mean_power, count. With `energy` the power
/// column holds the per-annulus sum instead.
inline void write_spectrum_csv(std::ostream& os, const RadialSpectrum& s, bool energy = false)
{
    os << "bin,wavenumber," << (energy ? "energy" : "mean_power") << ",count\n";
    for (std::size_t b = 0; b < s.n_bins(); ++b)
        os << b << ',' << s.wavenumber[b] << ',' << format_number(energy ? s.energy(b) : s.mean_power[b]) << ','
           << s.count[b] << '\n';
}

} // namespace nightfuse
