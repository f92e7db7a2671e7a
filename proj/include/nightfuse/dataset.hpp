#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nightfuse/raster.hpp"
#include "nightfuse/rng.hpp"
#include "nightfuse/tensor.hpp"

namespace nightfuse {

/// Co-registered training pair: condition (VIIRS role) and target (DMSP
/// role), both signed-normalized, plus the tile origin in the source grid.
struct PatchPair {
    Patch cond;
    Patch target;
    std::uint32_t row0 = 0;
    std::uint32_t col0 = 0;
};

struct DatasetSplit {
    std::vector<PatchPair> train;
    std::vector<PatchPair> val;
};

namespace detail {

inline Patch cut_patch(const Grid& g, std::uint32_t r0, std::uint32_t c0, int size)
{
    Patch p(1, size, size);
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
            const float v = g.at(r0 + r, c0 + c);
            if (is_missing(v)) throw FormatError("extract_pairs: missing sample inside a patch");
            p.at(0, r, c) = v;
        }
    return p;
}

} // namespace detail

/// Non-overlapping tiling in raster order; partial edge tiles are dropped.
inline std::vector<PatchPair> extract_pairs(const Grid& cond, const Grid& target, int patch = 32)
{
    require_same_shape(cond, target, "extract_pairs");
    if (patch < 1) throw ParameterError("extract_pairs: patch must be >= 1");
    if (cond.width() < static_cast<std::uint32_t>(patch) || cond.height() < static_cast<std::uint32_t>(patch))
        throw ShapeError("extract_pairs: grid smaller than one patch");
    if (cond.units() != Units::signed_unit || target.units() != Units::signed_unit)
        throw UnitsError("extract_pairs: expects signed-normalized grids");
    std::vector<PatchPair> out;
    const std::uint32_t tx = cond.width() / patch, ty = cond.height() / patch;
    out.reserve(static_cast<std::size_t>(tx) * ty);
    for (std::uint32_t i = 0; i < ty; ++i)
        for (std::uint32_t j = 0; j < tx; ++j) {
            const std::uint32_t r0 = i * patch, c0 = j * patch;
            out.push_back({detail::cut_patch(cond, r0, c0, patch), detail::cut_patch(target, r0, c0, patch), r0, c0});
        }
    return out;
}

/// Reassemble patches (one per tile position) into a width x height grid.
/// Pass `use_target` to stitch the target side instead of the condition.
inline Grid stitch(const std::vector<PatchPair>& pairs, std::uint32_t width, std::uint32_t height, bool use_target = false)
{
    std::vector<float> v(static_cast<std::size_t>(width) * height, missing());
    for (const auto& p : pairs) {
        const Patch& src = use_target ? p.target : p.cond;
        for (int r = 0; r < src.h; ++r)
            for (int c = 0; c < src.w; ++c) {
                const std::uint32_t rr = p.row0 + r, cc = p.col0 + c;
                if (rr >= height || cc >= width) throw ShapeError("stitch: patch outside the target grid");
                v[static_cast<std::size_t>(rr) * width + cc] = src.at(0, r, c);
            }
    }
    return Grid(width, height, Units::signed_unit, std::move(v));
}

/// Seeded shuffle; the last n_val items after shuffling form the validation set.
inline DatasetSplit split(const std::vector<PatchPair>& pairs, std::size_t n_val = 50, std::uint64_t seed = 0)
{
    if (n_val > pairs.size())
        throw ParameterError("split: n_val (" + std::to_string(n_val) + ") exceeds pair count (" +
                             std::to_string(pairs.size()) + ")");
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 engine(seed);
    std::shuffle(order.begin(), order.end(), engine);
    DatasetSplit s;
    const std::size_t n_train = pairs.size() - n_val;
    for (std::size_t i = 0; i < order.size(); ++i) (i < n_train ? s.train : s.val).push_back(pairs[order[i]]);
    return s;
}

// ---------------------------------------------------------------------------
// Synthetic sensor pair

struct SynthParams {
    std::uint32_t fine_size = 1152;
    int n_cities = 6;
    int n_towns = 80;
    double city_sigma_px = 24.0;   // fine pixels
    double city_peak = 150.0;      // radiance at a city core
    double town_sigma_px = 1.0;    // fine pixels
    double town_peak = 80.0;
    double saturation_radiance = 40.0; // coarse radiance mapped to DN 63 before blurring
    double dmsp_blur_sigma_px = 1.5;   // coarse pixels
    double sensor_noise_sd = 0.3;
    std::uint64_t seed = 0;

    void validate() const
    {
        if (fine_size == 0 || fine_size % 2 != 0 || fine_size % 64 != 0)
            throw ParameterError("SynthParams: fine_size must be a positive multiple of 64");
        if (n_cities < 0 || n_towns < 0) throw ParameterError("SynthParams: counts must be >= 0");
        if (!(city_sigma_px > 0 && town_sigma_px > 0 && dmsp_blur_sigma_px > 0))
            throw ParameterError("SynthParams: sigmas must be > 0");
        if (!(saturation_radiance > 0)) throw ParameterError("SynthParams: saturation_radiance must be > 0");
        if (city_peak < 0 || town_peak < 0 || sensor_noise_sd < 0)
            throw ParameterError("SynthParams: peaks and noise must be >= 0");
    }
};

/// Separable Gaussian blur with zero padding (dark beyond the edge),
/// kernel radius ceil(4 sigma), weights normalized to sum 1.
inline std::vector<double> gaussian_blur(const std::vector<double>& src, std::uint32_t w, std::uint32_t h, double sigma)
{
    const int radius = static_cast<int>(std::ceil(4.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) ksum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= ksum;
    std::vector<double> tmp(src.size(), 0.0), out(src.size(), 0.0);
    for (std::uint32_t r = 0; r < h; ++r)
        for (std::uint32_t c = 0; c < w; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const long cc = static_cast<long>(c) + i;
                if (cc >= 0 && cc < static_cast<long>(w)) acc += k[i + radius] * src[static_cast<std::size_t>(r) * w + cc];
            }
            tmp[static_cast<std::size_t>(r) * w + c] = acc;
        }
    for (std::uint32_t r = 0; r < h; ++r)
        for (std::uint32_t c = 0; c < w; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const long rr = static_cast<long>(r) + i;
                if (rr >= 0 && rr < static_cast<long>(h)) acc += k[i + radius] * tmp[static_cast<std::size_t>(rr) * w + c];
            }
            out[static_cast<std::size_t>(r) * w + c] = acc;
        }
    return out;
}

/// Six-bit DMSP digitization: round to integer DN, anything below DN 1 is dark.
inline float quantize_dn6(double dn)
{
    const double c = std::clamp(dn, 0.0, static_cast<double>(kDnMax));
    return c < 1.0 ? 0.0f : static_cast<float>(std::round(c));
}

/// Emulated sensor pair over one synthetic scene. Returns (viirs radiance at
/// fine_size/2, dmsp DN at the same resolution).
inline std::pair<Grid, Grid> synth_pair(const SynthParams& p)
{
    p.validate();
    const std::uint32_t n = p.fine_size;
    std::vector<float> fine(static_cast<std::size_t>(n) * n, 0.0f);
    Rng rng(derive_seed(p.seed, "synth"));

    const auto splat = [&](double cy, double cx, double sigma, double peak) {
        const int rad = static_cast<int>(std::ceil(4.0 * sigma));
        const int y0 = std::max(0, static_cast<int>(cy) - rad), y1 = std::min<int>(n - 1, static_cast<int>(cy) + rad);
        const int x0 = std::max(0, static_cast<int>(cx) - rad), x1 = std::min<int>(n - 1, static_cast<int>(cx) + rad);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                fine[static_cast<std::size_t>(y) * n + x] += static_cast<float>(peak * std::exp(-0.5 * d2 / (sigma * sigma)));
            }
    };
    for (int i = 0; i < p.n_cities; ++i) {
        const double cy = (0.1 + 0.8 * rng.uniform()) * n, cx = (0.1 + 0.8 * rng.uniform()) * n;
        const double sigma = p.city_sigma_px * (0.6 + 0.8 * rng.uniform());
        splat(cy, cx, sigma, p.city_peak * (0.5 + 0.5 * rng.uniform()));
    }
    for (int i = 0; i < p.n_towns; ++i) {
        const double cy = rng.uniform() * n, cx = rng.uniform() * n;
        splat(cy, cx, p.town_sigma_px, p.town_peak * (0.3 + 0.7 * rng.uniform()));
    }
    if (p.sensor_noise_sd > 0.0)
        for (auto& v : fine) v += static_cast<float>(std::abs(p.sensor_noise_sd * rng.normal()));

    const Grid viirs = block_average(Grid(n, n, Units::radiance, std::move(fine)), 2);
    const std::uint32_t m = viirs.width();
    std::vector<double> scaled(viirs.size());
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = viirs.values()[i] / p.saturation_radiance;
    const auto blurred = gaussian_blur(scaled, m, m, p.dmsp_blur_sigma_px);
    std::vector<float> dn(blurred.size());
    for (std::size_t i = 0; i < dn.size(); ++i) dn[i] = quantize_dn6(kDnMax * blurred[i]);
    return {viirs, Grid(m, m, Units::dn, std::move(dn))};
}

// ---------------------------------------------------------------------------
// Patch-set persistence: pair_{i}_{cond|target}.nlg plus manifest.txt with
// one "index row0 col0 split" line per pair.

inline void save_patch_set(const std::filesystem::path& dir, const DatasetSplit& s)
{
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) throw FormatError("cannot write " + (dir / "manifest.txt").string());
    manifest << "# index row0 col0 split\n";
    std::size_t index = 0;
    const auto emit = [&](const std::vector<PatchPair>& v, const char* tag) {
        for (const auto& p : v) {
            const auto sz = static_cast<std::uint32_t>(p.cond.h);
            save_grid(dir / ("pair_" + std::to_string(index) + "_cond.nlg"),
                      Grid(sz, sz, Units::signed_unit, p.cond.data));
            save_grid(dir / ("pair_" + std::to_string(index) + "_target.nlg"),
                      Grid(sz, sz, Units::signed_unit, p.target.data));
            manifest << index << ' ' << p.row0 << ' ' << p.col0 << ' ' << tag << '\n';
            ++index;
        }
    };
    emit(s.train, "train");
    emit(s.val, "val");
}

inline DatasetSplit load_patch_set(const std::filesystem::path& dir)
{
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest) throw FormatError("missing patch manifest " + (dir / "manifest.txt").string());
    DatasetSplit s;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream in(line);
        std::size_t index;
        PatchPair p;
        std::string tag;
        if (!(in >> index >> p.row0 >> p.col0 >> tag)) throw FormatError("bad manifest line: " + line);
        const auto to_patch = [](const Grid& g) {
            Patch t(1, static_cast<int>(g.height()), static_cast<int>(g.width()));
            std::copy(g.values().begin(), g.values().end(), t.data.begin());
            return t;
        };
        p.cond = to_patch(load_grid(dir / ("pair_" + std::to_string(index) + "_cond.nlg")));
        p.target = to_patch(load_grid(dir / ("pair_" + std::to_string(index) + "_target.nlg")));
        if (tag == "train") s.train.push_back(std::move(p));
        else if (tag == "val") s.val.push_back(std::move(p));
        else throw FormatError("bad split tag '" + tag + "' in manifest");
    }
    return s;
}

} // namespace nightfuse
