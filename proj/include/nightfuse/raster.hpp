#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nightfuse/error.hpp"

namespace nightfuse {

// Tag values are the on-disk units byte of an NLG1 file.
enum class Units : std::uint8_t { dn = 0, radiance = 1, unit = 2, signed_unit = 3 };

inline constexpr float kDnMax = 63.0f;

inline float missing() noexcept { return std::numeric_limits<float>::quiet_NaN(); }
inline bool is_missing(float v) noexcept { return std::isnan(v); }

inline std::string_view units_name(Units u)
{
    switch (u) {
    case Units::dn: return "dn";
    case Units::radiance: return "radiance";
    case Units::unit: return "unit";
    case Units::signed_unit: return "signed";
    }
    return "?";
}

inline Units parse_units(std::string_view name)
{
    if (name == "dn") return Units::dn;
    if (name == "radiance") return Units::radiance;
    if (name == "unit") return Units::unit;
    if (name == "signed") return Units::signed_unit;
    throw ParameterError("unknown units '" + std::string(name) + "'");
}

inline bool in_range(Units u, float v) noexcept
{
    switch (u) {
    case Units::dn: return v >= 0.0f && v <= kDnMax;
    case Units::radiance: return v >= 0.0f && std::isfinite(v);
    case Units::unit: return v >= 0.0f && v <= 1.0f;
    case Units::signed_unit: return v >= -1.0f && v <= 1.0f;
    }
    return false;
}

/// Single-band raster. Row-major, row 0 is the top row, quiet NaN marks a
/// missing sample. Immutable once constructed; transforms return new grids.
class Grid {
public:
    Grid(std::uint32_t width, std::uint32_t height, Units units, std::vector<float> values)
        : width_(width), height_(height), units_(units), values_(std::move(values))
    {
        if (width_ == 0 || height_ == 0) throw ShapeError("grid dimensions must be at least 1x1");
        if (values_.size() != static_cast<std::size_t>(width_) * height_)
            throw ShapeError("grid value count does not match width*height");
        for (float v : values_) {
            if (!is_missing(v) && !in_range(units_, v))
                throw UnitsError("sample " + std::to_string(v) + " outside the range of units " +
                                 std::string(units_name(units_)));
        }
    }

    static Grid filled(std::uint32_t width, std::uint32_t height, Units units, float value)
    {
        return Grid(width, height, units, std::vector<float>(static_cast<std::size_t>(width) * height, value));
    }

    std::uint32_t width() const noexcept { return width_; }
    std::uint32_t height() const noexcept { return height_; }
    Units units() const noexcept { return units_; }
    std::size_t size() const noexcept { return values_.size(); }
    std::span<const float> values() const noexcept { return values_; }
    float at(std::uint32_t row, std::uint32_t col) const { return values_[static_cast<std::size_t>(row) * width_ + col]; }

    bool has_missing() const
    {
        return std::any_of(values_.begin(), values_.end(), [](float v) { return is_missing(v); });
    }

    /// Bitwise equality, so NaN positions compare equal.
    friend bool operator==(const Grid& a, const Grid& b)
    {
        return a.width_ == b.width_ && a.height_ == b.height_ && a.units_ == b.units_ &&
               std::memcmp(a.values_.data(), b.values_.data(), a.values_.size() * sizeof(float)) == 0;
    }

private:
    std::uint32_t width_;
    std::uint32_t height_;
    Units units_;
    std::vector<float> values_;
};

inline void require_same_shape(const Grid& a, const Grid& b, std::string_view what)
{
    if (a.width() != b.width() || a.height() != b.height())
        throw ShapeError(std::string(what) + ": grid dimensions differ (" + std::to_string(a.width()) + "x" +
                         std::to_string(a.height()) + " vs " + std::to_string(b.width()) + "x" +
                         std::to_string(b.height()) + ")");
}

// ---------------------------------------------------------------------------
// NLG1 encoding

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t off)
{
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[off + i]) << (8 * i);
    return v;
}

} // namespace detail

inline constexpr std::size_t kGridHeaderBytes = 17;

inline std::vector<std::uint8_t> write_grid(const Grid& g)
{
    std::vector<std::uint8_t> out;
    out.reserve(kGridHeaderBytes + 4 * g.size());
    for (char c : std::string_view("NLG1")) out.push_back(static_cast<std::uint8_t>(c));
    detail::put_u32(out, g.width());
    detail::put_u32(out, g.height());
    detail::put_u32(out, 0);
    out.push_back(static_cast<std::uint8_t>(g.units()));
    for (float v : g.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

inline Grid read_grid(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < kGridHeaderBytes) throw FormatError("NLG1: truncated header");
    if (std::memcmp(bytes.data(), "NLG1", 4) != 0) throw FormatError("NLG1: bad magic");
    const std::uint32_t w = detail::get_u32(bytes, 4);
    const std::uint32_t h = detail::get_u32(bytes, 8);
    if (w == 0 || h == 0) throw FormatError("NLG1: zero width or height");
    const std::uint8_t tag = bytes[16];
    if (tag > 3) throw FormatError("NLG1: unknown units tag " + std::to_string(tag));
    const std::uint64_t n = static_cast<std::uint64_t>(w) * h;
    if (bytes.size() != kGridHeaderBytes + 4 * n)
        throw FormatError("NLG1: payload holds " + std::to_string((bytes.size() - kGridHeaderBytes) / 4) +
                          " samples, header claims " + std::to_string(n));
    std::vector<float> values(n);
    for (std::uint64_t i = 0; i < n; ++i)
        values[i] = std::bit_cast<float>(detail::get_u32(bytes, kGridHeaderBytes + 4 * i));
    try {
        return Grid(w, h, static_cast<Units>(tag), std::move(values));
    } catch (const Error& e) {
        throw FormatError(std::string("NLG1: ") + e.what());
    }
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Grid load_grid(const std::filesystem::path& path) { return read_grid(read_file_bytes(path)); }
inline void save_grid(const std::filesystem::path& path, const Grid& g) { write_file_bytes(path, write_grid(g)); }

/// CSV import: one line per raster row, comma separated. Empty cells and
/// "nan" are missing samples.
inline Grid parse_csv_grid(std::string_view text, Units units)
{
    std::vector<float> values;
    std::uint32_t width = 0, height = 0;
    std::istringstream lines{std::string(text)};
    std::string line;
    while (std::getline(lines, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        std::uint32_t cols = 0;
        std::istringstream cells(line);
        std::string cell;
        while (std::getline(cells, cell, ',')) {
            const auto first = cell.find_first_not_of(" \t");
            if (first == std::string::npos || cell.substr(first).starts_with("nan")) {
                values.push_back(missing());
            } else {
                try {
                    values.push_back(std::stof(cell));
                } catch (const std::exception&) {
                    throw FormatError("CSV: bad number '" + cell + "' on row " + std::to_string(height));
                }
            }
            ++cols;
        }
        if (!line.empty() && line.back() == ',') {
            values.push_back(missing());
            ++cols;
        }
        if (height == 0) width = cols;
        else if (cols != width) throw FormatError("CSV: row " + std::to_string(height) + " has " +
                                                  std::to_string(cols) + " cells, expected " + std::to_string(width));
        ++height;
    }
    if (width == 0 || height == 0) throw FormatError("CSV: empty grid");
    try {
        return Grid(width, height, units, std::move(values));
    } catch (const Error& e) {
        throw FormatError(std::string("CSV: ") + e.what());
    }
}

inline Grid load_csv_grid(const std::filesystem::path& path, Units units)
{
    const auto bytes = read_file_bytes(path);
    return parse_csv_grid(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), units);
}

// ---------------------------------------------------------------------------
// Preprocessing transforms

/// Mean of the non-missing samples in each k x k block; an all-missing block
/// stays missing.
inline Grid block_average(const Grid& g, std::uint32_t k)
{
    if (k == 0) throw ParameterError("block_average: k must be >= 1");
    if (g.width() % k != 0 || g.height() % k != 0)
        throw ShapeError("block_average: " + std::to_string(g.width()) + "x" + std::to_string(g.height()) +
                         " is not divisible by " + std::to_string(k));
    const std::uint32_t w = g.width() / k, h = g.height() / k;
    std::vector<float> out(static_cast<std::size_t>(w) * h);
    for (std::uint32_t r = 0; r < h; ++r) {
        for (std::uint32_t c = 0; c < w; ++c) {
            double sum = 0.0;
            std::uint32_t n = 0;
            for (std::uint32_t i = 0; i < k; ++i)
                for (std::uint32_t j = 0; j < k; ++j) {
                    const float v = g.at(r * k + i, c * k + j);
                    if (!is_missing(v)) {
                        sum += v;
                        ++n;
                    }
                }
            out[static_cast<std::size_t>(r) * w + c] = n ? static_cast<float>(sum / n) : missing();
        }
    }
    return Grid(w, h, g.units(), std::move(out));
}

/// Linear-interpolated percentile (p in [0,100]) of the non-missing samples.
inline double percentile(const Grid& g, double p)
{
    if (p < 0.0 || p > 100.0) throw ParameterError("percentile: p must lie in [0,100]");
    std::vector<double> v;
    v.reserve(g.size());
    for (float x : g.values())
        if (!is_missing(x)) v.push_back(x);
    if (v.empty()) throw EvaluationError("percentile: grid has no valid samples");
    std::sort(v.begin(), v.end());
    const double pos = p / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline Grid linear_scale_to_dn(const Grid& g, double r_lo, double r_hi)
{
    if (g.units() != Units::radiance) throw UnitsError("linear_scale_to_dn: expects radiance");
    if (!(r_hi > r_lo)) throw ParameterError("linear_scale_to_dn: r_hi must exceed r_lo");
    std::vector<float> out(g.size());
    const auto in = g.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (is_missing(in[i])) {
            out[i] = missing();
            continue;
        }
        const double dn = kDnMax * (in[i] - r_lo) / (r_hi - r_lo);
        out[i] = static_cast<float>(std::clamp(dn, 0.0, static_cast<double>(kDnMax)));
    }
    return Grid(g.width(), g.height(), Units::dn, std::move(out));
}

/// Zeroes both rasters wherever VIIRS is below the radiance floor and DMSP
/// records no light.
inline std::pair<Grid, Grid> joint_background_filter(const Grid& viirs, const Grid& dmsp, float floor = 0.5f)
{
    require_same_shape(viirs, dmsp, "joint_background_filter");
    if (viirs.units() != Units::radiance) throw UnitsError("joint_background_filter: viirs must be radiance");
    if (dmsp.units() != Units::dn) throw UnitsError("joint_background_filter: dmsp must be dn");
    std::vector<float> v(viirs.values().begin(), viirs.values().end());
    std::vector<float> d(dmsp.values().begin(), dmsp.values().end());
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i] < floor && d[i] == 0.0f) {
            v[i] = 0.0f;
            d[i] = 0.0f;
        }
    }
    return {Grid(viirs.width(), viirs.height(), Units::radiance, std::move(v)),
            Grid(dmsp.width(), dmsp.height(), Units::dn, std::move(d))};
}

namespace detail {

template <class F>
Grid map_values(const Grid& g, Units out_units, F&& f)
{
    std::vector<float> out(g.size());
    const auto in = g.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = is_missing(in[i]) ? missing() : f(in[i]);
    return Grid(g.width(), g.height(), out_units, std::move(out));
}

} // namespace detail

inline Grid normalize_signed(const Grid& g)
{
    if (g.units() != Units::dn) throw UnitsError("normalize_signed: expects dn");
    return detail::map_values(g, Units::signed_unit, [](float v) { return 2.0f * (v / kDnMax) - 1.0f; });
}

/// Accepts out-of-range samples (a sampler can overshoot) and clamps to [0,63].
inline Grid denormalize_dn(const Grid& g)
{
    if (g.units() != Units::signed_unit) throw UnitsError("denormalize_dn: expects signed");
    return detail::map_values(g, Units::dn,
                              [](float v) { return std::clamp(kDnMax * (v + 1.0f) / 2.0f, 0.0f, kDnMax); });
}

/// Values outside [-1,1] are clamped first; samplers may hand back raw floats.
inline Grid signed_grid_from(std::uint32_t width, std::uint32_t height, std::vector<float> values)
{
    for (auto& v : values)
        if (!is_missing(v)) v = std::clamp(v, -1.0f, 1.0f);
    return Grid(width, height, Units::signed_unit, std::move(values));
}

/// Map any units onto [0,1]: dn divides by 63, signed maps (v+1)/2.
inline Grid to_unit(const Grid& g)
{
    switch (g.units()) {
    case Units::unit: return g;
    case Units::dn: return detail::map_values(g, Units::unit, [](float v) { return v / kDnMax; });
    case Units::signed_unit:
        return detail::map_values(g, Units::unit, [](float v) { return std::clamp((v + 1.0f) / 2.0f, 0.0f, 1.0f); });
    case Units::radiance: break;
    }
    throw UnitsError("to_unit: radiance has no fixed range; scale to dn first");
}

/// Top-left crop.
inline Grid crop(const Grid& g, std::uint32_t width, std::uint32_t height)
{
    if (width > g.width() || height > g.height() || width == 0 || height == 0)
        throw ShapeError("crop: target larger than source");
    std::vector<float> out;
    out.reserve(static_cast<std::size_t>(width) * height);
    for (std::uint32_t r = 0; r < height; ++r)
        for (std::uint32_t c = 0; c < width; ++c) out.push_back(g.at(r, c));
    return Grid(width, height, g.units(), std::move(out));
}

} // namespace nightfuse
