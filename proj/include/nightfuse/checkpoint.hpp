#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "nightfuse/network.hpp"
#include "nightfuse/raster.hpp"
#include "nightfuse/rng.hpp"
#include "nightfuse/schedule.hpp"

namespace nightfuse {

enum class Objective { noise, velocity };
enum class PrecisionMode { full32, half16, weights_int8 };

inline std::string objective_name(Objective o) { return o == Objective::noise ? "noise" : "velocity"; }
inline Objective parse_objective(const std::string& s)
{
    if (s == "noise") return Objective::noise;
    if (s == "velocity") return Objective::velocity;
    throw ParameterError("unknown objective '" + s + "'");
}

inline std::string precision_name(PrecisionMode m)
{
    switch (m) {
    case PrecisionMode::full32: return "full32";
    case PrecisionMode::half16: return "half16";
    case PrecisionMode::weights_int8: return "weights_int8";
    }
    return "?";
}
inline PrecisionMode parse_precision(const std::string& s)
{
    if (s == "full32") return PrecisionMode::full32;
    if (s == "half16") return PrecisionMode::half16;
    if (s == "weights_int8") return PrecisionMode::weights_int8;
    throw ParameterError("unknown precision '" + s + "'");
}

/// Symmetric per-output-channel 8-bit weights: w ~ scale[o] * (code - zero_point[o]).
struct QuantizedArray {
    std::vector<std::int8_t> codes;
    std::vector<float> scale;
    std::vector<float> zero_point;
};

struct HalfArray {
    std::vector<std::uint16_t> bits;
};

struct ParamArray {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::variant<std::vector<float>, HalfArray, QuantizedArray> data;

    std::size_t numel() const
    {
        std::size_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }

    /// Float view of the stored values (dequantized / widened as needed).
    std::vector<float> to_float() const
    {
        if (const auto* f = std::get_if<std::vector<float>>(&data)) return *f;
        std::vector<float> out(numel());
        if (const auto* h = std::get_if<HalfArray>(&data)) {
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(h->bits[i]));
            return out;
        }
        const auto& q = std::get<QuantizedArray>(data);
        const std::size_t per = out.size() / dims[0];
        for (std::size_t o = 0; o < dims[0]; ++o)
            for (std::size_t i = 0; i < per; ++i)
                out[o * per + i] = q.scale[o] * (static_cast<float>(q.codes[o * per + i]) - q.zero_point[o]);
        return out;
    }
};

struct TrainMeta {
    int best_epoch = -1;
    double best_val_loss = std::numeric_limits<double>::infinity();
    std::uint64_t seed = 0;
};

struct Checkpoint {
    NetConfig net;
    ScheduleConfig schedule;
    Objective objective = Objective::noise;
    PrecisionMode precision = PrecisionMode::full32;
    TrainMeta meta;
    std::vector<ParamArray> params;

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& p : params) n += p.numel();
        return n;
    }
};

/// Deterministic initialization. Weights draw from U(-1/sqrt(fan_in),
/// 1/sqrt(fan_in)); biases and norm shifts start at 0, norm scales at 1.
/// The output projection is zeroed unless `zero_output` is false.
inline Checkpoint init(const NetConfig& cfg, std::uint64_t seed, Objective objective = Objective::noise,
                       ScheduleConfig schedule = {}, bool zero_output = true)
{
    const UNetLayout layout = UNetLayout::build(cfg);
    Checkpoint ck{cfg, schedule, objective, PrecisionMode::full32, {}, {}};
    ck.meta.seed = seed;
    Rng rng(derive_seed(seed, "init"));
    for (const auto& spec : layout.params) {
        std::vector<float> v(spec.numel(), 0.0f);
        if (spec.role == ParamRole::weight) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(spec.numel() / spec.dims[0]));
            for (auto& x : v) x = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
        } else if (spec.role == ParamRole::norm && spec.name.ends_with(".gamma")) {
            std::fill(v.begin(), v.end(), 1.0f);
        }
        ck.params.push_back({spec.name, spec.dims, std::move(v)});
    }
    if (zero_output) {
        for (auto& p : ck.params)
            if (p.name.starts_with("out.conv.")) std::get<std::vector<float>>(p.data).assign(p.numel(), 0.0f);
    }
    return ck;
}

/// Check the parameter table against the layout implied by the config.
inline void validate_against_layout(const Checkpoint& ck, const UNetLayout& layout)
{
    if (ck.params.size() != layout.params.size())
        throw FormatError("checkpoint has " + std::to_string(ck.params.size()) + " tensors, config implies " +
                          std::to_string(layout.params.size()));
    for (std::size_t i = 0; i < layout.params.size(); ++i) {
        if (ck.params[i].name != layout.params[i].name || ck.params[i].dims != layout.params[i].dims)
            throw FormatError("checkpoint tensor '" + ck.params[i].name + "' disagrees with config (expected '" +
                              layout.params[i].name + "')");
    }
}

template <class T>
ParamStore<T> materialize(const Checkpoint& ck)
{
    ParamStore<T> s;
    s.reserve(ck.params.size());
    for (const auto& p : ck.params) {
        const auto f = p.to_float();
        s.emplace_back(f.begin(), f.end());
    }
    return s;
}

template <class T>
void store_params(Checkpoint& ck, const ParamStore<T>& s)
{
    for (std::size_t i = 0; i < ck.params.size(); ++i)
        ck.params[i].data = std::vector<float>(s[i].begin(), s[i].end());
    ck.precision = PrecisionMode::full32;
}

inline bool is_quantizable(const ParamArray& p) { return p.dims.size() >= 2 && p.name.ends_with(".weight"); }

/// Per-output-channel symmetric int8 quantization of every convolution and
/// affine weight: scale = max|w| / 127, zero point 0. An all-zero channel
/// stores scale 1 with all codes 0.
inline Checkpoint quantize_int8(const Checkpoint& ck)
{
    Checkpoint out = ck;
    for (auto& p : out.params) {
        if (!is_quantizable(p)) continue;
        const auto w = p.to_float();
        const std::size_t rows = p.dims[0];
        const std::size_t per = w.size() / rows;
        QuantizedArray q;
        q.codes.resize(w.size());
        q.scale.resize(rows);
        q.zero_point.assign(rows, 0.0f);
        for (std::size_t o = 0; o < rows; ++o) {
            float amax = 0.0f;
            for (std::size_t i = 0; i < per; ++i) amax = std::max(amax, std::abs(w[o * per + i]));
            const float scale = amax > 0.0f ? amax / 127.0f : 1.0f;
            q.scale[o] = scale;
            for (std::size_t i = 0; i < per; ++i) {
                const float c = std::nearbyint(w[o * per + i] / scale);
                q.codes[o * per + i] = static_cast<std::int8_t>(std::clamp(c, -127.0f, 127.0f));
            }
        }
        p.data = std::move(q);
    }
    out.precision = PrecisionMode::weights_int8;
    return out;
}

/// Dequantized / widened copy with every tensor stored as f32.
inline Checkpoint to_full32(const Checkpoint& ck)
{
    Checkpoint out = ck;
    for (auto& p : out.params) p.data = p.to_float();
    out.precision = PrecisionMode::full32;
    return out;
}

inline Checkpoint to_half16(const Checkpoint& ck)
{
    Checkpoint out = ck;
    for (auto& p : out.params) {
        const auto f = p.to_float();
        HalfArray h;
        h.bits.resize(f.size());
        for (std::size_t i = 0; i < f.size(); ++i) h.bits[i] = Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(f[i]));
        p.data = std::move(h);
    }
    out.precision = PrecisionMode::half16;
    return out;
}

// ---------------------------------------------------------------------------
// NFCK serialization

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json config_document(const Checkpoint& ck)
{
    const auto& n = ck.net;
    nlohmann::json j;
    j["net"] = {{"patch", n.patch},
                {"in_channels", n.in_channels},
                {"out_channels", n.out_channels},
                {"base_width", n.base_width},
                {"level_multipliers", n.level_multipliers},
                {"attention_resolution", n.attention_resolution},
                {"t_embed_dim", n.t_embed_dim},
                {"norm_groups", n.norm_groups},
                {"blocks_per_level", n.blocks_per_level}};
    const auto& s = ck.schedule;
    j["schedule"] = {{"kind", schedule_kind_name(s.kind)}, {"T", s.T},
                     {"beta_start", s.beta_start},          {"beta_end", s.beta_end},
                     {"cosine_s", s.cosine_s},              {"beta_max", s.beta_max}};
    j["objective"] = objective_name(ck.objective);
    j["precision"] = precision_name(ck.precision);
    j["meta"] = {{"best_epoch", ck.meta.best_epoch},
                 {"best_val_loss", std::isfinite(ck.meta.best_val_loss) ? nlohmann::json(ck.meta.best_val_loss)
                                                                        : nlohmann::json(nullptr)},
                 {"seed", ck.meta.seed}};
    return j;
}

namespace detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u16(std::uint16_t v) { put(v, 2); }
    void u32(std::uint32_t v) { put(v, 4); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void bytes(const void* p, std::size_t n)
    {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    void put(std::uint64_t v, int n)
    {
        for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    std::vector<std::uint8_t> out_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}
    std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    float f32() { return std::bit_cast<float>(u32()); }
    std::span<const std::uint8_t> take(std::size_t n)
    {
        need(n);
        auto s = in_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == in_.size(); }

private:
    void need(std::size_t n) const
    {
        if (in_.size() - pos_ < n) throw FormatError("NFCK: truncated file");
    }
    std::uint64_t get(int n)
    {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::vector<std::uint8_t> save(const Checkpoint& ck)
{
    detail::ByteWriter w;
    w.bytes("NFCK", 4);
    w.u32(kCheckpointVersion);
    const std::string doc = config_document(ck).dump();
    w.u32(static_cast<std::uint32_t>(doc.size()));
    w.bytes(doc.data(), doc.size());
    w.u32(static_cast<std::uint32_t>(ck.params.size()));
    for (const auto& p : ck.params) {
        w.u16(static_cast<std::uint16_t>(p.name.size()));
        w.bytes(p.name.data(), p.name.size());
        w.u8(static_cast<std::uint8_t>(p.data.index()));
        w.u8(static_cast<std::uint8_t>(p.dims.size()));
        for (auto d : p.dims) w.u32(d);
        if (const auto* f = std::get_if<std::vector<float>>(&p.data)) {
            for (float v : *f) w.f32(v);
        } else if (const auto* h = std::get_if<HalfArray>(&p.data)) {
            for (auto b : h->bits) w.u16(b);
        } else {
            const auto& q = std::get<QuantizedArray>(p.data);
            w.bytes(q.codes.data(), q.codes.size());
            for (float s : q.scale) w.f32(s);
            for (float z : q.zero_point) w.f32(z);
        }
    }
    return w.take();
}

inline Checkpoint load(std::span<const std::uint8_t> bytes)
{
    detail::ByteReader r(bytes);
    const auto magic = r.take(4);
    if (std::memcmp(magic.data(), "NFCK", 4) != 0) throw FormatError("NFCK: bad magic");
    if (const auto v = r.u32(); v != kCheckpointVersion) throw FormatError("NFCK: unsupported version " + std::to_string(v));
    const auto doc_len = r.u32();
    const auto doc_bytes = r.take(doc_len);
    Checkpoint ck;
    try {
        const auto j = nlohmann::json::parse(doc_bytes.begin(), doc_bytes.end());
        const auto& n = j.at("net");
        ck.net.patch = n.at("patch");
        ck.net.in_channels = n.at("in_channels");
        ck.net.out_channels = n.at("out_channels");
        ck.net.base_width = n.at("base_width");
        ck.net.level_multipliers = n.at("level_multipliers").get<std::vector<int>>();
        ck.net.attention_resolution = n.at("attention_resolution");
        ck.net.t_embed_dim = n.at("t_embed_dim");
        ck.net.norm_groups = n.at("norm_groups");
        ck.net.blocks_per_level = n.at("blocks_per_level");
        const auto& s = j.at("schedule");
        ck.schedule.kind = parse_schedule_kind(s.at("kind"));
        ck.schedule.T = s.at("T");
        ck.schedule.beta_start = s.at("beta_start");
        ck.schedule.beta_end = s.at("beta_end");
        ck.schedule.cosine_s = s.at("cosine_s");
        ck.schedule.beta_max = s.at("beta_max");
        ck.objective = parse_objective(j.at("objective"));
        ck.precision = parse_precision(j.at("precision"));
        const auto& m = j.at("meta");
        ck.meta.best_epoch = m.at("best_epoch");
        ck.meta.best_val_loss = m.at("best_val_loss").is_null() ? std::numeric_limits<double>::infinity()
                                                                : m.at("best_val_loss").get<double>();
        ck.meta.seed = m.at("seed");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("NFCK: bad config document: ") + e.what());
    } catch (const ParameterError& e) {
        throw FormatError(std::string("NFCK: ") + e.what());
    }

    const auto count = r.u32();
    for (std::uint32_t t = 0; t < count; ++t) {
        ParamArray p;
        const auto name = r.take(r.u16());
        p.name.assign(name.begin(), name.end());
        const auto dtype = r.u8();
        const auto rank = r.u8();
        for (int d = 0; d < rank; ++d) p.dims.push_back(r.u32());
        if (rank == 0) throw FormatError("NFCK: tensor '" + p.name + "' has rank 0");
        const std::size_t n = p.numel();
        if (dtype == 0) {
            std::vector<float> v(n);
            for (auto& x : v) x = r.f32();
            p.data = std::move(v);
        } else if (dtype == 1) {
            HalfArray h;
            h.bits.resize(n);
            for (auto& b : h.bits) b = r.u16();
            p.data = std::move(h);
        } else if (dtype == 2) {
            QuantizedArray q;
            const auto codes = r.take(n);
            q.codes.assign(reinterpret_cast<const std::int8_t*>(codes.data()),
                           reinterpret_cast<const std::int8_t*>(codes.data()) + n);
            q.scale.resize(p.dims[0]);
            q.zero_point.resize(p.dims[0]);
            for (auto& s : q.scale) s = r.f32();
            for (auto& z : q.zero_point) z = r.f32();
            p.data = std::move(q);
        } else {
            throw FormatError("NFCK: unknown dtype tag " + std::to_string(dtype));
        }
        ck.params.push_back(std::move(p));
    }
    if (!r.done()) throw FormatError("NFCK: trailing bytes after tensor table");
    try {
        validate_against_layout(ck, UNetLayout::build(ck.net));
    } catch (const ParameterError& e) {
        throw FormatError(std::string("NFCK: ") + e.what());
    }
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) { write_file_bytes(path, save(ck)); }
inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return load(read_file_bytes(path)); }

} // namespace nightfuse
