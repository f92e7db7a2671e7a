#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "nightfuse/dataset.hpp"
#include "nightfuse/evaluate.hpp"
#include "nightfuse/sample.hpp"
#include "nightfuse/train.hpp"

namespace nightfuse {

struct DataConfig {
    std::optional<SynthParams> synth; // set unless viirs/dmsp paths are given
    std::filesystem::path viirs;
    std::filesystem::path dmsp;
    std::string format = "nlg"; // nlg | csv
    std::uint32_t resample_factor = 1;
    double r_lo = 0.0;
    std::optional<double> r_hi; // unset: percentile of the scene
    double r_hi_percentile = 99.5;
    double background_floor = 0.5;
    std::size_t n_val = 50;
};

struct SampleEntry {
    std::string label;
    SamplerSpec spec;
};

struct BenchConfig {
    bool enabled = true;
    std::vector<std::string> labels; // empty: every sample entry
    std::vector<PrecisionMode> precisions{PrecisionMode::full32, PrecisionMode::half16};
    std::optional<std::string> int8_label = std::string("ddim");
    int threads = 1;
};

struct ExperimentConfig {
    std::filesystem::path output_dir;
    std::uint64_t seed = 0;
    bool deterministic = false;
    DataConfig data;
    NetConfig network;
    ScheduleConfig schedule;
    TrainConfig train_noise;
    TrainConfig train_velocity;
    std::vector<SampleEntry> methods;
    int fuse_threads = 1;
    PrecisionMode precision = PrecisionMode::full32;
    std::optional<Band> band; // unset: top quartile of the bins
    bool spectrum_energy = false;
    BenchConfig bench;

    const SampleEntry* find(const std::string& label) const
    {
        for (const auto& m : methods)
            if (m.label == label) return &m;
        return nullptr;
    }
};

/// The six compared methods, in report order.
inline std::vector<Method> default_methods()
{
    return {Method::ddim, Method::lcm, Method::edm_heun, Method::pf_euler, Method::pf_heun, Method::fm_euler};
}

namespace detail {

using nlohmann::json;

inline std::string join_key(const std::string& path, const std::string& key)
{
    return path.empty() ? key : path + "." + key;
}

inline void read_value(const json& j, const std::string& path, bool& out)
{
    if (!j.is_boolean()) throw ConfigError(path, "expected a boolean");
    out = j.get<bool>();
}

template <class T>
    requires(std::is_integral_v<T> && !std::is_same_v<T, bool>)
void read_value(const json& j, const std::string& path, T& out)
{
    if (!j.is_number_integer()) throw ConfigError(path, "expected an integer");
    if constexpr (std::is_unsigned_v<T>) {
        if (!j.is_number_unsigned() && j.get<std::int64_t>() < 0)
            throw ConfigError(path, "expected a non-negative integer");
        const auto v = j.get<std::uint64_t>();
        if (v > std::numeric_limits<T>::max()) throw ConfigError(path, "integer out of range");
        out = static_cast<T>(v);
    } else {
        if (j.is_number_unsigned() && j.get<std::uint64_t>() > static_cast<std::uint64_t>(std::numeric_limits<T>::max()))
            throw ConfigError(path, "integer out of range");
        const auto v = j.get<std::int64_t>();
        if (v < std::numeric_limits<T>::min() || v > std::numeric_limits<T>::max())
            throw ConfigError(path, "integer out of range");
        out = static_cast<T>(v);
    }
}

template <class T>
    requires std::is_floating_point_v<T>
void read_value(const json& j, const std::string& path, T& out)
{
    if (!j.is_number()) throw ConfigError(path, "expected a number");
    out = j.get<T>();
}

inline void read_value(const json& j, const std::string& path, std::string& out)
{
    if (!j.is_string()) throw ConfigError(path, "expected a string");
    out = j.get<std::string>();
}

inline void read_value(const json& j, const std::string& path, std::filesystem::path& out)
{
    std::string s;
    read_value(j, path, s);
    out = s;
}

template <class E, class Parse>
void read_enum(const json& j, const std::string& path, E& out, Parse parse)
{
    std::string s;
    read_value(j, path, s);
    try {
        out = parse(s);
    } catch (const Error& e) {
        throw ConfigError(path, e.what());
    }
}

inline void read_value(const json& j, const std::string& path, Method& out) { read_enum(j, path, out, parse_method); }
inline void read_value(const json& j, const std::string& path, ScheduleKind& out)
{
    read_enum(j, path, out, parse_schedule_kind);
}
inline void read_value(const json& j, const std::string& path, PrecisionMode& out)
{
    read_enum(j, path, out, parse_precision);
}

template <class T>
void read_value(const json& j, const std::string& path, std::vector<T>& out)
{
    if (!j.is_array()) throw ConfigError(path, "expected an array");
    out.clear();
    for (std::size_t i = 0; i < j.size(); ++i) {
        T v{};
        read_value(j[i], path + "[" + std::to_string(i) + "]", v);
        out.push_back(v);
    }
}

inline json to_json_value(Method m) { return method_name(m); }
inline json to_json_value(ScheduleKind k) { return schedule_kind_name(k); }
inline json to_json_value(PrecisionMode p) { return precision_name(p); }
inline json to_json_value(const std::filesystem::path& p) { return p.generic_string(); }
template <class T>
json to_json_value(const T& v)
{
    if constexpr (requires { typename T::value_type; } && !std::is_same_v<T, std::string>) {
        json a = json::array();
        for (const auto& x : v) a.push_back(to_json_value(x));
        return a;
    } else {
        return v;
    }
}

/// Walks one JSON object; every key must be consumed before `finish`.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object()) throw ConfigError(path_, "expected an object");
    }

    bool has(const char* key) const { return j_.contains(key); }

    const json* take(const char* key)
    {
        auto it = j_.find(key);
        if (it == j_.end()) return nullptr;
        used_.insert(key);
        return &*it;
    }

    template <class T>
    void operator()(const char* key, T& out)
    {
        if (const json* v = take(key)) read_value(*v, path(key), out);
    }

    std::string path(const std::string& key) const { return join_key(path_, key); }

    void finish() const
    {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.contains(it.key())) throw ConfigError(path(it.key()), "unknown key");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

class ObjectWriter {
public:
    template <class T>
    void operator()(const char* key, const T& v)
    {
        j[key] = to_json_value(v);
    }
    json j = json::object();
};

template <class V, class S>
void visit_synth(V& v, S& p)
{
    v("fine_size", p.fine_size);
    v("n_cities", p.n_cities);
    v("n_towns", p.n_towns);
    v("city_sigma_px", p.city_sigma_px);
    v("city_peak", p.city_peak);
    v("town_sigma_px", p.town_sigma_px);
    v("town_peak", p.town_peak);
    v("saturation_radiance", p.saturation_radiance);
    v("dmsp_blur_sigma_px", p.dmsp_blur_sigma_px);
    v("sensor_noise_sd", p.sensor_noise_sd);
    v("seed", p.seed);
}

template <class V, class N>
void visit_network(V& v, N& n)
{
    v("patch", n.patch);
    v("in_channels", n.in_channels);
    v("out_channels", n.out_channels);
    v("base_width", n.base_width);
    v("level_multipliers", n.level_multipliers);
    v("attention_resolution", n.attention_resolution);
    v("t_embed_dim", n.t_embed_dim);
    v("norm_groups", n.norm_groups);
    v("blocks_per_level", n.blocks_per_level);
}

template <class V, class S>
void visit_schedule(V& v, S& s)
{
    v("kind", s.kind);
    v("T", s.T);
    v("beta_start", s.beta_start);
    v("beta_end", s.beta_end);
    v("cosine_s", s.cosine_s);
    v("beta_max", s.beta_max);
}

template <class V, class C>
void visit_train(V& v, C& c)
{
    v("lr0", c.lr0);
    v("lr_min", c.lr_min);
    v("max_epochs", c.max_epochs);
    v("batch", c.batch);
    v("patience", c.patience);
    v("seed", c.seed);
    v("beta1", c.beta1);
    v("beta2", c.beta2);
    v("adam_eps", c.adam_eps);
}

template <class V, class S>
void visit_sampler(V& v, S& s)
{
    v("method", s.method);
    v("steps", s.steps);
    v("seed", s.seed);
    v("eta", s.eta);
    v("karras_rho", s.karras_rho);
    v("karras_sigma_min", s.karras_sigma_min);
    v("karras_sigma_max", s.karras_sigma_max);
}

template <class F>
void rethrow_as_config(const std::string& path, F&& f)
{
    try {
        f();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(path, e.what());
    }
}

/// Patch count the data section will produce, used to check n_val.
inline std::size_t expected_patch_count(const DataConfig& d, int patch)
{
    std::uint32_t w, h;
    if (d.synth) {
        w = h = d.synth->fine_size / 2;
    } else {
        const Grid g = d.format == "csv" ? load_csv_grid(d.dmsp, Units::dn) : load_grid(d.dmsp);
        w = g.width();
        h = g.height();
    }
    return static_cast<std::size_t>(w / static_cast<std::uint32_t>(patch)) * (h / static_cast<std::uint32_t>(patch));
}

} // namespace detail

struct ValidateOptions {
    bool check_filesystem = true; // input paths exist, output directory writable
};

/// Parse and validate a config document; every default is filled in and any
/// problem is reported with the offending key path.
inline ExperimentConfig validate_config(const nlohmann::json& doc, ValidateOptions opt = {})
{
    using detail::ObjectReader;
    ExperimentConfig cfg;
    ObjectReader top(doc, "");
    if (!top.has("output_dir")) throw ConfigError("output_dir", "missing required key");
    top("output_dir", cfg.output_dir);
    if (cfg.output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
    top("seed", cfg.seed);
    top("deterministic", cfg.deterministic);

    // data
    if (const auto* j = top.take("data")) {
        ObjectReader r(*j, "data");
        if (const auto* s = r.take("synth")) {
            SynthParams p;
            ObjectReader sr(*s, "data.synth");
            detail::visit_synth(sr, p);
            sr.finish();
            cfg.data.synth = p;
        }
        r("viirs", cfg.data.viirs);
        r("dmsp", cfg.data.dmsp);
        r("format", cfg.data.format);
        r("resample_factor", cfg.data.resample_factor);
        r("r_lo", cfg.data.r_lo);
        if (const auto* v = r.take("r_hi"); v && !v->is_null()) {
            double x;
            detail::read_value(*v, "data.r_hi", x);
            cfg.data.r_hi = x;
        }
        r("r_hi_percentile", cfg.data.r_hi_percentile);
        r("background_floor", cfg.data.background_floor);
        r("n_val", cfg.data.n_val);
        r.finish();
    }
    const bool has_paths = !cfg.data.viirs.empty() || !cfg.data.dmsp.empty();
    if (has_paths && cfg.data.synth) throw ConfigError("data", "give either synth or viirs/dmsp paths, not both");
    if (has_paths) {
        if (cfg.data.viirs.empty()) throw ConfigError("data.viirs", "missing required key");
        if (cfg.data.dmsp.empty()) throw ConfigError("data.dmsp", "missing required key");
    } else if (!cfg.data.synth) {
        cfg.data.synth = SynthParams{};
    }
    if (cfg.data.format != "nlg" && cfg.data.format != "csv") throw ConfigError("data.format", "expected nlg or csv");
    if (cfg.data.resample_factor < 1) throw ConfigError("data.resample_factor", "must be >= 1");
    if (cfg.data.r_hi && !(*cfg.data.r_hi > cfg.data.r_lo)) throw ConfigError("data.r_hi", "must exceed r_lo");
    if (cfg.data.r_hi_percentile <= 0.0 || cfg.data.r_hi_percentile > 100.0)
        throw ConfigError("data.r_hi_percentile", "must lie in (0, 100]");
    if (cfg.data.synth) detail::rethrow_as_config("data.synth", [&] { cfg.data.synth->validate(); });

    if (const auto* j = top.take("network")) {
        ObjectReader r(*j, "network");
        detail::visit_network(r, cfg.network);
        r.finish();
    }
    detail::rethrow_as_config("network", [&] { cfg.network.validate(); });
    if (cfg.network.in_channels != 2 || cfg.network.out_channels != 1)
        throw ConfigError("network", "the conditional model needs in_channels 2 and out_channels 1");

    if (const auto* j = top.take("schedule")) {
        ObjectReader r(*j, "schedule");
        detail::visit_schedule(r, cfg.schedule);
        r.finish();
    }
    detail::rethrow_as_config("schedule", [&] { make_schedule(cfg.schedule); });

    cfg.train_noise.objective = Objective::noise;
    cfg.train_velocity.objective = Objective::velocity;
    cfg.train_noise.seed = derive_seed(cfg.seed, "train", 0);
    cfg.train_velocity.seed = derive_seed(cfg.seed, "train", 1);
    if (const auto* j = top.take("train")) {
        ObjectReader r(*j, "train");
        if (const auto* n = r.take("noise")) {
            ObjectReader nr(*n, "train.noise");
            detail::visit_train(nr, cfg.train_noise);
            nr.finish();
        }
        if (const auto* v = r.take("velocity")) {
            ObjectReader vr(*v, "train.velocity");
            detail::visit_train(vr, cfg.train_velocity);
            vr.finish();
        }
        r.finish();
    }
    detail::rethrow_as_config("train.noise", [&] { cfg.train_noise.validate(); });
    detail::rethrow_as_config("train.velocity", [&] { cfg.train_velocity.validate(); });

    bool methods_given = false;
    if (const auto* j = top.take("sample")) {
        ObjectReader r(*j, "sample");
        if (const auto* m = r.take("methods")) {
            methods_given = true;
            if (!m->is_array()) throw ConfigError("sample.methods", "expected an array");
            for (std::size_t i = 0; i < m->size(); ++i) {
                const std::string path = "sample.methods[" + std::to_string(i) + "]";
                SampleEntry e;
                e.spec.seed = derive_seed(cfg.seed, "sample", i);
                const auto& item = (*m)[i];
                if (item.is_string()) {
                    detail::read_value(item, path, e.spec.method);
                } else {
                    ObjectReader er(item, path);
                    if (!er.has("method")) throw ConfigError(path + ".method", "missing required key");
                    detail::visit_sampler(er, e.spec);
                    er("label", e.label);
                    er.finish();
                }
                if (e.label.empty()) e.label = method_name(e.spec.method);
                cfg.methods.push_back(e);
            }
        }
        r("threads", cfg.fuse_threads);
        r("precision", cfg.precision);
        r.finish();
    }
    if (!methods_given) {
        std::size_t i = 0;
        for (Method m : default_methods()) {
            SampleEntry e{method_name(m), {}};
            e.spec.method = m;
            e.spec.seed = derive_seed(cfg.seed, "sample", i++);
            cfg.methods.push_back(e);
        }
    }
    if (cfg.methods.empty()) throw ConfigError("sample.methods", "method list is empty");
    if (cfg.fuse_threads < 1) throw ConfigError("sample.threads", "must be >= 1");
    std::set<std::string> labels;
    for (std::size_t i = 0; i < cfg.methods.size(); ++i) {
        const std::string path = "sample.methods[" + std::to_string(i) + "]";
        if (!labels.insert(cfg.methods[i].label).second)
            throw ConfigError(path + ".label", "duplicate label '" + cfg.methods[i].label + "'");
        if (cfg.methods[i].label == "viirs" || cfg.methods[i].label == "truth" || cfg.methods[i].label == "condition")
            throw ConfigError(path + ".label", "label '" + cfg.methods[i].label + "' is reserved");
        detail::rethrow_as_config(path, [&] { validate_spec(cfg.methods[i].spec, cfg.schedule.T); });
    }

    if (const auto* j = top.take("eval")) {
        ObjectReader r(*j, "eval");
        if (const auto* b = r.take("band"); b && !b->is_null()) {
            std::vector<std::size_t> v;
            detail::read_value(*b, "eval.band", v);
            if (v.size() != 2 || v[0] > v[1]) throw ConfigError("eval.band", "expected [lo, hi] with lo <= hi");
            cfg.band = Band{v[0], v[1]};
        }
        r("energy", cfg.spectrum_energy);
        r.finish();
    }

    if (const auto* j = top.take("bench")) {
        ObjectReader r(*j, "bench");
        r("enabled", cfg.bench.enabled);
        r("methods", cfg.bench.labels);
        r("precisions", cfg.bench.precisions);
        if (const auto* v = r.take("int8_method")) {
            if (v->is_null()) {
                cfg.bench.int8_label.reset();
            } else {
                std::string s;
                detail::read_value(*v, "bench.int8_method", s);
                cfg.bench.int8_label = s;
            }
        }
        r("threads", cfg.bench.threads);
        r.finish();
    }
    if (cfg.bench.threads < 1) throw ConfigError("bench.threads", "must be >= 1");
    for (std::size_t i = 0; i < cfg.bench.labels.size(); ++i)
        if (!cfg.find(cfg.bench.labels[i]))
            throw ConfigError("bench.methods[" + std::to_string(i) + "]",
                              "'" + cfg.bench.labels[i] + "' is not a sample method label");
    if (cfg.bench.int8_label && !cfg.find(*cfg.bench.int8_label)) {
        // The default designated method may simply be absent from a custom list.
        if (top.has("bench") && doc["bench"].contains("int8_method"))
            throw ConfigError("bench.int8_method", "'" + *cfg.bench.int8_label + "' is not a sample method label");
        cfg.bench.int8_label.reset();
    }
    top.finish();

    if (opt.check_filesystem) {
        namespace fs = std::filesystem;
        if (!cfg.data.synth) {
            if (!fs::exists(cfg.data.viirs)) throw ConfigError("data.viirs", "file not found: " + cfg.data.viirs.string());
            if (!fs::exists(cfg.data.dmsp)) throw ConfigError("data.dmsp", "file not found: " + cfg.data.dmsp.string());
        }
        std::error_code ec;
        fs::create_directories(cfg.output_dir, ec);
        const fs::path probe = cfg.output_dir / ".write-probe";
        {
            std::ofstream f(probe);
            if (ec || !f) throw ConfigError("output_dir", "not writable: " + cfg.output_dir.string());
        }
        fs::remove(probe, ec);
    }
    if (cfg.data.synth || opt.check_filesystem) {
        std::size_t count = 0;
        detail::rethrow_as_config("data", [&] { count = detail::expected_patch_count(cfg.data, cfg.network.patch); });
        if (cfg.data.n_val > count)
            throw ConfigError("data.n_val", "n_val " + std::to_string(cfg.data.n_val) + " exceeds the " +
                                                std::to_string(count) + " available patches");
        if (cfg.data.n_val == 0 || cfg.data.n_val == count)
            throw ConfigError("data.n_val", "training needs both a train and a validation split");
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, ValidateOptions opt = {})
{
    std::ifstream f(path);
    if (!f) throw ConfigError("", "cannot open config file " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("", std::string("config is not valid JSON: ") + e.what());
    }
    return validate_config(doc, opt);
}

/// Fully defaulted document; validate_config(to_json(cfg)) reproduces cfg.
inline nlohmann::json to_json(const ExperimentConfig& cfg)
{
    using nlohmann::json;
    using detail::ObjectWriter;
    json j;
    j["output_dir"] = cfg.output_dir.generic_string();
    j["seed"] = cfg.seed;
    j["deterministic"] = cfg.deterministic;

    json data = json::object();
    if (cfg.data.synth) {
        ObjectWriter w;
        detail::visit_synth(w, *cfg.data.synth);
        data["synth"] = w.j;
    } else {
        data["viirs"] = cfg.data.viirs.generic_string();
        data["dmsp"] = cfg.data.dmsp.generic_string();
    }
    data["format"] = cfg.data.format;
    data["resample_factor"] = cfg.data.resample_factor;
    data["r_lo"] = cfg.data.r_lo;
    data["r_hi"] = cfg.data.r_hi ? json(*cfg.data.r_hi) : json(nullptr);
    data["r_hi_percentile"] = cfg.data.r_hi_percentile;
    data["background_floor"] = cfg.data.background_floor;
    data["n_val"] = cfg.data.n_val;
    j["data"] = data;

    ObjectWriter net, sched, tn, tv;
    detail::visit_network(net, cfg.network);
    detail::visit_schedule(sched, cfg.schedule);
    detail::visit_train(tn, cfg.train_noise);
    detail::visit_train(tv, cfg.train_velocity);
    j["network"] = net.j;
    j["schedule"] = sched.j;
    j["train"] = {{"noise", tn.j}, {"velocity", tv.j}};

    json methods = json::array();
    for (const auto& m : cfg.methods) {
        ObjectWriter w;
        detail::visit_sampler(w, m.spec);
        w.j["label"] = m.label;
        methods.push_back(w.j);
    }
    j["sample"] = {{"methods", methods}, {"threads", cfg.fuse_threads}, {"precision", precision_name(cfg.precision)}};
    j["eval"] = {{"band", cfg.band ? json::array({cfg.band->lo, cfg.band->hi}) : json(nullptr)},
                 {"energy", cfg.spectrum_energy}};
    json precisions = json::array();
    for (auto p : cfg.bench.precisions) precisions.push_back(precision_name(p));
    j["bench"] = {{"enabled", cfg.bench.enabled},
                  {"methods", cfg.bench.labels},
                  {"precisions", precisions},
                  {"int8_method", cfg.bench.int8_label ? json(*cfg.bench.int8_label) : json(nullptr)},
                  {"threads", cfg.bench.threads}};
    return j;
}

} // namespace nightfuse
