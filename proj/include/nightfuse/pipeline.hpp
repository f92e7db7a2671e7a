#pragma once

#include <openssl/evp.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "nightfuse/bench.hpp"
#include "nightfuse/config.hpp"

namespace nightfuse {

inline constexpr const char* kVersion = "nightfuse 0.1.0";

inline const std::vector<std::string>& stage_names()
{
    static const std::vector<std::string> names{"synth", "prepare", "train", "fuse", "eval", "psd", "bench", "report"};
    return names;
}

/// Hex SHA-256 of a byte sequence.
inline std::string sha256_hex(std::span<const std::uint8_t> bytes)
{
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256: digest failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 15]);
    }
    return out;
}

/// File layout of one artifact directory.
struct ArtifactPaths {
    std::filesystem::path root;

    std::filesystem::path viirs_raw() const { return root / "data" / "viirs_raw.nlg"; }
    std::filesystem::path dmsp_raw() const { return root / "data" / "dmsp_raw.nlg"; }
    std::filesystem::path condition() const { return root / "data" / "condition_dn.nlg"; }
    std::filesystem::path truth() const { return root / "data" / "truth_dn.nlg"; }
    std::filesystem::path patches() const { return root / "patches"; }
    std::filesystem::path checkpoint(Objective o) const { return root / "checkpoints" / (objective_name(o) + ".nfck"); }
    std::filesystem::path train_log(Objective o) const
    {
        return root / "checkpoints" / (objective_name(o) + "_log.csv");
    }
    std::filesystem::path fused(const std::string& label) const { return root / "fused" / (label + ".nlg"); }
    std::filesystem::path timings() const { return root / "fused" / "timings.csv"; }
    std::filesystem::path metrics() const { return root / "metrics.csv"; }
    std::filesystem::path spectra() const { return root / "spectra"; }
    std::filesystem::path spectrum(const std::string& source) const { return spectra() / (source + ".csv"); }
    std::filesystem::path distances() const { return spectra() / "distance.csv"; }
    std::filesystem::path bench() const { return root / "bench.csv"; }
    std::filesystem::path summary() const { return root / "summary.csv"; }
    std::filesystem::path manifest() const { return root / "run_manifest.json"; }
    std::filesystem::path failed() const { return root / "FAILED"; }
};

namespace detail {

inline void require_artifact(const std::filesystem::path& p)
{
    if (!std::filesystem::exists(p)) throw FormatError("missing upstream artifact " + p.string());
}

inline void write_text(const std::filesystem::path& p, const std::string& text)
{
    std::filesystem::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) throw FormatError("cannot write " + p.string());
    f << text;
    if (!f) throw FormatError("write failed: " + p.string());
}

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p)
{
    require_artifact(p);
    std::ifstream f(p);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(std::move(cells));
    }
    return rows;
}

inline Grid load_input(const std::filesystem::path& p, const std::string& format, Units csv_units)
{
    require_artifact(p);
    return format == "csv" ? load_csv_grid(p, csv_units) : load_grid(p);
}

inline std::vector<Objective> needed_objectives(const ExperimentConfig& cfg)
{
    bool noise = false, velocity = false;
    for (const auto& m : cfg.methods) (required_objective(m.spec.method) == Objective::noise ? noise : velocity) = true;
    std::vector<Objective> out;
    if (noise) out.push_back(Objective::noise);
    if (velocity) out.push_back(Objective::velocity);
    return out;
}

} // namespace detail

/// Log sink for stage progress; null silences it.
using Log = std::ostream*;

inline nlohmann::json manifest_document(const ExperimentConfig& cfg)
{
    using nlohmann::json;
    const ArtifactPaths paths{cfg.output_dir};
    json seeds = {{"global", cfg.seed},
                  {"split", derive_seed(cfg.seed, "split")},
                  {"init_noise", derive_seed(cfg.seed, "init", 0)},
                  {"init_velocity", derive_seed(cfg.seed, "init", 1)},
                  {"train_noise", cfg.train_noise.seed},
                  {"train_velocity", cfg.train_velocity.seed}};
    if (cfg.data.synth) seeds["synth"] = cfg.data.synth->seed;
    json samples = json::object();
    for (const auto& m : cfg.methods) samples[m.label] = m.spec.seed;
    seeds["sample"] = samples;

    json inputs = json::object();
    const auto hash_file = [&](const std::string& key, const std::filesystem::path& p) {
        if (std::filesystem::exists(p))
            inputs[key] = {{"path", p.generic_string()}, {"sha256", sha256_hex(read_file_bytes(p))}};
    };
    if (cfg.data.synth) {
        hash_file("viirs", paths.viirs_raw());
        hash_file("dmsp", paths.dmsp_raw());
    } else {
        hash_file("viirs", cfg.data.viirs);
        hash_file("dmsp", cfg.data.dmsp);
    }
    return {{"version", kVersion}, {"config", to_json(cfg)}, {"seeds", seeds}, {"inputs", inputs}};
}

inline void write_manifest(const ExperimentConfig& cfg)
{
    detail::write_text(ArtifactPaths{cfg.output_dir}.manifest(), manifest_document(cfg).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Stages. Each reads the artifacts of earlier stages from the output
// directory and writes its own.

/// Writes the raw sensor pair: synthesized, or copied from the input paths.
inline void stage_synth(const ExperimentConfig& cfg, Log log = nullptr)
{
    const ArtifactPaths paths{cfg.output_dir};
    std::filesystem::create_directories(paths.root / "data");
    if (cfg.data.synth) {
        auto [viirs, dmsp] = synth_pair(*cfg.data.synth);
        save_grid(paths.viirs_raw(), viirs);
        save_grid(paths.dmsp_raw(), dmsp);
        if (log) *log << "synth: " << viirs.width() << "x" << viirs.height() << " pair\n";
    } else {
        save_grid(paths.viirs_raw(), detail::load_input(cfg.data.viirs, cfg.data.format, Units::radiance));
        save_grid(paths.dmsp_raw(), detail::load_input(cfg.data.dmsp, cfg.data.format, Units::dn));
        if (log) *log << "synth: copied input rasters\n";
    }
    write_manifest(cfg);
}

/// Resample, background filter, radiometric scaling, normalization, tiling
/// and the train/validation split.
inline void stage_prepare(const ExperimentConfig& cfg, Log log = nullptr)
{
    const ArtifactPaths paths{cfg.output_dir};
    detail::require_artifact(paths.viirs_raw());
    detail::require_artifact(paths.dmsp_raw());
    Grid viirs = load_grid(paths.viirs_raw());
    const Grid dmsp = load_grid(paths.dmsp_raw());
    if (viirs.units() != Units::radiance) throw UnitsError("viirs raster must be radiance");
    if (dmsp.units() != Units::dn) throw UnitsError("dmsp raster must be dn");
    if (cfg.data.resample_factor > 1) viirs = block_average(viirs, cfg.data.resample_factor);
    auto [v, d] = joint_background_filter(viirs, dmsp, static_cast<float>(cfg.data.background_floor));
    const double r_hi = cfg.data.r_hi ? *cfg.data.r_hi : percentile(v, cfg.data.r_hi_percentile);
    if (!(r_hi > cfg.data.r_lo))
        throw ParameterError("radiance percentile " + format_number(r_hi) + " does not exceed r_lo");
    const Grid cond_dn = linear_scale_to_dn(v, cfg.data.r_lo, r_hi);

    const auto p = static_cast<std::uint32_t>(cfg.network.patch);
    const std::uint32_t w = cond_dn.width() / p * p, h = cond_dn.height() / p * p;
    const Grid cond_c = crop(cond_dn, w, h), truth_c = crop(d, w, h);
    save_grid(paths.condition(), cond_c);
    save_grid(paths.truth(), truth_c);

    const auto pairs = extract_pairs(normalize_signed(cond_c), normalize_signed(truth_c), cfg.network.patch);
    const DatasetSplit s = split(pairs, cfg.data.n_val, derive_seed(cfg.seed, "split"));
    std::filesystem::remove_all(paths.patches());
    save_patch_set(paths.patches(), s);
    if (log)
        *log << "prepare: r_hi " << format_number(r_hi) << ", " << pairs.size() << " patches (" << s.train.size()
             << " train, " << s.val.size() << " val)\n";
}

inline void stage_train(const ExperimentConfig& cfg, Log log = nullptr)
{
    const ArtifactPaths paths{cfg.output_dir};
    detail::require_artifact(paths.patches() / "manifest.txt");
    const DatasetSplit data = load_patch_set(paths.patches());
    const NoiseSchedule sched = make_schedule(cfg.schedule);
    for (Objective obj : detail::needed_objectives(cfg)) {
        const TrainConfig& tc = obj == Objective::noise ? cfg.train_noise : cfg.train_velocity;
        const Checkpoint start =
            init(cfg.network, derive_seed(cfg.seed, "init", obj == Objective::noise ? 0 : 1), obj, cfg.schedule);
        std::ostringstream csv;
        csv << "epoch,train_loss,val_loss,lr\n";
        const auto on_epoch = [&](const EpochRecord& r) {
            csv << r.epoch << ',' << format_number(r.train_loss) << ',' << format_number(r.val_loss) << ','
                << format_number(r.lr) << '\n';
            if (log && (r.epoch % 50 == 0))
                *log << "train " << objective_name(obj) << ": epoch " << r.epoch << " train " << r.train_loss
                     << " val " << r.val_loss << '\n';
        };
        const TrainResult res = train(start, data, sched, tc, on_epoch);
        std::filesystem::create_directories(paths.checkpoint(obj).parent_path());
        save_checkpoint(paths.checkpoint(obj), res.best);
        detail::write_text(paths.train_log(obj), csv.str());
        if (log)
            *log << "train " << objective_name(obj) << ": " << res.history.epochs.size() << " epochs, best val "
                 << res.history.best_val_loss << " at epoch " << res.history.best_epoch << '\n';
    }
}

inline std::map<Objective, Checkpoint> load_checkpoints(const ExperimentConfig& cfg)
{
    const ArtifactPaths paths{cfg.output_dir};
    std::map<Objective, Checkpoint> out;
    for (Objective obj : detail::needed_objectives(cfg)) {
        detail::require_artifact(paths.checkpoint(obj));
        out.emplace(obj, load_checkpoint(paths.checkpoint(obj)));
    }
    return out;
}

inline void stage_fuse(const ExperimentConfig& cfg, Log log = nullptr)
{
    const ArtifactPaths paths{cfg.output_dir};
    detail::require_artifact(paths.condition());
    const auto cks = load_checkpoints(cfg);
    const Grid cond = load_grid(paths.condition());
    std::filesystem::create_directories(paths.root / "fused");
    std::ostringstream timings;
    timings << "method,wall_seconds\n";
    for (const auto& m : cfg.methods) {
        const Checkpoint& ck = cks.at(required_objective(m.spec.method));
        const auto t0 = std::chrono::steady_clock::now();
        const Grid out = fuse_full(cond, ck, m.spec, cfg.precision, {ck.net.patch, cfg.fuse_threads});
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        save_grid(paths.fused(m.label), out);
        timings << m.label << ',' << format_number(secs) << '\n';
        if (log) *log << "fuse " << m.label << ": " << format_number(secs) << " s\n";
    }
    detail::write_text(paths.timings(), timings.str());
}

/// One metrics.csv row.
inline std::string metrics_row(const std::string& label, const MetricsReport& r, const std::string& wall)
{
    return label + ',' + format_number(r.ssim) + ',' + format_number(r.psnr_db) + ',' + format_number(r.mae) + ',' +
           format_number(r.mse) + ',' + format_number(r.rmse) + ',' + wall + '\n';
}

inline constexpr const char* kMetricsHeader = "method,ssim,psnr_db,mae,mse,rmse,wall_seconds\n";

inline void stage_eval(const ExperimentConfig& cfg, Log log = nullptr)
{
    const ArtifactPaths paths{cfg.output_dir};
    detail::require_artifact(paths.truth());
    detail::require_artifact(paths.condition());
    const Grid truth = load_grid(paths.truth());
    std::map<std::string, std::string> wall;
    if (std::filesystem::exists(paths.timings()))
        for (const auto& row : detail::read_csv(paths.timings()))
            if (row.size() == 2) wall[row[0]] = row[1];

    std::string out = kMetricsHeader;
    for (const auto& m : cfg.methods) {
        detail::require_artifact(paths.fused(m.label));
        const MetricsReport r = evaluate_pair(load_grid(paths.fused(m.label)), truth);
        const std::string w = cfg.deterministic || !wall.contains(m.label) ? "-" : wall[m.label];
        out += metrics_row(m.label, r, w);
        if (log) *log << "eval " << m.label << ": ssim " << r.ssim << " mae " << r.mae << '\n';
    }
    const MetricsReport base = evaluate_pair(load_grid(paths.condition()), truth);
    out += metrics_row("viirs", base, "-");
    if (log) *log << "eval viirs (baseline): ssim " << base.ssim << " mae " << base.mae << '\n';
    detail::write_text(paths.metrics(), out);
}

inline void stage_psd(const ExperimentConfig& cfg, Log log = nullptr)
{
    const ArtifactPaths paths{cfg.output_dir};
    std::vector<std::pair<std::string, std::filesystem::path>> sources{{"truth", paths.truth()},
                                                                        {"condition", paths.condition()}};
    for (const auto& m : cfg.methods) sources.emplace_back(m.label, paths.fused(m.label));
    std::map<std::string, RadialSpectrum> spectra;
    std::filesystem::create_directories(paths.spectra());
    for (const auto& [name, file] : sources) {
        detail::require_artifact(file);
        spectra[name] = radial_psd(load_grid(file));
        std::ostringstream os;
        write_spectrum_csv(os, spectra[name], cfg.spectrum_energy);
        detail::write_text(paths.spectrum(name), os.str());
    }
    const RadialSpectrum& truth = spectra.at("truth");
    const Band band = cfg.band ? *cfg.band : top_quartile(truth);
    std::ostringstream os;
    os << "source,band_lo,band_hi,spectrum_distance\n";
    for (const auto& [name, file] : sources) {
        if (name == "truth") continue;
        const double d = spectrum_distance(spectra.at(name), truth, band);
        os << name << ',' << band.lo << ',' << band.hi << ',' << format_number(d) << '\n';
        if (log) *log << "psd " << name << ": distance to truth " << d << '\n';
    }
    detail::write_text(paths.distances(), os.str());
}

inline void stage_bench(const ExperimentConfig& cfg, Log log = nullptr)
{
    const ArtifactPaths paths{cfg.output_dir};
    if (!cfg.bench.enabled) {
        if (log) *log << "bench: disabled\n";
        return;
    }
    detail::require_artifact(paths.condition());
    detail::require_artifact(paths.truth());
    const auto cks = load_checkpoints(cfg);
    const Grid cond = load_grid(paths.condition()), truth = load_grid(paths.truth());

    PrecisionSweep sweep;
    sweep.precisions = cfg.bench.precisions;
    sweep.int8_method.reset();
    std::vector<const SampleEntry*> entries;
    if (cfg.bench.labels.empty())
        for (const auto& m : cfg.methods) entries.push_back(&m);
    else
        for (const auto& l : cfg.bench.labels) entries.push_back(cfg.find(l));
    for (const auto* e : entries) sweep.specs.push_back(e->spec);
    if (cfg.bench.int8_label) sweep.int8_method = cfg.find(*cfg.bench.int8_label)->spec.method;

    const auto& any = cks.begin()->second;
    const Checkpoint& noise = cks.contains(Objective::noise) ? cks.at(Objective::noise) : any;
    const Checkpoint& velocity = cks.contains(Objective::velocity) ? cks.at(Objective::velocity) : any;
    const auto rows = precision_report(noise, velocity, cond, truth, sweep, {cfg.bench.threads});
    std::ostringstream os;
    write_bench_csv(os, rows, cfg.deterministic);
    detail::write_text(paths.bench(), os.str());
    if (log)
        for (const auto& r : rows)
            *log << "bench " << method_name(r.method) << " " << precision_name(r.precision) << ": " << r.net_evals
                 << " evals, " << format_number(r.wall_seconds) << " s, ssim_delta " << format_number(r.ssim_delta)
                 << (r.emulated ? " (emulated)" : "") << '\n';
}

/// Merges metrics, eval counts and spectrum distances into summary.csv.
inline void stage_report(const ExperimentConfig& cfg, Log log = nullptr)
{
    const ArtifactPaths paths{cfg.output_dir};
    const auto metrics = detail::read_csv(paths.metrics());
    std::map<std::string, std::string> dist;
    if (std::filesystem::exists(paths.distances()))
        for (const auto& row : detail::read_csv(paths.distances()))
            if (row.size() == 4) dist[row[0] == "condition" ? "viirs" : row[0]] = row[3];
    std::uint32_t tiles = 0;
    if (std::filesystem::exists(paths.condition())) {
        const Grid c = load_grid(paths.condition());
        tiles = (c.width() / cfg.network.patch) * (c.height() / cfg.network.patch);
    }
    std::string out = "method,ssim,psnr_db,mae,mse,rmse,wall_seconds,net_evals,spectrum_distance\n";
    for (std::size_t i = 1; i < metrics.size(); ++i) {
        const auto& row = metrics[i];
        if (row.size() != 7) throw FormatError("metrics.csv: malformed row " + std::to_string(i));
        std::string evals = "-";
        if (const SampleEntry* e = cfg.find(row[0]))
            evals = std::to_string(count_evals(e->spec, cfg.schedule.T) * tiles);
        std::string line;
        for (const auto& c : row) line += c + ',';
        line += evals + ',' + (dist.contains(row[0]) ? dist[row[0]] : "-");
        out += line + '\n';
        if (log) *log << line << '\n';
    }
    detail::write_text(paths.summary(), out);
    write_manifest(cfg);
}

inline void run_stage(const std::string& name, const ExperimentConfig& cfg, Log log = nullptr)
{
    static const std::map<std::string, std::function<void(const ExperimentConfig&, Log)>> table{
        {"synth", stage_synth}, {"prepare", stage_prepare}, {"train", stage_train}, {"fuse", stage_fuse},
        {"eval", stage_eval},   {"psd", stage_psd},         {"bench", stage_bench}, {"report", stage_report}};
    const auto it = table.find(name);
    if (it == table.end()) throw ParameterError("unknown stage '" + name + "'");
    const ArtifactPaths paths{cfg.output_dir};
    try {
        std::filesystem::create_directories(paths.root);
        it->second(cfg, log);
    } catch (const Error& e) {
        std::ofstream(paths.failed()) << name << ": " << e.what() << '\n';
        throw StageError(name, e.what(), e.exit_code());
    } catch (const std::exception& e) {
        std::ofstream(paths.failed()) << name << ": " << e.what() << '\n';
        throw StageError(name, e.what(), 2);
    }
}

/// Every stage in order. A failure leaves the artifacts written so far plus
/// a FAILED marker naming the stage.
inline void run_experiment(const ExperimentConfig& cfg, Log log = nullptr)
{
    std::error_code ec;
    std::filesystem::remove(ArtifactPaths{cfg.output_dir}.failed(), ec);
    for (const auto& s : stage_names()) run_stage(s, cfg, log);
}

} // namespace nightfuse
