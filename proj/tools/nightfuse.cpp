// nightfuse command line: one subcommand per pipeline stage, plus `run`.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "nightfuse/nightfuse.hpp"

namespace nf = nightfuse;

namespace {

struct Options {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::string precision;
    bool deterministic = false;
    std::string input;
    std::string pred;
    std::string truth;
    bool energy = false;
};

nf::ExperimentConfig load(const Options& o)
{
    if (o.config.empty()) throw nf::ConfigError("", "--config is required for this subcommand");
    std::ifstream f(o.config);
    if (!f) throw nf::ConfigError("", "cannot open config file " + o.config);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw nf::ConfigError("", std::string("config is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw nf::ConfigError("", "config must be a JSON object");
    if (!o.out.empty()) doc["output_dir"] = o.out;
    if (o.seed) doc["seed"] = *o.seed;
    if (o.deterministic) doc["deterministic"] = true;
    if (!o.precision.empty()) {
        if (!doc.contains("sample")) doc["sample"] = nlohmann::json::object();
        doc["sample"]["precision"] = o.precision;
    }
    return nf::validate_config(doc);
}

// Writes to --out when given, stdout otherwise.
template <class F>
void emit(const std::string& out, F&& write)
{
    if (out.empty()) {
        write(std::cout);
        return;
    }
    std::ofstream f(out, std::ios::binary);
    if (!f) throw nf::FormatError("cannot write " + out);
    write(f);
}

int psd_standalone(const Options& o)
{
    const nf::Grid g = nf::load_grid(o.input);
    const nf::RadialSpectrum s = nf::radial_psd(g);
    emit(o.out, [&](std::ostream& os) { nf::write_spectrum_csv(os, s, o.energy); });
    return 0;
}

int eval_standalone(const Options& o)
{
    if (o.pred.empty() || o.truth.empty()) throw nf::ConfigError("", "eval needs both --pred and --truth");
    const nf::MetricsReport r = nf::evaluate_pair(nf::load_grid(o.pred), nf::load_grid(o.truth));
    emit(o.out, [&](std::ostream& os) { os << nf::kMetricsHeader << nf::metrics_row("pred", r, "-"); });
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Conditional diffusion and flow-matching fusion of nighttime-lights rasters"};
    app.require_subcommand(1);
    Options o;

    const auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "Experiment config (JSON)");
        sub->add_option("--out", o.out, "Output directory (overrides output_dir)");
        sub->add_option("--seed", o.seed, "Global seed (overrides seed)");
        sub->add_option("--precision", o.precision, "Inference precision for fuse")
            ->check(CLI::IsMember({"full32", "half16", "weights_int8"}));
        sub->add_flag("--deterministic", o.deterministic, "Omit wall times so reruns are byte-identical");
    };

    std::vector<std::pair<std::string, CLI::App*>> subs;
    for (const auto& name : nf::stage_names()) {
        CLI::App* sub = app.add_subcommand(name, "Run the " + name + " stage");
        common(sub);
        subs.emplace_back(name, sub);
    }
    CLI::App* run = app.add_subcommand("run", "Run every stage in order");
    common(run);
    for (auto& [name, sub] : subs) {
        if (name == "psd") {
            sub->add_option("--input", o.input, "Spectrum of a single grid file instead of the pipeline stage");
            sub->add_flag("--energy", o.energy, "Per-annulus energy instead of the per-bin mean");
        }
        if (name == "eval") {
            sub->add_option("--pred", o.pred, "Predicted grid file");
            sub->add_option("--truth", o.truth, "Reference grid file");
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (run->parsed()) {
            const nf::ExperimentConfig cfg = load(o);
            nf::run_experiment(cfg, &std::cerr);
            return 0;
        }
        for (auto& [name, sub] : subs) {
            if (!sub->parsed()) continue;
            if (name == "psd" && !o.input.empty()) return psd_standalone(o);
            if (name == "eval" && (!o.pred.empty() || !o.truth.empty())) return eval_standalone(o);
            const nf::ExperimentConfig cfg = load(o);
            nf::run_stage(name, cfg, &std::cerr);
        }
        return 0;
    } catch (const nf::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
