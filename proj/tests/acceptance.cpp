// Acceptance gate: one PASS/FAIL line per criterion, exit 1 if any fails.
// The end-to-end criteria (6, 7, 10, 11) share a single desk-scale run of the
// pipeline written to $NIGHTFUSE_ACCEPT_DIR (default: a temp directory).

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "nightfuse/bench.hpp"
#include "nightfuse/pipeline.hpp"

using namespace nightfuse;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, const std::string& name, bool ok, const std::string& detail)
{
    std::cout << (ok ? "PASS" : "FAIL") << "  criterion " << std::setw(2) << id << "  " << name << "  " << detail
              << std::endl;
    if (!ok) ++failures;
}

template <class F>
void run(int id, const std::string& name, F&& body)
{
    const auto t0 = std::chrono::steady_clock::now();
    std::ostringstream detail;
    bool ok = false;
    try {
        ok = body(detail);
    } catch (const std::exception& e) {
        detail << "exception: " << e.what();
    }
    detail << " [" << std::fixed << std::setprecision(1)
           << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s]";
    report(id, name, ok, detail.str());
}

std::string num(double v)
{
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
}

// --- 1 -------------------------------------------------------------------

bool table_consistency(std::ostream& out)
{
    struct Row {
        const char* name;
        double psnr, mse, rmse;
    };
    const Row rows[] = {{"DDIM", 21.9123, 0.0064, 0.0802},       {"LCM", 20.6988, 0.0085, 0.0923},
                        {"EDM", 20.2804, 0.0094, 0.0968},        {"Euler Flow", 19.7997, 0.0105, 0.1023},
                        {"Heun Flow", 20.3246, 0.0093, 0.0963},  {"Vanilla Flow", 20.6182, 0.0087, 0.0931},
                        {"VIIRS", 12.5146, 0.05603, 0.2367}};
    double worst_db = 0, worst_rmse = 0;
    for (const Row& r : rows) {
        worst_db = std::max(worst_db, std::abs(psnr(r.mse) - r.psnr));
        worst_rmse = std::max(worst_rmse, std::abs(std::sqrt(r.mse) - r.rmse));
    }
    out << "max |psnr(mse) - PSNR| " << num(worst_db) << " dB, max |sqrt(mse) - RMSE| " << num(worst_rmse);
    return worst_db <= 0.05 && worst_rmse <= 3e-4;
}

// --- 2 -------------------------------------------------------------------

bool scheduler_suite(std::ostream& out)
{
    const NoiseSchedule lin = make_linear(), cos = make_cosine();
    bool ok = lin.beta_at(1) == 1e-4 && lin.beta_at(1000) == 0.02;
    double worst_rel = 0;
    for (const NoiseSchedule* s : {&lin, &cos}) {
        double prod = 1.0;
        for (int t = 1; t <= s->T; ++t) {
            prod *= 1.0 - s->beta_at(t);
            worst_rel = std::max(worst_rel, std::abs(s->alpha_bar_at(t) - prod) / prod);
            worst_rel = std::max(worst_rel, std::abs(s->alpha_at(t) - (1.0 - s->beta_at(t))) / s->alpha_at(t));
            if (t > 1 && !(s->alpha_bar_at(t) < s->alpha_bar_at(t - 1))) ok = false;
        }
    }
    double beta_hi = 0;
    for (double b : cos.beta) beta_hi = std::max(beta_hi, b);
    ok = ok && worst_rel < 1e-12 && beta_hi == 0.999;
    out << "linear endpoints " << num(lin.beta_at(1)) << "/" << num(lin.beta_at(1000)) << ", product rel err "
        << num(worst_rel) << ", cosine max beta " << num(beta_hi);
    return ok;
}

// --- 3 -------------------------------------------------------------------

// Data ~ N(m, sd^2) under a continuous linear VP process. The exact noise
// predictor keeps (x - sqrt(abar) m) / sqrt(abar sd^2 + 1 - abar) constant
// along the probability-flow trajectory.
struct GaussianOracle {
    double m = 0.3, sd = 0.5, delta = 1e-3, b0 = 0.1, b1 = 20.0;

    double u(double s) const { return delta + s * (1.0 - delta); }
    double alpha_bar(double s) const
    {
        const double v = u(s);
        return std::exp(-(b0 * v + 0.5 * (b1 - b0) * v * v));
    }
    double rate(double s) const { return (1.0 - delta) * (b0 + u(s) * (b1 - b0)); }
    double var(double s) const { return alpha_bar(s) * sd * sd + 1.0 - alpha_bar(s); }

    VpProcess process() const
    {
        return {[this](double s) { return rate(s); }, [this](double s) { return alpha_bar(s); },
                [](double s) { return s; }};
    }
    Predictor predictor() const
    {
        return {Objective::noise, [this](const Patch& x, const Patch&, double s) {
                    const double ab = alpha_bar(s);
                    Patch e(1, x.h, x.w);
                    for (std::size_t i = 0; i < e.size(); ++i)
                        e[i] = static_cast<float>(std::sqrt(1 - ab) * (x[i] - std::sqrt(ab) * m) / var(s));
                    return e;
                }};
    }
    double exact(double x1) const
    {
        return std::sqrt(alpha_bar(0)) * m +
               (x1 - std::sqrt(alpha_bar(1)) * m) * std::sqrt(var(0)) / std::sqrt(var(1));
    }
};

bool ode_order(std::ostream& out)
{
    const GaussianOracle g;
    Patch x1(1, 1, 9), cond(1, 1, 9);
    for (int i = 0; i < 9; ++i) x1[i] = static_cast<float>(-2.0 + 0.5 * i);
    const auto error = [&](int steps, bool heun) {
        const Patch x0 = integrate_probability_flow(g.predictor(), cond, g.process(), x1, steps, heun);
        double e = 0;
        for (std::size_t i = 0; i < x0.size(); ++i) e = std::max(e, std::abs(x0[i] - g.exact(x1[i])));
        return e;
    };
    const double e30 = error(30, false), e60 = error(60, false);
    const double h30 = error(30, true), h60 = error(60, true);
    const double re = e30 / e60, rh = h30 / h60;
    out << "euler " << num(e30) << " -> " << num(e60) << " (x" << num(re) << "), heun " << num(h30) << " -> "
        << num(h60) << " (x" << num(rh) << ")";
    return h30 < e30 && re >= 1.6 && re <= 2.4 && rh >= 3.0 && rh <= 5.0;
}

// --- 4 -------------------------------------------------------------------

NetConfig tiny_net()
{
    NetConfig c;
    c.base_width = 8;
    c.t_embed_dim = 32;
    c.blocks_per_level = 1;
    return c;
}

bool gradient_check(std::ostream& out)
{
    bool ok = true;
    for (Objective o : {Objective::noise, Objective::velocity}) {
        Rng rng(o == Objective::noise ? 101 : 102);
        const auto r = check_gradients(tiny_net(), o, rng, 128);
        out << objective_name(o) << ": " << r.checked << " params, max rel " << num(r.max_rel_error) << "; ";
        ok = ok && r.checked >= 100 && r.max_rel_error < 1e-3;
    }
    return ok;
}

// --- 5 -------------------------------------------------------------------

Grid ramp_grid(std::uint32_t w, std::uint32_t h)
{
    std::vector<float> v(static_cast<std::size_t>(w) * h);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>((i * 7 + i / w * 3) % 64);
    return Grid(w, h, Units::dn, v);
}

bool determinism_and_ledger(std::ostream& out)
{
    const Checkpoint noise = init(tiny_net(), 5, Objective::noise, {}, false);
    const Checkpoint velocity = init(tiny_net(), 6, Objective::velocity, {}, false);
    const Grid cond = ramp_grid(64, 64);
    bool ok = true;
    for (Method m : {Method::ddim, Method::edm_heun, Method::pf_euler, Method::pf_heun, Method::fm_euler}) {
        const SamplerSpec spec{m, 5, 9};
        const Checkpoint& ck = m == Method::fm_euler ? velocity : noise;
        const bool same = fuse_full(cond, ck, spec) == fuse_full(cond, ck, spec);
        if (!same) out << method_name(m) << " not reproducible; ";
        ok = ok && same;
    }
    const Predictor stub{Objective::noise, [](const Patch& x, const Patch&, double) { return Patch(1, x.h, x.w); }};
    const NoiseSchedule sched = make_linear();
    Patch c(1, 32, 32);
    long calls[2];
    int k = 0;
    for (Method m : {Method::pf_heun, Method::edm_heun}) {
        auto n = std::make_shared<std::atomic<long>>(0);
        sample(counting(stub, n), c, sched, {m, 30});
        calls[k++] = n->load();
        ok = ok && n->load() == count_evals({m, 30}, sched.T);
    }
    out << "5 samplers bit-identical; pf_heun-30 " << calls[0] << " calls, edm_heun-30 " << calls[1] << " calls";
    return ok && calls[0] == 60 && calls[1] == 59;
}

// --- 8, 9 ----------------------------------------------------------------

bool parseval(std::ostream& out)
{
    Rng rng(8);
    double worst = 0;
    for (int k = 0; k < 100; ++k) {
        const auto w = static_cast<std::uint32_t>(rng.uniform_int(2, 80)), h = static_cast<std::uint32_t>(rng.uniform_int(2, 80));
        std::vector<float> v(static_cast<std::size_t>(w) * h);
        double sq = 0;
        for (auto& x : v) {
            x = static_cast<float>(rng.uniform());
            sq += double(x) * x;
        }
        const RadialSpectrum s = radial_psd(Grid(w, h, Units::unit, v));
        double total = 0;
        for (std::size_t b = 0; b < s.n_bins(); ++b) total += s.energy(b);
        sq /= static_cast<double>(v.size());
        worst = std::max(worst, std::abs(total - sq) / sq);
    }
    out << "100 grids, max rel err " << num(worst);
    return worst < 1e-6;
}

// Direct 2-D evaluation of every window.
double brute_ssim(const Grid& a, const Grid& b)
{
    const int win = 11, rad = 5, w = static_cast<int>(a.width()), h = static_cast<int>(a.height());
    double wsum = 0;
    double wt[11][11];
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) wsum += wt[i][j] = std::exp(-((i - rad) * (i - rad) + (j - rad) * (j - rad)) / 4.5);
    const double c1 = 1e-4, c2 = 9e-4;
    double total = 0;
    int n = 0;
    for (int r = 0; r + win <= h; ++r)
        for (int c = 0; c + win <= w; ++c) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (int i = 0; i < win; ++i)
                for (int j = 0; j < win; ++j) {
                    const double q = wt[i][j] / wsum, x = a.at(r + i, c + j), y = b.at(r + i, c + j);
                    mx += q * x;
                    my += q * y;
                    sxx += q * x * x;
                    syy += q * y * y;
                    sxy += q * x * y;
                }
            const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
            total += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++n;
        }
    return total / n;
}

bool metric_oracles(std::ostream& out)
{
    Rng rng(9);
    double worst_ref = 0, worst_self = 0;
    for (int k = 0; k < 5; ++k) {
        const std::uint32_t w = 24 + 7 * k, h = 40 - 3 * k;
        std::vector<float> x(static_cast<std::size_t>(w) * h), y(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] = static_cast<float>(rng.uniform());
            y[i] = static_cast<float>(std::clamp(x[i] + 0.3 * (rng.uniform() - 0.5), 0.0, 1.0));
        }
        const Grid a(w, h, Units::unit, x), b(w, h, Units::unit, y);
        worst_ref = std::max(worst_ref, std::abs(ssim(a, b) - brute_ssim(a, b)));
        worst_self = std::max(worst_self, std::abs(ssim(a, a) - 1.0));
    }
    // Dyadic values keep every sum exact.
    bool exact = true;
    for (float off : {0.25f, -0.125f, 0.0f}) {
        std::vector<float> t(32 * 16), p(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) {
            t[i] = 0.25f + static_cast<float>(i % 8) / 16.0f;
            p[i] = t[i] + off;
        }
        const auto e = pixel_metrics(Grid(32, 16, Units::unit, p), Grid(32, 16, Units::unit, t));
        const double a = std::abs(off);
        exact = exact && e.mae == a && e.mse == a * a && e.rmse == a;
    }
    out << "ssim vs brute force " << num(worst_ref) << ", |ssim(x,x)-1| " << num(worst_self) << ", offsets "
        << (exact ? "exact" : "inexact");
    return worst_ref < 1e-6 && worst_self < 1e-9 && exact;
}

// --- end to end ------------------------------------------------------------

fs::path run_dir()
{
    if (const char* d = std::getenv("NIGHTFUSE_ACCEPT_DIR")) return d;
    return fs::temp_directory_path() / "nightfuse_acceptance";
}

// 576x576 synthetic pair, width-8 U-Net trained with early stopping.
ExperimentConfig desk_config()
{
    nlohmann::json doc = nlohmann::json::parse(R"({
        "seed": 2024,
        "deterministic": true,
        "data": {"synth": {"fine_size": 1152}, "n_val": 50},
        "network": {"base_width": 8, "t_embed_dim": 32, "blocks_per_level": 1},
        "train": {"noise": {"max_epochs": 300, "patience": 50, "batch": 16, "lr0": 2e-3},
                  "velocity": {"max_epochs": 150, "patience": 30, "batch": 16, "lr0": 2e-3}},
        "sample": {"methods": [{"method": "ddim", "steps": 30}, {"method": "fm_euler", "steps": 30}]}
    })");
    doc["output_dir"] = run_dir().string();
    return validate_config(doc);
}

struct EndToEnd {
    ExperimentConfig cfg;
    Grid truth, cond, fused;
    Checkpoint noise, velocity;
};

EndToEnd build_end_to_end()
{
    ExperimentConfig cfg = desk_config();
    fs::remove_all(cfg.output_dir);
    for (const char* stage : {"synth", "prepare", "train", "fuse"}) run_stage(stage, cfg, &std::cerr);
    const ArtifactPaths paths{cfg.output_dir};
    return {cfg,
            load_grid(paths.truth()),
            load_grid(paths.condition()),
            load_grid(paths.fused("ddim")),
            load_checkpoint(paths.checkpoint(Objective::noise)),
            load_checkpoint(paths.checkpoint(Objective::velocity))};
}

bool fusion_beats_identity(const EndToEnd& e, std::ostream& out)
{
    const MetricsReport f = evaluate_pair(e.fused, e.truth), b = evaluate_pair(e.cond, e.truth);
    out << e.fused.width() << "x" << e.fused.height() << " (noise model best epoch " << e.noise.meta.best_epoch
        << "): ssim " << num(f.ssim) << " vs " << num(b.ssim) << ", mae " << num(f.mae) << " vs " << num(b.mae);
    return f.ssim > b.ssim && f.mae < b.mae;
}

bool spectral_fidelity(const EndToEnd& e, std::ostream& out)
{
    const RadialSpectrum t = radial_psd(e.truth), f = radial_psd(e.fused), c = radial_psd(e.cond);
    const Band band = top_quartile(t);
    const double df = spectrum_distance(f, t, band), dc = spectrum_distance(c, t, band);
    out << "bins " << band.lo << ".." << band.hi << ": fused " << num(df) << " vs condition " << num(dc);
    return df < dc;
}

bool precision_robustness(const EndToEnd& e, std::ostream& out)
{
    const SamplerSpec spec = e.cfg.find("ddim")->spec;
    const double base = evaluate_pair(e.fused, e.truth).ssim;
    bool ok = true;
    for (PrecisionMode p : {PrecisionMode::half16, PrecisionMode::weights_int8}) {
        const double s = evaluate_pair(fuse_full(e.cond, e.noise, spec, p), e.truth).ssim;
        out << precision_name(p) << " dssim " << num(s - base) << "; ";
        ok = ok && std::abs(s - base) < 0.01;
    }
    return ok;
}

bool flow_matching(const EndToEnd& e, std::ostream& out)
{
    Patch c(1, 32, 32);
    const float v0 = 0.15f;
    const Predictor constant{Objective::velocity, [v0](const Patch& x, const Patch&, double) {
                                 Patch v(1, x.h, x.w);
                                 std::fill(v.data.begin(), v.data.end(), v0);
                                 return v;
                             }};
    // Exact up to one float rounding of the state per step.
    double worst = 0;
    bool exact = true;
    for (int steps : {1, 2, 5, 30, 60, 1000}) {
        Rng rng(4);
        const Patch x1 = detail::noise_patch(rng, 32);
        const Patch x0 = fm_euler(constant, c, {Method::fm_euler, steps, 4});
        double err = 0;
        for (std::size_t i = 0; i < x0.size(); ++i)
            err = std::max(err, double(std::abs(x0[i] - std::clamp(x1[i] - v0, -1.0f, 1.0f))));
        exact = exact && err <= (steps + 1) * 4.0 * std::numeric_limits<float>::epsilon();
        worst = std::max(worst, err);
    }

    // 128x128 corner of the condition: 16 tiles.
    const Grid cond = crop(e.cond, 128, 128);
    const auto fused = [&](int steps) { return fuse_full(cond, e.velocity, {Method::fm_euler, steps, 11}); };
    const Grid r60 = fused(60), r30 = fused(30), r5 = fused(5);
    const auto mad = [](const Grid& a, const Grid& b) {
        double s = 0;
        for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(double(a.values()[i]) - b.values()[i]);
        return s / static_cast<double>(a.size());
    };
    const double d30 = mad(r30, r60), d5 = mad(r5, r60);
    out << "constant oracle max err " << num(worst) << "; trained |30-60| " << num(d30) << " DN, |5-60| " << num(d5)
        << " DN";
    return exact && d30 < d5;
}

} // namespace

int main()
{
    run(1, "table consistency", table_consistency);
    run(2, "scheduler suite", scheduler_suite);
    run(3, "ODE order", ode_order);
    run(4, "gradient check", gradient_check);
    run(5, "determinism and eval ledger", determinism_and_ledger);

    std::optional<EndToEnd> e2e;
    std::string e2e_error;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        e2e.emplace(build_end_to_end());
    } catch (const std::exception& ex) {
        e2e_error = ex.what();
    }
    std::cerr << "end-to-end run: "
              << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
    const auto with_run = [&](auto fn) {
        return [&, fn](std::ostream& out) {
            if (!e2e) {
                out << "pipeline failed: " << e2e_error;
                return false;
            }
            return fn(*e2e, out);
        };
    };
    run(6, "end-to-end fusion", with_run(fusion_beats_identity));
    run(7, "spectral fidelity", with_run(spectral_fidelity));
    run(8, "Parseval", parseval);
    run(9, "metric oracles", metric_oracles);
    run(10, "precision robustness", with_run(precision_robustness));
    run(11, "flow matching", with_run(flow_matching));

    std::cout << (failures ? std::to_string(failures) + " criteria failed" : "all criteria passed") << std::endl;
    return failures ? 1 : 0;
}
