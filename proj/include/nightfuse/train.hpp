#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nightfuse/checkpoint.hpp"
#include "nightfuse/dataset.hpp"
#include "nightfuse/rng.hpp"
#include "nightfuse/schedule.hpp"

namespace nightfuse {

struct TrainConfig {
    Objective objective = Objective::noise;
    double lr0 = 1e-3;
    double lr_min = 1e-6;
    int max_epochs = 1500;
    int batch = 32;
    int patience = 200;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const
    {
        if (!(lr_min < lr0)) throw ParameterError("TrainConfig: lr_min must be below lr0");
        if (max_epochs < 1) throw ParameterError("TrainConfig: max_epochs must be >= 1");
        if (patience < 1 || patience > max_epochs) throw ParameterError("TrainConfig: need 1 <= patience <= max_epochs");
        if (batch < 1) throw ParameterError("TrainConfig: batch must be >= 1");
    }
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    int best_epoch = -1;
    double best_val_loss = std::numeric_limits<double>::infinity();
};

/// Cosine annealing from lr0 at epoch 0 to lr_min at max_epochs, no restarts.
inline double lr_at(int epoch, const TrainConfig& cfg)
{
    if (epoch < 0 || epoch > cfg.max_epochs) throw ParameterError("lr_at: epoch outside [0, max_epochs]");
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) *
                            (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / cfg.max_epochs));
}

/// One regression example: network input, condition, embedding time and the
/// value the network should output.
struct TrainingExample {
    Patch input;
    Patch cond;
    double time = 0.0; // fed to the timestep embedding
    Patch target;
    double skip = 0.0; // prediction = network output + skip * input
};

/// Forward diffusion: t ~ U{1..T}, eps ~ N(0, I),
/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; the target is eps, and the
/// prediction carries the noise_skip term.
inline std::vector<TrainingExample> draw_diffusion_examples(std::span<const PatchPair> batch, const NoiseSchedule& sched,
                                                            Rng& rng)
{
    std::vector<TrainingExample> out;
    out.reserve(batch.size());
    for (const auto& p : batch) {
        const int t = rng.uniform_int(1, sched.T);
        Patch eps(1, p.target.h, p.target.w);
        rng.fill_normal(eps.data);
        const double ab = sched.alpha_bar_at(t);
        Patch xt(1, p.target.h, p.target.w);
        for (std::size_t i = 0; i < xt.size(); ++i)
            xt[i] = static_cast<float>(std::sqrt(ab) * p.target[i] + std::sqrt(1.0 - ab) * eps[i]);
        out.push_back({std::move(xt), p.cond, static_cast<double>(t), std::move(eps), noise_skip(sched, t)});
    }
    return out;
}

/// Straight-line flow matching: t ~ U(0,1), x_t = (1 - t) x0 + t eps; the
/// target is the velocity eps - x0. Embedding time is t * 1000.
inline std::vector<TrainingExample> draw_flow_examples(std::span<const PatchPair> batch, Rng& rng)
{
    std::vector<TrainingExample> out;
    out.reserve(batch.size());
    for (const auto& p : batch) {
        const double t = rng.uniform();
        Patch eps(1, p.target.h, p.target.w);
        rng.fill_normal(eps.data);
        Patch xt(1, p.target.h, p.target.w), u(1, p.target.h, p.target.w);
        for (std::size_t i = 0; i < xt.size(); ++i) {
            xt[i] = static_cast<float>((1.0 - t) * p.target[i] + t * eps[i]);
            u[i] = eps[i] - p.target[i];
        }
        out.push_back({std::move(xt), p.cond, t * 1000.0, std::move(u)});
    }
    return out;
}

inline std::vector<TrainingExample> draw_examples(Objective obj, std::span<const PatchPair> batch,
                                                  const NoiseSchedule& sched, Rng& rng)
{
    return obj == Objective::noise ? draw_diffusion_examples(batch, sched, rng) : draw_flow_examples(batch, rng);
}

/// Mean squared error over items and pixels of an arbitrary predictor.
template <class F>
double regression_loss(std::span<const TrainingExample> examples, F&& predict)
{
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& e : examples) {
        const Patch pred = predict(e);
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double d = static_cast<double>(pred[i]) - e.target[i];
            sum += d * d;
        }
        n += pred.size();
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

/// Network MSE over the examples. With `grads`, runs reverse mode and adds
/// d(loss)/d(param) into it. Items are processed in order, so the summed
/// gradient is reproducible.
template <class T>
double network_loss(const UNet<T>& net, const ParamStore<T>& params, ParamStore<T>* grads,
                    std::span<const TrainingExample> examples)
{
    if (examples.empty()) throw ParameterError("network_loss: empty batch");
    const std::size_t total = examples.size() * examples.front().target.size();
    double sum = 0.0;
    for (const auto& e : examples) {
        Graph<T> g(grads != nullptr);
        Var<T> out = net.forward(g, params, grads, e.input.cast<T>(), e.cond.cast<T>(), e.time);
        Tensor<T> seed(out->value.c, out->value.h, out->value.w);
        const T skip = static_cast<T>(e.skip);
        for (std::size_t i = 0; i < seed.size(); ++i) {
            const T d = out->value[i] + skip * static_cast<T>(e.input[i]) - static_cast<T>(e.target[i]);
            sum += static_cast<double>(d) * static_cast<double>(d);
            seed[i] = T(2) * d / static_cast<T>(total);
        }
        if (grads) g.backward(out, seed);
    }
    const double loss = sum / static_cast<double>(total);
    if (!std::isfinite(loss)) throw NumericError("non-finite training loss");
    return loss;
}

inline double diffusion_batch_loss(const UNet<float>& net, const ParamStore<float>& params, ParamStore<float>* grads,
                                   const NoiseSchedule& sched, std::span<const PatchPair> batch, Rng& rng)
{
    if (batch.empty()) throw ParameterError("diffusion_batch_loss: empty batch");
    const auto ex = draw_diffusion_examples(batch, sched, rng);
    return network_loss(net, params, grads, std::span<const TrainingExample>(ex));
}

inline double fm_batch_loss(const UNet<float>& net, const ParamStore<float>& params, ParamStore<float>* grads,
                            std::span<const PatchPair> batch, Rng& rng)
{
    if (batch.empty()) throw ParameterError("fm_batch_loss: empty batch");
    const auto ex = draw_flow_examples(batch, rng);
    return network_loss(net, params, grads, std::span<const TrainingExample>(ex));
}

/// Adam with bias correction.
class Adam {
public:
    Adam(const ParamStore<float>& like, double beta1, double beta2, double eps)
        : b1_(beta1), b2_(beta2), eps_(eps)
    {
        for (const auto& p : like) {
            m_.emplace_back(p.size(), 0.0f);
            v_.emplace_back(p.size(), 0.0f);
        }
    }

    void step(ParamStore<float>& params, const ParamStore<float>& grads, double lr)
    {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
        for (std::size_t a = 0; a < params.size(); ++a)
            for (std::size_t i = 0; i < params[a].size(); ++i) {
                const double g = grads[a][i];
                m_[a][i] = static_cast<float>(b1_ * m_[a][i] + (1.0 - b1_) * g);
                v_[a][i] = static_cast<float>(b2_ * v_[a][i] + (1.0 - b2_) * g * g);
                const double mhat = m_[a][i] / c1, vhat = v_[a][i] / c2;
                params[a][i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps_));
            }
    }

private:
    double b1_, b2_, eps_;
    int t_ = 0;
    ParamStore<float> m_, v_;
};

/// Loss over a set of pairs; fills `grads` when non-null.
using LossFn = std::function<double(const ParamStore<float>&, ParamStore<float>*, std::span<const PatchPair>, Rng&)>;

struct TrainLoopResult {
    ParamStore<float> best_params;
    TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch Adam with cosine learning rate and early stopping on the
/// validation loss. Validation noise comes from the same seed every epoch.
inline TrainLoopResult train_loop(ParamStore<float> params, const LossFn& loss, const DatasetSplit& data,
                                  const TrainConfig& cfg, const EpochCallback& on_epoch = {})
{
    cfg.validate();
    if (data.train.empty() || data.val.empty()) throw ParameterError("train: empty train or validation split");
    Adam opt(params, cfg.beta1, cfg.beta2, cfg.adam_eps);
    ParamStore<float> grads;
    for (const auto& p : params) grads.emplace_back(p.size(), 0.0f);

    TrainLoopResult res{params, {}};
    Rng noise(derive_seed(cfg.seed, "train-noise"));
    std::vector<std::size_t> order(data.train.size());
    std::vector<PatchPair> batch;
    int stale = 0;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const double lr = lr_at(epoch, cfg);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 shuffler(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), shuffler);

        double train_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
            batch.clear();
            for (std::size_t i = start; i < end; ++i) batch.push_back(data.train[order[i]]);
            for (auto& g : grads) std::fill(g.begin(), g.end(), 0.0f);
            double l;
            try {
                l = loss(params, &grads, batch, noise);
            } catch (const NumericError& e) {
                throw NumericError("epoch " + std::to_string(epoch) + ": " + e.what());
            }
            if (!std::isfinite(l)) throw NumericError("epoch " + std::to_string(epoch) + ": non-finite training loss");
            train_sum += l * static_cast<double>(end - start);
            opt.step(params, grads, lr);
        }

        Rng val_noise(derive_seed(cfg.seed, "validation"));
        const double val = loss(params, nullptr, data.val, val_noise);
        if (!std::isfinite(val)) throw NumericError("epoch " + std::to_string(epoch) + ": non-finite validation loss");
        const EpochRecord rec{epoch, train_sum / static_cast<double>(order.size()), val, lr};
        res.history.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (val < res.history.best_val_loss) {
            res.history.best_val_loss = val;
            res.history.best_epoch = epoch;
            res.best_params = params;
            stale = 0;
        } else if (++stale >= cfg.patience) {
            break;
        }
    }
    return res;
}

struct TrainResult {
    Checkpoint best;
    TrainHistory history;
};

/// Train a checkpoint on a split with the objective named in `cfg`.
inline TrainResult train(const Checkpoint& start, const DatasetSplit& data, const NoiseSchedule& sched,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {})
{
    if (start.objective != cfg.objective) throw ParameterError("train: checkpoint objective differs from TrainConfig");
    const UNet<float> net(UNetLayout::build(start.net));
    validate_against_layout(start, net.layout());
    const LossFn loss = [&](const ParamStore<float>& p, ParamStore<float>* g, std::span<const PatchPair> b, Rng& rng) {
        return cfg.objective == Objective::noise ? diffusion_batch_loss(net, p, g, sched, b, rng)
                                                 : fm_batch_loss(net, p, g, b, rng);
    };
    auto loop = train_loop(materialize<float>(start), loss, data, cfg, on_epoch);
    TrainResult r{start, std::move(loop.history)};
    store_params(r.best, loop.best_params);
    r.best.meta = {r.history.best_epoch, r.history.best_val_loss, cfg.seed};
    return r;
}

// ---------------------------------------------------------------------------
// Gradient verification

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::string worst_param;
};

/// Relative error with an absolute floor so that gradients that are zero up
/// to round-off do not dominate.
inline double gradient_rel_error(double analytic, double numeric, double floor = 1e-6)
{
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compare reverse-mode gradients of the training loss with central finite
/// differences on `samples` randomly chosen parameters. Runs the network in
/// double precision; throws VerificationError when the worst relative error
/// reaches `tolerance`.
inline GradCheckReport check_gradients(const NetConfig& cfg, Objective objective, Rng& rng, std::size_t samples = 128,
                                       double step = 1e-4, double tolerance = 1e-3)
{
    if (cfg.base_width > 8) throw ParameterError("check_gradients: use a tiny config (base_width <= 8)");
    const Checkpoint ck = init(cfg, rng.engine()(), objective, {}, false);
    const UNet<double> net(UNetLayout::build(cfg));
    ParamStore<double> params = materialize<double>(ck);

    std::vector<PatchPair> batch(2);
    for (auto& p : batch) {
        p.cond = Patch(1, cfg.patch, cfg.patch);
        p.target = Patch(1, cfg.patch, cfg.patch);
        for (auto& v : p.cond.data) v = static_cast<float>(2.0 * rng.uniform() - 1.0);
        for (auto& v : p.target.data) v = static_cast<float>(2.0 * rng.uniform() - 1.0);
    }
    const NoiseSchedule sched = make_linear();
    const auto examples = draw_examples(objective, batch, sched, rng);
    const std::span<const TrainingExample> ex(examples);

    ParamStore<double> grads = zeros_like<double>(net.layout());
    network_loss(net, params, &grads, ex);

    GradCheckReport report;
    for (std::size_t s = 0; s < samples; ++s) {
        const auto a = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(params.size()) - 1));
        const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(params[a].size()) - 1));
        const double orig = params[a][i];
        params[a][i] = orig + step;
        const double up = network_loss<double>(net, params, nullptr, ex);
        params[a][i] = orig - step;
        const double down = network_loss<double>(net, params, nullptr, ex);
        params[a][i] = orig;
        const double numeric = (up - down) / (2.0 * step);
        const double err = gradient_rel_error(grads[a][i], numeric);
        ++report.checked;
        if (err > report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_param = net.layout().params[a].name + "[" + std::to_string(i) + "]";
        }
    }
    if (report.max_rel_error >= tolerance)
        throw VerificationError("gradient check failed: max relative error " + std::to_string(report.max_rel_error) +
                                " at " + report.worst_param);
    return report;
}

} // namespace nightfuse
