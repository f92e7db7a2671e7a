#pragma once

#include <cmath>
#include <functional>
#include <memory>

#include "nightfuse/checkpoint.hpp"

namespace nightfuse {

/// Network prediction as seen by the samplers: epsilon-hat for noise
/// checkpoints (time = discrete timestep) or velocity for flow checkpoints
/// (time in [0,1]).
struct Predictor {
    Objective objective = Objective::noise;
    std::function<Patch(const Patch& x, const Patch& cond, double time)> fn;

    Patch operator()(const Patch& x, const Patch& cond, double time) const { return fn(x, cond, time); }
};

/// A checkpoint materialized for inference in one precision mode. Immutable;
/// `predict` may be called concurrently.
class PreparedModel {
public:
    PreparedModel(const Checkpoint& ck, PrecisionMode mode)
        : net_(UNetLayout::build(ck.net)), objective_(ck.objective), mode_(mode), sched_(make_schedule(ck.schedule))
    {
        validate_against_layout(ck, net_.layout());
        if (mode == PrecisionMode::weights_int8 && ck.precision != PrecisionMode::weights_int8)
            params_ = materialize<float>(quantize_int8(ck));
        else
            params_ = materialize<float>(ck);
        if (mode == PrecisionMode::half16)
            for (auto& p : params_)
                for (auto& v : p) v = round_to_half(v);
    }

    Objective objective() const noexcept { return objective_; }
    PrecisionMode mode() const noexcept { return mode_; }
    const NetConfig& config() const noexcept { return net_.config(); }
    /// half16 keeps binary16 storage but does its arithmetic in float.
    bool emulated() const noexcept { return mode_ == PrecisionMode::half16; }

    Patch predict(const Patch& x_t, const Patch& cond, double time) const
    {
        double embed_time = time;
        if (objective_ == Objective::noise) {
            if (time < 1.0 || time > sched_.T) throw ParameterError("forward: timestep outside [1, T]");
        } else {
            if (time < 0.0 || time > 1.0) throw ParameterError("forward: flow time outside [0, 1]");
            embed_time = time * 1000.0;
        }
        Graph<float> g(false, mode_ == PrecisionMode::half16);
        Var<float> out = net_.forward(g, params_, nullptr, x_t, cond, embed_time);
        Patch pred = std::move(out->value);
        if (objective_ == Objective::noise) {
            const double skip = noise_skip(sched_, time);
            for (std::size_t i = 0; i < pred.size(); ++i)
                pred[i] = static_cast<float>(pred[i] + skip * x_t[i]);
        }
        for (float v : pred.data)
            if (!std::isfinite(v)) throw NumericError("forward: non-finite network output");
        return pred;
    }

    Predictor predictor(std::shared_ptr<const PreparedModel> self) const
    {
        return {objective_, [self](const Patch& x, const Patch& c, double t) { return self->predict(x, c, t); }};
    }

private:
    UNet<float> net_;
    Objective objective_;
    PrecisionMode mode_;
    NoiseSchedule sched_;
    ParamStore<float> params_;
};

inline Predictor make_predictor(const Checkpoint& ck, PrecisionMode mode)
{
    auto m = std::make_shared<const PreparedModel>(ck, mode);
    return m->predictor(m);
}

/// One-shot prediction; prefer PreparedModel for repeated calls.
inline Patch forward(const Checkpoint& ck, const Patch& x_t, const Patch& cond, double time,
                     PrecisionMode mode = PrecisionMode::full32)
{
    return PreparedModel(ck, mode).predict(x_t, cond, time);
}

} // namespace nightfuse
