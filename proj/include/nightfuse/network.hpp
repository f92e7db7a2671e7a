#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nightfuse/ops.hpp"

namespace nightfuse {

/// Conditional U-Net hyperparameters. Input is the noisy target stacked
/// with the condition patch along channels.
struct NetConfig {
    int patch = 32;
    int in_channels = 2;
    int out_channels = 1;
    int base_width = 64;
    std::vector<int> level_multipliers{1, 2, 4};
    int attention_resolution = 16;
    int t_embed_dim = 128;
    int norm_groups = 8;
    int blocks_per_level = 2;

    friend bool operator==(const NetConfig&, const NetConfig&) = default;

    std::vector<int> resolutions() const
    {
        std::vector<int> r;
        for (std::size_t i = 0; i < level_multipliers.size(); ++i) r.push_back(patch >> i);
        return r;
    }

    void validate() const
    {
        const auto fail = [](const std::string& m) { throw ParameterError("NetConfig: " + m); };
        if (patch < 1 || in_channels < 1 || out_channels < 1) fail("patch and channel counts must be positive");
        if (level_multipliers.empty()) fail("need at least one level");
        if ((patch % (1 << (level_multipliers.size() - 1))) != 0) fail("patch not divisible by 2^(levels-1)");
        if (base_width < 1 || norm_groups < 1 || base_width % norm_groups != 0)
            fail("base_width must be a positive multiple of norm_groups");
        for (int m : level_multipliers)
            if (m < 1) fail("level multipliers must be >= 1");
        if (t_embed_dim < 2 || t_embed_dim % 2 != 0) fail("t_embed_dim must be even");
        if (blocks_per_level < 1) fail("blocks_per_level must be >= 1");
        bool found = false;
        for (int r : resolutions()) found = found || r == attention_resolution;
        if (!found) fail("attention_resolution must be one of the level resolutions");
    }
};

enum class ParamRole : std::uint8_t { weight, bias, norm };

struct ParamSpec {
    std::string name;
    std::vector<std::uint32_t> dims;
    ParamRole role;
    std::size_t numel() const
    {
        std::size_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
};

/// Index-based description of the network: every layer refers to its
/// parameters by position in `params`.
struct UNetLayout {
    struct Conv {
        ops::ConvShape shape;
        std::size_t w = 0, b = 0;
    };
    struct Norm {
        int channels = 0;
        std::size_t gamma = 0, beta = 0;
    };
    struct Linear {
        int in = 0, out = 0;
        std::size_t w = 0, b = 0;
    };
    struct Res {
        Norm n1;
        Conv c1;
        Linear temb;
        Norm n2;
        Conv c2;
        std::optional<Conv> skip;
        int cout = 0;
    };
    struct Attn {
        Norm norm;
        Conv qkv;
        Conv proj;
    };
    struct Encoder {
        std::optional<Res> res;
        std::optional<Attn> attn;
        std::optional<Conv> down;
    };
    struct Decoder {
        Res res;
        std::optional<Attn> attn;
        std::optional<Conv> up; // nearest-neighbour x2 then this conv
    };

    NetConfig config;
    std::vector<ParamSpec> params;
    Linear time1, time2;
    Conv conv_in;
    std::vector<Encoder> encoder;
    Res mid1, mid2;
    std::vector<Decoder> decoder;
    Norm out_norm;
    Conv conv_out;

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& p : params) n += p.numel();
        return n;
    }

    static UNetLayout build(const NetConfig& cfg)
    {
        cfg.validate();
        UNetLayout l;
        l.config = cfg;
        auto add = [&](std::string name, std::vector<std::uint32_t> dims, ParamRole role) {
            l.params.push_back({std::move(name), std::move(dims), role});
            return l.params.size() - 1;
        };
        auto conv = [&](const std::string& name, int cin, int cout, int k, int stride) {
            Conv c{{cin, cout, k, stride}, 0, 0};
            c.w = add(name + ".weight", {static_cast<std::uint32_t>(cout), static_cast<std::uint32_t>(cin),
                                         static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k)},
                      ParamRole::weight);
            c.b = add(name + ".bias", {static_cast<std::uint32_t>(cout)}, ParamRole::bias);
            return c;
        };
        auto norm = [&](const std::string& name, int ch) {
            Norm n{ch, 0, 0};
            n.gamma = add(name + ".gamma", {static_cast<std::uint32_t>(ch)}, ParamRole::norm);
            n.beta = add(name + ".beta", {static_cast<std::uint32_t>(ch)}, ParamRole::norm);
            return n;
        };
        auto linear = [&](const std::string& name, int in, int out) {
            Linear li{in, out, 0, 0};
            li.w = add(name + ".weight", {static_cast<std::uint32_t>(out), static_cast<std::uint32_t>(in)},
                       ParamRole::weight);
            li.b = add(name + ".bias", {static_cast<std::uint32_t>(out)}, ParamRole::bias);
            return li;
        };
        const int temb = cfg.t_embed_dim;
        auto res = [&](const std::string& name, int cin, int cout) {
            Res r;
            r.cout = cout;
            r.n1 = norm(name + ".norm1", cin);
            r.c1 = conv(name + ".conv1", cin, cout, 3, 1);
            r.temb = linear(name + ".temb", temb, cout);
            r.n2 = norm(name + ".norm2", cout);
            r.c2 = conv(name + ".conv2", cout, cout, 3, 1);
            if (cin != cout) r.skip = conv(name + ".skip", cin, cout, 1, 1);
            return r;
        };
        auto attn = [&](const std::string& name, int ch) {
            return Attn{norm(name + ".norm", ch), conv(name + ".qkv", ch, 3 * ch, 1, 1),
                        conv(name + ".proj", ch, ch, 1, 1)};
        };

        l.time1 = linear("time.fc1", temb, temb);
        l.time2 = linear("time.fc2", temb, temb);
        const int base = cfg.base_width;
        l.conv_in = conv("conv_in", cfg.in_channels, base, 3, 1);

        int ch = base;
        int resolution = cfg.patch;
        std::vector<int> skips{ch};
        const int levels = static_cast<int>(cfg.level_multipliers.size());
        for (int lv = 0; lv < levels; ++lv) {
            const int width = base * cfg.level_multipliers[lv];
            for (int b = 0; b < cfg.blocks_per_level; ++b) {
                const std::string name = "down." + std::to_string(lv) + "." + std::to_string(b);
                Encoder e;
                e.res = res(name, ch, width);
                ch = width;
                if (resolution == cfg.attention_resolution) e.attn = attn(name + ".attn", ch);
                l.encoder.push_back(std::move(e));
                skips.push_back(ch);
            }
            if (lv + 1 < levels) {
                Encoder e;
                e.down = conv("down." + std::to_string(lv) + ".downsample", ch, ch, 3, 2);
                l.encoder.push_back(std::move(e));
                skips.push_back(ch);
                resolution /= 2;
            }
        }
        l.mid1 = res("mid.0", ch, ch);
        l.mid2 = res("mid.1", ch, ch);
        for (int lv = levels - 1; lv >= 0; --lv) {
            const int width = base * cfg.level_multipliers[lv];
            for (int b = 0; b <= cfg.blocks_per_level; ++b) {
                const std::string name = "up." + std::to_string(lv) + "." + std::to_string(b);
                const int skip_ch = skips.back();
                skips.pop_back();
                Decoder d;
                d.res = res(name, ch + skip_ch, width);
                ch = width;
                if (resolution == cfg.attention_resolution) d.attn = attn(name + ".attn", ch);
                if (b == cfg.blocks_per_level && lv > 0) {
                    d.up = conv("up." + std::to_string(lv) + ".upsample", ch, ch, 3, 1);
                    resolution *= 2;
                }
                l.decoder.push_back(std::move(d));
            }
        }
        l.out_norm = norm("out.norm", ch);
        l.conv_out = conv("out.conv", ch, cfg.out_channels, 3, 1);
        return l;
    }
};

template <class T>
using ParamStore = std::vector<std::vector<T>>;

template <class T>
ParamStore<T> zeros_like(const UNetLayout& layout)
{
    ParamStore<T> s;
    s.reserve(layout.params.size());
    for (const auto& p : layout.params) s.emplace_back(p.numel(), T(0));
    return s;
}

/// Stateless forward/backward over a layout. Parameters and gradient
/// accumulators are passed in, so one UNet can serve concurrent callers.
template <class T>
class UNet {
public:
    explicit UNet(UNetLayout layout) : layout_(std::move(layout)) {}

    const UNetLayout& layout() const noexcept { return layout_; }
    const NetConfig& config() const noexcept { return layout_.config; }

    /// `time` is the value fed to the sinusoidal embedding. `grads` may be
    /// null when the graph does not record.
    Var<T> forward(Graph<T>& g, const ParamStore<T>& p, ParamStore<T>* grads, const Tensor<T>& x_t,
                   const Tensor<T>& cond, double time) const
    {
        const auto& cfg = layout_.config;
        require_shape(x_t, 1, cfg.patch, cfg.patch, "UNet::forward x_t");
        require_shape(cond, cfg.in_channels - 1, cfg.patch, cfg.patch, "UNet::forward condition");
        if (p.size() != layout_.params.size()) throw ShapeError("UNet::forward: parameter table size mismatch");
        Ctx ctx{g, p, grads};

        Var<T> temb = g.input(ops::timestep_embedding<T>(time, cfg.t_embed_dim));
        temb = ops::linear(g, temb, ctx.view(layout_.time1.w), ctx.view(layout_.time1.b), layout_.time1.out);
        temb = ops::silu(g, temb);
        temb = ops::linear(g, temb, ctx.view(layout_.time2.w), ctx.view(layout_.time2.b), layout_.time2.out);
        const Var<T> temb_act = ops::silu(g, temb);

        Var<T> h = ops::concat(g, g.input(x_t), g.input(cond));
        h = conv(ctx, h, layout_.conv_in);
        std::vector<Var<T>> skips{h};
        for (const auto& e : layout_.encoder) {
            if (e.res) {
                h = resblock(ctx, h, temb_act, *e.res);
                if (e.attn) h = attention(ctx, h, *e.attn);
            } else {
                h = conv(ctx, h, *e.down);
            }
            skips.push_back(h);
        }
        h = resblock(ctx, h, temb_act, layout_.mid1);
        h = resblock(ctx, h, temb_act, layout_.mid2);
        for (const auto& d : layout_.decoder) {
            h = ops::concat(g, h, skips.back());
            skips.pop_back();
            h = resblock(ctx, h, temb_act, d.res);
            if (d.attn) h = attention(ctx, h, *d.attn);
            if (d.up) h = conv(ctx, ops::upsample2x(g, h), *d.up);
        }
        h = ops::silu(g, norm(ctx, h, layout_.out_norm));
        return conv(ctx, h, layout_.conv_out);
    }

private:
    struct Ctx {
        Graph<T>& g;
        const ParamStore<T>& p;
        ParamStore<T>* grads;
        ParamView<T> view(std::size_t i) const { return {p[i].data(), grads ? (*grads)[i].data() : nullptr}; }
    };

    Var<T> conv(Ctx& c, const Var<T>& x, const UNetLayout::Conv& l) const
    {
        return ops::conv2d(c.g, x, c.view(l.w), c.view(l.b), l.shape);
    }

    Var<T> norm(Ctx& c, const Var<T>& x, const UNetLayout::Norm& l) const
    {
        return ops::group_norm(c.g, x, c.view(l.gamma), c.view(l.beta), layout_.config.norm_groups);
    }

    Var<T> resblock(Ctx& c, const Var<T>& x, const Var<T>& temb, const UNetLayout::Res& r) const
    {
        Var<T> h = conv(c, ops::silu(c.g, norm(c, x, r.n1)), r.c1);
        h = ops::add_channel(c.g, h, ops::linear(c.g, temb, c.view(r.temb.w), c.view(r.temb.b), r.temb.out));
        h = conv(c, ops::silu(c.g, norm(c, h, r.n2)), r.c2);
        return ops::add(c.g, h, r.skip ? conv(c, x, *r.skip) : x);
    }

    Var<T> attention(Ctx& c, const Var<T>& x, const UNetLayout::Attn& a) const
    {
        Var<T> qkv = conv(c, norm(c, x, a.norm), a.qkv);
        return ops::add(c.g, x, conv(c, ops::spatial_attention(c.g, qkv), a.proj));
    }

    UNetLayout layout_;
};

} // namespace nightfuse
