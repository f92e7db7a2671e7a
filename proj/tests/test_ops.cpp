#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "nightfuse/ops.hpp"

using namespace nightfuse;
using T = double;

namespace {

using Build = std::function<Var<T>(Graph<T>&, const std::vector<Var<T>>&, const std::vector<ParamView<T>>&)>;

struct Case {
    std::vector<Tensor<T>> inputs;
    std::vector<std::vector<T>> params;
};

std::mt19937_64 eng(42);

Tensor<T> rand_tensor(int c, int h, int w, double scale = 1.0)
{
    std::normal_distribution<T> d(0.0, scale);
    Tensor<T> t(c, h, w);
    for (auto& v : t.data) v = d(eng);
    return t;
}

std::vector<T> rand_vec(std::size_t n, double scale = 0.5)
{
    std::normal_distribution<T> d(0.0, scale);
    std::vector<T> v(n);
    for (auto& x : v) x = d(eng);
    return v;
}

// L = sum(seed * out); returns L and, when asked, the output shape.
T evaluate(const Build& b, const Case& c, const Tensor<T>* seed, Tensor<T>* shape_out = nullptr)
{
    Graph<T> g(false);
    std::vector<Var<T>> in;
    for (const auto& t : c.inputs) in.push_back(g.input(t));
    std::vector<ParamView<T>> pv;
    for (const auto& p : c.params) pv.push_back({p.data(), nullptr});
    Var<T> out = b(g, in, pv);
    if (shape_out) *shape_out = out->value;
    T l = 0;
    if (seed)
        for (std::size_t i = 0; i < out->value.size(); ++i) l += (*seed)[i] * out->value[i];
    return l;
}

// Analytic gradients of every input and parameter against central differences.
void check(const Build& b, Case c, double tol = 1e-6)
{
    Tensor<T> shape;
    evaluate(b, c, nullptr, &shape);
    const Tensor<T> seed = rand_tensor(shape.c, shape.h, shape.w);

    Graph<T> g(true);
    std::vector<Var<T>> in;
    for (const auto& t : c.inputs) in.push_back(g.input(t));
    std::vector<std::vector<T>> pgrad;
    for (const auto& p : c.params) pgrad.emplace_back(p.size(), 0.0);
    std::vector<ParamView<T>> pv;
    for (std::size_t i = 0; i < c.params.size(); ++i) pv.push_back({c.params[i].data(), pgrad[i].data()});
    Var<T> out = b(g, in, pv);
    g.backward(out, seed);

    const double h = 1e-6;
    const auto compare = [&](T& slot, T analytic, const std::string& what) {
        const T orig = slot;
        slot = orig + h;
        const T up = evaluate(b, c, &seed);
        slot = orig - h;
        const T down = evaluate(b, c, &seed);
        slot = orig;
        const T numeric = (up - down) / (2 * h);
        EXPECT_NEAR(analytic, numeric, tol * std::max(1.0, std::abs(numeric))) << what;
    };
    for (std::size_t k = 0; k < c.inputs.size(); ++k) {
        const bool has = in[k]->has_grad();
        for (std::size_t i = 0; i < c.inputs[k].size(); ++i)
            compare(c.inputs[k][i], has ? in[k]->grad[i] : 0.0, "input " + std::to_string(k) + "[" + std::to_string(i) + "]");
    }
    for (std::size_t k = 0; k < c.params.size(); ++k)
        for (std::size_t i = 0; i < c.params[k].size(); ++i)
            compare(c.params[k][i], pgrad[k][i], "param " + std::to_string(k) + "[" + std::to_string(i) + "]");
}

} // namespace

TEST(Ops, AffineLayerQuadraticLoss)
{
    // L = 0.5 * |W v + b - y|^2 has dL/dW = r v^T, dL/db = r.
    const int in = 4, out = 3;
    auto W = rand_vec(in * out), bias = rand_vec(out);
    const Tensor<T> v = rand_tensor(in, 1, 1), y = rand_tensor(out, 1, 1);
    std::vector<T> gW(W.size(), 0.0), gb(out, 0.0);
    Graph<T> g(true);
    Var<T> x = g.input(v);
    Var<T> o = ops::linear(g, x, {W.data(), gW.data()}, {bias.data(), gb.data()}, out);
    Tensor<T> r(out, 1, 1);
    for (int i = 0; i < out; ++i) r[i] = o->value[i] - y[i];
    g.backward(o, r);
    const auto loss = [&] {
        Graph<T> gg;
        Var<T> oo = ops::linear(gg, gg.input(v), {W.data(), nullptr}, {bias.data(), nullptr}, out);
        T l = 0;
        for (int i = 0; i < out; ++i) l += 0.5 * (oo->value[i] - y[i]) * (oo->value[i] - y[i]);
        return l;
    };
    for (std::size_t i = 0; i < W.size(); ++i) {
        const T orig = W[i];
        W[i] = orig + 1e-3;
        const T up = loss();
        W[i] = orig - 1e-3;
        const T down = loss();
        W[i] = orig;
        EXPECT_NEAR(gW[i], (up - down) / 2e-3, 1e-6);
        EXPECT_NEAR(gW[i], r[i / in] * v[i % in], 1e-12);
    }
    for (int i = 0; i < out; ++i) EXPECT_NEAR(gb[i], r[i], 1e-12);
}

TEST(Ops, ConvMatchesDirectLoops)
{
    const ops::ConvShape s{3, 4, 3, 1};
    const Tensor<T> x = rand_tensor(3, 7, 6);
    const auto W = rand_vec(4 * 3 * 9), b = rand_vec(4);
    Graph<T> g;
    const Var<T> y = ops::conv2d(g, g.input(x), ParamView<T>{W.data(), nullptr}, ParamView<T>{b.data(), nullptr}, s);
    ASSERT_EQ(y->value.h, 7);
    ASSERT_EQ(y->value.w, 6);
    for (int o = 0; o < 4; ++o)
        for (int r = 0; r < 7; ++r)
            for (int c = 0; c < 6; ++c) {
                T acc = b[o];
                for (int i = 0; i < 3; ++i)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int rr = r + ky - 1, cc = c + kx - 1;
                            if (rr < 0 || rr >= 7 || cc < 0 || cc >= 6) continue;
                            acc += W[((o * 3 + i) * 3 + ky) * 3 + kx] * x.at(i, rr, cc);
                        }
                EXPECT_NEAR(y->value.at(o, r, c), acc, 1e-12);
            }
}

TEST(Ops, StridedConvShape)
{
    const ops::ConvShape s{2, 2, 3, 2};
    const auto W = rand_vec(2 * 2 * 9), b = rand_vec(2);
    Graph<T> g;
    const Var<T> y = ops::conv2d(g, g.input(rand_tensor(2, 8, 8)), ParamView<T>{W.data(), nullptr},
                                 ParamView<T>{b.data(), nullptr}, s);
    EXPECT_EQ(y->value.h, 4);
    EXPECT_EQ(y->value.w, 4);
}

TEST(OpsGrad, Conv3x3)
{
    const ops::ConvShape s{2, 3, 3, 1};
    check([&](auto& g, auto& in, auto& p) { return ops::conv2d(g, in[0], p[0], p[1], s); },
          {{rand_tensor(2, 5, 4)}, {rand_vec(3 * 2 * 9), rand_vec(3)}});
}

TEST(OpsGrad, ConvStrided)
{
    const ops::ConvShape s{2, 2, 3, 2};
    check([&](auto& g, auto& in, auto& p) { return ops::conv2d(g, in[0], p[0], p[1], s); },
          {{rand_tensor(2, 6, 6)}, {rand_vec(2 * 2 * 9), rand_vec(2)}});
}

TEST(OpsGrad, Conv1x1)
{
    const ops::ConvShape s{3, 2, 1, 1};
    check([&](auto& g, auto& in, auto& p) { return ops::conv2d(g, in[0], p[0], p[1], s); },
          {{rand_tensor(3, 4, 4)}, {rand_vec(2 * 3), rand_vec(2)}});
}

TEST(OpsGrad, GroupNorm)
{
    check([](auto& g, auto& in, auto& p) { return ops::group_norm(g, in[0], p[0], p[1], 2); },
          {{rand_tensor(4, 3, 3, 2.0)}, {rand_vec(4), rand_vec(4)}}, 1e-5);
}

TEST(OpsGrad, GroupNormNormalizes)
{
    std::vector<T> gamma(4, 1.0), beta(4, 0.0);
    Graph<T> g;
    const Var<T> y = ops::group_norm(g, g.input(rand_tensor(4, 5, 5, 3.0)), ParamView<T>{gamma.data(), nullptr},
                                     ParamView<T>{beta.data(), nullptr}, 2);
    for (int grp = 0; grp < 2; ++grp) {
        T m = 0, v = 0;
        for (int i = 0; i < 50; ++i) m += y->value[grp * 50 + i];
        m /= 50;
        for (int i = 0; i < 50; ++i) v += (y->value[grp * 50 + i] - m) * (y->value[grp * 50 + i] - m);
        EXPECT_NEAR(m, 0.0, 1e-12);
        EXPECT_NEAR(v / 50, 1.0, 1e-5);
    }
}

TEST(OpsGrad, Silu)
{
    check([](auto& g, auto& in, auto&) { return ops::silu(g, in[0]); }, {{rand_tensor(2, 3, 3, 2.0)}, {}});
}

TEST(OpsGrad, AddAndConcat)
{
    check([](auto& g, auto& in, auto&) { return ops::add(g, in[0], in[1]); },
          {{rand_tensor(2, 3, 3), rand_tensor(2, 3, 3)}, {}});
    check([](auto& g, auto& in, auto&) { return ops::concat(g, in[0], in[1]); },
          {{rand_tensor(2, 3, 3), rand_tensor(1, 3, 3)}, {}});
}

TEST(OpsGrad, AddChannel)
{
    check([](auto& g, auto& in, auto&) { return ops::add_channel(g, in[0], in[1]); },
          {{rand_tensor(3, 2, 2), rand_tensor(3, 1, 1)}, {}});
}

TEST(OpsGrad, Linear)
{
    check([](auto& g, auto& in, auto& p) { return ops::linear(g, in[0], p[0], p[1], 3); },
          {{rand_tensor(5, 1, 1)}, {rand_vec(15), rand_vec(3)}});
}

TEST(OpsGrad, Upsample)
{
    check([](auto& g, auto& in, auto&) { return ops::upsample2x(g, in[0]); }, {{rand_tensor(2, 2, 3)}, {}});
}

TEST(OpsGrad, Attention)
{
    check([](auto& g, auto& in, auto&) { return ops::spatial_attention(g, in[0]); }, {{rand_tensor(6, 3, 3)}, {}});
}

TEST(Ops, AttentionRowsAreConvexCombinations)
{
    // With identical values at every position, attention returns that value.
    Tensor<T> qkv = rand_tensor(6, 2, 2);
    for (int ch = 4; ch < 6; ++ch)
        for (int i = 0; i < 4; ++i) qkv.at(ch, i / 2, i % 2) = ch == 4 ? 0.7 : -1.3;
    Graph<T> g;
    const Var<T> y = ops::spatial_attention(g, g.input(qkv));
    for (int i = 0; i < 4; ++i) {
        EXPECT_NEAR(y->value[i], 0.7, 1e-12);
        EXPECT_NEAR(y->value[4 + i], -1.3, 1e-12);
    }
}

TEST(Ops, TimestepEmbedding)
{
    const auto e = ops::timestep_embedding<double>(0.0, 8);
    for (int i = 0; i < 4; ++i) {
        EXPECT_EQ(e[i], 0.0);
        EXPECT_EQ(e[4 + i], 1.0);
    }
    const auto f = ops::timestep_embedding<double>(5.0, 8);
    EXPECT_NEAR(f[0], std::sin(5.0), 1e-15);
    EXPECT_NEAR(f[1], std::sin(5.0 * std::pow(10000.0, -0.25)), 1e-15);
}

TEST(Graph, HalfStorageRoundsActivations)
{
    Graph<float> g(false, true);
    Tensor<float> t(1, 1, 1);
    t[0] = 1.0f + 1e-4f;
    EXPECT_EQ(g.input(t)->value[0], 1.0f);
    Graph<float> full;
    EXPECT_EQ(full.input(t)->value[0], 1.0f + 1e-4f);
}
