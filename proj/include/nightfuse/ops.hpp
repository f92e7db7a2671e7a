#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/Core>

#include "nightfuse/autodiff.hpp"

// Differentiable layer primitives for the U-Net. Each op computes its output
// and, when the graph records, installs a closure that propagates the output
// gradient into its inputs and parameter accumulators.

namespace nightfuse::ops {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Left-to-right sum. Eigen's vectorized redux peels to the first aligned
// element, which makes the result depend on where the buffer landed.
template <class E>
typename E::Scalar serial_sum(const E& e)
{
    typename E::Scalar s(0);
    for (Eigen::Index i = 0; i < e.size(); ++i) s += e(i);
    return s;
}

struct ConvShape {
    int cin = 0;
    int cout = 0;
    int k = 3;
    int stride = 1;
};

namespace detail {

inline int conv_out(int n, int k, int stride) { return (n + 2 * (k / 2) - k) / stride + 1; }

// Column range [lo, hi) of output x positions whose input x = ox*stride + kx - pad is in bounds.
inline void valid_range(int n_in, int n_out, int k_off, int stride, int& lo, int& hi)
{
    lo = 0;
    while (lo < n_out && lo * stride + k_off < 0) ++lo;
    hi = n_out;
    while (hi > lo && (hi - 1) * stride + k_off >= n_in) --hi;
}

template <class T>
void im2col(const Tensor<T>& x, const ConvShape& s, int ho, int wo, std::vector<T>& col)
{
    const int pad = s.k / 2;
    const std::size_t hw = static_cast<std::size_t>(ho) * wo;
    col.resize(static_cast<std::size_t>(s.cin) * s.k * s.k * hw);
    for (int c = 0; c < s.cin; ++c)
        for (int ky = 0; ky < s.k; ++ky)
            for (int kx = 0; kx < s.k; ++kx) {
                T* row = col.data() + ((static_cast<std::size_t>(c) * s.k + ky) * s.k + kx) * hw;
                int lo, hi;
                valid_range(x.w, wo, kx - pad, s.stride, lo, hi);
                for (int oy = 0; oy < ho; ++oy) {
                    T* dst = row + static_cast<std::size_t>(oy) * wo;
                    const int iy = oy * s.stride + ky - pad;
                    if (iy < 0 || iy >= x.h) {
                        std::fill(dst, dst + wo, T(0));
                        continue;
                    }
                    std::fill(dst, dst + lo, T(0));
                    std::fill(dst + hi, dst + wo, T(0));
                    const T* src = &x.at(c, iy, 0) + (kx - pad);
                    if (s.stride == 1) {
                        std::copy(src + lo, src + hi, dst + lo);
                    } else {
                        for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * s.stride];
                    }
                }
            }
}

template <class T>
void col2im_add(const std::vector<T>& col, const ConvShape& s, int ho, int wo, Tensor<T>& dx)
{
    const int pad = s.k / 2;
    const std::size_t hw = static_cast<std::size_t>(ho) * wo;
    for (int c = 0; c < s.cin; ++c)
        for (int ky = 0; ky < s.k; ++ky)
            for (int kx = 0; kx < s.k; ++kx) {
                const T* row = col.data() + ((static_cast<std::size_t>(c) * s.k + ky) * s.k + kx) * hw;
                int lo, hi;
                valid_range(dx.w, wo, kx - pad, s.stride, lo, hi);
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * s.stride + ky - pad;
                    if (iy < 0 || iy >= dx.h) continue;
                    const T* src = row + static_cast<std::size_t>(oy) * wo;
                    T* dst = &dx.at(c, iy, 0) + (kx - pad);
                    for (int ox = lo; ox < hi; ++ox) dst[ox * s.stride] += src[ox];
                }
            }
}

template <class T>
T sigmoid(T v)
{
    return T(1) / (T(1) + std::exp(-v));
}

} // namespace detail

/// 2-D convolution with "same" zero padding (k/2) and optional stride.
/// Weight layout is [cout][cin][k][k].
template <class T>
Var<T> conv2d(Graph<T>& g, const Var<T>& x, ParamView<T> weight, ParamView<T> bias, const ConvShape& s)
{
    if (x->value.c != s.cin) throw ShapeError("conv2d: input channel mismatch");
    const int ho = detail::conv_out(x->value.h, s.k, s.stride);
    const int wo = detail::conv_out(x->value.w, s.k, s.stride);
    const int kk = s.cin * s.k * s.k;
    const int hw = ho * wo;
    const bool direct = s.k == 1 && s.stride == 1;

    auto col = std::make_shared<std::vector<T>>();
    if (!direct) detail::im2col(x->value, s, ho, wo, *col);
    const T* col_ptr = direct ? x->value.data.data() : col->data();

    Tensor<T> out(s.cout, ho, wo);
    MatMap<T> om(out.data.data(), s.cout, hw);
    om.noalias() = ConstMatMap<T>(weight.value, s.cout, kk) * ConstMatMap<T>(col_ptr, kk, hw);
    for (int o = 0; o < s.cout; ++o) om.row(o).array() += bias.value[o];

    Var<T> y = g.emit(std::move(out));
    if (g.recording()) {
        Node<T>* yn = y.get();
        Node<T>* xn = x.get();
        y->backward = [=]() {
            ConstMatMap<T> dy(yn->grad.data.data(), s.cout, hw);
            const T* cp = direct ? xn->value.data.data() : col->data();
            ConstMatMap<T> colm(cp, kk, hw);
            if (weight.grad) MatMap<T>(weight.grad, s.cout, kk).noalias() += dy * colm.transpose();
            if (bias.grad)
                for (int o = 0; o < s.cout; ++o) bias.grad[o] += serial_sum(dy.row(o));
            auto& dx = xn->grad_buffer();
            ConstMatMap<T> wm(weight.value, s.cout, kk);
            if (direct) {
                MatMap<T>(dx.data.data(), kk, hw).noalias() += wm.transpose() * dy;
            } else {
                std::vector<T> dcol(static_cast<std::size_t>(kk) * hw);
                MatMap<T>(dcol.data(), kk, hw).noalias() = wm.transpose() * dy;
                detail::col2im_add(dcol, s, ho, wo, dx);
            }
        };
    } else {
        col.reset();
    }
    return y;
}

/// Group normalization over (channels/groups) x H x W, per-channel affine.
template <class T>
Var<T> group_norm(Graph<T>& g, const Var<T>& x, ParamView<T> gamma, ParamView<T> beta, int groups, T eps = T(1e-5))
{
    const Tensor<T>& xv = x->value;
    if (xv.c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    const int cpg = xv.c / groups;
    const std::size_t n = static_cast<std::size_t>(cpg) * xv.plane();

    auto xhat = std::make_shared<Tensor<T>>(xv.c, xv.h, xv.w);
    auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(groups));
    Tensor<T> out(xv.c, xv.h, xv.w);
    for (int gi = 0; gi < groups; ++gi) {
        const T* src = xv.channel(gi * cpg);
        T mean = 0;
        for (std::size_t i = 0; i < n; ++i) mean += src[i];
        mean /= static_cast<T>(n);
        T var = 0;
        for (std::size_t i = 0; i < n; ++i) var += (src[i] - mean) * (src[i] - mean);
        var /= static_cast<T>(n);
        const T r = T(1) / std::sqrt(var + eps);
        (*rstd)[gi] = r;
        T* xh = xhat->channel(gi * cpg);
        for (std::size_t i = 0; i < n; ++i) xh[i] = (src[i] - mean) * r;
    }
    for (int c = 0; c < xv.c; ++c) {
        const T* xh = xhat->channel(c);
        T* o = out.channel(c);
        for (int i = 0; i < xv.plane(); ++i) o[i] = xh[i] * gamma.value[c] + beta.value[c];
    }

    Var<T> y = g.emit(std::move(out));
    if (g.recording()) {
        Node<T>* yn = y.get();
        Node<T>* xn = x.get();
        y->backward = [=]() {
            const Tensor<T>& dy = yn->grad;
            auto& dx = xn->grad_buffer();
            const int plane = dy.plane();
            for (int c = 0; c < dy.c; ++c) {
                const T* d = dy.channel(c);
                const T* xh = xhat->channel(c);
                T sg = 0, sb = 0;
                for (int i = 0; i < plane; ++i) {
                    sg += d[i] * xh[i];
                    sb += d[i];
                }
                if (gamma.grad) gamma.grad[c] += sg;
                if (beta.grad) beta.grad[c] += sb;
            }
            for (int gi = 0; gi < groups; ++gi) {
                T sum_dxh = 0, sum_dxh_xh = 0;
                for (int c = gi * cpg; c < (gi + 1) * cpg; ++c) {
                    const T* d = dy.channel(c);
                    const T* xh = xhat->channel(c);
                    for (int i = 0; i < plane; ++i) {
                        const T dxh = d[i] * gamma.value[c];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[i];
                    }
                }
                const T inv_n = T(1) / static_cast<T>(n);
                const T r = (*rstd)[gi];
                for (int c = gi * cpg; c < (gi + 1) * cpg; ++c) {
                    const T* d = dy.channel(c);
                    const T* xh = xhat->channel(c);
                    T* o = dx.channel(c);
                    for (int i = 0; i < plane; ++i) {
                        const T dxh = d[i] * gamma.value[c];
                        o[i] += r * (dxh - inv_n * sum_dxh - xh[i] * inv_n * sum_dxh_xh);
                    }
                }
            }
        };
    }
    return y;
}

template <class T>
Var<T> silu(Graph<T>& g, const Var<T>& x)
{
    Tensor<T> out(x->value.c, x->value.h, x->value.w);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x->value[i] * detail::sigmoid(x->value[i]);
    Var<T> y = g.emit(std::move(out));
    if (g.recording()) {
        Node<T>* yn = y.get();
        Node<T>* xn = x.get();
        y->backward = [=]() {
            auto& dx = xn->grad_buffer();
            for (std::size_t i = 0; i < dx.size(); ++i) {
                const T v = xn->value[i];
                const T s = detail::sigmoid(v);
                dx[i] += yn->grad[i] * s * (T(1) + v * (T(1) - s));
            }
        };
    }
    return y;
}

template <class T>
Var<T> add(Graph<T>& g, const Var<T>& a, const Var<T>& b)
{
    if (!a->value.same_shape(b->value)) throw ShapeError("add: shape mismatch");
    Tensor<T> out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
    Var<T> y = g.emit(std::move(out));
    if (g.recording()) {
        Node<T>* yn = y.get();
        Node<T>* an = a.get();
        Node<T>* bn = b.get();
        y->backward = [=]() {
            auto& da = an->grad_buffer();
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += yn->grad[i];
            auto& db = bn->grad_buffer();
            for (std::size_t i = 0; i < db.size(); ++i) db[i] += yn->grad[i];
        };
    }
    return y;
}

/// x[c, :, :] += v[c]; broadcasts a per-channel vector over the plane.
template <class T>
Var<T> add_channel(Graph<T>& g, const Var<T>& x, const Var<T>& v)
{
    if (static_cast<int>(v->value.size()) != x->value.c) throw ShapeError("add_channel: vector length mismatch");
    Tensor<T> out = x->value;
    for (int c = 0; c < out.c; ++c) {
        T* o = out.channel(c);
        for (int i = 0; i < out.plane(); ++i) o[i] += v->value[c];
    }
    Var<T> y = g.emit(std::move(out));
    if (g.recording()) {
        Node<T>* yn = y.get();
        Node<T>* xn = x.get();
        Node<T>* vn = v.get();
        y->backward = [=]() {
            auto& dx = xn->grad_buffer();
            auto& dv = vn->grad_buffer();
            const int plane = yn->grad.plane();
            for (int c = 0; c < yn->grad.c; ++c) {
                const T* d = yn->grad.channel(c);
                T* o = dx.channel(c);
                T s = 0;
                for (int i = 0; i < plane; ++i) {
                    o[i] += d[i];
                    s += d[i];
                }
                dv[c] += s;
            }
        };
    }
    return y;
}

/// y = W v + b with W stored [out][in].
template <class T>
Var<T> linear(Graph<T>& g, const Var<T>& v, ParamView<T> weight, ParamView<T> bias, int out_features)
{
    const int in = static_cast<int>(v->value.size());
    Tensor<T> out = Tensor<T>::vector(out_features);
    using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
    Eigen::Map<Vec> om(out.data.data(), out_features);
    om.noalias() = ConstMatMap<T>(weight.value, out_features, in) * Eigen::Map<const Vec>(v->value.data.data(), in);
    for (int o = 0; o < out_features; ++o) out[o] += bias.value[o];
    Var<T> y = g.emit(std::move(out));
    if (g.recording()) {
        Node<T>* yn = y.get();
        Node<T>* vn = v.get();
        y->backward = [=]() {
            Eigen::Map<const Vec> dy(yn->grad.data.data(), out_features);
            Eigen::Map<const Vec> xv(vn->value.data.data(), in);
            if (weight.grad) MatMap<T>(weight.grad, out_features, in).noalias() += dy * xv.transpose();
            if (bias.grad)
                for (int o = 0; o < out_features; ++o) bias.grad[o] += dy[o];
            auto& dx = vn->grad_buffer();
            Eigen::Map<Vec>(dx.data.data(), in).noalias() += ConstMatMap<T>(weight.value, out_features, in).transpose() * dy;
        };
    }
    return y;
}

/// Channel concatenation [a; b].
template <class T>
Var<T> concat(Graph<T>& g, const Var<T>& a, const Var<T>& b)
{
    if (a->value.h != b->value.h || a->value.w != b->value.w) throw ShapeError("concat: spatial mismatch");
    Tensor<T> out(a->value.c + b->value.c, a->value.h, a->value.w);
    std::copy(a->value.data.begin(), a->value.data.end(), out.data.begin());
    std::copy(b->value.data.begin(), b->value.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a->value.size()));
    Var<T> y = g.emit(std::move(out));
    if (g.recording()) {
        Node<T>* yn = y.get();
        Node<T>* an = a.get();
        Node<T>* bn = b.get();
        y->backward = [=]() {
            auto& da = an->grad_buffer();
            auto& db = bn->grad_buffer();
            const std::size_t na = da.size();
            for (std::size_t i = 0; i < na; ++i) da[i] += yn->grad[i];
            for (std::size_t i = 0; i < db.size(); ++i) db[i] += yn->grad[na + i];
        };
    }
    return y;
}

template <class T>
Var<T> upsample2x(Graph<T>& g, const Var<T>& x)
{
    const Tensor<T>& xv = x->value;
    Tensor<T> out(xv.c, xv.h * 2, xv.w * 2);
    for (int c = 0; c < xv.c; ++c)
        for (int yy = 0; yy < out.h; ++yy)
            for (int xx = 0; xx < out.w; ++xx) out.at(c, yy, xx) = xv.at(c, yy / 2, xx / 2);
    Var<T> y = g.emit(std::move(out));
    if (g.recording()) {
        Node<T>* yn = y.get();
        Node<T>* xn = x.get();
        y->backward = [=]() {
            auto& dx = xn->grad_buffer();
            const Tensor<T>& dy = yn->grad;
            for (int c = 0; c < dy.c; ++c)
                for (int yy = 0; yy < dy.h; ++yy)
                    for (int xx = 0; xx < dy.w; ++xx) dx.at(c, yy / 2, xx / 2) += dy.at(c, yy, xx);
        };
    }
    return y;
}

/// Single-head dot-product attention over spatial positions. Input stacks
/// [q; k; v] along channels (3C x H x W); output is C x H x W.
template <class T>
Var<T> spatial_attention(Graph<T>& g, const Var<T>& qkv)
{
    const int c3 = qkv->value.c;
    if (c3 % 3 != 0) throw ShapeError("spatial_attention: channels must be a multiple of 3");
    const int c = c3 / 3;
    const int n = qkv->value.plane();
    const T scale = T(1) / std::sqrt(static_cast<T>(c));
    const T* base = qkv->value.data.data();
    ConstMatMap<T> q(base, c, n), k(base + static_cast<std::size_t>(c) * n, c, n),
        v(base + 2 * static_cast<std::size_t>(c) * n, c, n);

    auto attn = std::make_shared<RowMat<T>>(n, n);
    attn->noalias() = (q.transpose() * k) * scale;
    for (int i = 0; i < n; ++i) {
        auto row = attn->row(i);
        const T m = row.maxCoeff();
        row = (row.array() - m).exp();
        row /= serial_sum(row);
    }
    Tensor<T> out(c, qkv->value.h, qkv->value.w);
    MatMap<T>(out.data.data(), c, n).noalias() = v * attn->transpose();

    Var<T> y = g.emit(std::move(out));
    if (g.recording()) {
        Node<T>* yn = y.get();
        Node<T>* xn = qkv.get();
        y->backward = [=]() {
            const T* b = xn->value.data.data();
            ConstMatMap<T> qm(b, c, n), km(b + static_cast<std::size_t>(c) * n, c, n),
                vm(b + 2 * static_cast<std::size_t>(c) * n, c, n);
            ConstMatMap<T> dout(yn->grad.data.data(), c, n);
            auto& dx = xn->grad_buffer();
            T* db = dx.data.data();
            MatMap<T> dq(db, c, n), dk(db + static_cast<std::size_t>(c) * n, c, n),
                dv(db + 2 * static_cast<std::size_t>(c) * n, c, n);
            const RowMat<T>& a = *attn;
            dv.noalias() += dout * a;
            RowMat<T> da = dout.transpose() * vm;
            RowMat<T> ds(n, n);
            for (int i = 0; i < n; ++i) {
                const T dot = serial_sum((da.row(i).array() * a.row(i).array()).matrix());
                ds.row(i) = a.row(i).array() * (da.row(i).array() - dot);
            }
            dq.noalias() += scale * (km * ds.transpose());
            dk.noalias() += scale * (qm * ds);
        };
    }
    return y;
}

/// Sinusoidal embedding [sin(t f_i), cos(t f_i)], f_i = 10000^(-i/(dim/2)).
template <class T>
Tensor<T> timestep_embedding(double t, int dim)
{
    Tensor<T> e = Tensor<T>::vector(dim);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        e[i] = static_cast<T>(std::sin(t * f));
        e[half + i] = static_cast<T>(std::cos(t * f));
    }
    return e;
}

} // namespace nightfuse::ops
