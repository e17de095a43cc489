#pragma once

// Minimal 3D convolutional building blocks with explicit backward passes.
// Every layer keeps its parameters and accumulated gradients; forward passes
// are const and touch no shared state.

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "ddm/grid.hpp"

namespace ddm::nn {

struct Param {
    std::string name;
    std::vector<double> value;
    std::vector<double> grad;

    Param() = default;
    Param(std::string n, std::size_t count) : name(std::move(n)), value(count, 0.0), grad(count, 0.0) {}
    std::size_t size() const { return value.size(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

using Rng = std::mt19937_64;

inline void init_uniform(Param& p, double bound, Rng& rng) {
    std::uniform_real_distribution<double> ud(-bound, bound);
    for (double& v : p.value) v = ud(rng);
}

inline void init_normal(Param& p, double stddev, Rng& rng) {
    std::normal_distribution<double> nd(0.0, stddev);
    for (double& v : p.value) v = nd(rng);
}

using Stride3 = std::array<int, 3>;

/// 3x3x3 convolution, zero padding 1, per-axis stride 1 or 2.
/// Output extent along an axis is ceil(n / stride).
class Conv3d {
public:
    Conv3d() = default;
    Conv3d(std::string name, int in_ch, int out_ch, Stride3 stride = {1, 1, 1})
        : in_(in_ch), out_(out_ch), stride_(stride), weight_(name + ".weight", std::size_t(out_ch) * in_ch * 27),
          bias_(name + ".bias", out_ch) {
        require(in_ch > 0 && out_ch > 0, "Conv3d: channel counts must be positive");
    }

    /// Uniform(+-1/sqrt(fan_in)) for weights and bias.
    void init_default(Rng& rng) {
        const double bound = 1.0 / std::sqrt(27.0 * in_);
        init_uniform(weight_, bound, rng);
        init_uniform(bias_, bound, rng);
    }

    int in_channels() const { return in_; }
    int out_channels() const { return out_; }
    const Stride3& stride() const { return stride_; }
    Param& weight() { return weight_; }
    Param& bias() { return bias_; }

    Shape3 output_shape(const Shape3& in) const {
        return {(in.d + stride_[0] - 1) / stride_[0], (in.h + stride_[1] - 1) / stride_[1],
                (in.w + stride_[2] - 1) / stride_[2]};
    }

    Tensor forward(const Tensor& x) const {
        require(x.channels() == in_, "Conv3d " + weight_.name + ": expected " + std::to_string(in_) +
                                         " input channels, got " + std::to_string(x.channels()));
        if (unit_stride()) return forward_dense(x);
        const Shape3 is = x.shape(), os = output_shape(is);
        Tensor y(os, out_, 0.0);
        for (int oc = 0; oc < out_; ++oc) {
            double* yo = y.channel(oc);
            std::fill(yo, yo + os.voxels(), bias_.value[oc]);
            for (int ic = 0; ic < in_; ++ic)
                visit(is, os, [&](std::size_t woff, std::size_t yo_idx, std::size_t xi_idx, int n, int xs) {
                    const double wv = weight_.value[(std::size_t(oc) * in_ + ic) * 27 + woff];
                    const double* xp = x.channel(ic) + xi_idx;
                    double* yp = yo + yo_idx;
                    for (int m = 0; m < n; ++m) yp[m] += wv * xp[m * xs];
                });
        }
        return y;
    }

    /// Accumulates parameter gradients; returns dL/dx when want_dx is set.
    Tensor backward(const Tensor& x, const Tensor& dy, bool want_dx = true) {
        const Shape3 is = x.shape(), os = output_shape(is);
        require(dy.shape() == os && dy.channels() == out_, "Conv3d::backward: gradient shape mismatch");
        for (int oc = 0; oc < out_; ++oc) {
            const double* go = dy.channel(oc);
            double bsum = 0.0;
            for (std::size_t p = 0; p < os.voxels(); ++p) bsum += go[p];
            bias_.grad[oc] += bsum;
        }
        if (unit_stride()) return backward_dense(x, dy, want_dx);
        Tensor dx;
        if (want_dx) dx = Tensor(is, in_, 0.0);
        for (int oc = 0; oc < out_; ++oc) {
            const double* go = dy.channel(oc);
            for (int ic = 0; ic < in_; ++ic) {
                const std::size_t wbase = (std::size_t(oc) * in_ + ic) * 27;
                visit(is, os, [&](std::size_t woff, std::size_t yo_idx, std::size_t xi_idx, int n, int xs) {
                    const double* xp = x.channel(ic) + xi_idx;
                    const double* gp = go + yo_idx;
                    double acc = 0.0;
                    for (int m = 0; m < n; ++m) acc += gp[m] * xp[m * xs];
                    weight_.grad[wbase + woff] += acc;
                    if (want_dx) {
                        const double wv = weight_.value[wbase + woff];
                        double* dxp = dx.channel(ic) + xi_idx;
                        for (int m = 0; m < n; ++m) dxp[m * xs] += wv * gp[m];
                    }
                });
            }
        }
        return dx;
    }

    std::vector<Param*> params() { return {&weight_, &bias_}; }
    std::vector<const Param*> params() const { return {&weight_, &bias_}; }

private:
    bool unit_stride() const { return stride_[0] == 1 && stride_[1] == 1 && stride_[2] == 1; }

    // Stride-1 path on a zero-padded copy: for each kernel tap the whole
    // volume is one contiguous run shifted by a constant flat offset. Values
    // computed at padding positions are discarded.
    struct Padded {
        Shape3 shape;
        std::size_t first, count;  // flat range covering every interior voxel
        std::array<std::ptrdiff_t, 27> offsets;
    };

    static Padded padded_layout(const Shape3& s) {
        Padded p;
        p.shape = {s.d + 2, s.h + 2, s.w + 2};
        p.first = p.shape.index(1, 1, 1);
        p.count = p.shape.index(s.d, s.h, s.w) - p.first + 1;
        const std::ptrdiff_t sa = std::ptrdiff_t(p.shape.h) * p.shape.w, sb = p.shape.w;
        for (int kd = 0; kd < 3; ++kd)
            for (int kh = 0; kh < 3; ++kh)
                for (int kw = 0; kw < 3; ++kw) p.offsets[(kd * 3 + kh) * 3 + kw] = (kd - 1) * sa + (kh - 1) * sb + (kw - 1);
        return p;
    }

    static std::vector<double> pad(const Tensor& x, const Padded& p) {
        const Shape3 s = x.shape();
        std::vector<double> out(p.shape.voxels() * x.channels(), 0.0);
        for (int c = 0; c < x.channels(); ++c) {
            double* dst = out.data() + c * p.shape.voxels();
            const double* src = x.channel(c);
            for (int i = 0; i < s.d; ++i)
                for (int j = 0; j < s.h; ++j)
                    std::copy(src + s.index(i, j, 0), src + s.index(i, j, 0) + s.w, dst + p.shape.index(i + 1, j + 1, 1));
        }
        return out;
    }

    static void unpad_add(const double* src, const Padded& p, const Shape3& s, double* dst) {
        for (int i = 0; i < s.d; ++i)
            for (int j = 0; j < s.h; ++j) {
                const double* a = src + p.shape.index(i + 1, j + 1, 1);
                double* b = dst + s.index(i, j, 0);
                for (int k = 0; k < s.w; ++k) b[k] += a[k];
            }
    }

    // out[m] += sum_tap w[tap] * in[m + sign * offsets[tap]]
    static void correlate(const double* in, const std::array<std::ptrdiff_t, 27>& offsets, const double* w,
                          double* out, std::size_t n, int sign) {
        const double* src[27];
        for (int tap = 0; tap < 27; ++tap) src[tap] = in + sign * offsets[tap];
        for (int tap = 0; tap < 27; tap += 9) {
            const double *s0 = src[tap], *s1 = src[tap + 1], *s2 = src[tap + 2], *s3 = src[tap + 3],
                         *s4 = src[tap + 4], *s5 = src[tap + 5], *s6 = src[tap + 6], *s7 = src[tap + 7],
                         *s8 = src[tap + 8];
            const double w0 = w[tap], w1 = w[tap + 1], w2 = w[tap + 2], w3 = w[tap + 3], w4 = w[tap + 4],
                         w5 = w[tap + 5], w6 = w[tap + 6], w7 = w[tap + 7], w8 = w[tap + 8];
            for (std::size_t m = 0; m < n; ++m)
                out[m] += w0 * s0[m] + w1 * s1[m] + w2 * s2[m] + w3 * s3[m] + w4 * s4[m] + w5 * s5[m] +
                          w6 * s6[m] + w7 * s7[m] + w8 * s8[m];
        }
    }

    // grad[tap] += sum_m g[m] * x[m + offsets[tap]]
    static void tap_dots(const double* g, const double* x, const std::array<std::ptrdiff_t, 27>& offsets,
                         double* grad, std::size_t n) {
        constexpr int L = 4;
        double acc[27][L] = {};
        std::size_t m = 0;
        for (; m + L <= n; m += L)
            for (int tap = 0; tap < 27; ++tap) {
                const double* xs = x + offsets[tap] + m;
                for (int l = 0; l < L; ++l) acc[tap][l] += g[m + l] * xs[l];
            }
        for (int tap = 0; tap < 27; ++tap) {
            double s = (acc[tap][0] + acc[tap][1]) + (acc[tap][2] + acc[tap][3]);
            for (std::size_t r = m; r < n; ++r) s += g[r] * x[offsets[tap] + r];
            grad[tap] += s;
        }
    }

    Tensor forward_dense(const Tensor& x) const {
        const Shape3 s = x.shape();
        const Padded p = padded_layout(s);
        const std::vector<double> xp = pad(x, p);
        const std::size_t pv = p.shape.voxels();
        std::vector<double> acc(pv);
        Tensor y(s, out_, 0.0);
        for (int oc = 0; oc < out_; ++oc) {
            std::fill(acc.begin(), acc.end(), 0.0);
            double* ya = acc.data() + p.first;
            for (int ic = 0; ic < in_; ++ic) {
                const double* w = weight_.value.data() + (std::size_t(oc) * in_ + ic) * 27;
                correlate(xp.data() + ic * pv + p.first, p.offsets, w, ya, p.count, 1);
            }
            double* yo = y.channel(oc);
            std::fill(yo, yo + s.voxels(), bias_.value[oc]);
            unpad_add(acc.data(), p, s, yo);
        }
        return y;
    }

    Tensor backward_dense(const Tensor& x, const Tensor& dy, bool want_dx) {
        const Shape3 s = x.shape();
        const Padded p = padded_layout(s);
        const std::vector<double> xp = pad(x, p);
        const std::vector<double> gp = pad(dy, p);
        const std::size_t pv = p.shape.voxels();
        std::vector<double> dxp;
        if (want_dx) dxp.assign(pv * in_, 0.0);
        for (int oc = 0; oc < out_; ++oc) {
            const double* g = gp.data() + oc * pv + p.first;
            for (int ic = 0; ic < in_; ++ic) {
                const std::size_t wbase = (std::size_t(oc) * in_ + ic) * 27;
                const double* xc = xp.data() + ic * pv + p.first;
                double* dxc = want_dx ? dxp.data() + ic * pv + p.first : nullptr;
                tap_dots(g, xc, p.offsets, weight_.grad.data() + wbase, p.count);
                if (want_dx) correlate(g, p.offsets, weight_.value.data() + wbase, dxc, p.count, -1);
            }
        }
        Tensor dx;
        if (want_dx) {
            dx = Tensor(s, in_, 0.0);
            for (int ic = 0; ic < in_; ++ic) unpad_add(dxp.data() + ic * pv, p, s, dx.channel(ic));
        }
        return dx;
    }

    // Calls f(kernel offset, first output index, first input index, run length,
    // input step) for every contiguous run of output voxels along axis 2.
    template <class F>
    void visit(const Shape3& is, const Shape3& os, F&& f) const {
        const int s0 = stride_[0], s1 = stride_[1], s2 = stride_[2];
        for (int kd = 0; kd < 3; ++kd)
            for (int kh = 0; kh < 3; ++kh)
                for (int kw = 0; kw < 3; ++kw) {
                    const std::size_t woff = (kd * 3 + kh) * 3 + kw;
                    // output k range with 0 <= k*s2 + kw - 1 < is.w
                    int k_lo = 0;
                    while (k_lo < os.w && k_lo * s2 + kw - 1 < 0) ++k_lo;
                    int k_hi = os.w;
                    while (k_hi > k_lo && (k_hi - 1) * s2 + kw - 1 >= is.w) --k_hi;
                    const int n = k_hi - k_lo;
                    if (n <= 0) continue;
                    for (int i = 0; i < os.d; ++i) {
                        const int ii = i * s0 + kd - 1;
                        if (ii < 0 || ii >= is.d) continue;
                        for (int j = 0; j < os.h; ++j) {
                            const int jj = j * s1 + kh - 1;
                            if (jj < 0 || jj >= is.h) continue;
                            f(woff, os.index(i, j, k_lo), is.index(ii, jj, k_lo * s2 + kw - 1), n, s2);
                        }
                    }
                }
    }

    int in_ = 0;
    int out_ = 0;
    Stride3 stride_{1, 1, 1};
    Param weight_;
    Param bias_;
};

/// Fully connected layer on a plain vector.
class Linear {
public:
    Linear() = default;
    Linear(std::string name, int in, int out)
        : in_(in), out_(out), weight_(name + ".weight", std::size_t(in) * out), bias_(name + ".bias", out) {}

    void init_default(Rng& rng) {
        const double bound = 1.0 / std::sqrt(double(in_));
        init_uniform(weight_, bound, rng);
        init_uniform(bias_, bound, rng);
    }

    std::vector<double> forward(const std::vector<double>& x) const {
        std::vector<double> y(bias_.value);
        for (int o = 0; o < out_; ++o)
            for (int i = 0; i < in_; ++i) y[o] += weight_.value[std::size_t(o) * in_ + i] * x[i];
        return y;
    }

    std::vector<double> backward(const std::vector<double>& x, const std::vector<double>& dy) {
        std::vector<double> dx(in_, 0.0);
        for (int o = 0; o < out_; ++o) {
            bias_.grad[o] += dy[o];
            for (int i = 0; i < in_; ++i) {
                weight_.grad[std::size_t(o) * in_ + i] += dy[o] * x[i];
                dx[i] += weight_.value[std::size_t(o) * in_ + i] * dy[o];
            }
        }
        return dx;
    }

    int in_features() const { return in_; }
    int out_features() const { return out_; }
    std::vector<Param*> params() { return {&weight_, &bias_}; }
    std::vector<const Param*> params() const { return {&weight_, &bias_}; }

private:
    int in_ = 0;
    int out_ = 0;
    Param weight_;
    Param bias_;
};

// Activations operate elementwise; backward takes the pre-activation input.

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double silu_grad(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

inline constexpr double kLeakySlope = 0.2;

enum class Activation { SiLU, LeakyReLU };

inline double activate(Activation a, double x) {
    return a == Activation::SiLU ? silu(x) : (x > 0.0 ? x : kLeakySlope * x);
}
inline double activate_grad(Activation a, double x) {
    return a == Activation::SiLU ? silu_grad(x) : (x > 0.0 ? 1.0 : kLeakySlope);
}

template <class V>
V apply(Activation a, const V& pre) {
    V out = pre;
    for (auto& v : out.values()) v = activate(a, v);
    return out;
}

inline std::vector<double> apply(Activation a, const std::vector<double>& pre) {
    std::vector<double> out(pre);
    for (auto& v : out) v = activate(a, v);
    return out;
}

inline Tensor apply_backward(Activation a, const Tensor& pre, const Tensor& dy) {
    Tensor dx = dy;
    for (std::size_t n = 0; n < dx.size(); ++n) dx[n] *= activate_grad(a, pre[n]);
    return dx;
}

inline std::vector<double> apply_backward(Activation a, const std::vector<double>& pre, const std::vector<double>& dy) {
    std::vector<double> dx(dy);
    for (std::size_t n = 0; n < dx.size(); ++n) dx[n] *= activate_grad(a, pre[n]);
    return dx;
}

/// Nearest-neighbour upsampling by an integer factor per axis.
inline Tensor upsample(const Tensor& x, const Stride3& f) {
    const Shape3 is = x.shape();
    const Shape3 os{is.d * f[0], is.h * f[1], is.w * f[2]};
    Tensor y(os, x.channels(), 0.0);
    for (int c = 0; c < x.channels(); ++c)
        for (int i = 0; i < os.d; ++i)
            for (int j = 0; j < os.h; ++j)
                for (int k = 0; k < os.w; ++k) y(c, i, j, k) = x(c, i / f[0], j / f[1], k / f[2]);
    return y;
}

inline Tensor upsample_backward(const Tensor& dy, const Stride3& f) {
    const Shape3 os = dy.shape();
    const Shape3 is{os.d / f[0], os.h / f[1], os.w / f[2]};
    Tensor dx(is, dy.channels(), 0.0);
    for (int c = 0; c < dy.channels(); ++c)
        for (int i = 0; i < os.d; ++i)
            for (int j = 0; j < os.h; ++j)
                for (int k = 0; k < os.w; ++k) dx(c, i / f[0], j / f[1], k / f[2]) += dy(c, i, j, k);
    return dx;
}

inline Tensor concat(const Tensor& a, const Tensor& b) {
    require_same_shape(a.shape(), b.shape(), "concat");
    std::vector<double> v;
    v.reserve(a.size() + b.size());
    v.insert(v.end(), a.values().begin(), a.values().end());
    v.insert(v.end(), b.values().begin(), b.values().end());
    return Tensor(a.shape(), a.channels() + b.channels(), std::move(v));
}

/// Splits a channel-concatenated gradient back into (first, second).
inline std::pair<Tensor, Tensor> split_channels(const Tensor& t, int first) {
    const std::size_t cut = std::size_t(first) * t.voxels();
    std::vector<double> a(t.values().begin(), t.values().begin() + cut);
    std::vector<double> b(t.values().begin() + cut, t.values().end());
    return {Tensor(t.shape(), first, std::move(a)), Tensor(t.shape(), t.channels() - first, std::move(b))};
}

inline void add_channel_bias(Tensor& x, const std::vector<double>& bias) {
    for (int c = 0; c < x.channels(); ++c) {
        double* p = x.channel(c);
        for (std::size_t n = 0; n < x.voxels(); ++n) p[n] += bias[c];
    }
}

inline std::vector<double> channel_sums(const Tensor& x) {
    std::vector<double> s(x.channels(), 0.0);
    for (int c = 0; c < x.channels(); ++c) {
        const double* p = x.channel(c);
        for (std::size_t n = 0; n < x.voxels(); ++n) s[c] += p[n];
    }
    return s;
}

/// Transformer-style sinusoidal embedding of a (possibly zero) timestep.
inline std::vector<double> timestep_embedding(int t, int dim) {
    std::vector<double> e(dim, 0.0);
    const int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * k / std::max(1, half - 1));
        e[k] = std::sin(t * freq);
        e[k + half] = std::cos(t * freq);
    }
    return e;
}

}  // namespace ddm::nn
