#pragma once

// Geometric kernel: trilinear / nearest warping under pull-convention
// displacement fields, forward-difference field gradients, field scaling.

#include <array>
#include <cmath>

#include "ddm/grid.hpp"

namespace ddm {

namespace detail {

// Border-clamped linear sampling position along one axis.
struct AxisSample {
    int i0;
    double frac;
    double dpos;  // d(position)/d(displacement): 0 when clamped
};

inline AxisSample axis_sample(double x, int n) {
    double dpos = 1.0;
    if (x <= 0.0) {
        x = 0.0;
        dpos = 0.0;
    } else if (x >= n - 1) {
        x = n - 1;
        dpos = 0.0;
    }
    int i0 = static_cast<int>(std::floor(x));
    if (i0 > n - 2) i0 = n - 2;
    return {i0, x - i0, dpos};
}

inline void check_warp_inputs(const Shape3& vol, const DisplacementField& f, const char* op) {
    require_same_shape(vol, f.shape(), op);
    require(vol.d >= 2 && vol.h >= 2 && vol.w >= 2, std::string(op) + ": every axis needs at least 2 voxels");
    require(all_finite(f.data), std::string(op) + ": displacement field has non-finite components");
}

}  // namespace detail

/// out(p) = vol sampled trilinearly at p + field(p), coordinates clamped to
/// the grid (border replication).
inline Volume warp_trilinear(const Volume& vol, const DisplacementField& field) {
    detail::check_warp_inputs(vol.shape(), field, "warp_trilinear");
    const Shape3 s = vol.shape();
    Volume out(s, 0.0, vol.spacing);
    const double* u0 = field.component(0);
    const double* u1 = field.component(1);
    const double* u2 = field.component(2);
    const double* src = vol.data.data();
    for (int i = 0; i < s.d; ++i)
        for (int j = 0; j < s.h; ++j)
            for (int k = 0; k < s.w; ++k) {
                const std::size_t p = s.index(i, j, k);
                auto a = detail::axis_sample(i + u0[p], s.d);
                auto b = detail::axis_sample(j + u1[p], s.h);
                auto c = detail::axis_sample(k + u2[p], s.w);
                const double* base = src + s.index(a.i0, b.i0, c.i0);
                const std::size_t sa = static_cast<std::size_t>(s.h) * s.w, sb = s.w;
                double c00 = base[0] * (1 - c.frac) + base[1] * c.frac;
                double c01 = base[sb] * (1 - c.frac) + base[sb + 1] * c.frac;
                double c10 = base[sa] * (1 - c.frac) + base[sa + 1] * c.frac;
                double c11 = base[sa + sb] * (1 - c.frac) + base[sa + sb + 1] * c.frac;
                double c0 = c00 * (1 - b.frac) + c01 * b.frac;
                double c1 = c10 * (1 - b.frac) + c11 * b.frac;
                out[p] = c0 * (1 - a.frac) + c1 * a.frac;
            }
    return out;
}

struct WarpGradients {
    Volume d_vol;
    DisplacementField d_field;
};

/// Vector-Jacobian product of warp_trilinear: given dL/d(out), returns dL/d(vol)
/// and dL/d(field). Clamped coordinates carry zero field gradient.
inline WarpGradients warp_trilinear_vjp(const Volume& vol, const DisplacementField& field, const Tensor& d_out) {
    detail::check_warp_inputs(vol.shape(), field, "warp_trilinear_vjp");
    const Shape3 s = vol.shape();
    require_same_shape(s, d_out.shape(), "warp_trilinear_vjp");
    WarpGradients g{Volume(s, 0.0, vol.spacing), DisplacementField(s)};
    const double* src = vol.data.data();
    double* dv = g.d_vol.data.data();
    const std::size_t sa = static_cast<std::size_t>(s.h) * s.w, sb = s.w;
    for (int i = 0; i < s.d; ++i)
        for (int j = 0; j < s.h; ++j)
            for (int k = 0; k < s.w; ++k) {
                const std::size_t p = s.index(i, j, k);
                const double go = d_out[p];
                if (go == 0.0) continue;
                auto a = detail::axis_sample(i + field.component(0)[p], s.d);
                auto b = detail::axis_sample(j + field.component(1)[p], s.h);
                auto c = detail::axis_sample(k + field.component(2)[p], s.w);
                const std::size_t o = s.index(a.i0, b.i0, c.i0);
                const double v000 = src[o], v001 = src[o + 1], v010 = src[o + sb], v011 = src[o + sb + 1];
                const double v100 = src[o + sa], v101 = src[o + sa + 1], v110 = src[o + sa + sb],
                             v111 = src[o + sa + sb + 1];
                const double wa[2] = {1 - a.frac, a.frac}, wb[2] = {1 - b.frac, b.frac}, wc[2] = {1 - c.frac, c.frac};

                dv[o] += go * wa[0] * wb[0] * wc[0];
                dv[o + 1] += go * wa[0] * wb[0] * wc[1];
                dv[o + sb] += go * wa[0] * wb[1] * wc[0];
                dv[o + sb + 1] += go * wa[0] * wb[1] * wc[1];
                dv[o + sa] += go * wa[1] * wb[0] * wc[0];
                dv[o + sa + 1] += go * wa[1] * wb[0] * wc[1];
                dv[o + sa + sb] += go * wa[1] * wb[1] * wc[0];
                dv[o + sa + sb + 1] += go * wa[1] * wb[1] * wc[1];

                if (a.dpos != 0.0) {
                    double plane0 = (v000 * wc[0] + v001 * wc[1]) * wb[0] + (v010 * wc[0] + v011 * wc[1]) * wb[1];
                    double plane1 = (v100 * wc[0] + v101 * wc[1]) * wb[0] + (v110 * wc[0] + v111 * wc[1]) * wb[1];
                    g.d_field.component(0)[p] = go * (plane1 - plane0);
                }
                if (b.dpos != 0.0) {
                    double row0 = (v000 * wc[0] + v001 * wc[1]) * wa[0] + (v100 * wc[0] + v101 * wc[1]) * wa[1];
                    double row1 = (v010 * wc[0] + v011 * wc[1]) * wa[0] + (v110 * wc[0] + v111 * wc[1]) * wa[1];
                    g.d_field.component(1)[p] = go * (row1 - row0);
                }
                if (c.dpos != 0.0) {
                    double col0 = (v000 * wb[0] + v010 * wb[1]) * wa[0] + (v100 * wb[0] + v110 * wb[1]) * wa[1];
                    double col1 = (v001 * wb[0] + v011 * wb[1]) * wa[0] + (v101 * wb[0] + v111 * wb[1]) * wa[1];
                    g.d_field.component(2)[p] = go * (col1 - col0);
                }
            }
    return g;
}

/// Label transport: nearest-integer rounding of p + field(p), border-clamped.
/// Never produces a label absent from the input.
inline SegmentationMap warp_nearest(const SegmentationMap& seg, const DisplacementField& field) {
    detail::check_warp_inputs(seg.shape(), field, "warp_nearest");
    const Shape3 s = seg.shape();
    SegmentationMap out(s);
    auto nearest = [](double x, int n) {
        int r = static_cast<int>(std::floor(x + 0.5));
        return std::clamp(r, 0, n - 1);
    };
    for (int i = 0; i < s.d; ++i)
        for (int j = 0; j < s.h; ++j)
            for (int k = 0; k < s.w; ++k) {
                const std::size_t p = s.index(i, j, k);
                out.data[p] = seg(nearest(i + field.component(0)[p], s.d), nearest(j + field.component(1)[p], s.h),
                                  nearest(k + field.component(2)[p], s.w));
            }
    return out;
}

/// Forward differences of every field component along every axis.
/// diff[c][a] is d(component c)/d(axis a); the last index along an axis is 0.
struct FieldGradient {
    std::array<std::array<Tensor, 3>, 3> diff;
};

inline FieldGradient spatial_gradient(const DisplacementField& field) {
    require(all_finite(field.data), "spatial_gradient: displacement field has non-finite components");
    const Shape3 s = field.shape();
    const std::size_t stride[3] = {static_cast<std::size_t>(s.h) * s.w, static_cast<std::size_t>(s.w), 1};
    FieldGradient g;
    for (int c = 0; c < 3; ++c) {
        const double* u = field.component(c);
        for (int a = 0; a < 3; ++a) {
            Tensor t(s, 1, 0.0);
            for (int i = 0; i < s.d; ++i)
                for (int j = 0; j < s.h; ++j)
                    for (int k = 0; k < s.w; ++k) {
                        const int idx[3] = {i, j, k};
                        if (idx[a] == s[a] - 1) continue;
                        const std::size_t p = s.index(i, j, k);
                        t[p] = u[p + stride[a]] - u[p];
                    }
            g.diff[c][a] = std::move(t);
        }
    }
    return g;
}

/// Multiplies every component by gamma in [0, 1].
inline DisplacementField scale_field(const DisplacementField& field, double gamma) {
    require(gamma >= 0.0 && gamma <= 1.0, "scale_field: gamma must lie in [0, 1], got " + std::to_string(gamma));
    DisplacementField out = field;
    for (double& v : out.data.values()) v *= gamma;
    return out;
}

}  // namespace ddm
