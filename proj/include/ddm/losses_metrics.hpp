#pragma once

// Training objectives (noise-prediction MSE, local NCC, field smoothness and
// their weighted composite) and evaluation metrics (PSNR, NMSE, Dice).

#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ddm/field_ops.hpp"
#include "ddm/grid.hpp"

namespace ddm {

inline constexpr double kNccStabilizer = 1e-5;
inline constexpr int kDefaultNccWindow = 9;

namespace detail {

// Sum over a (2r+1)^3 cube truncated at the grid boundary.
inline Tensor box_sum(const Tensor& in, int r) {
    const Shape3 s = in.shape();
    Tensor cur = in;
    Tensor next(s, 1, 0.0);
    const std::size_t stride[3] = {static_cast<std::size_t>(s.h) * s.w, static_cast<std::size_t>(s.w), 1};
    std::vector<double> prefix;
    for (int a = 0; a < 3; ++a) {
        const int n = s[a];
        prefix.assign(n + 1, 0.0);
        // iterate over every line along axis a
        const int o1 = a == 0 ? 1 : 0, o2 = a == 2 ? 1 : 2;
        for (int x = 0; x < s[o1]; ++x)
            for (int y = 0; y < s[o2]; ++y) {
                int idx[3] = {0, 0, 0};
                idx[o1] = x;
                idx[o2] = y;
                const std::size_t base = s.index(idx[0], idx[1], idx[2]);
                for (int m = 0; m < n; ++m) prefix[m + 1] = prefix[m] + cur[base + m * stride[a]];
                for (int m = 0; m < n; ++m) {
                    int lo = std::max(0, m - r), hi = std::min(n - 1, m + r);
                    next[base + m * stride[a]] = prefix[hi + 1] - prefix[lo];
                }
            }
        std::swap(cur, next);
    }
    return cur;
}

inline Tensor window_counts(const Shape3& s, int r) {
    Tensor t(s, 1, 0.0);
    auto cnt = [r](int m, int n) { return std::min(n - 1, m + r) - std::max(0, m - r) + 1; };
    for (int i = 0; i < s.d; ++i)
        for (int j = 0; j < s.h; ++j)
            for (int k = 0; k < s.w; ++k) t(i, j, k) = double(cnt(i, s.d)) * cnt(j, s.h) * cnt(k, s.w);
    return t;
}

inline void check_ncc_inputs(const Volume& a, const Volume& b, int window) {
    require_same_shape(a.shape(), b.shape(), "local_ncc");
    require(window >= 1 && window % 2 == 1, "local_ncc: window must be a positive odd integer");
    const Shape3 s = a.shape();
    require(window <= s.d && window <= s.h && window <= s.w,
            "local_ncc: window " + std::to_string(window) + " exceeds volume extent " + s.str());
}

}  // namespace detail

struct NccResult {
    double value = 0.0;
    Volume d_a;
    Volume d_b;
};

/// Windowed squared correlation cross^2 / (var_a var_b + delta), averaged
/// over voxels. Windows are truncated at the boundary (only in-grid voxels
/// enter the statistics). With grad = true the input gradients are filled.
inline NccResult local_ncc_eval(const Volume& a, const Volume& b, int window, bool grad) {
    detail::check_ncc_inputs(a, b, window);
    const Shape3 s = a.shape();
    const int r = window / 2;
    const std::size_t N = s.voxels();
    Tensor a2(s, 1), b2(s, 1), ab(s, 1);
    for (std::size_t p = 0; p < N; ++p) {
        a2[p] = a[p] * a[p];
        b2[p] = b[p] * b[p];
        ab[p] = a[p] * b[p];
    }
    const Tensor sa = detail::box_sum(a.data, r), sb = detail::box_sum(b.data, r);
    const Tensor saa = detail::box_sum(a2, r), sbb = detail::box_sum(b2, r), sab = detail::box_sum(ab, r);
    const Tensor cnt = detail::window_counts(s, r);

    NccResult res;
    Tensor A, Ba, Bb, Ama, Amb, Bma, Bmb;
    if (grad) {
        A = Ba = Bb = Ama = Amb = Bma = Bmb = Tensor(s, 1, 0.0);
    }
    double total = 0.0;
    for (std::size_t p = 0; p < N; ++p) {
        const double n = cnt[p];
        const double cross = sab[p] - sa[p] * sb[p] / n;
        const double va = saa[p] - sa[p] * sa[p] / n;
        const double vb = sbb[p] - sb[p] * sb[p] / n;
        const double den = va * vb + kNccStabilizer;
        total += cross * cross / den;
        if (grad) {
            A[p] = 2.0 * cross / den;
            Ba[p] = -cross * cross * vb / (den * den);
            Bb[p] = -cross * cross * va / (den * den);
            Ama[p] = A[p] * sa[p] / n;
            Amb[p] = A[p] * sb[p] / n;
            Bma[p] = Ba[p] * sa[p] / n;
            Bmb[p] = Bb[p] * sb[p] / n;
        }
    }
    res.value = total / static_cast<double>(N);
    if (grad) {
        const Tensor bA = detail::box_sum(A, r), bBa = detail::box_sum(Ba, r), bBb = detail::box_sum(Bb, r);
        const Tensor bAma = detail::box_sum(Ama, r), bAmb = detail::box_sum(Amb, r);
        const Tensor bBma = detail::box_sum(Bma, r), bBmb = detail::box_sum(Bmb, r);
        res.d_a = Volume(s, 0.0, a.spacing);
        res.d_b = Volume(s, 0.0, b.spacing);
        const double invN = 1.0 / static_cast<double>(N);
        for (std::size_t p = 0; p < N; ++p) {
            res.d_a[p] = invN * (b[p] * bA[p] - bAmb[p] + 2.0 * a[p] * bBa[p] - 2.0 * bBma[p]);
            res.d_b[p] = invN * (a[p] * bA[p] - bAma[p] + 2.0 * b[p] * bBb[p] - 2.0 * bBmb[p]);
        }
    }
    return res;
}

inline double local_ncc(const Volume& a, const Volume& b, int window = kDefaultNccWindow) {
    return local_ncc_eval(a, b, window, false).value;
}

/// Mean over voxels of the squared forward differences summed over all nine
/// component/axis pairs.
inline double smoothness_penalty(const DisplacementField& field) {
    const FieldGradient g = spatial_gradient(field);
    double s = 0.0;
    for (const auto& row : g.diff)
        for (const Tensor& t : row)
            for (double v : t.values()) s += v * v;
    return s / static_cast<double>(field.shape().voxels());
}

inline DisplacementField smoothness_penalty_grad(const DisplacementField& field) {
    const Shape3 s = field.shape();
    const std::size_t stride[3] = {static_cast<std::size_t>(s.h) * s.w, static_cast<std::size_t>(s.w), 1};
    const double scale = 2.0 / static_cast<double>(s.voxels());
    DisplacementField g(s);
    for (int c = 0; c < 3; ++c) {
        const double* u = field.component(c);
        double* du = g.component(c);
        for (int a = 0; a < 3; ++a)
            for (int i = 0; i < s.d; ++i)
                for (int j = 0; j < s.h; ++j)
                    for (int k = 0; k < s.w; ++k) {
                        const int idx[3] = {i, j, k};
                        if (idx[a] == s[a] - 1) continue;
                        const std::size_t p = s.index(i, j, k);
                        const double d = scale * (u[p + stride[a]] - u[p]);
                        du[p + stride[a]] += d;
                        du[p] -= d;
                    }
    }
    return g;
}

/// Mean squared error between the predicted code and the injected noise.
inline double diffusion_loss(const LatentCode& code, const Volume& noise) {
    require_same_shape(code.shape(), noise.shape(), "diffusion_loss");
    double s = 0.0;
    for (std::size_t p = 0; p < code.size(); ++p) {
        const double d = code[p] - noise[p];
        s += d * d;
    }
    return s / static_cast<double>(code.size());
}

struct LossWeights {
    double lambda = 20.0;
    double lambda_r = 1.0;
    int ncc_window = kDefaultNccWindow;
};

struct LossBreakdown {
    double diffuse = 0.0;
    double deform_similarity = 0.0;  // -NCC(warped, target)
    double deform_smooth = 0.0;
    double total = 0.0;
};

/// diffuse + lambda * (-NCC(warped, target) + lambda_r * smooth(field)).
inline LossBreakdown total_loss(const LatentCode& code, const Volume& noise, const Volume& warped,
                                const Volume& target, const DisplacementField& field, const LossWeights& w) {
    LossBreakdown b;
    b.diffuse = diffusion_loss(code, noise);
    b.deform_similarity = -local_ncc(warped, target, w.ncc_window);
    b.deform_smooth = smoothness_penalty(field);
    b.total = b.diffuse + w.lambda * (b.deform_similarity + w.lambda_r * b.deform_smooth);
    return b;
}

/// Gradients of the composite loss with respect to its differentiable inputs.
struct LossGradients {
    LossBreakdown loss;
    Volume d_code;
    Volume d_warped;
    DisplacementField d_field;
};

inline LossGradients total_loss_grad(const LatentCode* code, const Volume* noise, const Volume& warped,
                                     const Volume& target, const DisplacementField& field, const LossWeights& w) {
    LossGradients g;
    if (code) {
        g.loss.diffuse = diffusion_loss(*code, *noise);
        g.d_code = Volume(code->shape());
        const double scale = 2.0 / static_cast<double>(code->size());
        for (std::size_t p = 0; p < code->size(); ++p) g.d_code[p] = scale * ((*code)[p] - (*noise)[p]);
    }
    const NccResult ncc = local_ncc_eval(warped, target, w.ncc_window, true);
    g.loss.deform_similarity = -ncc.value;
    g.loss.deform_smooth = smoothness_penalty(field);
    g.loss.total = g.loss.diffuse + w.lambda * (g.loss.deform_similarity + w.lambda_r * g.loss.deform_smooth);

    g.d_warped = ncc.d_a;
    for (double& v : g.d_warped.data.values()) v *= -w.lambda;
    g.d_field = smoothness_penalty_grad(field);
    for (double& v : g.d_field.data.values()) v *= w.lambda * w.lambda_r;
    return g;
}

inline constexpr double kPsnrPeak = 2.0;
inline constexpr double kPsnrCap = 99.0;

/// 10 log10(peak^2 / MSE) with peak 2 (intensities in [-1, 1]); returns the
/// cap when the volumes are numerically identical.
inline double psnr(const Volume& a, const Volume& b, double cap = kPsnrCap) {
    require_same_shape(a.shape(), b.shape(), "psnr");
    double mse = 0.0;
    for (std::size_t p = 0; p < a.size(); ++p) mse += (a[p] - b[p]) * (a[p] - b[p]);
    mse /= static_cast<double>(a.size());
    if (mse < 1e-12) return cap;
    return std::min(cap, 10.0 * std::log10(kPsnrPeak * kPsnrPeak / mse));
}

/// sum (a - ref)^2 / sum ref^2. Not symmetric.
inline double nmse(const Volume& a, const Volume& ref) {
    require_same_shape(a.shape(), ref.shape(), "nmse");
    double num = 0.0, den = 0.0;
    for (std::size_t p = 0; p < a.size(); ++p) {
        num += (a[p] - ref[p]) * (a[p] - ref[p]);
        den += ref[p] * ref[p];
    }
    require(den > 0.0, "nmse: reference volume has zero energy");
    return num / den;
}

struct DiceResult {
    std::map<int, double> per_label;
    double mean = 0.0;
};

/// Per-label Dice 2|P∩T| / (|P| + |T|); a label absent from both maps scores 1.
inline DiceResult dice(const SegmentationMap& pred, const SegmentationMap& truth, const std::set<int>& labels) {
    require_same_shape(pred.shape(), truth.shape(), "dice");
    require(!labels.empty(), "dice: label set is empty");
    std::map<int, std::size_t> inter, np, nt;
    const std::size_t N = pred.shape().voxels();
    for (std::size_t p = 0; p < N; ++p) {
        const int lp = pred.data[p], lt = truth.data[p];
        if (labels.count(lp)) ++np[lp];
        if (labels.count(lt)) ++nt[lt];
        if (lp == lt && labels.count(lp)) ++inter[lp];
    }
    DiceResult r;
    double sum = 0.0;
    for (int l : labels) {
        const std::size_t den = np[l] + nt[l];
        const double d = den == 0 ? 1.0 : 2.0 * static_cast<double>(inter[l]) / static_cast<double>(den);
        r.per_label[l] = d;
        sum += d;
    }
    r.mean = sum / static_cast<double>(labels.size());
    return r;
}

/// Non-background labels present in a map.
inline std::set<int> foreground_labels(const SegmentationMap& m) {
    std::set<int> out;
    for (auto v : m.data.values())
        if (v != 0) out.insert(v);
    return out;
}

}  // namespace ddm
