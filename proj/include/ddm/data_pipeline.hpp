#pragma once

// Volume ingestion and preprocessing (resample -> crop/pad -> intensity map
// to [-1, 1]), synthetic phantom pairs with known deformations, subject
// splits, and on-disk dataset layouts (ACDC and synthetic).

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddm/field_ops.hpp"
#include "ddm/grid.hpp"
#include "ddm/networks.hpp"
#include "ddm/nifti.hpp"

namespace ddm {

namespace fs = std::filesystem;

inline constexpr std::array<double, 3> kTargetSpacing{1.5, 1.5, 3.15};

/// Raw intensities plus spacing in mm, grid axes in file (x, y, z) order.
inline Volume load_volume(const fs::path& path, int frame = 0) {
    const nifti::Image img = nifti::read(path);
    return Volume(nifti::to_tensor(img, frame), img.spacing);
}

struct PreprocessOptions {
    std::array<double, 3> spacing = kTargetSpacing;
    Shape3 shape{128, 128, 32};
    bool percentile_clip = false;  // clip to the 1st/99th percentile before the intensity map
};

/// Trilinear resampling onto a grid of the given spacing. Voxel centres are
/// aligned: new index n sits at old coordinate (n + 0.5) * new/old - 0.5.
inline Volume resample(const Volume& v, std::array<double, 3> spacing) {
    const Shape3 s = v.shape();
    if (spacing == v.spacing) return v;
    Shape3 ns;
    std::array<double, 3> ratio;
    for (int a = 0; a < 3; ++a) {
        require(spacing[a] > 0.0, "resample: target spacing must be positive");
        ratio[a] = spacing[a] / v.spacing[a];
        const int n = std::max(1, static_cast<int>(std::lround(s[a] / ratio[a])));
        (a == 0 ? ns.d : a == 1 ? ns.h : ns.w) = n;
    }
    Volume out(ns, 0.0, spacing);
    auto sample_axis = [](double x, int n, int& i0, double& f) {
        x = std::clamp(x, 0.0, double(n - 1));
        i0 = std::min(static_cast<int>(std::floor(x)), std::max(0, n - 2));
        f = n > 1 ? x - i0 : 0.0;
    };
    for (int i = 0; i < ns.d; ++i)
        for (int j = 0; j < ns.h; ++j)
            for (int k = 0; k < ns.w; ++k) {
                int i0, j0, k0;
                double fi, fj, fk;
                sample_axis((i + 0.5) * ratio[0] - 0.5, s.d, i0, fi);
                sample_axis((j + 0.5) * ratio[1] - 0.5, s.h, j0, fj);
                sample_axis((k + 0.5) * ratio[2] - 0.5, s.w, k0, fk);
                const int i1 = std::min(i0 + 1, s.d - 1), j1 = std::min(j0 + 1, s.h - 1), k1 = std::min(k0 + 1, s.w - 1);
                auto lerp = [](double a, double b, double t) { return a * (1 - t) + b * t; };
                const double c00 = lerp(v(i0, j0, k0), v(i0, j0, k1), fk), c01 = lerp(v(i0, j1, k0), v(i0, j1, k1), fk);
                const double c10 = lerp(v(i1, j0, k0), v(i1, j0, k1), fk), c11 = lerp(v(i1, j1, k0), v(i1, j1, k1), fk);
                out(i, j, k) = lerp(lerp(c00, c01, fj), lerp(c10, c11, fj), fi);
            }
    return out;
}

/// Nearest-neighbour counterpart of resample for label maps.
inline SegmentationMap resample_labels(const SegmentationMap& m, std::array<double, 3> from,
                                       std::array<double, 3> to) {
    if (from == to) return m;
    const Shape3 s = m.shape();
    Shape3 ns;
    std::array<double, 3> ratio;
    for (int a = 0; a < 3; ++a) {
        ratio[a] = to[a] / from[a];
        (a == 0 ? ns.d : a == 1 ? ns.h : ns.w) = std::max(1, static_cast<int>(std::lround(s[a] / ratio[a])));
    }
    SegmentationMap out(ns);
    auto pick = [](double x, int n) { return std::clamp(static_cast<int>(std::floor(x + 0.5)), 0, n - 1); };
    for (int i = 0; i < ns.d; ++i)
        for (int j = 0; j < ns.h; ++j)
            for (int k = 0; k < ns.w; ++k)
                out(i, j, k) = m(pick((i + 0.5) * ratio[0] - 0.5, s.d), pick((j + 0.5) * ratio[1] - 0.5, s.h),
                                 pick((k + 0.5) * ratio[2] - 0.5, s.w));
    return out;
}

/// Centre crop or zero-pad each axis to the requested extent.
template <class G>
G crop_or_pad(const G& in, const Shape3& target) {
    const Shape3 s = in.shape();
    G out(target);
    int off_in[3], off_out[3], len[3];
    for (int a = 0; a < 3; ++a) {
        if (s[a] >= target[a]) {
            off_in[a] = (s[a] - target[a]) / 2;
            off_out[a] = 0;
            len[a] = target[a];
        } else {
            off_in[a] = 0;
            off_out[a] = (target[a] - s[a]) / 2;
            len[a] = s[a];
        }
    }
    for (int i = 0; i < len[0]; ++i)
        for (int j = 0; j < len[1]; ++j)
            for (int k = 0; k < len[2]; ++k)
                out(i + off_out[0], j + off_out[1], k + off_out[2]) = in(i + off_in[0], j + off_in[1], k + off_in[2]);
    return out;
}

inline Volume crop_or_pad(const Volume& in, const Shape3& target) {
    Volume out(target, 0.0, in.spacing);
    const Volume tmp = crop_or_pad<Volume>(in, target);
    out.data = tmp.data;
    return out;
}

/// Linear map of [min, max] onto [-1, 1].
inline Volume normalize_intensity(const Volume& v, bool percentile_clip = false) {
    Volume out = v;
    double lo, hi;
    if (percentile_clip) {
        std::vector<double> sorted = v.data.values();
        std::sort(sorted.begin(), sorted.end());
        auto at = [&sorted](double q) { return sorted[static_cast<std::size_t>(q * (sorted.size() - 1))]; };
        lo = at(0.01);
        hi = at(0.99);
        for (double& x : out.data.values()) x = std::clamp(x, lo, hi);
    } else {
        const auto [mn, mx] = std::minmax_element(v.data.values().begin(), v.data.values().end());
        lo = *mn;
        hi = *mx;
    }
    require(hi > lo, "normalize_intensity: degenerate intensity range (max == min)");
    const double range = hi - lo;
    for (double& x : out.data.values()) x = 2.0 * ((x - lo) / range) - 1.0;
    return out;
}

/// resample -> centre crop/pad -> per-volume min-max to [-1, 1].
inline Volume preprocess(const Volume& raw, const PreprocessOptions& opt = {}) {
    require(all_finite(raw.data), "preprocess: input has non-finite intensities");
    return normalize_intensity(crop_or_pad(resample(raw, opt.spacing), opt.shape), opt.percentile_clip);
}

inline SegmentationMap preprocess_labels(const SegmentationMap& m, std::array<double, 3> spacing,
                                         const PreprocessOptions& opt = {}) {
    return crop_or_pad(resample_labels(m, spacing, opt.spacing), opt.shape);
}

struct SubjectRecord {
    std::string id;
    Volume ed;
    Volume es;
    std::optional<SegmentationMap> ed_seg;
    std::optional<SegmentationMap> es_seg;
    int n_frames = 2;
    std::vector<Volume> intermediate_frames;  // full ED..ES sequence when available
    std::optional<DisplacementField> gt_field;
};

inline void validate(const SubjectRecord& r) {
    require_same_shape(r.ed.shape(), r.es.shape(), "subject " + r.id);
    if (r.ed_seg) require_same_shape(r.ed.shape(), r.ed_seg->shape(), "subject " + r.id + " ED segmentation");
    if (r.es_seg) require_same_shape(r.ed.shape(), r.es_seg->shape(), "subject " + r.id + " ES segmentation");
    require(r.n_frames >= 2, "subject " + r.id + ": frame count must be at least 2");
}

// ---------------------------------------------------------------- synthetic

namespace detail {

// Separable Gaussian smoothing with border replication.
inline void gaussian_smooth(double* data, const Shape3& s, std::array<double, 3> sigma) {
    const std::size_t stride[3] = {static_cast<std::size_t>(s.h) * s.w, static_cast<std::size_t>(s.w), 1};
    std::vector<double> line, tmp;
    for (int a = 0; a < 3; ++a) {
        if (sigma[a] <= 0) continue;
        const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma[a])));
        std::vector<double> kern(2 * r + 1);
        double ks = 0;
        for (int m = -r; m <= r; ++m) ks += kern[m + r] = std::exp(-0.5 * m * m / (sigma[a] * sigma[a]));
        for (double& k : kern) k /= ks;
        const int n = s[a];
        const int o1 = a == 0 ? 1 : 0, o2 = a == 2 ? 1 : 2;
        line.resize(n);
        tmp.resize(n);
        for (int x = 0; x < s[o1]; ++x)
            for (int y = 0; y < s[o2]; ++y) {
                int idx[3] = {0, 0, 0};
                idx[o1] = x;
                idx[o2] = y;
                const std::size_t base = s.index(idx[0], idx[1], idx[2]);
                for (int m = 0; m < n; ++m) line[m] = data[base + m * stride[a]];
                for (int m = 0; m < n; ++m) {
                    double acc = 0;
                    for (int q = -r; q <= r; ++q) acc += kern[q + r] * line[std::clamp(m + q, 0, n - 1)];
                    tmp[m] = acc;
                }
                for (int m = 0; m < n; ++m) data[base + m * stride[a]] = tmp[m];
            }
    }
}

}  // namespace detail

struct SyntheticOptions {
    Shape3 shape{32, 32, 8};
    double max_disp = 3.0;
    int n_frames = 5;
    std::array<double, 3> spacing = kTargetSpacing;
};

/// Blob phantom S, smooth random field with max |disp| = max_disp,
/// T = warp_trilinear(S, field), blob masks as labels (ES labels are the ED
/// labels transported with warp_nearest). Intermediate frames warp S by
/// k/(n-1) of the field.
inline SubjectRecord make_synthetic_pair(std::uint64_t seed, const SyntheticOptions& opt) {
    const Shape3 s = opt.shape;
    require(s.d >= 4 && s.h >= 4 && s.w >= 4, "make_synthetic_pair: every axis needs at least 4 voxels");
    level_strides(s, 3);
    const int max_axis = std::max({s.d, s.h, s.w});
    require(opt.max_disp >= 0.0 && opt.max_disp <= max_axis / 4.0,
            "make_synthetic_pair: max_disp must lie in [0, largest axis / 4]");
    require(opt.n_frames >= 2, "make_synthetic_pair: n_frames must be at least 2");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int blobs = 2 + static_cast<int>(unit(rng) * 3.0);  // 2..4
    struct Blob {
        double c[3], radius[3], amp;
    };
    std::vector<Blob> bl(blobs);
    for (auto& b : bl) {
        for (int a = 0; a < 3; ++a) {
            b.c[a] = (0.3 + 0.4 * unit(rng)) * (s[a] - 1);
            b.radius[a] = std::max(1.5, (0.15 + 0.12 * unit(rng)) * s[a]);
        }
        b.amp = 0.5 + 0.5 * unit(rng);
    }

    SubjectRecord rec;
    rec.id = "synth_" + std::to_string(seed);
    Volume S(s, 0.0, opt.spacing);
    SegmentationMap seg(s);
    for (int i = 0; i < s.d; ++i)
        for (int j = 0; j < s.h; ++j)
            for (int k = 0; k < s.w; ++k) {
                const int p[3] = {i, j, k};
                for (int b = 0; b < blobs; ++b) {
                    double q = 0;
                    for (int a = 0; a < 3; ++a) q += std::pow((p[a] - bl[b].c[a]) / bl[b].radius[a], 2);
                    S(i, j, k) += bl[b].amp * std::exp(-0.5 * q);
                    if (q < 1.0) seg(i, j, k) = b + 1;
                }
            }
    S = normalize_intensity(S);

    // broad motion bumps around each blob
    DisplacementField field(s);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (const auto& b : bl) {
        double dir[3], r[3];
        for (int a = 0; a < 3; ++a) {
            dir[a] = nd(rng) * s[a] / max_axis;
            r[a] = 2.0 * b.radius[a];
        }
        for (int i = 0; i < s.d; ++i)
            for (int j = 0; j < s.h; ++j)
                for (int k = 0; k < s.w; ++k) {
                    const int p[3] = {i, j, k};
                    double q = 0;
                    for (int a = 0; a < 3; ++a) q += std::pow((p[a] - b.c[a]) / r[a], 2);
                    const double g = std::exp(-0.5 * q);
                    for (int c = 0; c < 3; ++c) field.data(c, i, j, k) += dir[c] * g;
                }
    }
    double peak = 0;
    for (std::size_t n = 0; n < s.voxels(); ++n)
        peak = std::max(peak, std::hypot(field.component(0)[n], field.component(1)[n], field.component(2)[n]));
    const double k = peak > 0 ? opt.max_disp / peak : 0.0;
    for (double& v : field.data.values()) v *= k;

    rec.ed = S;
    rec.es = warp_trilinear(S, field);
    rec.ed_seg = seg;
    rec.es_seg = warp_nearest(seg, field);
    rec.n_frames = opt.n_frames;
    for (int f = 0; f < opt.n_frames; ++f) {
        const double g = f == opt.n_frames - 1 ? 1.0 : static_cast<double>(f) / (opt.n_frames - 1);
        rec.intermediate_frames.push_back(f == 0 ? S : warp_trilinear(S, scale_field(field, g)));
    }
    rec.gt_field = std::move(field);
    return rec;
}

inline SubjectRecord make_synthetic_pair(std::uint64_t seed, Shape3 shape, double max_disp) {
    SyntheticOptions opt;
    opt.shape = shape;
    opt.max_disp = max_disp;
    return make_synthetic_pair(seed, opt);
}

/// Deterministic shuffled partition by subject id.
template <class R>
std::pair<std::vector<R>, std::vector<R>> split_dataset(std::vector<R> records, double train_fraction,
                                                        std::uint64_t seed) {
    require(!records.empty(), "split_dataset: no records");
    require(train_fraction > 0.0 && train_fraction < 1.0, "split_dataset: fraction must lie in (0, 1)");
    const std::size_t n_train = static_cast<std::size_t>(std::lround(train_fraction * records.size()));
    require(n_train > 0 && n_train < records.size(),
            "split_dataset: fraction " + std::to_string(train_fraction) + " leaves one side empty for " +
                std::to_string(records.size()) + " records");
    std::sort(records.begin(), records.end(), [](const R& a, const R& b) { return a.id < b.id; });
    std::mt19937_64 rng(seed);
    for (std::size_t i = records.size() - 1; i > 0; --i) {
        const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i)(rng);
        std::swap(records[i], records[j]);
    }
    std::vector<R> train(std::make_move_iterator(records.begin()),
                         std::make_move_iterator(records.begin() + n_train));
    std::vector<R> test(std::make_move_iterator(records.begin() + n_train), std::make_move_iterator(records.end()));
    return {std::move(train), std::move(test)};
}

// ------------------------------------------------------------------ on disk

inline std::string frame_name(int k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%02d.nii.gz", k);
    return buf;
}

/// <dir>/<id>/{ed,es,ed_seg,es_seg,gt_field}.nii.gz, frames/, subject.json.
inline void write_subject(const fs::path& dir, const SubjectRecord& r) {
    const fs::path d = dir / r.id;
    fs::create_directories(d);
    nifti::write_volume(d / "ed.nii.gz", r.ed);
    nifti::write_volume(d / "es.nii.gz", r.es);
    if (r.ed_seg) nifti::write_segmentation(d / "ed_seg.nii.gz", *r.ed_seg, r.ed.spacing);
    if (r.es_seg) nifti::write_segmentation(d / "es_seg.nii.gz", *r.es_seg, r.ed.spacing);
    if (r.gt_field) nifti::write_field(d / "gt_field.nii.gz", *r.gt_field, r.ed.spacing);
    for (std::size_t k = 0; k < r.intermediate_frames.size(); ++k)
        nifti::write_volume(d / "frames" / frame_name(static_cast<int>(k)), r.intermediate_frames[k]);
    nlohmann::json meta{{"id", r.id},
                        {"n_frames", r.n_frames},
                        {"frames", r.intermediate_frames.size()},
                        {"preprocessed", true}};
    std::ofstream(d / "subject.json") << meta.dump(2) << "\n";
}

inline SubjectRecord read_subject(const fs::path& d) {
    std::ifstream in(d / "subject.json");
    require(static_cast<bool>(in), "missing subject.json in " + d.string());
    const auto meta = nlohmann::json::parse(in);
    SubjectRecord r;
    r.id = meta.at("id").get<std::string>();
    r.n_frames = meta.at("n_frames").get<int>();
    r.ed = load_volume(d / "ed.nii.gz");
    r.es = load_volume(d / "es.nii.gz");
    if (fs::exists(d / "ed_seg.nii.gz")) r.ed_seg = nifti::to_segmentation(load_volume(d / "ed_seg.nii.gz").data);
    if (fs::exists(d / "es_seg.nii.gz")) r.es_seg = nifti::to_segmentation(load_volume(d / "es_seg.nii.gz").data);
    if (fs::exists(d / "gt_field.nii.gz")) r.gt_field = nifti::read_field(d / "gt_field.nii.gz");
    const int frames = meta.value("frames", 0);
    for (int k = 0; k < frames; ++k) r.intermediate_frames.push_back(load_volume(d / "frames" / frame_name(k)));
    validate(r);
    return r;
}

/// Parses an ACDC Info.cfg ("ED: 1", "ES: 12", "NbFrame: 30", ...).
inline std::map<std::string, std::string> read_info_cfg(const fs::path& p) {
    std::ifstream in(p);
    require(static_cast<bool>(in), "cannot read " + p.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        const auto c = line.find(':');
        if (c == std::string::npos) continue;
        auto trim = [](std::string s) {
            s.erase(0, s.find_first_not_of(" \t\r"));
            s.erase(s.find_last_not_of(" \t\r") + 1);
            return s;
        };
        kv[trim(line.substr(0, c))] = trim(line.substr(c + 1));
    }
    return kv;
}

/// One ACDC patient folder: <id>_frameNN.nii.gz (+ _gt) for ED/ES, optional
/// <id>_4d.nii.gz for the ED..ES sequence, Info.cfg naming the phases.
inline SubjectRecord read_acdc_subject(const fs::path& d, const PreprocessOptions& opt) {
    const auto info = read_info_cfg(d / "Info.cfg");
    require(info.count("ED") && info.count("ES"), "Info.cfg in " + d.string() + " lacks ED/ES entries");
    const int ed = std::stoi(info.at("ED")), es = std::stoi(info.at("ES"));
    const std::string id = d.filename().string();
    auto frame_path = [&](int f, const char* suffix) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "_frame%02d%s.nii.gz", f, suffix);
        fs::path p = d / (id + buf);
        if (!fs::exists(p)) {
            fs::path alt = p;
            alt.replace_extension();  // .nii
            if (fs::exists(alt)) return alt;
        }
        return p;
    };
    SubjectRecord r;
    r.id = id;
    const Volume ed_raw = load_volume(frame_path(ed, ""));
    const Volume es_raw = load_volume(frame_path(es, ""));
    r.ed = preprocess(ed_raw, opt);
    r.es = preprocess(es_raw, opt);
    if (fs::exists(frame_path(ed, "_gt")))
        r.ed_seg = preprocess_labels(nifti::to_segmentation(load_volume(frame_path(ed, "_gt")).data), ed_raw.spacing, opt);
    if (fs::exists(frame_path(es, "_gt")))
        r.es_seg = preprocess_labels(nifti::to_segmentation(load_volume(frame_path(es, "_gt")).data), es_raw.spacing, opt);

    const int total = info.count("NbFrame") ? std::stoi(info.at("NbFrame")) : std::max(ed, es);
    r.n_frames = es >= ed ? es - ed + 1 : total - ed + 1 + es;
    const fs::path four_d = d / (id + "_4d.nii.gz");
    if (fs::exists(four_d)) {
        const nifti::Image img = nifti::read(four_d);
        for (int f = 0; f < r.n_frames; ++f) {
            const int idx = (ed - 1 + f) % img.volumes;
            r.intermediate_frames.push_back(preprocess(Volume(nifti::to_tensor(img, idx), img.spacing), opt));
        }
    }
    r.n_frames = std::max(r.n_frames, 2);
    validate(r);
    return r;
}

/// Loads every subject below `dir` (ACDC patient folders or synthetic subject
/// folders), sorted by id. A folder that is itself a subject yields one record.
inline std::vector<SubjectRecord> load_dataset(const fs::path& dir, const PreprocessOptions& opt) {
    require(fs::is_directory(dir), "dataset directory " + dir.string() + " does not exist");
    auto load_one = [&opt](const fs::path& d) -> std::optional<SubjectRecord> {
        if (fs::exists(d / "subject.json")) return read_subject(d);
        if (fs::exists(d / "Info.cfg")) return read_acdc_subject(d, opt);
        return std::nullopt;
    };
    std::vector<SubjectRecord> out;
    if (auto r = load_one(dir)) {
        out.push_back(std::move(*r));
        return out;
    }
    std::vector<fs::path> dirs;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_directory() && (fs::exists(e.path() / "subject.json") || fs::exists(e.path() / "Info.cfg")))
            dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) out.push_back(*load_one(d));
    require(!out.empty(), "no subjects found under " + dir.string());
    return out;
}

}  // namespace ddm
