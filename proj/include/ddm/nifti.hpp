#pragma once

// NIfTI-1 single-file (.nii / .nii.gz) reading and writing. Voxel index
// (x, y, z) of the file maps to grid axes (0, 1, 2); x is axis 0.

#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ddm/grid.hpp"

namespace ddm::nifti {

class NiftiError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum DataType : std::int16_t {
    kUInt8 = 2,
    kInt16 = 4,
    kInt32 = 8,
    kFloat32 = 16,
    kFloat64 = 64,
    kInt8 = 256,
    kUInt16 = 512,
    kUInt32 = 768,
};

inline constexpr std::int16_t kIntentVector = 1007;

/// Decoded image: up to 3 spatial axes plus a flattened 4th "volume" axis
/// (dim[4] * dim[5] ...). Values are in file index order, x fastest,
/// with scl_slope / scl_inter already applied.
struct Image {
    std::array<int, 3> dims{1, 1, 1};
    int volumes = 1;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::int16_t datatype = kFloat64;
    std::vector<double> data;
};

#pragma pack(push, 1)
struct Header {
    std::int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    std::int32_t extents;
    std::int16_t session_error;
    char regular;
    char dim_info;
    std::int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    std::int16_t intent_code;
    std::int16_t datatype;
    std::int16_t bitpix;
    std::int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    std::int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    std::int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    std::int16_t qform_code, sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Header) == 348, "NIfTI-1 header must be 348 bytes");

namespace detail {

struct GzCloser {
    void operator()(gzFile f) const {
        if (f) gzclose(f);
    }
};
using GzHandle = std::unique_ptr<std::remove_pointer_t<gzFile>, GzCloser>;

template <class T>
T byteswap(T v) {
    char* p = reinterpret_cast<char*>(&v);
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(p[i], p[sizeof(T) - 1 - i]);
    return v;
}

inline void swap_header(Header& h) {
    h.sizeof_hdr = byteswap(h.sizeof_hdr);
    for (auto& d : h.dim) d = byteswap(d);
    h.intent_code = byteswap(h.intent_code);
    h.datatype = byteswap(h.datatype);
    h.bitpix = byteswap(h.bitpix);
    for (auto& p : h.pixdim) p = byteswap(p);
    h.vox_offset = byteswap(h.vox_offset);
    h.scl_slope = byteswap(h.scl_slope);
    h.scl_inter = byteswap(h.scl_inter);
}

inline int bytes_per_voxel(std::int16_t dt) {
    switch (dt) {
        case kUInt8:
        case kInt8: return 1;
        case kInt16:
        case kUInt16: return 2;
        case kInt32:
        case kUInt32:
        case kFloat32: return 4;
        case kFloat64: return 8;
        default: return 0;
    }
}

template <class T>
void decode(const char* raw, std::size_t n, bool swap, std::vector<double>& out) {
    for (std::size_t i = 0; i < n; ++i) {
        T v;
        std::memcpy(&v, raw + i * sizeof(T), sizeof(T));
        if (swap) v = byteswap(v);
        out[i] = static_cast<double>(v);
    }
}

inline bool is_gz(const std::filesystem::path& p) { return p.extension() == ".gz"; }

}  // namespace detail

inline Image read(const std::filesystem::path& path) {
    const std::string ps = path.string();
    detail::GzHandle f(gzopen(ps.c_str(), "rb"));
    if (!f) throw NiftiError("cannot open NIfTI file " + ps);
    Header h{};
    if (gzread(f.get(), &h, sizeof h) != static_cast<int>(sizeof h))
        throw NiftiError("NIfTI file " + ps + " is truncated (incomplete header)");
    bool swap = false;
    if (h.sizeof_hdr != 348) {
        if (detail::byteswap(h.sizeof_hdr) != 348) throw NiftiError(ps + " is not a NIfTI-1 file");
        swap = true;
        detail::swap_header(h);
    }
    if (std::memcmp(h.magic, "n+1", 4) != 0 && std::memcmp(h.magic, "ni1", 4) != 0)
        throw NiftiError(ps + " has an invalid NIfTI magic string");
    const int ndim = h.dim[0];
    if (ndim < 1 || ndim > 7) throw NiftiError(ps + " has an invalid dimension count");
    Image img;
    for (int a = 0; a < 3; ++a) img.dims[a] = a < ndim ? std::max<int>(1, h.dim[a + 1]) : 1;
    for (int a = 3; a < ndim; ++a) img.volumes *= std::max<int>(1, h.dim[a + 1]);
    for (int a = 0; a < 3; ++a) {
        if (a < ndim) {
            if (!(h.pixdim[a + 1] > 0.0f) || !std::isfinite(h.pixdim[a + 1]))
                throw NiftiError(ps + " is missing voxel spacing along axis " + std::to_string(a));
            img.spacing[a] = h.pixdim[a + 1];
        }
    }
    img.datatype = h.datatype;
    const int bpv = detail::bytes_per_voxel(h.datatype);
    if (bpv == 0) throw NiftiError(ps + " uses unsupported NIfTI datatype " + std::to_string(h.datatype));

    const std::size_t n = std::size_t(img.dims[0]) * img.dims[1] * img.dims[2] * img.volumes;
    const long offset = std::max<long>(352, static_cast<long>(h.vox_offset));
    if (gzseek(f.get(), offset, SEEK_SET) != offset) throw NiftiError("NIfTI file " + ps + " is truncated");
    std::vector<char> raw(n * bpv);
    std::size_t got = 0;
    while (got < raw.size()) {
        const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(raw.size() - got, 1u << 30));
        const int r = gzread(f.get(), raw.data() + got, chunk);
        if (r <= 0) break;
        got += static_cast<std::size_t>(r);
    }
    if (got != raw.size())
        throw NiftiError("NIfTI file " + ps + " is truncated: expected " + std::to_string(raw.size()) +
                         " data bytes, found " + std::to_string(got));
    img.data.resize(n);
    switch (h.datatype) {
        case kUInt8: detail::decode<std::uint8_t>(raw.data(), n, swap, img.data); break;
        case kInt8: detail::decode<std::int8_t>(raw.data(), n, swap, img.data); break;
        case kInt16: detail::decode<std::int16_t>(raw.data(), n, swap, img.data); break;
        case kUInt16: detail::decode<std::uint16_t>(raw.data(), n, swap, img.data); break;
        case kInt32: detail::decode<std::int32_t>(raw.data(), n, swap, img.data); break;
        case kUInt32: detail::decode<std::uint32_t>(raw.data(), n, swap, img.data); break;
        case kFloat32: detail::decode<float>(raw.data(), n, swap, img.data); break;
        case kFloat64: detail::decode<double>(raw.data(), n, swap, img.data); break;
    }
    if (h.scl_slope != 0.0f && std::isfinite(h.scl_slope) && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f))
        for (double& v : img.data) v = v * h.scl_slope + h.scl_inter;
    return img;
}

inline void write(const std::filesystem::path& path, const Image& img, std::int16_t intent = 0) {
    const int bpv = detail::bytes_per_voxel(img.datatype);
    if (bpv == 0) throw NiftiError("unsupported datatype for writing");
    Header h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    const bool vector = intent == kIntentVector;
    h.dim[0] = vector ? 5 : (img.volumes > 1 ? 4 : 3);
    for (int a = 0; a < 3; ++a) h.dim[a + 1] = static_cast<std::int16_t>(img.dims[a]);
    h.dim[4] = static_cast<std::int16_t>(vector ? 1 : img.volumes);
    h.dim[5] = static_cast<std::int16_t>(vector ? img.volumes : 1);
    h.dim[6] = h.dim[7] = 1;
    h.intent_code = intent;
    h.datatype = img.datatype;
    h.bitpix = static_cast<std::int16_t>(bpv * 8);
    h.pixdim[0] = 1.0f;
    for (int a = 0; a < 3; ++a) h.pixdim[a + 1] = static_cast<float>(img.spacing[a]);
    h.pixdim[4] = h.pixdim[5] = 1.0f;
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.xyzt_units = 2;  // mm
    h.qform_code = 0;
    h.sform_code = 1;
    h.srow_x[0] = static_cast<float>(img.spacing[0]);
    h.srow_y[1] = static_cast<float>(img.spacing[1]);
    h.srow_z[2] = static_cast<float>(img.spacing[2]);
    std::memcpy(h.magic, "n+1", 4);

    const std::size_t n = img.data.size();
    std::vector<char> raw(n * bpv);
    for (std::size_t i = 0; i < n; ++i) {
        const double v = img.data[i];
        char* dst = raw.data() + i * bpv;
        auto put = [dst](auto x) { std::memcpy(dst, &x, sizeof x); };
        switch (img.datatype) {
            case kUInt8: put(static_cast<std::uint8_t>(v)); break;
            case kInt8: put(static_cast<std::int8_t>(v)); break;
            case kInt16: put(static_cast<std::int16_t>(v)); break;
            case kUInt16: put(static_cast<std::uint16_t>(v)); break;
            case kInt32: put(static_cast<std::int32_t>(v)); break;
            case kUInt32: put(static_cast<std::uint32_t>(v)); break;
            case kFloat32: put(static_cast<float>(v)); break;
            case kFloat64: put(v); break;
        }
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::string ps = path.string();
    detail::GzHandle f(gzopen(ps.c_str(), detail::is_gz(path) ? "wb6" : "wbT"));
    if (!f) throw NiftiError("cannot write NIfTI file " + ps);
    const char ext[4] = {0, 0, 0, 0};
    bool ok = gzwrite(f.get(), &h, sizeof h) == static_cast<int>(sizeof h) && gzwrite(f.get(), ext, 4) == 4;
    std::size_t put = 0;
    while (ok && put < raw.size()) {
        const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(raw.size() - put, 1u << 30));
        ok = gzwrite(f.get(), raw.data() + put, chunk) == static_cast<int>(chunk);
        put += chunk;
    }
    if (!ok) throw NiftiError("failed writing NIfTI file " + ps);
}

// Grid axes (i, j, k) <-> file index (x, y, z) with x fastest on disk.
inline std::size_t file_index(const std::array<int, 3>& dims, int x, int y, int z) {
    return (static_cast<std::size_t>(z) * dims[1] + y) * dims[0] + x;
}

/// Extracts volume `v` of an image as a grid.
inline Tensor to_tensor(const Image& img, int v = 0) {
    if (v < 0 || v >= img.volumes) throw NiftiError("volume index " + std::to_string(v) + " out of range");
    const Shape3 s{img.dims[0], img.dims[1], img.dims[2]};
    Tensor t(s, 1, 0.0);
    const std::size_t base = s.voxels() * v;
    for (int i = 0; i < s.d; ++i)
        for (int j = 0; j < s.h; ++j)
            for (int k = 0; k < s.w; ++k) t(i, j, k) = img.data[base + file_index(img.dims, i, j, k)];
    return t;
}

inline Image from_tensor(const Tensor& t, std::array<double, 3> spacing, std::int16_t datatype) {
    Image img;
    const Shape3 s = t.shape();
    img.dims = {s.d, s.h, s.w};
    img.volumes = t.channels();
    img.spacing = spacing;
    img.datatype = datatype;
    img.data.resize(t.size());
    for (int c = 0; c < t.channels(); ++c)
        for (int i = 0; i < s.d; ++i)
            for (int j = 0; j < s.h; ++j)
                for (int k = 0; k < s.w; ++k) img.data[s.voxels() * c + file_index(img.dims, i, j, k)] = t(c, i, j, k);
    return img;
}

inline void write_volume(const std::filesystem::path& path, const Volume& v) {
    write(path, from_tensor(v.data, v.spacing, kFloat64));
}

inline void write_field(const std::filesystem::path& path, const DisplacementField& f, std::array<double, 3> spacing) {
    write(path, from_tensor(f.data, spacing, kFloat64), kIntentVector);
}

inline void write_segmentation(const std::filesystem::path& path, const SegmentationMap& m,
                               std::array<double, 3> spacing) {
    Tensor t(m.shape(), 1, 0.0);
    for (std::size_t n = 0; n < t.size(); ++n) t[n] = m.data[n];
    write(path, from_tensor(t, spacing, kInt16));
}

inline SegmentationMap to_segmentation(const Tensor& t) {
    SegmentationMap m(t.shape());
    for (std::size_t n = 0; n < t.size(); ++n) m.data[n] = static_cast<std::int32_t>(std::lround(t[n]));
    return m;
}

inline DisplacementField read_field(const std::filesystem::path& path) {
    const Image img = read(path);
    if (img.volumes != 3) throw NiftiError(path.string() + " does not hold a 3-component field");
    const Shape3 s{img.dims[0], img.dims[1], img.dims[2]};
    DisplacementField f(s);
    for (int c = 0; c < 3; ++c) {
        Tensor t = to_tensor(img, c);
        std::copy(t.values().begin(), t.values().end(), f.component(c));
    }
    return f;
}

}  // namespace ddm::nifti
