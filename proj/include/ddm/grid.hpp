#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddm {

/// Spatial extent of a 3D grid. Axis 0 ("depth") is the slowest-varying
/// index in memory, axis 2 the fastest.
struct Shape3 {
    int d = 0;
    int h = 0;
    int w = 0;

    constexpr int operator[](int axis) const { return axis == 0 ? d : (axis == 1 ? h : w); }
    constexpr std::size_t voxels() const {
        return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    }
    constexpr std::size_t index(int i, int j, int k) const {
        return (static_cast<std::size_t>(i) * h + j) * w + k;
    }
    friend constexpr bool operator==(const Shape3&, const Shape3&) = default;

    std::string str() const {
        std::ostringstream os;
        os << d << "x" << h << "x" << w;
        return os.str();
    }
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw std::invalid_argument(what);
}

inline void require_same_shape(const Shape3& a, const Shape3& b, const std::string& op) {
    if (!(a == b))
        throw std::invalid_argument(op + ": shape mismatch " + a.str() + " vs " + b.str());
}

/// Dense C-channel 3D grid, channel-major. A single-channel Grid is a scalar
/// image; three channels make a displacement field.
template <class T>
class Grid {
public:
    Grid() = default;
    Grid(Shape3 shape, int channels = 1, T fill = T{})
        : shape_(shape), channels_(channels), data_(shape.voxels() * channels, fill) {
        require(channels >= 1, "Grid: channel count must be positive");
        require(shape.d >= 1 && shape.h >= 1 && shape.w >= 1, "Grid: empty shape " + shape.str());
    }
    Grid(Shape3 shape, int channels, std::vector<T> data)
        : shape_(shape), channels_(channels), data_(std::move(data)) {
        require(data_.size() == shape.voxels() * channels, "Grid: data size does not match shape");
    }

    const Shape3& shape() const { return shape_; }
    int channels() const { return channels_; }
    std::size_t voxels() const { return shape_.voxels(); }
    std::size_t size() const { return data_.size(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }

    T* channel(int c) { return data_.data() + static_cast<std::size_t>(c) * voxels(); }
    const T* channel(int c) const { return data_.data() + static_cast<std::size_t>(c) * voxels(); }

    T& operator()(int i, int j, int k) { return data_[shape_.index(i, j, k)]; }
    const T& operator()(int i, int j, int k) const { return data_[shape_.index(i, j, k)]; }
    T& operator()(int c, int i, int j, int k) { return data_[c * voxels() + shape_.index(i, j, k)]; }
    const T& operator()(int c, int i, int j, int k) const { return data_[c * voxels() + shape_.index(i, j, k)]; }

    T& operator[](std::size_t n) { return data_[n]; }
    const T& operator[](std::size_t n) const { return data_[n]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    friend bool operator==(const Grid& a, const Grid& b) {
        return a.shape_ == b.shape_ && a.channels_ == b.channels_ && a.data_ == b.data_;
    }

private:
    Shape3 shape_{};
    int channels_ = 1;
    std::vector<T> data_;
};

using Tensor = Grid<double>;

/// Scalar intensity volume with physical voxel size (mm per axis).
struct Volume {
    Tensor data;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};

    Volume() = default;
    explicit Volume(Shape3 shape, double fill = 0.0, std::array<double, 3> sp = {1.0, 1.0, 1.0})
        : data(shape, 1, fill), spacing(sp) {}
    explicit Volume(Tensor t, std::array<double, 3> sp = {1.0, 1.0, 1.0}) : data(std::move(t)), spacing(sp) {
        require(data.channels() == 1, "Volume: expected a single-channel grid");
    }

    const Shape3& shape() const { return data.shape(); }
    std::size_t size() const { return data.size(); }
    double& operator()(int i, int j, int k) { return data(i, j, k); }
    double operator()(int i, int j, int k) const { return data(i, j, k); }
    double& operator[](std::size_t n) { return data[n]; }
    double operator[](std::size_t n) const { return data[n]; }
};

/// Full-resolution single-channel code produced by the diffusion network.
using LatentCode = Volume;

/// Per-voxel displacement in voxel units, pull convention: the output voxel p
/// samples its input at p + field(p). Channel c is the offset along axis c.
struct DisplacementField {
    Tensor data;

    DisplacementField() = default;
    explicit DisplacementField(Shape3 shape, double fill = 0.0) : data(shape, 3, fill) {}
    explicit DisplacementField(Tensor t) : data(std::move(t)) {
        require(data.channels() == 3, "DisplacementField: expected three channels");
    }

    const Shape3& shape() const { return data.shape(); }
    double* component(int c) { return data.channel(c); }
    const double* component(int c) const { return data.channel(c); }
    double& operator()(int c, int i, int j, int k) { return data(c, i, j, k); }
    double operator()(int c, int i, int j, int k) const { return data(c, i, j, k); }
};

/// Integer label map; 0 is background.
struct SegmentationMap {
    Grid<std::int32_t> data;

    SegmentationMap() = default;
    explicit SegmentationMap(Shape3 shape, std::int32_t fill = 0) : data(shape, 1, fill) {}

    const Shape3& shape() const { return data.shape(); }
    std::int32_t& operator()(int i, int j, int k) { return data(i, j, k); }
    std::int32_t operator()(int i, int j, int k) const { return data(i, j, k); }
};

template <class T>
bool all_finite(const Grid<T>& g) {
    return std::all_of(g.values().begin(), g.values().end(), [](T v) { return std::isfinite(static_cast<double>(v)); });
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    require(a.size() == b.size(), "max_abs_diff: size mismatch");
    double m = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) m = std::max(m, std::abs(a[n] - b[n]));
    return m;
}

inline double mean_abs(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += std::abs(v);
    return a.size() ? s / static_cast<double>(a.size()) : 0.0;
}

/// Mean Euclidean length of the displacement vectors.
inline double mean_magnitude(const DisplacementField& f) {
    const std::size_t n = f.data.voxels();
    double s = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
        double a = f.component(0)[v], b = f.component(1)[v], c = f.component(2)[v];
        s += std::sqrt(a * a + b * b + c * c);
    }
    return s / static_cast<double>(n);
}

}  // namespace ddm
