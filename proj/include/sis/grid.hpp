#pragma once

// Dense voxel-grid value types and axis-aligned box geometry shared by the
// whole pipeline: TSDF volumes, multi-channel feature volumes, boxes stored
// as center/size, and the exact IoU / crop / coordinate-transform operations.

#include <array>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace sis {

using Vec3 = std::array<double, 3>;
using Vec3i = std::array<int, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }

struct GridMeta {
    Vec3i dims{1, 1, 1};     // voxels per axis
    double voxel_size = 1.0; // meters per voxel edge
    Vec3 origin{0, 0, 0};    // world position of voxel (0,0,0) min corner

    GridMeta() = default;
    GridMeta(Vec3i d, double vs, Vec3 o = {0, 0, 0}) : dims(d), voxel_size(vs), origin(o) {
        if (d[0] < 1 || d[1] < 1 || d[2] < 1) throw std::invalid_argument("GridMeta: dims must be >= 1");
        if (vs <= 0.0) throw std::invalid_argument("GridMeta: voxel_size must be > 0");
    }

    std::size_t voxel_count() const {
        return std::size_t(dims[0]) * std::size_t(dims[1]) * std::size_t(dims[2]);
    }
    // layout: x slow, y, z fastest
    std::size_t index(int x, int y, int z) const {
        return (std::size_t(x) * dims[1] + y) * dims[2] + z;
    }
    bool in_bounds(int x, int y, int z) const {
        return x >= 0 && y >= 0 && z >= 0 && x < dims[0] && y < dims[1] && z < dims[2];
    }
    bool operator==(const GridMeta& o) const {
        return dims == o.dims && voxel_size == o.voxel_size && origin == o.origin;
    }
};

// (p - origin) / voxel_size, unclamped; pair with in_voxel_bounds.
inline Vec3 world_to_voxel(const Vec3& p, const GridMeta& meta) {
    return {(p[0] - meta.origin[0]) / meta.voxel_size,
            (p[1] - meta.origin[1]) / meta.voxel_size,
            (p[2] - meta.origin[2]) / meta.voxel_size};
}

inline Vec3 voxel_to_world(const Vec3& v, const GridMeta& meta) {
    return {meta.origin[0] + v[0] * meta.voxel_size,
            meta.origin[1] + v[1] * meta.voxel_size,
            meta.origin[2] + v[2] * meta.voxel_size};
}

inline bool in_voxel_bounds(const Vec3& v, const GridMeta& meta) {
    return v[0] >= 0 && v[1] >= 0 && v[2] >= 0 &&
           v[0] < meta.dims[0] && v[1] < meta.dims[1] && v[2] < meta.dims[2];
}

// world position of the center of voxel (x,y,z)
inline Vec3 voxel_center_world(int x, int y, int z, const GridMeta& meta) {
    return voxel_to_world({x + 0.5, y + 0.5, z + 0.5}, meta);
}

// Axis-aligned box in continuous voxel coordinates, stored as center/size.
struct Box3 {
    Vec3 center{0, 0, 0};
    Vec3 size{1, 1, 1}; // positive extents

    Box3() = default;
    Box3(Vec3 c, Vec3 s) : center(c), size(s) {}

    static Box3 from_min_max(const Vec3& mn, const Vec3& mx) {
        return Box3{{(mn[0] + mx[0]) * 0.5, (mn[1] + mx[1]) * 0.5, (mn[2] + mx[2]) * 0.5},
                    {mx[0] - mn[0], mx[1] - mn[1], mx[2] - mn[2]}};
    }
    Vec3 min_corner() const { return {center[0] - size[0] * 0.5, center[1] - size[1] * 0.5, center[2] - size[2] * 0.5}; }
    Vec3 max_corner() const { return {center[0] + size[0] * 0.5, center[1] + size[1] * 0.5, center[2] + size[2] * 0.5}; }
    double volume() const { return size[0] * size[1] * size[2]; }
    bool valid() const { return size[0] > 0 && size[1] > 0 && size[2] > 0; }

    bool contains(const Vec3& p) const {
        Vec3 mn = min_corner(), mx = max_corner();
        return p[0] >= mn[0] && p[0] < mx[0] && p[1] >= mn[1] && p[1] < mx[1] && p[2] >= mn[2] && p[2] < mx[2];
    }
};

inline double box_intersection_volume(const Box3& a, const Box3& b) {
    Vec3 amn = a.min_corner(), amx = a.max_corner();
    Vec3 bmn = b.min_corner(), bmx = b.max_corner();
    double v = 1.0;
    for (int i = 0; i < 3; ++i) {
        double lo = std::max(amn[i], bmn[i]);
        double hi = std::min(amx[i], bmx[i]);
        if (hi <= lo) return 0.0;
        v *= hi - lo;
    }
    return v;
}

inline double box_iou(const Box3& a, const Box3& b) {
    double inter = box_intersection_volume(a, b);
    if (inter <= 0.0) return 0.0;
    double uni = a.volume() + b.volume() - inter;
    return inter / uni;
}

enum class BoxSizeClass { Small, Large };

// Small iff the metric volume is strictly below the split (1 m^3 by default).
inline BoxSizeClass box_volume_class(const Box3& b, double voxel_size, double split_m3 = 1.0) {
    double vs3 = voxel_size * voxel_size * voxel_size;
    return b.volume() * vs3 < split_m3 ? BoxSizeClass::Small : BoxSizeClass::Large;
}

// Smallest integer voxel region enclosing a continuous box, clamped to the grid.
// Returns {min, max} with max exclusive; empty if max <= min on any axis.
struct VoxelRegion {
    Vec3i min{0, 0, 0};
    Vec3i max{0, 0, 0}; // exclusive
    bool empty() const { return max[0] <= min[0] || max[1] <= min[1] || max[2] <= min[2]; }
    Vec3i extent() const { return {max[0] - min[0], max[1] - min[1], max[2] - min[2]}; }
    std::size_t volume() const {
        return empty() ? 0
                       : std::size_t(max[0] - min[0]) * std::size_t(max[1] - min[1]) * std::size_t(max[2] - min[2]);
    }
    bool contains(int x, int y, int z) const {
        return x >= min[0] && y >= min[1] && z >= min[2] && x < max[0] && y < max[1] && z < max[2];
    }
};

inline VoxelRegion enclosing_region(const Box3& box, const GridMeta& meta) {
    Vec3 mn = box.min_corner(), mx = box.max_corner();
    VoxelRegion r;
    for (int i = 0; i < 3; ++i) {
        r.min[i] = std::max(0, int(std::floor(mn[i])));
        r.max[i] = std::min(meta.dims[i], int(std::ceil(mx[i])));
    }
    return r;
}

struct TsdfGrid {
    GridMeta meta;
    double truncation = 3.0; // in voxel units
    std::vector<float> values;  // clamped to [-tau, +tau]; unobserved = +tau
    std::vector<float> weights; // >= 0; 0 means unobserved

    TsdfGrid() = default;
    TsdfGrid(GridMeta m, double tau = 3.0)
        : meta(m), truncation(tau),
          values(m.voxel_count(), float(tau)),
          weights(m.voxel_count(), 0.0f) {}

    float value(int x, int y, int z) const { return values[meta.index(x, y, z)]; }
    float weight(int x, int y, int z) const { return weights[meta.index(x, y, z)]; }
    bool observed(int x, int y, int z) const { return weights[meta.index(x, y, z)] > 0.0f; }
};

struct FeatureVolume {
    GridMeta meta;
    int channels = 0;
    std::vector<float> data; // channel-major: [c][x][y][z], z fastest

    FeatureVolume() = default;
    FeatureVolume(GridMeta m, int c) : meta(m), channels(c), data(std::size_t(c) * m.voxel_count(), 0.0f) {}

    std::size_t index(int c, int x, int y, int z) const {
        return std::size_t(c) * meta.voxel_count() + meta.index(x, y, z);
    }
    float at(int c, int x, int y, int z) const { return data[index(c, x, y, z)]; }
    float& at(int c, int x, int y, int z) { return data[index(c, x, y, z)]; }
};

struct EmptyCrop : std::runtime_error {
    EmptyCrop() : std::runtime_error("crop region has zero volume") {}
};

// Sub-volume covered by the integer region enclosing `box`, clamped to bounds.
inline FeatureVolume crop_volume(const FeatureVolume& vol, const Box3& box) {
    VoxelRegion r = enclosing_region(box, vol.meta);
    if (r.empty()) throw EmptyCrop{};
    Vec3i ext = r.extent();
    GridMeta sub(ext, vol.meta.voxel_size,
                 voxel_to_world({double(r.min[0]), double(r.min[1]), double(r.min[2])}, vol.meta));
    FeatureVolume out(sub, vol.channels);
    for (int c = 0; c < vol.channels; ++c)
        for (int x = 0; x < ext[0]; ++x)
            for (int y = 0; y < ext[1]; ++y)
                for (int z = 0; z < ext[2]; ++z)
                    out.at(c, x, y, z) = vol.at(c, r.min[0] + x, r.min[1] + y, r.min[2] + z);
    return out;
}

struct InstanceAnnotation {
    Box3 box;     // tight hull of mask, voxel coords
    int class_id = 0;
    std::vector<Vec3i> mask; // voxel indices belonging to the instance
};

// Voxel-set IoU for mask evaluation.
inline double mask_iou(const std::vector<Vec3i>& a, const std::vector<Vec3i>& b) {
    if (a.empty() && b.empty()) return 0.0;
    std::vector<Vec3i> sa = a, sb = b;
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    std::size_t inter = 0, i = 0, j = 0;
    while (i < sa.size() && j < sb.size()) {
        if (sa[i] == sb[j]) { ++inter; ++i; ++j; }
        else if (sa[i] < sb[j]) ++i;
        else ++j;
    }
    std::size_t uni = sa.size() + sb.size() - inter;
    return uni == 0 ? 0.0 : double(inter) / double(uni);
}

} // namespace sis
