#pragma once

// Synthetic scene generation, depth/color rendering along orbit camera
// trajectories, volumetric TSDF fusion, and exact ground-truth instance
// annotations. Scenes are axis-aligned colored boxes inside a room box;
// class identity determines albedo (with small jitter), not size, so color
// is the informative cue for classification.

#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include "sis/camera.hpp"
#include "sis/grid.hpp"
#include "sis/parallel.hpp"

namespace sis {

struct SceneObject {
    int class_id = 1;        // in [1, n_classes), 0 is background
    Box3 box;                // world meters
    std::array<float, 3> albedo{0.5f, 0.5f, 0.5f};
};

struct SceneSpec {
    Vec3 room_extents{1.5, 1.5, 0.75}; // meters, room spans [0, extents]
    std::vector<SceneObject> objects;
    std::uint64_t seed = 0;
};

struct SynthConfig {
    Vec3 room_extents{1.5, 1.5, 0.75};
    int min_objects = 3, max_objects = 5;
    int n_classes = 4;              // total labels including background 0
    Vec3 min_size{0.20, 0.20, 0.15}; // object extents, meters
    Vec3 max_size{0.55, 0.55, 0.40};
    double wall_margin = 0.05;
    double spacing = 0.06;          // min gap between objects, meters
    double albedo_jitter = 0.05;
    int max_attempts = 200;
};

struct PlacementFailure : std::runtime_error {
    PlacementFailure() : std::runtime_error("could not place objects without overlap") {}
};

inline std::array<float, 3> class_base_albedo(int class_id) {
    static const std::array<float, 3> palette[] = {
        {0.5f, 0.5f, 0.5f},  // background / walls
        {0.90f, 0.15f, 0.15f},
        {0.15f, 0.90f, 0.15f},
        {0.15f, 0.15f, 0.90f},
        {0.90f, 0.90f, 0.15f},
        {0.90f, 0.15f, 0.90f},
        {0.15f, 0.90f, 0.90f},
        {0.95f, 0.55f, 0.15f},
    };
    constexpr int n = int(sizeof(palette) / sizeof(palette[0]));
    return palette[class_id % n];
}

inline SceneSpec generate_scene(const SynthConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    SceneSpec scene;
    scene.room_extents = cfg.room_extents;
    scene.seed = seed;

    std::uniform_int_distribution<int> count_dist(cfg.min_objects, cfg.max_objects);
    int count = count_dist(rng);
    std::uniform_int_distribution<int> class_dist(1, cfg.n_classes - 1);
    std::normal_distribution<double> jitter(0.0, cfg.albedo_jitter);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    for (int k = 0; k < count; ++k) {
        int class_id = class_dist(rng);
        bool placed = false;
        for (int attempt = 0; attempt < cfg.max_attempts && !placed; ++attempt) {
            Vec3 size, center;
            bool fits = true;
            for (int i = 0; i < 3; ++i) {
                size[i] = cfg.min_size[i] + unit(rng) * (cfg.max_size[i] - cfg.min_size[i]);
                double lo = cfg.wall_margin + size[i] * 0.5;
                double hi = cfg.room_extents[i] - cfg.wall_margin - size[i] * 0.5;
                if (hi <= lo) { fits = false; break; }
                center[i] = lo + unit(rng) * (hi - lo);
            }
            if (!fits) continue;
            Box3 box{center, size};
            // enforce a clear gap between objects to limit mutual occlusion
            Box3 inflated{center, {size[0] + cfg.spacing, size[1] + cfg.spacing,
                                   size[2] + cfg.spacing}};
            bool overlap = false;
            for (const auto& o : scene.objects)
                if (box_intersection_volume(inflated, o.box) > 0.0) { overlap = true; break; }
            if (overlap) continue;
            SceneObject obj;
            obj.class_id = class_id;
            obj.box = box;
            auto base = class_base_albedo(class_id);
            for (int i = 0; i < 3; ++i) {
                double a = base[std::size_t(i)] + jitter(rng);
                obj.albedo[std::size_t(i)] = float(std::clamp(a, 0.0, 1.0));
            }
            scene.objects.push_back(obj);
            placed = true;
        }
        if (!placed) throw PlacementFailure{};
    }
    return scene;
}

namespace detail {
// Entry t of a ray into an AABB (z-depth parametrization, dir.z scaled so
// t is z-depth when dir comes from the pinhole model). Returns false on miss.
inline bool ray_aabb(const Vec3& o, const Vec3& d, const Vec3& mn, const Vec3& mx,
                     double& t_entry, double& t_exit) {
    double t0 = -std::numeric_limits<double>::infinity();
    double t1 = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 3; ++i) {
        if (std::fabs(d[i]) < 1e-15) {
            if (o[i] < mn[i] || o[i] > mx[i]) return false;
            continue;
        }
        double a = (mn[i] - o[i]) / d[i];
        double b = (mx[i] - o[i]) / d[i];
        if (a > b) std::swap(a, b);
        t0 = std::max(t0, a);
        t1 = std::min(t1, b);
    }
    if (t1 < t0) return false;
    t_entry = t0;
    t_exit = t1;
    return true;
}
} // namespace detail

// Per-pixel ray casting against all objects and the room walls. Depth is
// z-depth of the nearest hit; miss keeps the 0 sentinel.
inline CameraView render_view(const SceneSpec& scene, const Intrinsics& intr, const Pose& pose,
                              int height, int width) {
    CameraView view;
    view.intrinsics = intr;
    view.pose = pose;
    view.depth = Image(height, width, 1);
    view.color = Image(height, width, 3);
    view.instance.assign(std::size_t(height) * width, -1);

    const Vec3 room_mn{0, 0, 0};
    const Vec3 room_mx = scene.room_extents;
    parallel_for(std::size_t(height), [&](std::size_t row) {
        for (int col = 0; col < width; ++col) {
            double u = col + 0.5, v = double(row) + 0.5;
            // camera-space direction with unit z so that ray parameter = z-depth
            Vec3 dc{(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0};
            Vec3 dw = pose.to_world(dc) - pose.t;
            double best_t = std::numeric_limits<double>::infinity();
            int best_obj = -1;
            for (std::size_t k = 0; k < scene.objects.size(); ++k) {
                double t0, t1;
                if (detail::ray_aabb(pose.t, dw, scene.objects[k].box.min_corner(),
                                     scene.objects[k].box.max_corner(), t0, t1) &&
                    t1 > 1e-9) {
                    double t = t0 > 1e-9 ? t0 : t1; // inside an object: use exit face
                    if (t < best_t) { best_t = t; best_obj = int(k); }
                }
            }
            // room interior: the exit intersection is the wall surface
            double rt0, rt1;
            if (detail::ray_aabb(pose.t, dw, room_mn, room_mx, rt0, rt1) && rt1 > 1e-9 && rt1 < best_t) {
                best_t = rt1;
                best_obj = -1;
            }
            if (!std::isfinite(best_t)) continue;
            view.depth.at(int(row), col) = float(best_t);
            std::array<float, 3> a =
                best_obj >= 0 ? scene.objects[std::size_t(best_obj)].albedo : class_base_albedo(0);
            for (int c = 0; c < 3; ++c) view.color.at(int(row), col, c) = a[std::size_t(c)];
            view.instance[row * std::size_t(width) + std::size_t(col)] = best_obj;
        }
    });
    return view;
}

// Deterministic orbit trajectory: cameras on a jittered circle inside the
// room near the ceiling, all looking toward the room center.
inline std::vector<std::pair<Intrinsics, Pose>> orbit_trajectory(const SceneSpec& scene, int n_views,
                                                                 int height, int width,
                                                                 std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> jit(-0.05, 0.05);
    std::vector<std::pair<Intrinsics, Pose>> out;
    Vec3 center = scene.room_extents * 0.5;
    double radius = 0.30 * std::min(scene.room_extents[0], scene.room_extents[1]);
    double h = 0.95 * scene.room_extents[2];
    Intrinsics intr;
    intr.fx = intr.fy = 0.55 * width; // ~85 deg horizontal FoV
    intr.cx = width * 0.5;
    intr.cy = height * 0.5;
    for (int k = 0; k < n_views; ++k) {
        double ang = 2.0 * M_PI * k / n_views + jit(rng);
        Vec3 eye{center[0] + radius * std::cos(ang) + jit(rng) * radius,
                 center[1] + radius * std::sin(ang) + jit(rng) * radius,
                 h + jit(rng) * scene.room_extents[2] * 0.2};
        Vec3 target{center[0], center[1], center[2] * 0.3};
        out.emplace_back(intr, Pose::look_at(eye, target));
    }
    return out;
}

// Weighted-running-average TSDF fusion with constant per-observation weight 1.
// Signed distance s = (depth - voxel camera z) / voxel_size; updates apply
// only when s > -tau, stored values are clamped to [-tau, tau].
inline TsdfGrid fuse_tsdf(const std::vector<CameraView>& views, const GridMeta& meta, double tau = 3.0) {
    if (views.empty()) throw std::invalid_argument("fuse_tsdf: no views");
    if (tau < 1.0) throw std::invalid_argument("fuse_tsdf: tau must be >= 1");
    TsdfGrid grid(meta, tau);
    parallel_for(meta.voxel_count(), [&](std::size_t flat) {
        int x = int(flat / (std::size_t(meta.dims[1]) * meta.dims[2]));
        int y = int((flat / std::size_t(meta.dims[2])) % std::size_t(meta.dims[1]));
        int z = int(flat % std::size_t(meta.dims[2]));
        Vec3 pw = voxel_center_world(x, y, z, meta);
        double sum = 0.0, weight = 0.0;
        for (const auto& view : views) {
            Vec3 uvz = view.project(pw);
            if (uvz[2] <= 1e-9) continue;
            int col = int(std::floor(uvz[0]));
            int row = int(std::floor(uvz[1]));
            if (row < 0 || col < 0 || row >= view.height() || col >= view.width()) continue;
            double d = view.depth.at(row, col);
            if (d <= 0.0) continue;
            double s = (d - uvz[2]) / meta.voxel_size;
            if (s <= -tau) continue;
            sum += std::min(s, tau);
            weight += 1.0;
        }
        if (weight > 0.0) {
            grid.values[flat] = float(std::clamp(sum / weight, -tau, tau));
            grid.weights[flat] = float(weight);
        }
    });
    return grid;
}

// Ground truth: per object, the mask is every voxel whose center lies inside
// the object's world box and that is observed near-surface; the box is the
// tight hull of the mask. Objects with empty masks are dropped.
inline std::vector<InstanceAnnotation> ground_truth(const SceneSpec& scene, const GridMeta& meta,
                                                    const TsdfGrid& fused) {
    std::vector<InstanceAnnotation> out;
    for (const auto& obj : scene.objects) {
        InstanceAnnotation ann;
        ann.class_id = obj.class_id;
        Vec3i mn{meta.dims[0], meta.dims[1], meta.dims[2]}, mx{0, 0, 0};
        for (int x = 0; x < meta.dims[0]; ++x)
            for (int y = 0; y < meta.dims[1]; ++y)
                for (int z = 0; z < meta.dims[2]; ++z) {
                    if (!obj.box.contains(voxel_center_world(x, y, z, meta))) continue;
                    std::size_t i = meta.index(x, y, z);
                    if (fused.weights[i] <= 0.0f || std::fabs(fused.values[i]) >= fused.truncation)
                        continue;
                    ann.mask.push_back({x, y, z});
                    mn = {std::min(mn[0], x), std::min(mn[1], y), std::min(mn[2], z)};
                    mx = {std::max(mx[0], x), std::max(mx[1], y), std::max(mx[2], z)};
                }
        if (ann.mask.empty()) continue;
        ann.box = Box3::from_min_max({double(mn[0]), double(mn[1]), double(mn[2])},
                                     {double(mx[0] + 1), double(mx[1] + 1), double(mx[2] + 1)});
        out.push_back(std::move(ann));
    }
    return out;
}

} // namespace sis
