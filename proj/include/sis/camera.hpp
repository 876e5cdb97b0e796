#pragma once

// Pinhole camera model: intrinsics, rigid camera-to-world pose, and the
// depth/color images of one RGB-D frame. Depth is z-depth along the optical
// axis, 0 marks an invalid pixel.

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "sis/grid.hpp"

namespace sis {

struct Intrinsics {
    double fx = 1, fy = 1, cx = 0, cy = 0;
};

// Rigid camera-to-world transform: rotation columns + translation.
struct Pose {
    std::array<Vec3, 3> rot{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}; // rot[i] = column i
    Vec3 t{0, 0, 0};

    Vec3 to_world(const Vec3& pc) const {
        return {rot[0][0] * pc[0] + rot[1][0] * pc[1] + rot[2][0] * pc[2] + t[0],
                rot[0][1] * pc[0] + rot[1][1] * pc[1] + rot[2][1] * pc[2] + t[1],
                rot[0][2] * pc[0] + rot[1][2] * pc[1] + rot[2][2] * pc[2] + t[2]};
    }
    Vec3 to_camera(const Vec3& pw) const {
        Vec3 d = pw - t; // R^T d
        return {rot[0][0] * d[0] + rot[0][1] * d[1] + rot[0][2] * d[2],
                rot[1][0] * d[0] + rot[1][1] * d[1] + rot[1][2] * d[2],
                rot[2][0] * d[0] + rot[2][1] * d[1] + rot[2][2] * d[2]};
    }

    // camera at `eye` with +z looking toward `target`, `up` approximately +z world
    static Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = {0, 0, 1}) {
        auto norm = [](const Vec3& v) {
            double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
            if (n == 0) throw std::invalid_argument("look_at: degenerate direction");
            return Vec3{v[0] / n, v[1] / n, v[2] / n};
        };
        auto cross = [](const Vec3& a, const Vec3& b) {
            return Vec3{a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
        };
        Vec3 fwd = norm(target - eye);
        Vec3 right = norm(cross(fwd, up));
        Vec3 down = cross(fwd, right); // completes right-handed (x right, y down, z forward)
        Pose p;
        p.rot = {right, down, fwd};
        p.t = eye;
        return p;
    }
};

struct Image {
    int height = 0, width = 0, channels = 1;
    std::vector<float> data; // row-major, channel-interleaved

    Image() = default;
    Image(int h, int w, int c = 1) : height(h), width(w), channels(c), data(std::size_t(h) * w * c, 0.0f) {}
    float at(int row, int col, int c = 0) const { return data[(std::size_t(row) * width + col) * channels + c]; }
    float& at(int row, int col, int c = 0) { return data[(std::size_t(row) * width + col) * channels + c]; }
};

struct CameraView {
    Intrinsics intrinsics;
    Pose pose;
    Image depth;         // H x W, meters, 0 = invalid
    Image color;         // H x W x 3, [0,1]
    std::vector<int> instance; // H x W instance id, -1 = none/background

    int height() const { return depth.height; }
    int width() const { return depth.width; }

    // pixel (u,v) + z-depth -> world point
    Vec3 unproject(double u, double v, double z) const {
        Vec3 pc{(u - intrinsics.cx) / intrinsics.fx * z, (v - intrinsics.cy) / intrinsics.fy * z, z};
        return pose.to_world(pc);
    }
    // world point -> (u, v, z-depth)
    Vec3 project(const Vec3& pw) const {
        Vec3 pc = pose.to_camera(pw);
        return {intrinsics.fx * pc[0] / pc[2] + intrinsics.cx,
                intrinsics.fy * pc[1] / pc[2] + intrinsics.cy, pc[2]};
    }
};

} // namespace sis
