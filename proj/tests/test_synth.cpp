#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "sis/synth.hpp"

using namespace sis;

namespace {

bool inside(const Box3& b, const Vec3& p) { return b.contains(p); }

// Independent 1 mm ray-march depth oracle. Steps along the pixel ray (unit
// z-depth parameterization) until entering an object or leaving the room.
double march_depth(const SceneSpec& scene, const CameraView& view, int row, int col,
                   double step = 0.001, double t_max = 10.0) {
    Vec3 dir = view.unproject(col + 0.5, row + 0.5, 1.0) - view.pose.t;
    Box3 room = Box3::from_min_max({0, 0, 0}, scene.room_extents);
    for (double t = step; t < t_max; t += step) {
        Vec3 p = view.pose.t + dir * t;
        for (const auto& o : scene.objects)
            if (inside(o.box, p)) return t;
        if (!inside(room, p)) return t;
    }
    return 0.0;
}

bool neighborhood_uniform(const CameraView& view, int row, int col) {
    int id = view.instance[std::size_t(row) * view.width() + col];
    for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
            int r = row + dr, c = col + dc;
            if (r < 0 || c < 0 || r >= view.height() || c >= view.width()) return false;
            if (view.instance[std::size_t(r) * view.width() + c] != id) return false;
        }
    return true;
}

} // namespace

TEST_CASE("scene generation is deterministic and respects constraints") {
    SynthConfig cfg;
    SceneSpec a = generate_scene(cfg, 42), b = generate_scene(cfg, 42), c = generate_scene(cfg, 43);
    REQUIRE(a.objects.size() == b.objects.size());
    for (std::size_t i = 0; i < a.objects.size(); ++i) {
        CHECK(a.objects[i].box.center == b.objects[i].box.center);
        CHECK(a.objects[i].class_id == b.objects[i].class_id);
        CHECK(a.objects[i].albedo == b.objects[i].albedo);
    }
    // different seeds differ somewhere
    bool same = a.objects.size() == c.objects.size();
    if (same)
        for (std::size_t i = 0; i < a.objects.size(); ++i)
            same = same && a.objects[i].box.center == c.objects[i].box.center;
    CHECK_FALSE(same);

    for (const auto& o : a.objects) {
        CHECK(o.class_id >= 1);
        CHECK(o.class_id < cfg.n_classes);
        Vec3 mn = o.box.min_corner(), mx = o.box.max_corner();
        for (int i = 0; i < 3; ++i) {
            CHECK(mn[i] >= cfg.wall_margin - 1e-12);
            CHECK(mx[i] <= cfg.room_extents[i] - cfg.wall_margin + 1e-12);
        }
    }
    // no overlap between objects
    for (std::size_t i = 0; i < a.objects.size(); ++i)
        for (std::size_t j = i + 1; j < a.objects.size(); ++j)
            CHECK(box_intersection_volume(a.objects[i].box, a.objects[j].box) == 0.0);
}

TEST_CASE("object albedo is class-correlated") {
    SynthConfig cfg;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        SceneSpec s = generate_scene(cfg, seed);
        for (const auto& o : s.objects) {
            auto base = class_base_albedo(o.class_id);
            for (int c = 0; c < 3; ++c)
                CHECK(std::fabs(o.albedo[std::size_t(c)] - base[std::size_t(c)]) <=
                      5.0f * float(cfg.albedo_jitter));
        }
    }
}

TEST_CASE("rendered depth matches a 1mm ray-march oracle away from silhouettes") {
    SynthConfig cfg;
    SceneSpec scene = generate_scene(cfg, 11);
    auto traj = orbit_trajectory(scene, 2, 48, 48, 11);
    for (const auto& [intr, pose] : traj) {
        CameraView view = render_view(scene, intr, pose, 48, 48);
        int checked = 0;
        for (int row = 1; row < 48; row += 3)
            for (int col = 1; col < 48; col += 3) {
                if (!neighborhood_uniform(view, row, col)) continue;
                double d = view.depth.at(row, col);
                REQUIRE(d > 0.0);
                double m = march_depth(scene, view, row, col);
                CHECK(std::fabs(d - m) <= 0.002);
                ++checked;
            }
        CHECK(checked > 50);
    }
}

TEST_CASE("rendered color equals the hit object's albedo") {
    SynthConfig cfg;
    SceneSpec scene = generate_scene(cfg, 3);
    auto traj = orbit_trajectory(scene, 1, 32, 32, 3);
    CameraView view = render_view(scene, traj[0].first, traj[0].second, 32, 32);
    for (int row = 0; row < 32; ++row)
        for (int col = 0; col < 32; ++col) {
            int id = view.instance[std::size_t(row) * 32 + col];
            auto want = id >= 0 ? scene.objects[std::size_t(id)].albedo : class_base_albedo(0);
            for (int c = 0; c < 3; ++c) CHECK(view.color.at(row, col, c) == want[std::size_t(c)]);
        }
}

TEST_CASE("single-plane fusion matches the analytic clamped signed distance") {
    // A straight-down camera sees the floor plane z = p at constant z-depth
    // H - p, so the fused value at height z must be clamp((z - p)/vs, -tau, tau)
    // wherever observed.
    const double plane_z = 0.21, H = 2.0, vs = 0.05, tau = 3.0;
    GridMeta meta({16, 16, 10}, vs, {0, 0, 0});
    CameraView view;
    view.intrinsics = {60.0, 60.0, 32.0, 32.0};
    view.pose = Pose::look_at({0.4, 0.4, H}, {0.4, 0.4, 0.0}, {0, 1, 0});
    view.depth = Image(64, 64, 1);
    for (auto& d : view.depth.data) d = float(H - plane_z);
    view.color = Image(64, 64, 3);
    view.instance.assign(64 * 64, -1);

    TsdfGrid fused = fuse_tsdf({view}, meta, tau);
    int observed = 0;
    for (int x = 0; x < 16; ++x)
        for (int y = 0; y < 16; ++y)
            for (int z = 0; z < 10; ++z) {
                CHECK(std::fabs(fused.value(x, y, z)) <= float(tau));
                if (!fused.observed(x, y, z)) continue;
                double zc = (z + 0.5) * vs;
                double analytic = std::clamp((zc - plane_z) / vs, -tau, tau);
                CHECK(std::fabs(fused.value(x, y, z) - analytic) <= 0.1);
                ++observed;
            }
    CHECK(observed > 1000);
    // voxels far behind the plane stay unobserved
    CHECK_FALSE(fused.observed(8, 8, 0)); // z center 0.025, s = (0.025-0.21)/0.05 = -3.7
}

TEST_CASE("fusion is invariant to view order") {
    SynthConfig cfg;
    SceneSpec scene = generate_scene(cfg, 5);
    auto traj = orbit_trajectory(scene, 4, 48, 48, 5);
    std::vector<CameraView> views;
    for (const auto& [intr, pose] : traj) views.push_back(render_view(scene, intr, pose, 48, 48));
    GridMeta meta({32, 32, 16}, 0.0469, {0, 0, 0});
    TsdfGrid a = fuse_tsdf(views, meta);
    std::reverse(views.begin(), views.end());
    TsdfGrid b = fuse_tsdf(views, meta);
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        CHECK(std::fabs(a.values[i] - b.values[i]) < 1e-6);
        CHECK(a.weights[i] == b.weights[i]);
    }
}

TEST_CASE("fusion input validation") {
    GridMeta meta({4, 4, 4}, 0.1);
    CHECK_THROWS_AS(fuse_tsdf({}, meta), std::invalid_argument);
    CameraView v;
    v.depth = Image(4, 4, 1);
    CHECK_THROWS_AS(fuse_tsdf({v}, meta, 0.5), std::invalid_argument);
}

TEST_CASE("ground truth masks lie inside their boxes and near the surface") {
    SynthConfig cfg;
    SceneSpec scene = generate_scene(cfg, 9);
    auto traj = orbit_trajectory(scene, 6, 64, 64, 9);
    std::vector<CameraView> views;
    for (const auto& [intr, pose] : traj) views.push_back(render_view(scene, intr, pose, 64, 64));
    GridMeta meta({32, 32, 16}, 0.0469, {0, 0, 0});
    TsdfGrid fused = fuse_tsdf(views, meta);
    auto anns = ground_truth(scene, meta, fused);
    CHECK_FALSE(anns.empty());
    for (const auto& ann : anns) {
        CHECK_FALSE(ann.mask.empty());
        CHECK(ann.class_id >= 1);
        for (const auto& v : ann.mask) {
            // voxel center inside some object with this class
            Vec3 c = voxel_center_world(v[0], v[1], v[2], meta);
            bool in_any = false;
            for (const auto& o : scene.objects)
                in_any = in_any || (o.class_id == ann.class_id && o.box.contains(c));
            CHECK(in_any);
            CHECK(fused.observed(v[0], v[1], v[2]));
            CHECK(std::fabs(fused.value(v[0], v[1], v[2])) < float(fused.truncation));
            // inside the tight hull box
            CHECK(ann.box.contains({v[0] + 0.5, v[1] + 0.5, v[2] + 0.5}));
        }
    }
}

TEST_CASE("orbit trajectory is deterministic per seed") {
    SynthConfig cfg;
    SceneSpec scene = generate_scene(cfg, 2);
    auto a = orbit_trajectory(scene, 4, 32, 32, 7);
    auto b = orbit_trajectory(scene, 4, 32, 32, 7);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].second.t == b[i].second.t);
}
