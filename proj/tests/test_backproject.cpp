#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <random>

#include "sis/backproject.hpp"
#include "sis/synth.hpp"

using namespace sis;

namespace {

FeatureMap2D manual_fmap(int C, int h, int w, int down, std::mt19937_64& rng, bool leaf = false) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    nn::Tensor t({C, h, w});
    for (auto& v : t.data) v = u(rng);
    FeatureMap2D f;
    f.channels = C;
    f.height = h;
    f.width = w;
    f.source_height = h * down;
    f.source_width = w * down;
    f.var = leaf ? nn::leaf(std::move(t)) : nn::constant(std::move(t));
    return f;
}

CameraView random_view(std::mt19937_64& rng, int h, int w) {
    std::uniform_real_distribution<double> u(0.2, 1.3), z(0.8, 1.4), ang(0.0, 2 * M_PI);
    CameraView view;
    view.intrinsics = {0.9 * w, 0.9 * w, w * 0.5, h * 0.5};
    double a = ang(rng);
    Vec3 eye{0.75 + 0.6 * std::cos(a), 0.75 + 0.6 * std::sin(a), z(rng)};
    view.pose = Pose::look_at(eye, {0.75, 0.75, 0.3});
    view.depth = Image(h, w, 1);
    std::uniform_real_distribution<double> d(0.3, 1.6);
    for (auto& v : view.depth.data) v = float(d(rng));
    view.color = Image(h, w, 3);
    view.instance.assign(std::size_t(h) * w, -1);
    return view;
}

} // namespace

TEST_CASE("each written voxel contains its generating 3D point") {
    std::mt19937_64 rng(21);
    GridMeta meta({32, 32, 16}, 0.0469, {0, 0, 0});
    const int down = 8, h = 6, w = 6;
    int written_total = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        CameraView view = random_view(rng, h * down, w * down);
        FeatureMap2D fmap = manual_fmap(2, h, w, down, rng);
        FeatureVolumeVar vol = backproject(fmap, view, meta);
        // recompute the geometry independently per feature cell
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                int row = i * down + down / 2, col = j * down + down / 2;
                double d = view.depth.at(row, col);
                Vec3 pw = view.unproject(col + 0.5, row + 0.5, d);
                Vec3 v = world_to_voxel(pw, meta);
                if (!in_voxel_bounds(v, meta)) continue;
                int vx = int(v[0]), vy = int(v[1]), vz = int(v[2]);
                // the voxel's world bounds contain pw
                Vec3 mn = voxel_to_world({double(vx), double(vy), double(vz)}, meta);
                Vec3 mx = voxel_to_world({vx + 1.0, vy + 1.0, vz + 1.0}, meta);
                for (int k = 0; k < 3; ++k) {
                    CHECK(pw[k] >= mn[k]);
                    CHECK(pw[k] < mx[k]);
                }
                // the written value is at least this cell's feature (max rule)
                std::size_t vox = meta.index(vx, vy, vz);
                double cell_val = fmap.var->value.data[std::size_t(i) * w + j];
                CHECK(vol.var->value.data[vox] >= cell_val);
                ++written_total;
            }
    }
    CHECK(written_total > 1000);
}

TEST_CASE("colliding cells keep the per-channel max") {
    // two feature cells mapping to the same voxel: constant depth, tiny grid
    std::mt19937_64 rng(22);
    GridMeta meta({2, 2, 2}, 10.0, {-10, -10, -5}); // huge voxels force collisions
    CameraView view = random_view(rng, 16, 16);
    for (auto& d : view.depth.data) d = 1.0f;
    FeatureMap2D fmap = manual_fmap(1, 2, 2, 8, rng);
    FeatureVolumeVar vol = backproject(fmap, view, meta);
    // all four cells land somewhere; each voxel value equals the max over its cells
    std::map<std::size_t, double> best;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            int row = i * 8 + 4, col = j * 8 + 4;
            Vec3 v = world_to_voxel(view.unproject(col + 0.5, row + 0.5, 1.0), meta);
            if (!in_voxel_bounds(v, meta)) continue;
            std::size_t vox = meta.index(int(v[0]), int(v[1]), int(v[2]));
            double val = fmap.var->value.data[std::size_t(i) * 2 + j];
            auto it = best.find(vox);
            if (it == best.end() || val > it->second) best[vox] = val;
        }
    REQUIRE_FALSE(best.empty());
    for (const auto& [vox, val] : best) CHECK(vol.var->value.data[vox] == val);
}

TEST_CASE("backproject gradient passes a finite-difference check") {
    std::mt19937_64 rng(23);
    GridMeta meta({8, 8, 8}, 0.2, {0, 0, 0});
    CameraView view = random_view(rng, 16, 16);
    FeatureMap2D fmap = manual_fmap(2, 2, 2, 8, rng, /*leaf=*/true);
    auto r = nn::grad_check([&] { return nn::sum(backproject(fmap, view, meta).var); },
                            {fmap.var});
    CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("backproject validates depth resolution") {
    std::mt19937_64 rng(24);
    GridMeta meta({4, 4, 4}, 0.5);
    CameraView view = random_view(rng, 8, 8);
    FeatureMap2D fmap = manual_fmap(1, 2, 2, 8, rng); // expects 16x16 source
    CHECK_THROWS_AS(backproject(fmap, view, meta), nn::ShapeMismatch);
}

TEST_CASE("view pooling satisfies semilattice laws") {
    std::mt19937_64 rng(25);
    GridMeta meta({4, 4, 4}, 0.5);
    auto vol = [&](std::uint64_t) {
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        nn::Tensor t({2, 4, 4, 4});
        for (auto& v : t.data) v = u(rng);
        return FeatureVolumeVar{meta, 2, nn::constant(std::move(t))};
    };
    FeatureVolumeVar a = vol(1), b = vol(2), c = vol(3);
    auto data = [](const FeatureVolumeVar& v) { return v.var->value.data; };
    // idempotent
    CHECK(data(view_pool({a, a})) == data(a));
    // commutative
    CHECK(data(view_pool({a, b})) == data(view_pool({b, a})));
    // associative
    CHECK(data(view_pool({view_pool({a, b}), c})) == data(view_pool({a, view_pool({b, c})})));
    // identity: pooling with -inf-like volume (all very negative) returns the other
    nn::Tensor bot({2, 4, 4, 4}, std::vector<double>(128, -1e30));
    FeatureVolumeVar bottom{meta, 2, nn::constant(std::move(bot))};
    CHECK(data(view_pool({a, bottom})) == data(a));
}

TEST_CASE("view pooling rejects mismatched grids") {
    GridMeta m1({4, 4, 4}, 0.5), m2({4, 4, 2}, 0.5);
    FeatureVolumeVar a{m1, 1, nn::constant(nn::Tensor({1, 4, 4, 4}))};
    FeatureVolumeVar b{m2, 1, nn::constant(nn::Tensor({1, 4, 4, 2}))};
    CHECK_THROWS_AS(view_pool({a, b}), MetaMismatch);
    CHECK_THROWS_AS(view_pool({}), MetaMismatch);
}

TEST_CASE("encoder halves resolution three times") {
    std::mt19937_64 rng(26);
    nn::ParamStore store;
    Encoder2D enc(store, "enc", 4, 6, rng);
    Image img(64, 64, 3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : img.data) v = float(u(rng));
    FeatureMap2D f = enc.forward(img);
    CHECK(f.channels == 6);
    CHECK(f.height == 8);
    CHECK(f.width == 8);
    CHECK(f.var->value.shape == std::vector<int>{6, 8, 8});
    Image odd(60, 64, 3);
    CHECK_THROWS_AS(enc.forward(odd), nn::ShapeMismatch);
}
