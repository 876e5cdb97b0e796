#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "sis/grid.hpp"

using namespace sis;

namespace {

// Monte-Carlo-free IoU oracle for integer-corner boxes: count unit voxels.
double voxel_count_iou(const Box3& a, const Box3& b) {
    auto count_in = [](const Box3& box, int x, int y, int z) {
        Vec3 c{x + 0.5, y + 0.5, z + 0.5};
        return box.contains(c);
    };
    Vec3 amn = a.min_corner(), bmn = b.min_corner();
    Vec3 amx = a.max_corner(), bmx = b.max_corner();
    int lo[3], hi[3];
    for (int i = 0; i < 3; ++i) {
        lo[i] = int(std::floor(std::min(amn[i], bmn[i])));
        hi[i] = int(std::ceil(std::max(amx[i], bmx[i])));
    }
    long inter = 0, uni = 0;
    for (int x = lo[0]; x < hi[0]; ++x)
        for (int y = lo[1]; y < hi[1]; ++y)
            for (int z = lo[2]; z < hi[2]; ++z) {
                bool ia = count_in(a, x, y, z), ib = count_in(b, x, y, z);
                inter += ia && ib;
                uni += ia || ib;
            }
    return uni == 0 ? 0.0 : double(inter) / double(uni);
}

Box3 random_int_box(std::mt19937_64& rng, int span) {
    std::uniform_int_distribution<int> pos(0, span), ext(1, 6);
    Vec3 mn{double(pos(rng)), double(pos(rng)), double(pos(rng))};
    Vec3 sz{double(ext(rng)), double(ext(rng)), double(ext(rng))};
    return Box3::from_min_max(mn, mn + sz);
}

} // namespace

TEST_CASE("grid index layout is x-major with z fastest") {
    GridMeta m({3, 4, 5}, 1.0);
    CHECK(m.index(0, 0, 0) == 0);
    CHECK(m.index(0, 0, 1) == 1);
    CHECK(m.index(0, 1, 0) == 5);
    CHECK(m.index(1, 0, 0) == 20);
    CHECK(m.index(2, 3, 4) == m.voxel_count() - 1);
}

TEST_CASE("grid meta rejects bad arguments") {
    CHECK_THROWS_AS(GridMeta({0, 1, 1}, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(GridMeta({1, 1, 1}, 0.0), std::invalid_argument);
}

TEST_CASE("world/voxel transform roundtrips to 1e-9") {
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> u(-20.0, 20.0);
    GridMeta m({32, 32, 16}, 0.0469, {u(rng), u(rng), u(rng)});
    for (int t = 0; t < 1000; ++t) {
        Vec3 p{u(rng), u(rng), u(rng)};
        Vec3 back = voxel_to_world(world_to_voxel(p, m), m);
        for (int i = 0; i < 3; ++i) CHECK(std::fabs(back[i] - p[i]) < 1e-9);
    }
}

TEST_CASE("voxel center of the first voxel") {
    GridMeta m({4, 4, 4}, 2.0, {10.0, 0.0, -4.0});
    Vec3 c = voxel_center_world(0, 0, 0, m);
    CHECK(c[0] == Catch::Approx(11.0));
    CHECK(c[1] == Catch::Approx(1.0));
    CHECK(c[2] == Catch::Approx(-3.0));
}

TEST_CASE("box iou matches a voxel-counting oracle on integer boxes") {
    std::mt19937_64 rng(7);
    for (int t = 0; t < 300; ++t) {
        Box3 a = random_int_box(rng, 8), b = random_int_box(rng, 8);
        CHECK(std::fabs(box_iou(a, b) - voxel_count_iou(a, b)) < 1e-6);
    }
}

TEST_CASE("box iou basic identities") {
    Box3 a({2, 2, 2}, {2, 2, 2});
    CHECK(box_iou(a, a) == Catch::Approx(1.0));
    Box3 b({10, 10, 10}, {2, 2, 2});
    CHECK(box_iou(a, b) == 0.0);
    // touching boxes share a face, zero volume intersection
    Box3 c({4, 2, 2}, {2, 2, 2});
    CHECK(box_iou(a, c) == 0.0);
}

TEST_CASE("box volume class splits strictly below the threshold") {
    double vs = 0.1; // 1e-3 m^3 per voxel
    Box3 exact({0, 0, 0}, {10, 10, 10}); // exactly 1 m^3
    CHECK(box_volume_class(exact, vs, 1.0) == BoxSizeClass::Large);
    Box3 below({0, 0, 0}, {10, 10, 9.99});
    CHECK(box_volume_class(below, vs, 1.0) == BoxSizeClass::Small);
}

TEST_CASE("enclosing region floors/ceils and clamps") {
    GridMeta m({8, 8, 8}, 1.0);
    VoxelRegion r = enclosing_region(Box3::from_min_max({1.2, -3.0, 6.5}, {3.7, 2.1, 11.0}), m);
    CHECK(r.min == Vec3i{1, 0, 6});
    CHECK(r.max == Vec3i{4, 3, 8});
    CHECK(r.volume() == 3u * 3u * 2u);
    VoxelRegion e = enclosing_region(Box3::from_min_max({9, 9, 9}, {10, 10, 10}), m);
    CHECK(e.empty());
}

TEST_CASE("crop re-embeds into the same world coordinates") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    GridMeta m({10, 9, 8}, 0.5, {1, 2, 3});
    FeatureVolume vol(m, 3);
    for (auto& v : vol.data) v = float(u(rng));
    Box3 box = Box3::from_min_max({2.3, 1.1, 0.4}, {7.9, 6.0, 5.5});
    FeatureVolume sub = crop_volume(vol, box);
    VoxelRegion r = enclosing_region(box, m);
    REQUIRE(sub.meta.dims == r.extent());
    // each cropped voxel equals the source voxel at the same world position
    for (int c = 0; c < 3; ++c)
        for (int x = 0; x < sub.meta.dims[0]; ++x)
            for (int y = 0; y < sub.meta.dims[1]; ++y)
                for (int z = 0; z < sub.meta.dims[2]; ++z) {
                    Vec3 w = voxel_center_world(x, y, z, sub.meta);
                    Vec3 src = world_to_voxel(w, m);
                    int sx = int(std::floor(src[0])), sy = int(std::floor(src[1])),
                        sz = int(std::floor(src[2]));
                    CHECK(sub.at(c, x, y, z) == vol.at(c, sx, sy, sz));
                }
    CHECK_THROWS_AS(crop_volume(vol, Box3::from_min_max({20, 20, 20}, {21, 21, 21})), EmptyCrop);
}

TEST_CASE("mask iou by sorted-set intersection") {
    std::vector<Vec3i> a{{0, 0, 0}, {0, 0, 1}, {0, 1, 0}, {1, 0, 0}};
    std::vector<Vec3i> b{{0, 0, 1}, {0, 1, 0}, {5, 5, 5}};
    CHECK(mask_iou(a, b) == Catch::Approx(2.0 / 5.0));
    CHECK(mask_iou(a, a) == Catch::Approx(1.0));
    CHECK(mask_iou(a, {}) == 0.0);
}

TEST_CASE("tsdf grid starts unobserved at +truncation") {
    TsdfGrid g(GridMeta({2, 2, 2}, 1.0), 3.0);
    CHECK_FALSE(g.observed(0, 0, 0));
    CHECK(g.value(1, 1, 1) == 3.0f);
}
