#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "sis/experiment.hpp"
#include "sis/pipeline.hpp"

using namespace sis;

TEST_CASE("extract_chunks tiles the scene and clips annotations") {
    GridMeta meta({64, 32, 16}, 1.0, {0, 0, 0});
    TsdfGrid scene(meta);
    std::mt19937_64 rng(51);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (auto& v : scene.values) v = float(u(rng));
    for (auto& w : scene.weights) w = 1.0f;

    std::vector<InstanceAnnotation> anns(2);
    // fully inside the first chunk
    anns[0].class_id = 1;
    anns[0].box = Box3::from_min_max({4, 4, 4}, {10, 10, 10});
    for (int x = 4; x < 10; ++x)
        for (int y = 4; y < 10; ++y)
            for (int z = 4; z < 10; ++z) anns[0].mask.push_back({x, y, z});
    // straddles the chunk boundary at x=32, mostly in the second chunk
    anns[1].class_id = 2;
    anns[1].box = Box3::from_min_max({30, 4, 4}, {40, 10, 10});
    for (int x = 30; x < 40; ++x)
        for (int y = 4; y < 10; ++y)
            for (int z = 4; z < 10; ++z) anns[1].mask.push_back({x, y, z});

    auto chunks = extract_chunks(scene, anns, {32, 32, 16}, {32, 32, 16});
    REQUIRE(chunks.size() == 2);
    // chunk 0: full object 1; object 2 has only 2/10 slabs inside (< 50%) -> dropped
    REQUIRE(chunks[0].annotations.size() == 1);
    CHECK(chunks[0].annotations[0].class_id == 1);
    CHECK(chunks[0].annotations[0].mask.size() == anns[0].mask.size());
    // chunk 1: object 2 keeps 8/10 slabs, re-expressed in local coordinates
    REQUIRE(chunks[1].annotations.size() == 1);
    const auto& local = chunks[1].annotations[0];
    CHECK(local.class_id == 2);
    CHECK(local.mask.size() == 8u * 6 * 6);
    for (const auto& v : local.mask) {
        CHECK(v[0] >= 0);
        CHECK(v[0] < 8); // x 32..40 -> local 0..8
    }
    CHECK(local.box.min_corner() == Vec3{0, 4, 4});
    CHECK(local.box.max_corner() == Vec3{8, 10, 10});
    // voxel payloads copied correctly
    CHECK(chunks[1].tsdf.value(0, 0, 0) == scene.value(32, 0, 0));
    CHECK(chunks[1].tsdf.meta.origin == Vec3{32, 0, 0});

    CHECK_THROWS_AS(extract_chunks(scene, anns, {128, 32, 16}, {32, 32, 16}), SceneTooSmall);
}

TEST_CASE("select_views prefers views that observe the instances") {
    SynthConfig cfg;
    SceneSpec scene = generate_scene(cfg, 13);
    auto traj = orbit_trajectory(scene, 6, 64, 64, 13);
    std::vector<CameraView> views;
    for (const auto& [intr, pose] : traj) views.push_back(render_view(scene, intr, pose, 64, 64));

    GridMeta meta({32, 32, 16}, 0.0469, {0, 0, 0});
    Chunk chunk;
    chunk.tsdf = fuse_tsdf(views, meta);
    chunk.annotations = ground_truth(scene, meta, chunk.tsdf);
    REQUIRE_FALSE(chunk.annotations.empty());

    // a blind view (all depth invalid) must rank last
    CameraView blind = views[0];
    for (auto& d : blind.depth.data) d = 0.0f;
    std::vector<CameraView> candidates = views;
    candidates.push_back(blind);
    auto picked = select_views(chunk, candidates, 3);
    REQUIRE(picked.size() == 3);
    for (std::size_t i : picked) CHECK(i != candidates.size() - 1);

    CHECK_THROWS_AS(select_views(chunk, {}, 3), NoViews);
}

TEST_CASE("generated chunks carry annotations and selected views") {
    DatasetConfig cfg;
    Chunk chunk = generate_chunk(cfg, 77);
    CHECK(chunk.tsdf.meta.dims == cfg.chunk_dims);
    CHECK(int(chunk.views.size()) == cfg.views_per_chunk);
    CHECK_FALSE(chunk.annotations.empty());
    // determinism
    Chunk again = generate_chunk(cfg, 77);
    CHECK(chunk.tsdf.values == again.tsdf.values);
    REQUIRE(chunk.annotations.size() == again.annotations.size());
    for (std::size_t i = 0; i < chunk.annotations.size(); ++i)
        CHECK(chunk.annotations[i].mask == again.annotations[i].mask);
}

TEST_CASE("fitted anchors keep both levels populated") {
    DatasetConfig cfg;
    auto chunks = generate_chunk_dataset(cfg, 6, 3);
    AnchorSet set = build_anchors(chunks, 5, 1, cfg.voxel_size, 0.1);
    CHECK(set.n_small() >= 1);
    CHECK(set.n_large() >= 1);
    CHECK(set.n_small() + set.n_large() == 5);
    double vs3 = cfg.voxel_size * cfg.voxel_size * cfg.voxel_size;
    for (const auto& s : set.small_sizes)
        for (const auto& l : set.large_sizes)
            CHECK(s[0] * s[1] * s[2] * vs3 <= l[0] * l[1] * l[2] * vs3);
}

TEST_CASE("a few training steps decrease nothing catastrophically and stay finite") {
    DatasetConfig dcfg;
    auto chunks = generate_chunk_dataset(dcfg, 2, 5);
    ModelConfig mc;
    mc.anchors = build_anchors(chunks, 3, 1, dcfg.voxel_size, 0.1);
    mc.detect.size_split_m3 = 0.1;
    Model model(mc, 1);
    Trainer trainer(model, nn::TrainConfig{});
    StageBudgets budgets{2, 2, 2};
    TrainResult result = trainer.train(chunks, budgets, 9);
    CHECK_FALSE(result.diverged);
    CHECK(result.steps_completed == 6);
    REQUIRE(result.log.size() == 6);
    for (const auto& row : result.log) {
        CHECK(std::isfinite(row.total));
        CHECK(row.objectness >= 0.0);
        CHECK(row.box >= 0.0);
    }
    // stages activate their loss terms
    CHECK(result.log[0].cls == 0.0);
    CHECK(result.log[0].mask == 0.0);
    CHECK(result.log[2].cls >= 0.0);
    CHECK(result.log[5].stage == 2);
}

TEST_CASE("training is bitwise deterministic under a fixed seed") {
    DatasetConfig dcfg;
    auto chunks = generate_chunk_dataset(dcfg, 2, 15);
    ModelConfig mc;
    mc.anchors = build_anchors(chunks, 3, 2, dcfg.voxel_size, 0.1);
    auto run = [&] {
        Model model(mc, 4);
        Trainer trainer(model, nn::TrainConfig{});
        trainer.train(chunks, {2, 1, 1}, 11);
        std::vector<double> flat;
        for (const auto& name : model.params().names()) {
            const auto& d = model.params().get(name)->value.data;
            flat.insert(flat.end(), d.begin(), d.end());
        }
        return flat;
    };
    CHECK(run() == run());
}

TEST_CASE("inference rejects grids that do not match the backbone stride") {
    ModelConfig mc;
    mc.anchors.small_sizes = {{4, 4, 3}};
    mc.anchors.large_sizes = {{8, 8, 6}};
    Model model(mc, 1);
    TsdfGrid bad(GridMeta({30, 32, 16}, 0.0469));
    CHECK_THROWS_AS(infer_scene(model, bad, {}), nn::ShapeMismatch);
    InferConfig icfg;
    icfg.expected_z = 32;
    TsdfGrid wrong_height(GridMeta({32, 32, 16}, 0.0469));
    CHECK_THROWS_AS(infer_scene(model, wrong_height, {}, icfg), nn::ShapeMismatch);
}

TEST_CASE("inference on an untrained model emits only valid detections") {
    std::mt19937_64 rng(61);
    ModelConfig mc;
    mc.anchors.small_sizes = {{6, 6, 5}};
    mc.anchors.large_sizes = {{10, 10, 7}};
    Model model(mc, 2);
    DatasetConfig dcfg;
    Chunk chunk = generate_chunk(dcfg, 21);
    InferConfig icfg;
    icfg.min_score = 0.0;
    auto dets = infer_scene(model, chunk.tsdf, chunk.views, icfg);
    for (const auto& d : dets) {
        CHECK(d.class_id >= 1);
        CHECK(d.class_id < mc.n_cls);
        CHECK(d.score >= 0.0);
        CHECK(d.score <= 1.0);
        CHECK(d.box.valid());
        Vec3 mn = d.box.min_corner(), mx = d.box.max_corner();
        for (int i = 0; i < 3; ++i) {
            CHECK(mn[i] >= 0.0);
            CHECK(mx[i] <= double(chunk.tsdf.meta.dims[i]));
        }
        for (const auto& v : d.mask) CHECK(chunk.tsdf.meta.in_bounds(v[0], v[1], v[2]));
    }
}
