// Command-line entry point: synth, fuse, train, infer, eval, export.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sis/config_io.hpp"
#include "sis/experiment.hpp"
#include "sis/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GlobalOpts {
    std::uint64_t seed = 1;
    std::string config_path;
    bool deterministic = false;
};

sis::ExperimentConfig load_experiment_config(const GlobalOpts& g) {
    sis::ExperimentConfig cfg;
    if (!g.config_path.empty()) {
        std::ifstream is(g.config_path);
        if (!is) throw sis::io::IoFailure(g.config_path);
        json j;
        is >> j;
        cfg = sis::io::experiment_config_from_json(j);
    }
    cfg.data_seed = g.seed;
    cfg.model_seed = g.seed;
    cfg.train_seed = g.seed + 7;
    cfg.eval_seed = g.seed + 900000;
    return cfg;
}

class Timer {
public:
    explicit Timer(sis::io::RunManifest& m) : manifest_(m) {}
    template <typename F> void stage(const std::string& name, F&& fn) {
        auto t0 = std::chrono::steady_clock::now();
        fn();
        double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        manifest_.timings.push_back({name, s});
    }

private:
    sis::io::RunManifest& manifest_;
};

std::vector<sis::DetectionEntry> annotations_as_entries(const std::vector<sis::GroundTruthEntry>& gts) {
    std::vector<sis::DetectionEntry> out;
    for (const auto& g : gts) {
        sis::Detection d;
        d.box = g.annotation.box;
        d.class_id = g.annotation.class_id;
        d.score = 1.0;
        d.mask = g.annotation.mask;
        out.push_back({g.scene_id, d});
    }
    return out;
}

std::vector<sis::GroundTruthEntry> entries_as_annotations(const std::vector<sis::DetectionEntry>& dets) {
    std::vector<sis::GroundTruthEntry> out;
    for (const auto& e : dets) {
        sis::InstanceAnnotation ann;
        ann.box = e.detection.box;
        ann.class_id = e.detection.class_id;
        ann.mask = e.detection.mask;
        out.push_back({e.scene_id, ann});
    }
    return out;
}

int cmd_synth(const GlobalOpts& g, int count, const std::string& out_dir) {
    fs::create_directories(out_dir);
    sis::ExperimentConfig cfg = load_experiment_config(g);
    sis::io::RunManifest m;
    m.command = "synth";
    m.seed = g.seed;
    m.deterministic = g.deterministic;
    m.config = sis::io::experiment_config_to_json(cfg);
    Timer timer(m);
    timer.stage("synth", [&] {
        for (int i = 0; i < count; ++i) {
            sis::SceneSpec scene =
                sis::generate_scene(cfg.dataset.synth, g.seed + std::uint64_t(i) * 7919);
            std::string path = out_dir + "/scene_" + std::to_string(i) + ".json";
            std::ofstream os(path);
            if (!os) throw sis::io::IoFailure(path);
            os << sis::io::scene_to_json(scene).dump(2) << "\n";
            m.outputs.push_back(path);
        }
    });
    sis::io::write_manifest(out_dir + "/manifest.json", m);
    std::cout << "synth: wrote " << count << " scene(s) to " << out_dir << "\n";
    return 0;
}

int cmd_fuse(const GlobalOpts& g, const std::string& scene_path, const std::string& out_dir,
             int n_views, int image_size, sis::Vec3i dims, double voxel_size, double truncation) {
    fs::create_directories(out_dir);
    std::ifstream is(scene_path);
    if (!is) throw sis::io::IoFailure(scene_path);
    json j;
    is >> j;
    sis::SceneSpec scene = sis::io::scene_from_json(j);

    sis::io::RunManifest m;
    m.command = "fuse";
    m.seed = g.seed;
    m.deterministic = g.deterministic;
    m.config = {{"views", n_views},       {"image_size", image_size}, {"dims", dims},
                {"voxel_size", voxel_size}, {"truncation", truncation}};
    m.inputs.push_back(scene_path);
    Timer timer(m);

    std::vector<sis::CameraView> views;
    timer.stage("render", [&] {
        for (const auto& [intr, pose] :
             sis::orbit_trajectory(scene, n_views, image_size, image_size, g.seed))
            views.push_back(sis::render_view(scene, intr, pose, image_size, image_size));
    });
    sis::GridMeta meta(dims, voxel_size, {0, 0, 0});
    sis::TsdfGrid fused(meta);
    timer.stage("fuse", [&] { fused = sis::fuse_tsdf(views, meta, truncation); });

    timer.stage("write", [&] {
        sis::io::write_grid(out_dir + "/tsdf.vgrd", fused);
        m.outputs.push_back(out_dir + "/tsdf.vgrd");
        for (std::size_t v = 0; v < views.size(); ++v) {
            std::string base = out_dir + "/view_" + std::to_string(v);
            sis::io::write_pfm(base + ".pfm", views[v].depth);
            sis::io::write_ppm(base + ".ppm", views[v].color);
            m.outputs.push_back(base + ".pfm");
            m.outputs.push_back(base + ".ppm");
        }
        auto anns = sis::ground_truth(scene, meta, fused);
        std::vector<sis::GroundTruthEntry> gts;
        for (const auto& a : anns) gts.push_back({0, a});
        sis::io::write_detections(out_dir + "/truth.txt", annotations_as_entries(gts), meta);
        m.outputs.push_back(out_dir + "/truth.txt");
    });
    sis::io::write_manifest(out_dir + "/manifest.json", m);
    std::cout << "fuse: wrote grid and " << views.size() << " view(s) to " << out_dir << "\n";
    return 0;
}

int cmd_train(const GlobalOpts& g, const std::string& out_dir) {
    fs::create_directories(out_dir);
    sis::ExperimentConfig cfg = load_experiment_config(g);
    sis::io::RunManifest m;
    m.command = "train";
    m.seed = g.seed;
    m.deterministic = g.deterministic;
    m.config = sis::io::experiment_config_to_json(cfg);
    Timer timer(m);

    sis::DatasetConfig ds = cfg.dataset;
    ds.views_per_chunk = cfg.views_per_chunk;
    std::vector<sis::Chunk> train;
    timer.stage("generate", [&] {
        train = sis::generate_chunk_dataset(ds, cfg.train_chunks, cfg.data_seed);
    });

    sis::ModelConfig mc = sis::fit_model_config(cfg, train);
    sis::Model model(mc, cfg.model_seed);
    sis::Trainer trainer(model, cfg.optimizer);
    sis::TrainResult result;
    timer.stage("train", [&] { result = trainer.train(train, cfg.budgets, cfg.train_seed); });

    timer.stage("write", [&] {
        std::ofstream os(out_dir + "/model.json");
        if (!os) throw sis::io::IoFailure(out_dir + "/model.json");
        os << sis::io::model_config_to_json(mc).dump(2) << "\n";
        sis::io::write_checkpoint(out_dir + "/checkpoint.sisw", model.params());
        sis::io::write_loss_log(out_dir + "/loss_log.csv", result.log);
        m.outputs = {out_dir + "/model.json", out_dir + "/checkpoint.sisw",
                     out_dir + "/loss_log.csv"};
    });
    sis::io::write_manifest(out_dir + "/manifest.json", m);
    if (result.diverged) {
        std::cerr << "train: loss became non-finite at step " << result.steps_completed << "\n";
        return 3;
    }
    std::cout << "train: " << result.steps_completed << " steps, final loss "
              << (result.log.empty() ? 0.0 : result.log.back().total) << "\n";
    return 0;
}

int cmd_infer(const GlobalOpts& g, const std::string& model_dir, const std::string& out_dir) {
    fs::create_directories(out_dir);
    sis::ExperimentConfig cfg = load_experiment_config(g);
    std::ifstream is(model_dir + "/model.json");
    if (!is) throw sis::io::IoFailure(model_dir + "/model.json");
    json j;
    is >> j;
    sis::ModelConfig mc = sis::io::model_config_from_json(j);
    sis::Model model(mc, cfg.model_seed);
    sis::io::read_checkpoint(model_dir + "/checkpoint.sisw", model.params());

    sis::io::RunManifest m;
    m.command = "infer";
    m.seed = g.seed;
    m.deterministic = g.deterministic;
    m.config = sis::io::experiment_config_to_json(cfg);
    m.inputs = {model_dir + "/model.json", model_dir + "/checkpoint.sisw"};
    Timer timer(m);

    sis::DatasetConfig ds = cfg.dataset;
    ds.views_per_chunk = cfg.views_per_chunk;
    std::vector<sis::Chunk> chunks;
    timer.stage("generate", [&] {
        chunks = sis::generate_chunk_dataset(ds, cfg.eval_chunks, cfg.eval_seed);
    });

    std::vector<sis::DetectionEntry> dets;
    std::vector<sis::GroundTruthEntry> gts;
    timer.stage("infer", [&] {
        for (std::size_t i = 0; i < chunks.size(); ++i) {
            for (const auto& d : sis::infer_scene(model, chunks[i].tsdf, chunks[i].views, cfg.infer))
                dets.push_back({int(i), d});
            for (const auto& ann : chunks[i].annotations) gts.push_back({int(i), ann});
        }
    });
    sis::GridMeta meta(ds.chunk_dims, ds.voxel_size, {0, 0, 0});
    sis::io::write_detections(out_dir + "/detections.txt", dets, meta);
    sis::io::write_detections(out_dir + "/truth.txt", annotations_as_entries(gts), meta);
    m.outputs = {out_dir + "/detections.txt", out_dir + "/truth.txt"};
    sis::io::write_manifest(out_dir + "/manifest.json", m);
    std::cout << "infer: " << dets.size() << " detection(s) over " << chunks.size() << " scene(s)\n";
    return 0;
}

int cmd_eval(const GlobalOpts& g, const std::string& det_path, const std::string& truth_path,
             const std::string& out_path, sis::Vec3i dims, double voxel_size) {
    sis::GridMeta meta(dims, voxel_size, {0, 0, 0});
    auto dets = sis::io::read_detections(det_path, meta);
    auto gts = entries_as_annotations(sis::io::read_detections(truth_path, meta));

    sis::EvalMetrics metrics;
    metrics.det_25 = sis::mean_average_precision(dets, gts, 0.25, false);
    metrics.det_50 = sis::mean_average_precision(dets, gts, 0.50, false);
    metrics.mask_25 = sis::mean_average_precision(dets, gts, 0.25, true);
    metrics.mask_50 = sis::mean_average_precision(dets, gts, 0.50, true);
    sis::io::write_metrics_csv(out_path, metrics);

    sis::io::RunManifest m;
    m.command = "eval";
    m.seed = g.seed;
    m.deterministic = g.deterministic;
    m.config = {{"dims", dims}, {"voxel_size", voxel_size}};
    m.inputs = {det_path, truth_path};
    m.outputs = {out_path};
    sis::io::write_manifest(fs::path(out_path).parent_path().string() + "/manifest.json", m);

    std::cout << "det mAP@0.25  " << metrics.det_25.map << "\n"
              << "det mAP@0.50  " << metrics.det_50.map << "\n"
              << "mask mAP@0.25 " << metrics.mask_25.map << "\n"
              << "mask mAP@0.50 " << metrics.mask_50.map << "\n";
    return 0;
}

int cmd_export(const GlobalOpts& g, const std::string& grid_path, const std::string& det_path,
               const std::string& out_dir) {
    fs::create_directories(out_dir);
    sis::io::RunManifest m;
    m.command = "export";
    m.seed = g.seed;
    m.deterministic = g.deterministic;
    m.config = json::object();

    sis::GridMeta meta({1, 1, 1}, 1.0, {0, 0, 0});
    if (!grid_path.empty()) {
        sis::io::GridFile gf = sis::io::read_grid(grid_path);
        if (gf.kind != 0) throw sis::io::BadMagic(grid_path + " (expected a tsdf grid)");
        meta = gf.tsdf.meta;
        sis::io::export_ply_surface(out_dir + "/surface.ply", gf.tsdf);
        m.inputs.push_back(grid_path);
        m.outputs.push_back(out_dir + "/surface.ply");
    }
    if (!det_path.empty()) {
        auto entries = sis::io::read_detections(det_path, meta);
        std::vector<sis::Detection> dets;
        for (auto& e : entries) dets.push_back(e.detection);
        sis::io::export_ply_boxes(out_dir + "/boxes.ply", dets);
        sis::io::export_ply_masks(out_dir + "/masks.ply", dets, meta);
        m.inputs.push_back(det_path);
        m.outputs.push_back(out_dir + "/boxes.ply");
        m.outputs.push_back(out_dir + "/masks.ply");
    }
    sis::io::write_manifest(out_dir + "/manifest.json", m);
    std::cout << "export: wrote " << m.outputs.size() << " file(s) to " << out_dir << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"voxel-grid 3D object detection and instance segmentation tool"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--seed", g.seed, "global random seed");
    app.add_option("--config", g.config_path, "experiment config JSON");
    app.add_flag("--deterministic", g.deterministic, "single-threaded deterministic mode");

    auto* synth = app.add_subcommand("synth", "generate synthetic scene specs");
    int synth_count = 1;
    std::string synth_out = "out_synth";
    synth->add_option("--count", synth_count, "number of scenes");
    synth->add_option("--out", synth_out, "output directory");

    auto* fuse = app.add_subcommand("fuse", "render views of a scene and fuse a TSDF grid");
    std::string fuse_scene, fuse_out = "out_fuse";
    int fuse_views = 8, fuse_image = 64;
    std::vector<int> fuse_dims{32, 32, 16};
    double fuse_voxel = 0.0469, fuse_trunc = 3.0;
    fuse->add_option("--scene", fuse_scene, "scene JSON")->required();
    fuse->add_option("--out", fuse_out, "output directory");
    fuse->add_option("--views", fuse_views, "number of rendered views");
    fuse->add_option("--image-size", fuse_image, "square image side");
    fuse->add_option("--dims", fuse_dims, "grid dims x y z")->expected(3);
    fuse->add_option("--voxel-size", fuse_voxel, "voxel edge length, meters");
    fuse->add_option("--truncation", fuse_trunc, "truncation band, voxels");

    auto* train = app.add_subcommand("train", "train a model on generated chunks");
    std::string train_out = "out_train";
    train->add_option("--out", train_out, "output directory");

    auto* infer = app.add_subcommand("infer", "run inference on held-out scenes");
    std::string infer_model = "out_train", infer_out = "out_infer";
    infer->add_option("--model", infer_model, "directory with model.json + checkpoint.sisw");
    infer->add_option("--out", infer_out, "output directory");

    auto* evalc = app.add_subcommand("eval", "score detections against ground truth");
    std::string eval_det, eval_truth, eval_out = "metrics.csv";
    std::vector<int> eval_dims{32, 32, 16};
    double eval_voxel = 0.0469;
    evalc->add_option("--detections", eval_det, "detections file")->required();
    evalc->add_option("--truth", eval_truth, "ground-truth file")->required();
    evalc->add_option("--out", eval_out, "metrics CSV path");
    evalc->add_option("--dims", eval_dims, "grid dims x y z")->expected(3);
    evalc->add_option("--voxel-size", eval_voxel, "voxel edge length, meters");

    auto* exportc = app.add_subcommand("export", "export PLY visualizations");
    std::string export_grid, export_det, export_out = "out_export";
    exportc->add_option("--grid", export_grid, "VGRD grid file");
    exportc->add_option("--detections", export_det, "detections file");
    exportc->add_option("--out", export_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    }

    if (g.deterministic) setenv("SIS_THREADS", "1", 1);

    try {
        if (synth->parsed()) return cmd_synth(g, synth_count, synth_out);
        if (fuse->parsed())
            return cmd_fuse(g, fuse_scene, fuse_out, fuse_views, fuse_image,
                            {fuse_dims[0], fuse_dims[1], fuse_dims[2]}, fuse_voxel, fuse_trunc);
        if (train->parsed()) return cmd_train(g, train_out);
        if (infer->parsed()) return cmd_infer(g, infer_model, infer_out);
        if (evalc->parsed())
            return cmd_eval(g, eval_det, eval_truth, eval_out,
                            {eval_dims[0], eval_dims[1], eval_dims[2]}, eval_voxel);
        if (exportc->parsed()) return cmd_export(g, export_grid, export_det, export_out);
    } catch (const sis::DivergenceDetected& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
