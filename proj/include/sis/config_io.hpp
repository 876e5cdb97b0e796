#pragma once

// JSON serialization for experiment and model configuration, run manifests,
// and CSV emitters for loss logs and evaluation metrics.

#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include <json.hpp>

#include "sis/experiment.hpp"
#include "sis/io.hpp"

namespace sis::io {

inline nlohmann::json anchors_to_json(const AnchorSet& a) {
    return {{"small_sizes", a.small_sizes},
            {"large_sizes", a.large_sizes},
            {"placement_stride", a.placement_stride}};
}

inline AnchorSet anchors_from_json(const nlohmann::json& j) {
    AnchorSet a;
    a.small_sizes = j.at("small_sizes").get<std::vector<Vec3>>();
    a.large_sizes = j.at("large_sizes").get<std::vector<Vec3>>();
    a.placement_stride = j.at("placement_stride").get<int>();
    return a;
}

inline nlohmann::json model_config_to_json(const ModelConfig& m) {
    nlohmann::json j;
    j["n_cls"] = m.n_cls;
    j["color_channels"] = m.color_channels;
    j["encoder_mid"] = m.encoder_mid;
    j["det_branch"] = m.det_branch;
    j["det_out"] = m.det_out;
    j["rpn_mid"] = m.rpn_mid;
    j["cls_h1"] = m.cls_h1;
    j["cls_h2"] = m.cls_h2;
    j["cls_h3"] = m.cls_h3;
    j["mask_branch"] = m.mask_branch;
    j["mask_out"] = m.mask_out;
    j["use_color"] = m.use_color;
    j["anchors"] = anchors_to_json(m.anchors);
    j["detect"] = {{"iou_pos", m.detect.iou_pos},
                   {"iou_neg", m.detect.iou_neg},
                   {"nms_train", m.detect.nms_train},
                   {"nms_test", m.detect.nms_test},
                   {"roi_dims", m.detect.roi_dims},
                   {"mask_iou_gate", m.detect.mask_iou_gate},
                   {"n_cls", m.detect.n_cls},
                   {"proposal_cap", m.detect.proposal_cap},
                   {"force_match_best", m.detect.force_match_best},
                   {"apply_refinement", m.detect.apply_refinement},
                   {"size_split_m3", m.detect.size_split_m3}};
    return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig m;
    m.n_cls = j.at("n_cls").get<int>();
    m.color_channels = j.at("color_channels").get<int>();
    m.encoder_mid = j.at("encoder_mid").get<int>();
    m.det_branch = j.at("det_branch").get<int>();
    m.det_out = j.at("det_out").get<int>();
    m.rpn_mid = j.at("rpn_mid").get<int>();
    m.cls_h1 = j.at("cls_h1").get<int>();
    m.cls_h2 = j.at("cls_h2").get<int>();
    m.cls_h3 = j.at("cls_h3").get<int>();
    m.mask_branch = j.at("mask_branch").get<int>();
    m.mask_out = j.at("mask_out").get<int>();
    m.use_color = j.at("use_color").get<bool>();
    m.anchors = anchors_from_json(j.at("anchors"));
    const auto& d = j.at("detect");
    m.detect.iou_pos = d.at("iou_pos").get<double>();
    m.detect.iou_neg = d.at("iou_neg").get<double>();
    m.detect.nms_train = d.at("nms_train").get<double>();
    m.detect.nms_test = d.at("nms_test").get<double>();
    m.detect.roi_dims = d.at("roi_dims").get<Vec3i>();
    m.detect.mask_iou_gate = d.at("mask_iou_gate").get<double>();
    m.detect.n_cls = d.at("n_cls").get<int>();
    m.detect.proposal_cap = d.at("proposal_cap").get<int>();
    m.detect.force_match_best = d.at("force_match_best").get<bool>();
    m.detect.apply_refinement = d.at("apply_refinement").get<bool>();
    m.detect.size_split_m3 = d.at("size_split_m3").get<double>();
    return m;
}

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["dataset"] = {{"room_extents", c.dataset.synth.room_extents},
                    {"min_objects", c.dataset.synth.min_objects},
                    {"max_objects", c.dataset.synth.max_objects},
                    {"n_classes", c.dataset.synth.n_classes},
                    {"min_size", c.dataset.synth.min_size},
                    {"max_size", c.dataset.synth.max_size},
                    {"chunk_dims", c.dataset.chunk_dims},
                    {"voxel_size", c.dataset.voxel_size},
                    {"truncation", c.dataset.truncation},
                    {"image_size", c.dataset.image_size},
                    {"candidate_views", c.dataset.candidate_views}};
    j["train_chunks"] = c.train_chunks;
    j["eval_chunks"] = c.eval_chunks;
    j["data_seed"] = c.data_seed;
    j["eval_seed"] = c.eval_seed;
    j["model_seed"] = c.model_seed;
    j["train_seed"] = c.train_seed;
    j["use_color"] = c.use_color;
    j["views_per_chunk"] = c.views_per_chunk;
    j["anchor_count"] = c.anchor_count;
    j["size_split_m3"] = c.size_split_m3;
    j["budgets"] = {{"rpn_steps", c.budgets.rpn_steps},
                    {"cls_steps", c.budgets.cls_steps},
                    {"mask_steps", c.budgets.mask_steps}};
    j["optimizer"] = {{"learning_rate", c.optimizer.learning_rate},
                      {"momentum", c.optimizer.momentum},
                      {"lr_decay_every", c.optimizer.lr_decay_every},
                      {"lr_decay_factor", c.optimizer.lr_decay_factor}};
    j["infer"] = {{"min_score", c.infer.min_score},
                  {"mask_threshold", c.infer.mask_threshold},
                  {"max_detections", c.infer.max_detections}};
    return j;
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        auto opt = [&](const char* key, auto& field) {
            if (d.contains(key)) field = d.at(key).get<std::decay_t<decltype(field)>>();
        };
        opt("room_extents", c.dataset.synth.room_extents);
        opt("min_objects", c.dataset.synth.min_objects);
        opt("max_objects", c.dataset.synth.max_objects);
        opt("n_classes", c.dataset.synth.n_classes);
        opt("min_size", c.dataset.synth.min_size);
        opt("max_size", c.dataset.synth.max_size);
        opt("chunk_dims", c.dataset.chunk_dims);
        opt("voxel_size", c.dataset.voxel_size);
        opt("truncation", c.dataset.truncation);
        opt("image_size", c.dataset.image_size);
        opt("candidate_views", c.dataset.candidate_views);
    }
    auto opt = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    opt("train_chunks", c.train_chunks);
    opt("eval_chunks", c.eval_chunks);
    opt("data_seed", c.data_seed);
    opt("eval_seed", c.eval_seed);
    opt("model_seed", c.model_seed);
    opt("train_seed", c.train_seed);
    opt("use_color", c.use_color);
    opt("views_per_chunk", c.views_per_chunk);
    opt("anchor_count", c.anchor_count);
    opt("size_split_m3", c.size_split_m3);
    if (j.contains("budgets")) {
        const auto& b = j.at("budgets");
        c.budgets.rpn_steps = b.at("rpn_steps").get<long>();
        c.budgets.cls_steps = b.at("cls_steps").get<long>();
        c.budgets.mask_steps = b.at("mask_steps").get<long>();
    }
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        c.optimizer.learning_rate = o.at("learning_rate").get<double>();
        c.optimizer.momentum = o.at("momentum").get<double>();
        c.optimizer.lr_decay_every = o.at("lr_decay_every").get<long>();
        c.optimizer.lr_decay_factor = o.at("lr_decay_factor").get<double>();
    }
    if (j.contains("infer")) {
        const auto& i = j.at("infer");
        c.infer.min_score = i.at("min_score").get<double>();
        c.infer.mask_threshold = i.at("mask_threshold").get<double>();
        c.infer.max_detections = i.at("max_detections").get<int>();
    }
    return c;
}

// ---------------------------------------------------------------------------
// run manifest: emitted once per command for reproducibility

struct StageTiming {
    std::string stage;
    double seconds = 0.0;
};

struct RunManifest {
    std::string command;
    std::string tool_version = "1.0.0";
    std::uint64_t seed = 0;
    bool deterministic = false;
    nlohmann::json config;
    std::vector<std::string> inputs, outputs;
    std::vector<StageTiming> timings;
};

// FNV-1a over the canonical (sorted-key) JSON dump; identical configs hash
// identically regardless of construction order.
inline std::string config_hash(const nlohmann::json& config) {
    std::string dump = config.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : dump) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline void write_manifest(const std::string& path, const RunManifest& m) {
    nlohmann::json j;
    j["command"] = m.command;
    j["tool_version"] = m.tool_version;
    j["seed"] = m.seed;
    j["deterministic"] = m.deterministic;
    j["config"] = m.config;
    j["config_hash"] = config_hash(m.config);
    j["inputs"] = m.inputs;
    j["outputs"] = m.outputs;
    j["timings"] = nlohmann::json::array();
    for (const auto& t : m.timings) j["timings"].push_back({{"stage", t.stage}, {"seconds", t.seconds}});
    std::ofstream os(path);
    if (!os) throw IoFailure(path);
    os << j.dump(2) << "\n";
    if (!os) throw IoFailure(path);
}

// ---------------------------------------------------------------------------
// CSV emitters

inline void write_loss_log(const std::string& path, const std::vector<LossLogRow>& log) {
    std::ofstream os(path);
    if (!os) throw IoFailure(path);
    os << "step,stage,objectness,box,cls,mask,total,lr\n";
    os.precision(10);
    for (const auto& r : log)
        os << r.step << "," << r.stage << "," << r.objectness << "," << r.box << "," << r.cls << ","
           << r.mask << "," << r.total << "," << r.lr << "\n";
    if (!os) throw IoFailure(path);
}

inline void write_metrics_csv(const std::string& path, const EvalMetrics& m) {
    std::ofstream os(path);
    if (!os) throw IoFailure(path);
    os << "metric,class,value\n";
    os.precision(10);
    auto emit = [&](const char* name, const ApResult& r) {
        for (const auto& [cls, ap] : r.per_class) os << name << "," << cls << "," << ap << "\n";
        os << name << ",mean," << r.map << "\n";
    };
    emit("det_ap_25", m.det_25);
    emit("det_ap_50", m.det_50);
    emit("mask_ap_25", m.mask_25);
    emit("mask_ap_50", m.mask_50);
    if (!os) throw IoFailure(path);
}

} // namespace sis::io
