#pragma once

// Evaluation protocol: projection of detections into a common voxel grid,
// the per-frame prediction-merging baseline, and mean average precision at
// fixed IoU thresholds with per-class breakdown (all-point PR interpolation).

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "sis/grid.hpp"

namespace sis {

struct Detection {
    Box3 box; // voxel coordinates after voxelize()
    int class_id = 0;
    double score = 0.0;
    std::vector<Vec3i> mask; // optional; empty = box-only
};

// Map world-space detections into `meta`'s voxel space; masks re-rasterized
// by voxel-center containment of the voxelized box.
inline std::vector<Detection> voxelize(const std::vector<Detection>& world_dets, const GridMeta& meta) {
    std::vector<Detection> out;
    out.reserve(world_dets.size());
    for (const auto& d : world_dets) {
        Detection v = d;
        Vec3 mn = world_to_voxel(d.box.min_corner(), meta);
        Vec3 mx = world_to_voxel(d.box.max_corner(), meta);
        v.box = Box3::from_min_max(mn, mx);
        if (!d.mask.empty()) {
            v.mask.clear();
            VoxelRegion r = enclosing_region(v.box, meta);
            for (int x = r.min[0]; x < r.max[0]; ++x)
                for (int y = r.min[1]; y < r.max[1]; ++y)
                    for (int z = r.min[2]; z < r.max[2]; ++z)
                        if (v.box.contains({x + 0.5, y + 0.5, z + 0.5})) v.mask.push_back({x, y, z});
        }
        out.push_back(std::move(v));
    }
    return out;
}

// Greedy agglomeration of per-frame detections in descending score: join an
// existing cluster iff class matches and IoU with the representative
// (highest-score member) exceeds the threshold.
inline std::vector<Detection> merge_frame_predictions(const std::vector<Detection>& dets,
                                                      double iou_thresh = 0.5) {
    std::vector<std::size_t> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    std::vector<Detection> reps;
    for (std::size_t i : order) {
        bool joined = false;
        for (auto& rep : reps)
            if (rep.class_id == dets[i].class_id && box_iou(rep.box, dets[i].box) > iou_thresh) {
                rep.score = std::max(rep.score, dets[i].score);
                joined = true;
                break;
            }
        if (!joined) reps.push_back(dets[i]);
    }
    return reps;
}

struct GroundTruthEntry {
    int scene_id = 0;
    InstanceAnnotation annotation;
};
struct DetectionEntry {
    int scene_id = 0;
    Detection detection;
};

struct ApResult {
    std::map<int, double> per_class; // class id -> AP (classes with >= 1 gt)
    double map = 0.0;
};

// Per class: score-descending greedy one-to-one matching to unmatched gt at
// the IoU threshold; AP is the area under the all-point-interpolated PR
// curve. Mask IoU is used when both sides carry masks, box IoU otherwise.
inline ApResult mean_average_precision(const std::vector<DetectionEntry>& dets,
                                       const std::vector<GroundTruthEntry>& gts, double iou_thresh,
                                       bool use_masks, bool include_empty_classes = false,
                                       int n_cls = 0) {
    std::map<int, std::vector<std::size_t>> gt_by_class;
    for (std::size_t g = 0; g < gts.size(); ++g)
        gt_by_class[gts[g].annotation.class_id].push_back(g);

    ApResult result;
    std::vector<int> classes;
    for (auto& [c, v] : gt_by_class) classes.push_back(c);
    if (include_empty_classes)
        for (int c = 0; c < n_cls; ++c)
            if (!gt_by_class.count(c)) classes.push_back(c);
    std::sort(classes.begin(), classes.end());

    for (int cls : classes) {
        std::vector<std::size_t> cls_dets;
        for (std::size_t d = 0; d < dets.size(); ++d)
            if (dets[d].detection.class_id == cls) cls_dets.push_back(d);
        std::stable_sort(cls_dets.begin(), cls_dets.end(), [&](std::size_t a, std::size_t b) {
            return dets[a].detection.score > dets[b].detection.score;
        });
        const auto& cls_gts = gt_by_class.count(cls) ? gt_by_class[cls] : std::vector<std::size_t>{};
        std::size_t n_gt = cls_gts.size();
        std::vector<bool> matched(n_gt, false);
        std::vector<int> tp;
        tp.reserve(cls_dets.size());
        for (std::size_t d : cls_dets) {
            double best = 0.0;
            std::size_t best_g = n_gt;
            for (std::size_t gi = 0; gi < n_gt; ++gi) {
                const auto& gt = gts[cls_gts[gi]];
                if (gt.scene_id != dets[d].scene_id || matched[gi]) continue;
                double iou = (use_masks && !dets[d].detection.mask.empty() && !gt.annotation.mask.empty())
                                 ? mask_iou(dets[d].detection.mask, gt.annotation.mask)
                                 : box_iou(dets[d].detection.box, gt.annotation.box);
                if (iou > best) { best = iou; best_g = gi; }
            }
            if (best_g < n_gt && best >= iou_thresh) {
                matched[best_g] = true;
                tp.push_back(1);
            } else {
                tp.push_back(0);
            }
        }
        double ap = 0.0;
        if (n_gt > 0 && !tp.empty()) {
            std::vector<double> precision(tp.size()), recall(tp.size());
            int acc = 0;
            for (std::size_t i = 0; i < tp.size(); ++i) {
                acc += tp[i];
                precision[i] = double(acc) / double(i + 1);
                recall[i] = double(acc) / double(n_gt);
            }
            // all-point interpolation: make precision monotone from the right
            for (std::size_t i = precision.size() - 1; i-- > 0;)
                precision[i] = std::max(precision[i], precision[i + 1]);
            double prev_recall = 0.0;
            for (std::size_t i = 0; i < tp.size(); ++i) {
                ap += (recall[i] - prev_recall) * precision[i];
                prev_recall = recall[i];
            }
        }
        if (n_gt > 0 || include_empty_classes) result.per_class[cls] = ap;
    }
    double sum = 0.0;
    for (auto& [c, ap] : result.per_class) sum += ap;
    result.map = result.per_class.empty() ? 0.0 : sum / double(result.per_class.size());
    return result;
}

} // namespace sis
