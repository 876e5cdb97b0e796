#pragma once

// Orchestration: chunk extraction and view selection, staged end-to-end
// training (RPN, then classification, then masks, keeping earlier losses at
// 1:1), and fully-convolutional full-scene inference.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "sis/detect.hpp"
#include "sis/eval.hpp"
#include "sis/grid.hpp"
#include "sis/mask.hpp"
#include "sis/model.hpp"
#include "sis/nn.hpp"
#include "sis/synth.hpp"

namespace sis {

struct SceneTooSmall : std::runtime_error {
    SceneTooSmall() : std::runtime_error("scene grid smaller than one chunk") {}
};
struct NoViews : std::runtime_error {
    NoViews() : std::runtime_error("no candidate views") {}
};
struct DivergenceDetected : std::runtime_error {
    DivergenceDetected() : std::runtime_error("non-finite training loss") {}
};

struct Chunk {
    TsdfGrid tsdf;
    std::vector<CameraView> views;
    std::vector<InstanceAnnotation> annotations; // chunk-local voxel coords
};

// Sliding-window chunk crops; instances keep only their in-chunk voxels and
// are dropped when less than half of the mask lies inside.
inline std::vector<Chunk> extract_chunks(const TsdfGrid& scene,
                                         const std::vector<InstanceAnnotation>& annotations,
                                         Vec3i chunk_dims, Vec3i stride) {
    const GridMeta& m = scene.meta;
    for (int i = 0; i < 3; ++i)
        if (m.dims[i] < chunk_dims[i]) throw SceneTooSmall{};
    std::vector<Chunk> out;
    for (int ox = 0; ox + chunk_dims[0] <= m.dims[0]; ox += stride[0])
        for (int oy = 0; oy + chunk_dims[1] <= m.dims[1]; oy += stride[1])
            for (int oz = 0; oz + chunk_dims[2] <= m.dims[2]; oz += stride[2]) {
                Chunk c;
                GridMeta sub(chunk_dims, m.voxel_size,
                             voxel_to_world({double(ox), double(oy), double(oz)}, m));
                c.tsdf = TsdfGrid(sub, scene.truncation);
                for (int x = 0; x < chunk_dims[0]; ++x)
                    for (int y = 0; y < chunk_dims[1]; ++y)
                        for (int z = 0; z < chunk_dims[2]; ++z) {
                            std::size_t src = m.index(ox + x, oy + y, oz + z);
                            std::size_t dst = sub.index(x, y, z);
                            c.tsdf.values[dst] = scene.values[src];
                            c.tsdf.weights[dst] = scene.weights[src];
                        }
                for (const auto& ann : annotations) {
                    InstanceAnnotation local;
                    local.class_id = ann.class_id;
                    Vec3i mn = chunk_dims, mx{0, 0, 0};
                    for (const auto& v : ann.mask) {
                        int x = v[0] - ox, y = v[1] - oy, z = v[2] - oz;
                        if (x < 0 || y < 0 || z < 0 || x >= chunk_dims[0] || y >= chunk_dims[1] ||
                            z >= chunk_dims[2])
                            continue;
                        local.mask.push_back({x, y, z});
                        mn = {std::min(mn[0], x), std::min(mn[1], y), std::min(mn[2], z)};
                        mx = {std::max(mx[0], x), std::max(mx[1], y), std::max(mx[2], z)};
                    }
                    if (local.mask.empty() || local.mask.size() * 2 < ann.mask.size()) continue;
                    local.box = Box3::from_min_max({double(mn[0]), double(mn[1]), double(mn[2])},
                                                   {double(mx[0] + 1), double(mx[1] + 1), double(mx[2] + 1)});
                    c.annotations.push_back(std::move(local));
                }
                out.push_back(std::move(c));
            }
    return out;
}

// View score: mean over instances of the fraction of mask voxels that
// project into the image onto a valid depth within one voxel of the voxel's
// camera depth. Top-n by score, ties toward the lower view index.
inline std::vector<std::size_t> select_views(const Chunk& chunk,
                                             const std::vector<CameraView>& candidates, int n) {
    if (candidates.empty()) throw NoViews{};
    // per-view, per-annotation visible fraction
    std::vector<std::vector<double>> cov(candidates.size(),
                                         std::vector<double>(chunk.annotations.size(), 0.0));
    for (std::size_t vi = 0; vi < candidates.size(); ++vi) {
        const auto& view = candidates[vi];
        for (std::size_t ai = 0; ai < chunk.annotations.size(); ++ai) {
            const auto& ann = chunk.annotations[ai];
            std::size_t seen = 0;
            for (const auto& v : ann.mask) {
                Vec3 pw = voxel_center_world(v[0], v[1], v[2], chunk.tsdf.meta);
                Vec3 uvz = view.project(pw);
                if (uvz[2] <= 0) continue;
                int col = int(std::floor(uvz[0])), row = int(std::floor(uvz[1]));
                if (row < 0 || col < 0 || row >= view.height() || col >= view.width()) continue;
                double d = view.depth.at(row, col);
                if (d <= 0) continue;
                if (std::fabs(d - uvz[2]) <= chunk.tsdf.meta.voxel_size) ++seen;
            }
            if (!ann.mask.empty()) cov[vi][ai] = double(seen) / double(ann.mask.size());
        }
    }
    // greedy complementary selection: each pick maximizes the gain in
    // per-object best coverage, so no object is left unseen when some
    // candidate view can see it
    std::vector<std::size_t> chosen;
    std::vector<bool> used(candidates.size(), false);
    std::vector<double> best_cov(chunk.annotations.size(), 0.0);
    int take = std::min<int>(n, int(candidates.size()));
    for (int k = 0; k < take; ++k) {
        std::size_t arg = 0;
        double best_gain = -1.0;
        for (std::size_t vi = 0; vi < candidates.size(); ++vi) {
            if (used[vi]) continue;
            double gain = 0.0;
            for (std::size_t ai = 0; ai < best_cov.size(); ++ai)
                gain += std::max(0.0, cov[vi][ai] - best_cov[ai]);
            if (gain > best_gain) { best_gain = gain; arg = vi; }
        }
        used[arg] = true;
        chosen.push_back(arg);
        for (std::size_t ai = 0; ai < best_cov.size(); ++ai)
            best_cov[ai] = std::max(best_cov[ai], cov[arg][ai]);
    }
    return chosen;
}

// ---------------------------------------------------------------------------
// dataset generation

struct DatasetConfig {
    SynthConfig synth;
    Vec3i chunk_dims{32, 32, 16};
    double voxel_size = 0.0469;
    double truncation = 3.0;
    int image_size = 64;
    int candidate_views = 12;
    int views_per_chunk = 3;
};

// One scene sized exactly one chunk: render an orbit, fuse, annotate, select views.
inline Chunk generate_chunk(const DatasetConfig& cfg, std::uint64_t seed) {
    SynthConfig synth = cfg.synth;
    synth.room_extents = {cfg.chunk_dims[0] * cfg.voxel_size, cfg.chunk_dims[1] * cfg.voxel_size,
                          cfg.chunk_dims[2] * cfg.voxel_size};
    SceneSpec scene = generate_scene(synth, seed);
    auto traj = orbit_trajectory(scene, cfg.candidate_views, cfg.image_size, cfg.image_size, seed);
    std::vector<CameraView> views;
    views.reserve(traj.size());
    for (const auto& [intr, pose] : traj)
        views.push_back(render_view(scene, intr, pose, cfg.image_size, cfg.image_size));
    GridMeta meta(cfg.chunk_dims, cfg.voxel_size, {0, 0, 0});
    Chunk chunk;
    chunk.tsdf = fuse_tsdf(views, meta, cfg.truncation);
    chunk.annotations = ground_truth(scene, meta, chunk.tsdf);
    for (std::size_t i : select_views(chunk, views, cfg.views_per_chunk))
        chunk.views.push_back(views[i]);
    return chunk;
}

inline std::vector<Chunk> generate_chunk_dataset(const DatasetConfig& cfg, int count,
                                                 std::uint64_t seed) {
    std::vector<Chunk> out;
    out.reserve(std::size_t(count));
    for (int i = 0; i < count; ++i) out.push_back(generate_chunk(cfg, seed + std::uint64_t(i) * 7919));
    return out;
}

// Anchor sizes from the dataset's ground-truth boxes via k-means; if the
// volume split leaves a level empty, the nearest centroid is moved across.
inline AnchorSet build_anchors(const std::vector<Chunk>& chunks, int k, std::uint64_t seed,
                               double voxel_size, double split_m3, int stride = 4) {
    std::vector<Vec3> sizes;
    for (const auto& c : chunks)
        for (const auto& ann : c.annotations) sizes.push_back(ann.box.size);
    AnchorSet set = kmeans_anchors(sizes, k, seed, voxel_size, split_m3, stride);
    auto vol = [](const Vec3& s) { return s[0] * s[1] * s[2]; };
    if (set.small_sizes.empty() && !set.large_sizes.empty()) {
        auto it = std::min_element(set.large_sizes.begin(), set.large_sizes.end(),
                                   [&](const Vec3& a, const Vec3& b) { return vol(a) < vol(b); });
        set.small_sizes.push_back(*it);
        set.large_sizes.erase(it);
    }
    if (set.large_sizes.empty() && !set.small_sizes.empty()) {
        auto it = std::max_element(set.small_sizes.begin(), set.small_sizes.end(),
                                   [&](const Vec3& a, const Vec3& b) { return vol(a) < vol(b); });
        set.large_sizes.push_back(*it);
        set.small_sizes.erase(it);
    }
    return set;
}

// ---------------------------------------------------------------------------
// training

enum class TrainStage { Rpn = 0, RpnCls = 1, RpnClsMask = 2 };

struct StageBudgets {
    long rpn_steps = 2000;
    long cls_steps = 1000;
    long mask_steps = 1000;
};

struct LossLogRow {
    long step = 0;
    int stage = 0;
    double objectness = 0.0, box = 0.0, cls = 0.0, mask = 0.0, total = 0.0, lr = 0.0;
};

struct TrainResult {
    std::vector<LossLogRow> log;
    bool diverged = false;
    long steps_completed = 0;
};

class Trainer {
public:
    Trainer(Model& model, nn::TrainConfig opt_cfg) : model_(model), opt_(opt_cfg) {}

    int max_cls_proposals = 12; // sampled detector proposals per step (plus gt 1:1)
    int max_mask_targets = 6;

    TrainResult train(const std::vector<Chunk>& chunks, const StageBudgets& budgets,
                      std::uint64_t seed) {
        if (chunks.empty()) throw std::invalid_argument("train: empty dataset");
        TrainResult result;
        std::mt19937_64 rng(seed);
        std::vector<std::size_t> order(chunks.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        std::size_t cursor = 0;

        long total_steps = budgets.rpn_steps + budgets.cls_steps + budgets.mask_steps;
        std::map<std::string, std::vector<double>> snapshot = save_params();
        for (long step = 0; step < total_steps; ++step) {
            TrainStage stage = step < budgets.rpn_steps ? TrainStage::Rpn
                               : step < budgets.rpn_steps + budgets.cls_steps ? TrainStage::RpnCls
                                                                              : TrainStage::RpnClsMask;
            const Chunk& chunk = chunks[order[cursor]];
            if (++cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            LossLogRow row = train_step(chunk, stage, step, rng);
            if (!std::isfinite(row.total)) {
                restore_params(snapshot);
                result.diverged = true;
                result.steps_completed = step;
                return result;
            }
            result.log.push_back(row);
            if (step % 50 == 49) snapshot = save_params();
        }
        result.steps_completed = total_steps;
        return result;
    }

    LossLogRow train_step(const Chunk& chunk, TrainStage stage, long step, std::mt19937_64& rng) {
        model_.params().zero_grads();
        FeatureVolumeVar colorvol = model_.color_volume(chunk.views, chunk.tsdf.meta);
        Model::BackboneOut bb = model_.detection_backbone(chunk.tsdf, colorvol);
        Model::RpnOut rpn = model_.rpn_forward(bb);
        Vec3i fdims{bb.level_small->value.dim(1), bb.level_small->value.dim(2),
                    bb.level_small->value.dim(3)};
        PlacedAnchors anchors = model_.place_all_anchors(fdims);
        auto assignment = assign_anchors(anchors.boxes, chunk.annotations, model_.config().detect);

        LossLogRow row;
        row.step = step;
        row.stage = int(stage);
        row.lr = opt_.lr_at(step);

        nn::Var loss_obj = objectness_loss(rpn, anchors, assignment);
        nn::Var loss_box = box_loss(rpn, anchors, assignment, chunk.annotations);
        nn::Var total = nn::add(loss_obj, loss_box);
        row.objectness = loss_obj->value.data[0];
        row.box = loss_box->value.data[0];

        std::vector<Box3> mask_proposals;
        if (stage != TrainStage::Rpn) {
            nn::Var loss_cls = classification_loss(bb, rpn, anchors, chunk.annotations, rng,
                                                   &mask_proposals);
            row.cls = loss_cls->value.data[0];
            total = nn::add(total, loss_cls);
        }
        if (stage == TrainStage::RpnClsMask) {
            nn::Var loss_mask = mask_loss(chunk, colorvol, mask_proposals, rng);
            row.mask = loss_mask->value.data[0];
            total = nn::add(total, loss_mask);
        }
        row.total = total->value.data[0];
        if (std::isfinite(row.total)) {
            nn::backward(total);
            model_.params().sgd_step(opt_, step);
        }
        return row;
    }

private:
    nn::Var objectness_loss(const Model::RpnOut& rpn, const PlacedAnchors& pa,
                            const std::vector<AnchorAssignment>& assignment) {
        // gather per-anchor [neg, pos] logit rows split by level
        std::vector<std::size_t> idx_small, idx_large;
        std::vector<int> targets;
        std::vector<bool> positives;
        Vec3i dims = pa.feat_dims;
        int n_small = model_.anchors().n_small(), n_large = model_.anchors().n_large();
        std::size_t pos_count = 0, neg_count = 0;
        auto visit_level = [&](std::size_t offset, int n_sizes, std::vector<std::size_t>& idx) {
            for (int x = 0; x < dims[0]; ++x)
                for (int y = 0; y < dims[1]; ++y)
                    for (int z = 0; z < dims[2]; ++z)
                        for (int s = 0; s < n_sizes; ++s) {
                            std::size_t ai = offset + PlacedAnchors::index(dims, n_sizes, x, y, z, s);
                            const auto& a = assignment[ai];
                            if (a.label == AnchorLabel::Ignore) continue;
                            idx.push_back(Model::rpn_index(dims, s, 0, 2, x, y, z));
                            idx.push_back(Model::rpn_index(dims, s, 1, 2, x, y, z));
                            bool pos = a.label == AnchorLabel::Positive;
                            targets.push_back(pos ? 1 : 0);
                            positives.push_back(pos);
                            (pos ? pos_count : neg_count)++;
                        }
        };
        visit_level(0, n_small, idx_small);
        visit_level(pa.small_count, n_large, idx_large);

        std::vector<nn::Var> rows;
        if (!idx_small.empty())
            rows.push_back(nn::reshape(nn::gather(rpn.small.objectness, idx_small),
                                       {int(idx_small.size() / 2), 2}));
        if (!idx_large.empty())
            rows.push_back(nn::reshape(nn::gather(rpn.large.objectness, idx_large),
                                       {int(idx_large.size() / 2), 2}));
        if (rows.empty()) return nn::constant(nn::Tensor({1}));
        nn::Var logits = rows.size() == 1 ? rows[0] : nn::concat0(rows);
        // average positives and negatives separately, then sum the two means
        std::vector<double> weights(targets.size());
        for (std::size_t i = 0; i < targets.size(); ++i)
            weights[i] = positives[i] ? (pos_count ? 1.0 / double(pos_count) : 0.0)
                                      : (neg_count ? 1.0 / double(neg_count) : 0.0);
        return nn::cross_entropy(logits, targets, weights);
    }

    nn::Var box_loss(const Model::RpnOut& rpn, const PlacedAnchors& pa,
                     const std::vector<AnchorAssignment>& assignment,
                     const std::vector<InstanceAnnotation>& gts) {
        std::vector<std::size_t> idx_small, idx_large;
        std::vector<double> targets;
        Vec3i dims = pa.feat_dims;
        auto visit_level = [&](std::size_t offset, int n_sizes, std::vector<std::size_t>& idx) {
            for (int x = 0; x < dims[0]; ++x)
                for (int y = 0; y < dims[1]; ++y)
                    for (int z = 0; z < dims[2]; ++z)
                        for (int s = 0; s < n_sizes; ++s) {
                            std::size_t ai = offset + PlacedAnchors::index(dims, n_sizes, x, y, z, s);
                            const auto& a = assignment[ai];
                            if (a.label != AnchorLabel::Positive) continue;
                            for (int comp = 0; comp < 6; ++comp)
                                idx.push_back(Model::rpn_index(dims, s, comp, 6, x, y, z));
                            BoxDeltas d = encode_box(gts[std::size_t(a.gt_index)].box, pa.boxes[ai]);
                            targets.insert(targets.end(), {d.dx, d.dy, d.dz, d.dw, d.dh, d.dl});
                        }
        };
        visit_level(0, model_.anchors().n_small(), idx_small);
        visit_level(pa.small_count, model_.anchors().n_large(), idx_large);
        std::vector<nn::Var> preds;
        if (!idx_small.empty()) preds.push_back(nn::gather(rpn.small.deltas, idx_small));
        if (!idx_large.empty()) preds.push_back(nn::gather(rpn.large.deltas, idx_large));
        if (preds.empty()) return nn::constant(nn::Tensor({1}));
        nn::Var pred = preds.size() == 1 ? preds[0] : nn::concat0(preds);
        return nn::huber(pred, targets, 1.0);
    }

    nn::Var classification_loss(const Model::BackboneOut& bb, const Model::RpnOut& rpn,
                                const PlacedAnchors& pa,
                                const std::vector<InstanceAnnotation>& gts, std::mt19937_64& rng,
                                std::vector<Box3>* proposals_out) {
        auto proposals = model_.extract_proposals(rpn, pa, model_.config().detect.nms_train,
                                                  model_.config().detect.proposal_cap);
        // Balanced RoI sampling. Foreground comes from three sources so the
        // head sees the imperfect boxes it will get at inference: proposals
        // overlapping a gt, the gt boxes themselves, and jittered copies of
        // each gt. Background is sampled from low-overlap proposals at most
        // 1:1 against foreground.
        std::vector<std::pair<Box3, std::size_t>> fg_pool; // box, matched gt
        std::vector<std::pair<Box3, double>> bg_pool;      // box, best IoU
        for (const auto& p : proposals) {
            double best = 0.0;
            std::size_t best_gt = 0;
            for (std::size_t g = 0; g < gts.size(); ++g) {
                double iou = box_iou(p.box, gts[g].box);
                if (iou > best) { best = iou; best_gt = g; }
            }
            // foreground gate matches the evaluation overlap threshold so the
            // head learns to accept exactly the boxes that would count as hits
            if (best >= 0.25) fg_pool.emplace_back(p.box, best_gt);
            else bg_pool.emplace_back(p.box, best);
        }
        std::uniform_real_distribution<double> shift(-0.4, 0.4), scale(0.6, 1.6);
        for (std::size_t g = 0; g < gts.size(); ++g) {
            fg_pool.emplace_back(gts[g].box, g);
            for (int j = 0; j < 4; ++j) {
                Box3 b = gts[g].box;
                for (int i = 0; i < 3; ++i) {
                    b.center[i] += shift(rng) * b.size[i];
                    b.size[i] = std::max(1.0, b.size[i] * scale(rng));
                }
                // a jittered copy only stays foreground if it would still
                // count as a hit against its source box
                double iou = box_iou(b, gts[g].box);
                if (iou >= 0.25) fg_pool.emplace_back(b, g);
                else bg_pool.emplace_back(b, iou);
            }
        }
        std::shuffle(fg_pool.begin(), fg_pool.end(), rng);
        if (int(fg_pool.size()) > max_cls_proposals) fg_pool.resize(std::size_t(max_cls_proposals));
        // near-misses are what inference must reject, so fill at least half
        // of the background quota with the highest-overlap negatives
        std::shuffle(bg_pool.begin(), bg_pool.end(), rng);
        std::size_t bg_cap = std::max<std::size_t>(fg_pool.size(), 1);
        if (bg_pool.size() > bg_cap) {
            std::stable_sort(bg_pool.begin(), bg_pool.end(),
                             [](const auto& a, const auto& b) { return a.second > b.second; });
            std::size_t hard = bg_cap - bg_cap / 2;
            // keep the `hard` hardest, then rotate a random slice of the easy
            // remainder into the back half of the quota
            std::shuffle(bg_pool.begin() + long(hard), bg_pool.end(), rng);
            bg_pool.resize(bg_cap);
        }

        std::vector<Box3> boxes;
        std::vector<int> labels;
        std::vector<int> gt_of; // matched gt index or -1
        for (const auto& [b, g] : fg_pool) {
            boxes.push_back(b);
            labels.push_back(gts[g].class_id);
            gt_of.push_back(int(g));
        }
        for (const auto& [b, iou] : bg_pool) {
            boxes.push_back(b);
            labels.push_back(0);
            gt_of.push_back(-1);
        }
        if (boxes.empty()) return nn::constant(nn::Tensor({1}));

        std::vector<nn::Var> losses;
        const GridMeta& fm = bb.feat_meta;
        GridMeta full({fm.dims[0] * 4, fm.dims[1] * 4, fm.dims[2] * 4}, fm.voxel_size / 4, fm.origin);
        for (std::size_t i = 0; i < boxes.size(); ++i) {
            Box3 clipped = clip_box(boxes[i], full);
            if (!clipped.valid()) continue;
            ClassifyHead::Output out = model_.classify(bb, clipped);
            losses.push_back(nn::cross_entropy(out.class_logits, {labels[i]}));
            if (gt_of[i] >= 0) {
                // per-class refinement deltas against the matched gt
                std::vector<std::size_t> idx;
                for (int comp = 0; comp < 6; ++comp)
                    idx.push_back(std::size_t(labels[i]) * 6 + std::size_t(comp));
                nn::Var pred = nn::gather(out.refinement, idx);
                BoxDeltas d = encode_box(gts[std::size_t(gt_of[i])].box, clipped);
                losses.push_back(nn::huber(pred, {d.dx, d.dy, d.dz, d.dw, d.dh, d.dl}, 1.0));
            }
            if (proposals_out) proposals_out->push_back(clipped);
        }
        if (losses.empty()) return nn::constant(nn::Tensor({1}));
        nn::Var total = losses[0];
        for (std::size_t i = 1; i < losses.size(); ++i) total = nn::add(total, losses[i]);
        return nn::scale(total, 1.0 / double(losses.size()));
    }

    nn::Var mask_loss(const Chunk& chunk, const FeatureVolumeVar& colorvol,
                      const std::vector<Box3>& proposals, std::mt19937_64& rng) {
        auto targets = build_mask_targets(proposals, chunk.annotations, chunk.tsdf.meta,
                                          model_.config().detect.mask_iou_gate);
        if (targets.empty()) return nn::constant(nn::Tensor({1}));
        if (int(targets.size()) > max_mask_targets) {
            std::shuffle(targets.begin(), targets.end(), rng);
            targets.resize(std::size_t(max_mask_targets));
        }
        nn::Var features = model_.mask_backbone().forward(chunk.tsdf, colorvol);
        std::vector<nn::Var> losses;
        for (const auto& t : targets) {
            int cls = chunk.annotations[std::size_t(t.gt_index)].class_id;
            nn::Var crop = crop_var(features, chunk.tsdf.meta, t.region);
            nn::Var logits = mask_head_logits(crop);
            std::size_t vol = t.region.volume();
            std::vector<std::size_t> idx(vol);
            for (std::size_t i = 0; i < vol; ++i) idx[i] = std::size_t(cls) * vol + i;
            losses.push_back(nn::bce_logits(nn::gather(logits, idx), t.target));
        }
        nn::Var total = losses[0];
        for (std::size_t i = 1; i < losses.size(); ++i) total = nn::add(total, losses[i]);
        return nn::scale(total, 1.0 / double(losses.size()));
    }

    nn::Var mask_head_logits(const nn::Var& crop) {
        return nn::conv3d(crop, model_.params().get("mask.head.w"), model_.params().get("mask.head.b"),
                          {1, 1, 1}, {0, 0, 0});
    }

    static Box3 clip_box(const Box3& b, const GridMeta& meta) {
        Vec3 mn = b.min_corner(), mx = b.max_corner();
        for (int i = 0; i < 3; ++i) {
            mn[i] = std::clamp(mn[i], 0.0, double(meta.dims[i]));
            mx[i] = std::clamp(mx[i], 0.0, double(meta.dims[i]));
        }
        return Box3::from_min_max(mn, mx);
    }

    std::map<std::string, std::vector<double>> save_params() const {
        std::map<std::string, std::vector<double>> snap;
        for (const auto& name : model_.params().names())
            snap[name] = model_.params().get(name)->value.data;
        return snap;
    }
    void restore_params(const std::map<std::string, std::vector<double>>& snap) {
        for (const auto& [name, data] : snap) model_.params().get(name)->value.data = data;
    }

    Model& model_;
    nn::TrainConfig opt_;
};

// ---------------------------------------------------------------------------
// inference

struct InferConfig {
    double min_score = 0.35;
    double mask_threshold = 0.5;
    double final_nms = 0.15; // class-wise suppression of refined duplicates
    int max_detections = 64;
    int expected_z = 0; // if > 0, the scene z-dim must equal this fixed height
};

// Single fully-convolutional forward pass over a whole scene grid using all
// provided views; NMS at the test threshold; per-detection class, score,
// refined box, and hard mask.
inline std::vector<Detection> infer_scene(Model& model, const TsdfGrid& scene,
                                          const std::vector<CameraView>& views,
                                          const InferConfig& icfg = {}) {
    const GridMeta& meta = scene.meta;
    if (meta.dims[0] % 4 != 0 || meta.dims[1] % 4 != 0 || meta.dims[2] % 4 != 0)
        throw nn::ShapeMismatch("infer_scene: grid dims must be divisible by 4");
    if (icfg.expected_z > 0 && meta.dims[2] != icfg.expected_z)
        throw nn::ShapeMismatch("infer_scene: scene height does not match the configured z dim");
    FeatureVolumeVar colorvol = model.color_volume(views, meta);
    Model::BackboneOut bb = model.detection_backbone(scene, colorvol);
    Model::RpnOut rpn = model.rpn_forward(bb);
    Vec3i fdims{bb.level_small->value.dim(1), bb.level_small->value.dim(2),
                bb.level_small->value.dim(3)};
    PlacedAnchors anchors = model.place_all_anchors(fdims);
    auto proposals =
        model.extract_proposals(rpn, anchors, model.config().detect.nms_test,
                                model.config().detect.proposal_cap);

    auto clip = [&](const Box3& b) {
        Vec3 mn = b.min_corner(), mx = b.max_corner();
        for (int i = 0; i < 3; ++i) {
            mn[i] = std::clamp(mn[i], 0.0, double(meta.dims[i]));
            mx[i] = std::clamp(mx[i], 0.0, double(meta.dims[i]));
        }
        return Box3::from_min_max(mn, mx);
    };
    // degenerate slivers left over from clipping carry no usable evidence
    auto usable = [](const Box3& b) {
        return b.valid() && b.size[0] >= 1.0 && b.size[1] >= 1.0 && b.size[2] >= 1.0;
    };
    struct Scored {
        int cls = 0;
        double prob = 0.0;
        BoxDeltas deltas;
    };
    auto score_box = [&](const Box3& box) {
        ClassifyHead::Output out = model.classify(bb, box);
        const auto& lg = out.class_logits->value.data;
        double m = *std::max_element(lg.begin(), lg.end());
        double denom = 0.0;
        for (double v : lg) denom += std::exp(v - m);
        Scored s;
        s.prob = std::exp(lg[0] - m) / denom;
        for (std::size_t c = 1; c < lg.size(); ++c) {
            double prob = std::exp(lg[c] - m) / denom;
            if (prob > s.prob) { s.prob = prob; s.cls = int(c); }
        }
        if (s.cls > 0) {
            const auto& rf = out.refinement->value.data;
            std::size_t off = std::size_t(s.cls) * 6;
            s.deltas = {rf[off], rf[off + 1], rf[off + 2], rf[off + 3], rf[off + 4], rf[off + 5]};
        }
        return s;
    };

    std::vector<Detection> candidates;
    for (const auto& p : proposals) {
        Box3 box = clip(p.box);
        if (!usable(box)) continue;
        Scored first = score_box(box);
        if (first.cls == 0) continue;

        Box3 final_box = box;
        Scored final_score = first;
        if (model.config().detect.apply_refinement) {
            // refinement pulls a rough proposal onto the object; scoring the
            // refined box (which the head was trained on) calibrates the
            // final confidence far better than raw objectness does
            Box3 refined = clip(decode_box(first.deltas, box));
            if (usable(refined)) {
                Scored second = score_box(refined);
                if (second.cls == 0) continue;
                final_box = refined;
                final_score = second;
            }
        }
        if (final_score.prob < icfg.min_score) continue;

        Detection det;
        det.box = final_box;
        det.class_id = final_score.cls;
        det.score = final_score.prob;
        candidates.push_back(std::move(det));
    }

    // refinement moves boxes, so duplicates of one object collapse onto it:
    // run class-wise NMS on the refined boxes before committing to masks
    std::vector<Detection> dets;
    std::set<int> classes;
    for (const auto& d : candidates) classes.insert(d.class_id);
    for (int cls : classes) {
        std::vector<Box3> cboxes;
        std::vector<double> cscores;
        std::vector<std::size_t> orig;
        for (std::size_t i = 0; i < candidates.size(); ++i)
            if (candidates[i].class_id == cls) {
                cboxes.push_back(candidates[i].box);
                cscores.push_back(candidates[i].score);
                orig.push_back(i);
            }
        for (std::size_t k : nms(cboxes, cscores, icfg.final_nms))
            dets.push_back(candidates[orig[k]]);
    }
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (int(dets.size()) > icfg.max_detections) dets.resize(std::size_t(icfg.max_detections));

    nn::Var mask_features = model.mask_backbone().forward(scene, colorvol);
    for (auto& det : dets) {
        VoxelRegion region = enclosing_region(det.box, meta);
        if (region.empty()) continue;
        nn::Var logits = model.mask_backbone().region_logits(mask_features, meta, det.box);
        det.mask = mask_from_logits(logits, meta, det.box, det.class_id, icfg.mask_threshold);
    }
    return dets;
}

} // namespace sis
