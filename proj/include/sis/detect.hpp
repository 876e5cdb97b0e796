#pragma once

// Anchor machinery and detection heads: k-means anchor selection, box delta
// encoding/decoding relative to anchors, IoU-threshold anchor association,
// greedy NMS, 3D-RoI max pooling into 4x4x4 blocks, the two-level 3D-RPN and
// the classification MLP head.

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "sis/grid.hpp"
#include "sis/nn.hpp"

namespace sis {

struct AnchorSet {
    std::vector<Vec3> small_sizes; // voxels
    std::vector<Vec3> large_sizes;
    int placement_stride = 4;

    int n_small() const { return int(small_sizes.size()); }
    int n_large() const { return int(large_sizes.size()); }
};

struct BoxDeltas {
    double dx = 0, dy = 0, dz = 0, dw = 0, dh = 0, dl = 0;
};

struct DetectConfig {
    double iou_pos = 0.35;
    double iou_neg = 0.15;
    double nms_train = 0.7;
    double nms_test = 0.3;
    Vec3i roi_dims{4, 4, 4};
    double mask_iou_gate = 0.5;
    int n_cls = 4;               // total labels including background 0
    int proposal_cap = 256;      // top-K by score before NMS
    bool force_match_best = true; // also mark the best anchor per gt positive
    bool apply_refinement = true; // apply per-class cls_bbox decode
    double size_split_m3 = 1.0;  // small/large anchor volume split
};

struct InsufficientData : std::runtime_error {
    InsufficientData() : std::runtime_error("fewer distinct box sizes than k") {}
};

// Lloyd k-means with k-means++ seeding on box size triples, then a
// small/large partition by metric volume.
inline AnchorSet kmeans_anchors(const std::vector<Vec3>& sizes, int k, std::uint64_t seed,
                                double voxel_size, double split_m3 = 1.0, int stride = 4,
                                int max_iters = 100) {
    std::vector<Vec3> distinct = sizes;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (int(distinct.size()) < k) throw InsufficientData{};

    auto dist2 = [](const Vec3& a, const Vec3& b) {
        double d0 = a[0] - b[0], d1 = a[1] - b[1], d2 = a[2] - b[2];
        return d0 * d0 + d1 * d1 + d2 * d2;
    };

    std::mt19937_64 rng(seed);
    std::vector<Vec3> centroids;
    // k-means++ seeding
    std::uniform_int_distribution<std::size_t> first(0, sizes.size() - 1);
    centroids.push_back(sizes[first(rng)]);
    std::vector<double> d2(sizes.size());
    while (int(centroids.size()) < k) {
        double total = 0.0;
        for (std::size_t i = 0; i < sizes.size(); ++i) {
            double best = dist2(sizes[i], centroids[0]);
            for (std::size_t c = 1; c < centroids.size(); ++c)
                best = std::min(best, dist2(sizes[i], centroids[c]));
            d2[i] = best;
            total += best;
        }
        if (total <= 0.0) {
            // all points covered; fall back to unused distinct sizes
            for (const auto& s : distinct) {
                if (std::find(centroids.begin(), centroids.end(), s) == centroids.end()) {
                    centroids.push_back(s);
                    break;
                }
            }
            continue;
        }
        std::uniform_real_distribution<double> u(0.0, total);
        double r = u(rng), acc = 0.0;
        std::size_t pick = sizes.size() - 1;
        for (std::size_t i = 0; i < sizes.size(); ++i) {
            acc += d2[i];
            if (acc >= r) { pick = i; break; }
        }
        centroids.push_back(sizes[pick]);
    }

    std::vector<int> assign(sizes.size(), -1);
    for (int iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < sizes.size(); ++i) {
            int best = 0;
            double bd = dist2(sizes[i], centroids[0]);
            for (int c = 1; c < k; ++c) {
                double d = dist2(sizes[i], centroids[std::size_t(c)]);
                if (d < bd) { bd = d; best = c; }
            }
            if (assign[i] != best) { assign[i] = best; changed = true; }
        }
        if (!changed) break;
        for (int c = 0; c < k; ++c) {
            Vec3 sum{0, 0, 0};
            int count = 0;
            for (std::size_t i = 0; i < sizes.size(); ++i)
                if (assign[i] == c) { sum = sum + sizes[i]; ++count; }
            if (count > 0) centroids[std::size_t(c)] = sum * (1.0 / count);
        }
    }

    AnchorSet set;
    set.placement_stride = stride;
    std::sort(centroids.begin(), centroids.end(),
              [](const Vec3& a, const Vec3& b) { return a[0] * a[1] * a[2] < b[0] * b[1] * b[2]; });
    for (const auto& c : centroids) {
        Box3 b{{0, 0, 0}, c};
        if (box_volume_class(b, voxel_size, split_m3) == BoxSizeClass::Small)
            set.small_sizes.push_back(c);
        else
            set.large_sizes.push_back(c);
    }
    return set;
}

// Eq.-1 style deltas: centers normalized by anchor size, sizes as log ratios.
inline BoxDeltas encode_box(const Box3& gt, const Box3& anchor) {
    BoxDeltas d;
    d.dx = (gt.center[0] - anchor.center[0]) / anchor.size[0];
    d.dy = (gt.center[1] - anchor.center[1]) / anchor.size[1];
    d.dz = (gt.center[2] - anchor.center[2]) / anchor.size[2];
    d.dw = std::log(gt.size[0] / anchor.size[0]);
    d.dh = std::log(gt.size[1] / anchor.size[1]);
    d.dl = std::log(gt.size[2] / anchor.size[2]);
    return d;
}

inline Box3 decode_box(const BoxDeltas& d, const Box3& anchor) {
    Box3 b;
    b.center = {anchor.center[0] + d.dx * anchor.size[0],
                anchor.center[1] + d.dy * anchor.size[1],
                anchor.center[2] + d.dz * anchor.size[2]};
    b.size = {anchor.size[0] * std::exp(d.dw), anchor.size[1] * std::exp(d.dh),
              anchor.size[2] * std::exp(d.dl)};
    return b;
}

enum class AnchorLabel { Positive, Negative, Ignore };

struct AnchorAssignment {
    AnchorLabel label = AnchorLabel::Negative;
    int gt_index = -1; // valid when Positive
    double iou = 0.0;
};

// Label each placed anchor by its max-IoU ground truth. IoU in
// [iou_neg, iou_pos] falls into the ignore band. With force_match_best the
// highest-IoU anchor of each gt (IoU > 0) is positive regardless of threshold.
inline std::vector<AnchorAssignment> assign_anchors(const std::vector<Box3>& anchors,
                                                    const std::vector<InstanceAnnotation>& gts,
                                                    const DetectConfig& cfg) {
    std::vector<AnchorAssignment> out(anchors.size());
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        double best_iou = 0.0;
        int best_gt = -1;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            double iou = box_iou(anchors[a], gts[g].box);
            if (iou > best_iou) { best_iou = iou; best_gt = int(g); }
        }
        out[a].iou = best_iou;
        out[a].gt_index = best_gt;
        if (best_iou > cfg.iou_pos) out[a].label = AnchorLabel::Positive;
        else if (best_iou < cfg.iou_neg) out[a].label = AnchorLabel::Negative;
        else out[a].label = AnchorLabel::Ignore;
    }
    if (cfg.force_match_best) {
        for (std::size_t g = 0; g < gts.size(); ++g) {
            double best = 0.0;
            std::size_t arg = anchors.size();
            for (std::size_t a = 0; a < anchors.size(); ++a) {
                double iou = box_iou(anchors[a], gts[g].box);
                if (iou > best) { best = iou; arg = a; }
            }
            if (arg < anchors.size()) {
                out[arg].label = AnchorLabel::Positive;
                out[arg].gt_index = int(g);
                out[arg].iou = best;
            }
        }
    }
    return out;
}

// Greedy NMS; ties on score break toward the lower index.
inline std::vector<std::size_t> nms(const std::vector<Box3>& boxes, const std::vector<double>& scores,
                                    double threshold) {
    if (boxes.size() != scores.size()) throw std::invalid_argument("nms: size mismatch");
    std::vector<std::size_t> order(boxes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<bool> removed(boxes.size(), false);
    std::vector<std::size_t> kept;
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
        std::size_t i = order[oi];
        if (removed[i]) continue;
        kept.push_back(i);
        for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
            std::size_t j = order[oj];
            if (!removed[j] && box_iou(boxes[i], boxes[j]) > threshold) removed[j] = true;
        }
    }
    return kept;
}

// 3D-RoI pooling: crop the feature volume to the box, split each axis into
// roi_dims contiguous bins (short axes extended by nearest replication so no
// bin is empty), channelwise max per bin. Returns a {C, rx, ry, rz} Var.
inline nn::Var roi_pool(const nn::Var& volume, const GridMeta& meta, const Box3& box,
                        Vec3i roi_dims = {4, 4, 4}) {
    if (volume->value.shape.size() != 4) throw nn::ShapeMismatch("roi_pool input rank");
    const int C = volume->value.dim(0);
    VoxelRegion region = enclosing_region(box, meta);
    if (region.empty()) throw EmptyCrop{};
    Vec3i ext = region.extent();

    const std::size_t vox_count = meta.voxel_count();
    auto axis_range = [&](int axis, int bin) {
        int n = ext[axis], r = roi_dims[axis];
        if (n >= r) {
            return std::pair<int, int>{bin * n / r, (bin + 1) * n / r};
        }
        // short axis: replicate nearest voxel
        int idx = std::min(n - 1, bin * n / r);
        return std::pair<int, int>{idx, idx + 1};
    };

    std::vector<std::vector<std::size_t>> bins;
    bins.reserve(std::size_t(C) * roi_dims[0] * roi_dims[1] * roi_dims[2]);
    for (int c = 0; c < C; ++c)
        for (int bx = 0; bx < roi_dims[0]; ++bx)
            for (int by = 0; by < roi_dims[1]; ++by)
                for (int bz = 0; bz < roi_dims[2]; ++bz) {
                    auto [x0, x1] = axis_range(0, bx);
                    auto [y0, y1] = axis_range(1, by);
                    auto [z0, z1] = axis_range(2, bz);
                    std::vector<std::size_t> bin;
                    for (int x = x0; x < x1; ++x)
                        for (int y = y0; y < y1; ++y)
                            for (int z = z0; z < z1; ++z)
                                bin.push_back(std::size_t(c) * vox_count +
                                              meta.index(region.min[0] + x, region.min[1] + y,
                                                         region.min[2] + z));
                    bins.push_back(std::move(bin));
                }
    nn::Var flat = nn::max_over_sets(volume, std::move(bins));
    return nn::reshape(flat, {C, roi_dims[0], roi_dims[1], roi_dims[2]});
}

// Per-level RPN head: a 3x3x3 conv, then 1x1x1 convs to 2*N objectness and
// 6*N delta channels.
class RpnHead {
public:
    RpnHead() = default;
    RpnHead(nn::ParamStore& store, const std::string& prefix, int c_in, int c_mid, int n_anchors,
            std::mt19937_64& rng)
        : n_anchors_(n_anchors) {
        w_ = store.create(prefix + ".w", nn::he_uniform({c_mid, c_in, 3, 3, 3}, std::size_t(c_in) * 27, rng));
        b_ = store.create(prefix + ".b", nn::Tensor({c_mid}));
        w_cls_ = store.create(prefix + ".w_cls",
                              nn::he_uniform({2 * n_anchors, c_mid, 1, 1, 1}, std::size_t(c_mid), rng));
        b_cls_ = store.create(prefix + ".b_cls", nn::Tensor({2 * n_anchors}));
        w_box_ = store.create(prefix + ".w_box",
                              nn::he_uniform({6 * n_anchors, c_mid, 1, 1, 1}, std::size_t(c_mid), rng));
        b_box_ = store.create(prefix + ".b_box", nn::Tensor({6 * n_anchors}));
    }

    struct Output {
        nn::Var objectness; // {2N, X, Y, Z}
        nn::Var deltas;     // {6N, X, Y, Z}
    };
    Output forward(const nn::Var& features) const {
        nn::Var h = nn::relu(nn::conv3d(features, w_, b_, {1, 1, 1}, {1, 1, 1}));
        return {nn::conv3d(h, w_cls_, b_cls_, {1, 1, 1}, {0, 0, 0}),
                nn::conv3d(h, w_box_, b_box_, {1, 1, 1}, {0, 0, 0})};
    }
    int n_anchors() const { return n_anchors_; }

private:
    nn::Var w_, b_, w_cls_, b_cls_, w_box_, b_box_;
    int n_anchors_ = 0;
};

// Classification head: flattened RoI block through a 3-layer MLP with two
// output heads (class logits, per-class box refinement deltas).
class ClassifyHead {
public:
    ClassifyHead() = default;
    ClassifyHead(nn::ParamStore& store, const std::string& prefix, int in_dim, int h1, int h2, int h3,
                 int n_cls, std::mt19937_64& rng)
        : n_cls_(n_cls) {
        w1_ = store.create(prefix + ".w1", nn::he_uniform({h1, in_dim}, std::size_t(in_dim), rng));
        b1_ = store.create(prefix + ".b1", nn::Tensor({h1}));
        w2_ = store.create(prefix + ".w2", nn::he_uniform({h2, h1}, std::size_t(h1), rng));
        b2_ = store.create(prefix + ".b2", nn::Tensor({h2}));
        w3_ = store.create(prefix + ".w3", nn::he_uniform({h3, h2}, std::size_t(h2), rng));
        b3_ = store.create(prefix + ".b3", nn::Tensor({h3}));
        w_cls_ = store.create(prefix + ".w_cls", nn::he_uniform({n_cls, h3}, std::size_t(h3), rng));
        b_cls_ = store.create(prefix + ".b_cls", nn::Tensor({n_cls}));
        w_box_ = store.create(prefix + ".w_box", nn::he_uniform({n_cls * 6, h3}, std::size_t(h3), rng));
        b_box_ = store.create(prefix + ".b_box", nn::Tensor({n_cls * 6}));
    }

    struct Output {
        nn::Var class_logits; // {n_cls}
        nn::Var refinement;   // {n_cls * 6}
    };
    Output forward(const nn::Var& roi_block) const {
        nn::Var h = nn::reshape(roi_block, {int(roi_block->value.size())});
        h = nn::relu(nn::fc(h, w1_, b1_));
        h = nn::relu(nn::fc(h, w2_, b2_));
        h = nn::relu(nn::fc(h, w3_, b3_));
        return {nn::fc(h, w_cls_, b_cls_), nn::fc(h, w_box_, b_box_)};
    }
    int n_cls() const { return n_cls_; }

private:
    nn::Var w1_, b1_, w2_, b2_, w3_, b3_, w_cls_, b_cls_, w_box_, b_box_;
    int n_cls_ = 0;
};

// Dense anchor placement: one anchor of each level size at every cell center
// of that level's feature map (centers at stride/2 + stride*cell, full-res
// voxel coordinates).
inline std::vector<Box3> place_anchors(const std::vector<Vec3>& sizes, Vec3i feat_dims, int stride) {
    std::vector<Box3> out;
    out.reserve(sizes.size() * std::size_t(feat_dims[0]) * feat_dims[1] * feat_dims[2]);
    for (int x = 0; x < feat_dims[0]; ++x)
        for (int y = 0; y < feat_dims[1]; ++y)
            for (int z = 0; z < feat_dims[2]; ++z)
                for (const auto& s : sizes)
                    out.push_back(Box3{{stride * (x + 0.5), stride * (y + 0.5), stride * (z + 0.5)}, s});
    return out;
}

} // namespace sis
