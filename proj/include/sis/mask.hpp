#pragma once

// Per-voxel instance mask prediction: the full-resolution mask backbone,
// per-class channel selection over a cropped region, and IoU-gated mask
// target construction.

#include <algorithm>
#include <cmath>
#include <vector>

#include "sis/backproject.hpp"
#include "sis/grid.hpp"
#include "sis/nn.hpp"

namespace sis {

// Crop an autodiff feature volume to an integer region (gather, exact).
inline nn::Var crop_var(const nn::Var& volume, const GridMeta& meta, const VoxelRegion& region) {
    if (region.empty()) throw EmptyCrop{};
    const int C = volume->value.dim(0);
    Vec3i ext = region.extent();
    std::vector<std::size_t> idx;
    idx.reserve(std::size_t(C) * region.volume());
    for (int c = 0; c < C; ++c)
        for (int x = region.min[0]; x < region.max[0]; ++x)
            for (int y = region.min[1]; y < region.max[1]; ++y)
                for (int z = region.min[2]; z < region.max[2]; ++z)
                    idx.push_back(std::size_t(c) * meta.voxel_count() + meta.index(x, y, z));
    return nn::reshape(nn::gather(volume, std::move(idx)), {C, ext[0], ext[1], ext[2]});
}

// Mask backbone: geometry and color branches of two stride-1 3x3x3 convs
// each, channelwise concatenation, then two more stride-1 convs. Spatial
// dimensions are preserved exactly.
class MaskBackbone {
public:
    MaskBackbone() = default;
    MaskBackbone(nn::ParamStore& store, const std::string& prefix, int c_color, int c_branch,
                 int c_out, int n_cls, std::mt19937_64& rng)
        : c_out_(c_out), n_cls_(n_cls) {
        auto conv = [&](const std::string& name, int co, int ci, int k) {
            w_.push_back(store.create(prefix + "." + name + ".w",
                                      nn::he_uniform({co, ci, k, k, k}, std::size_t(ci) * k * k * k, rng)));
            b_.push_back(store.create(prefix + "." + name + ".b", nn::Tensor({co})));
        };
        conv("geo1", c_branch, 1, 3);
        conv("geo2", c_branch, c_branch, 3);
        conv("color1", c_branch, c_color, 3);
        conv("color2", c_branch, c_branch, 3);
        conv("combine1", 2 * c_branch, 2 * c_branch, 3);
        conv("combine2", c_out, 2 * c_branch, 3);
        conv("head", n_cls, c_out, 1); // mask_6-style 1x1x1 class channels
    }

    // tsdf as a 1-channel volume plus the pooled color volume; same meta required.
    nn::Var forward(const TsdfGrid& tsdf, const FeatureVolumeVar& colorvol) const {
        if (!(tsdf.meta == colorvol.meta)) throw MetaMismatch{};
        nn::Tensor g({1, tsdf.meta.dims[0], tsdf.meta.dims[1], tsdf.meta.dims[2]});
        for (std::size_t i = 0; i < tsdf.values.size(); ++i)
            g.data[i] = tsdf.values[i] / tsdf.truncation;
        nn::Var geo = nn::constant(std::move(g));
        geo = nn::relu(conv(geo, 0, 1));
        geo = nn::relu(conv(geo, 1, 1));
        nn::Var color = nn::relu(conv(colorvol.var, 2, 1));
        color = nn::relu(conv(color, 3, 1));
        nn::Var h = nn::concat0({geo, color});
        h = nn::relu(conv(h, 4, 1));
        h = nn::relu(conv(h, 5, 1));
        return h; // {c_out, X, Y, Z}
    }

    // Class-channel logits over the region enclosing `box`: crop then the
    // 1x1x1 head conv to n_cls channels. Selection/sigmoid happen downstream.
    nn::Var region_logits(const nn::Var& features, const GridMeta& meta, const Box3& box) const {
        VoxelRegion region = enclosing_region(box, meta);
        nn::Var crop = crop_var(features, meta, region);
        return conv(crop, 6, 0); // {n_cls, ex, ey, ez}
    }

    int n_cls() const { return n_cls_; }

private:
    nn::Var conv(const nn::Var& x, std::size_t i, int pad) const {
        return nn::conv3d(x, w_[i], b_[i], {1, 1, 1}, {pad, pad, pad});
    }
    std::vector<nn::Var> w_, b_;
    int c_out_ = 0, n_cls_ = 0;
};

// Hard mask voxels for one proposal: sigmoid(logits of channel class_id) in
// the region enclosing `box`, thresholded.
inline std::vector<Vec3i> mask_from_logits(const nn::Var& region_logits, const GridMeta& meta,
                                           const Box3& box, int class_id, double threshold = 0.5) {
    VoxelRegion region = enclosing_region(box, meta);
    Vec3i ext = region.extent();
    std::vector<Vec3i> mask;
    const double logit_thresh = std::log(threshold / (1.0 - threshold));
    std::size_t plane = region.volume();
    const double* ch = region_logits->value.data.data() + std::size_t(class_id) * plane;
    std::size_t i = 0;
    for (int x = 0; x < ext[0]; ++x)
        for (int y = 0; y < ext[1]; ++y)
            for (int z = 0; z < ext[2]; ++z, ++i)
                if (ch[i] > logit_thresh)
                    mask.push_back({region.min[0] + x, region.min[1] + y, region.min[2] + z});
    return mask;
}

struct MaskTarget {
    std::size_t proposal_index = 0;
    int gt_index = -1;
    VoxelRegion region;          // intersection of proposal and gt box, integer-rounded
    std::vector<double> target;  // binary, region order x,y,z (z fastest)
};

// Emit a target per proposal whose max-IoU gt reaches the gate; the target is
// the gt mask restricted to the overlap region.
inline std::vector<MaskTarget> build_mask_targets(const std::vector<Box3>& proposals,
                                                  const std::vector<InstanceAnnotation>& gts,
                                                  const GridMeta& meta, double gate = 0.5) {
    std::vector<MaskTarget> out;
    for (std::size_t p = 0; p < proposals.size(); ++p) {
        double best = 0.0;
        int best_gt = -1;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            double iou = box_iou(proposals[p], gts[g].box);
            if (iou > best) { best = iou; best_gt = int(g); }
        }
        if (best_gt < 0 || best < gate) continue;
        const auto& gt = gts[std::size_t(best_gt)];
        VoxelRegion pr = enclosing_region(proposals[p], meta);
        VoxelRegion gr = enclosing_region(gt.box, meta);
        VoxelRegion overlap;
        for (int i = 0; i < 3; ++i) {
            overlap.min[i] = std::max(pr.min[i], gr.min[i]);
            overlap.max[i] = std::min(pr.max[i], gr.max[i]);
        }
        if (overlap.empty()) continue;
        MaskTarget t;
        t.proposal_index = p;
        t.gt_index = best_gt;
        t.region = overlap;
        Vec3i ext = overlap.extent();
        t.target.assign(overlap.volume(), 0.0);
        for (const auto& v : gt.mask)
            if (overlap.contains(v[0], v[1], v[2])) {
                std::size_t i = (std::size_t(v[0] - overlap.min[0]) * ext[1] + (v[1] - overlap.min[1])) *
                                    ext[2] + (v[2] - overlap.min[2]);
                t.target[i] = 1.0;
            }
        out.push_back(std::move(t));
    }
    return out;
}

} // namespace sis
