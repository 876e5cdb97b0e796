#pragma once

// Full network assembly: 2D encoder + back-projection, the two-branch
// detection backbone with factor-4 spatial reduction and two anchor-level
// feature maps, per-level RPN heads, RoI classification head, and the
// full-resolution mask backbone. Widths are configurable; defaults are the
// desk-scale (paper widths divided by 8).

#include <random>
#include <string>
#include <vector>

#include "sis/backproject.hpp"
#include "sis/detect.hpp"
#include "sis/grid.hpp"
#include "sis/mask.hpp"
#include "sis/nn.hpp"
#include "sis/synth.hpp"

namespace sis {

struct ModelConfig {
    int n_cls = 4;          // labels including background 0
    int color_channels = 8; // C2, back-projected feature channels
    int encoder_mid = 8;
    int det_branch = 8;     // per-branch width after first reduction
    int det_out = 16;       // combined feature width (both levels)
    int rpn_mid = 32;
    int cls_h1 = 32, cls_h2 = 32, cls_h3 = 16;
    int mask_branch = 8;
    int mask_out = 8;
    bool use_color = true;  // false = geometry-only ablation
    AnchorSet anchors;
    DetectConfig detect;
};

// One dense anchor (level, slot, cell) placed over a reduced feature map.
struct PlacedAnchors {
    std::vector<Box3> boxes;     // all levels concatenated, small level first
    std::size_t small_count = 0; // boxes[0..small_count) are the small level
    Vec3i feat_dims{0, 0, 0};

    // flat index of (cell, slot) within one level, matching place_anchors order
    static std::size_t index(Vec3i dims, int n_sizes, int x, int y, int z, int slot) {
        return ((std::size_t(x) * dims[1] + y) * dims[2] + z) * n_sizes + slot;
    }
};

class Model {
public:
    explicit Model(const ModelConfig& cfg, std::uint64_t init_seed = 1)
        : cfg_(cfg) {
        std::mt19937_64 rng(init_seed);
        if (cfg_.use_color)
            encoder_ = Encoder2D(store_, "enc", cfg_.encoder_mid, cfg_.color_channels, rng);
        int cb = cfg_.det_branch;
        geo_conv("det.geo1", cb, 1, 2, rng);
        geo_conv("det.geo2", cb, cb, 3, rng);
        geo_conv("det.geo3", cb, cb, 2, rng);
        geo_conv("det.geo4", cb, cb, 3, rng);
        int color_in = cfg_.use_color ? cfg_.color_channels + 3 : 1;
        if (cfg_.use_color) {
            geo_conv("det.color1", cb, color_in, 2, rng);
            geo_conv("det.color2", cb, cb, 3, rng);
            geo_conv("det.color3", cb, cb, 2, rng);
            geo_conv("det.color4", cb, cb, 3, rng);
        }
        int c_concat = cfg_.use_color ? 2 * cb : cb;
        geo_conv("det.combineA", cfg_.det_out, c_concat, 3, rng);
        geo_conv("det.combineB", cfg_.det_out, cfg_.det_out, 3, rng);
        rpn_small_ = RpnHead(store_, "rpn.small", cfg_.det_out, cfg_.rpn_mid,
                             cfg_.anchors.n_small(), rng);
        rpn_large_ = RpnHead(store_, "rpn.large", cfg_.det_out, cfg_.rpn_mid,
                             cfg_.anchors.n_large(), rng);
        int raw_ch = 1 + color_in;
        int roi_in = (cfg_.det_out + raw_ch) * cfg_.detect.roi_dims[0] * cfg_.detect.roi_dims[1] *
                     cfg_.detect.roi_dims[2];
        cls_head_ = ClassifyHead(store_, "cls", roi_in, cfg_.cls_h1, cfg_.cls_h2, cfg_.cls_h3,
                                 cfg_.n_cls, rng);
        mask_backbone_ = MaskBackbone(store_, "mask", color_in,
                                      cfg_.mask_branch, cfg_.mask_out, cfg_.n_cls, rng);
    }

    const ModelConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }

    // Encode all views, back-project, and view-pool into one color volume.
    // Returns an all-zero constant volume when color is disabled or no view
    // contributes (keeps downstream shapes fixed).
    // The color volume stacks the learned back-projected feature channels
    // with a dense raw RGB surface splat; the splat gives full-resolution
    // albedo coverage while the learned channels carry view-pooled context.
    FeatureVolumeVar color_volume(const std::vector<CameraView>& views, const GridMeta& meta) const {
        int C = cfg_.use_color ? cfg_.color_channels + 3 : 1;
        if (cfg_.use_color && !views.empty()) {
            std::vector<FeatureVolumeVar> vols;
            vols.reserve(views.size());
            for (const auto& view : views)
                vols.push_back(backproject(encoder_.forward(view.color), view, meta));
            FeatureVolumeVar pooled = view_pool(vols);
            FeatureVolumeVar splat = rgb_splat(views, meta);
            return {meta, C, nn::concat0({pooled.var, splat.var})};
        }
        nn::Tensor zero({C, meta.dims[0], meta.dims[1], meta.dims[2]});
        return {meta, C, nn::constant(std::move(zero))};
    }

    struct BackboneOut {
        nn::Var level_small; // {det_out, X/4, Y/4, Z/4}
        nn::Var level_large;
        GridMeta feat_meta;  // reduced grid, voxel_size * 4
        nn::Var raw;         // {1 + C, X, Y, Z} tsdf + color at full resolution
        GridMeta full_meta;
    };

    // Detection backbone: two stride-2 reductions per branch, concat, and two
    // 3x3x3 convs producing the small- and large-anchor feature maps.
    BackboneOut detection_backbone(const TsdfGrid& tsdf, const FeatureVolumeVar& colorvol) const {
        if (!(tsdf.meta == colorvol.meta)) throw MetaMismatch{};
        const GridMeta& meta = tsdf.meta;
        nn::Tensor g({1, meta.dims[0], meta.dims[1], meta.dims[2]});
        // normalize signed distances to [-1, 1] so conv activations and the
        // raw RoI stack stay in a well-conditioned range
        for (std::size_t i = 0; i < tsdf.values.size(); ++i)
            g.data[i] = tsdf.values[i] / tsdf.truncation;
        nn::Var geo = nn::constant(std::move(g));
        nn::Var geo_input = geo;
        geo = nn::relu(conv("det.geo1", geo, 2, 0));
        geo = nn::relu(conv("det.geo2", geo, 1, 1));
        geo = nn::relu(conv("det.geo3", geo, 2, 0));
        geo = nn::relu(conv("det.geo4", geo, 1, 1));
        nn::Var joined = geo;
        if (cfg_.use_color) {
            nn::Var color = nn::relu(conv("det.color1", colorvol.var, 2, 0));
            color = nn::relu(conv("det.color2", color, 1, 1));
            color = nn::relu(conv("det.color3", color, 2, 0));
            color = nn::relu(conv("det.color4", color, 1, 1));
            joined = nn::concat0({geo, color});
        }
        nn::Var a = nn::relu(conv("det.combineA", joined, 1, 1));
        nn::Var b = nn::relu(conv("det.combineB", a, 1, 1));
        GridMeta feat_meta({meta.dims[0] / 4, meta.dims[1] / 4, meta.dims[2] / 4},
                           meta.voxel_size * 4, meta.origin);
        // full-resolution raw stack for RoI classification: the coarse maps
        // carry context while the raw tsdf + color carry the fine detail that
        // survives inside small desk-scale boxes
        nn::Var raw = nn::concat0({geo_input, colorvol.var});
        return {a, b, feat_meta, raw, meta};
    }

    struct RpnOut {
        RpnHead::Output small, large;
    };
    RpnOut rpn_forward(const BackboneOut& bb) const {
        return {rpn_small_.forward(bb.level_small), rpn_large_.forward(bb.level_large)};
    }

    PlacedAnchors place_all_anchors(Vec3i feat_dims) const {
        PlacedAnchors pa;
        pa.feat_dims = feat_dims;
        auto small = place_anchors(cfg_.anchors.small_sizes, feat_dims, cfg_.anchors.placement_stride);
        auto large = place_anchors(cfg_.anchors.large_sizes, feat_dims, cfg_.anchors.placement_stride);
        pa.small_count = small.size();
        pa.boxes = std::move(small);
        pa.boxes.insert(pa.boxes.end(), large.begin(), large.end());
        return pa;
    }

    // Flat data index of (channel block, cell) in an RPN output tensor laid
    // out {K*N, X, Y, Z}: channel = slot*K + comp.
    static std::size_t rpn_index(Vec3i dims, int slot, int comp, int per_anchor, int x, int y, int z) {
        std::size_t cells = std::size_t(dims[0]) * dims[1] * dims[2];
        std::size_t channel = std::size_t(slot) * per_anchor + comp;
        return channel * cells + (std::size_t(x) * dims[1] + y) * dims[2] + z;
    }

    struct Proposal {
        Box3 box;          // full-res voxel coordinates
        double objectness; // softmax positive probability
        std::size_t anchor_index;
    };

    // Decode every anchor's predicted box and objectness, keep the top-K,
    // then NMS at the given threshold.
    std::vector<Proposal> extract_proposals(const RpnOut& rpn, const PlacedAnchors& pa,
                                            double nms_thresh, int top_k) const {
        std::vector<Proposal> all;
        decode_level(rpn.small.objectness, rpn.small.deltas, pa, 0, cfg_.anchors.n_small(), all);
        decode_level(rpn.large.objectness, rpn.large.deltas, pa, pa.small_count,
                     cfg_.anchors.n_large(), all);
        std::stable_sort(all.begin(), all.end(),
                         [](const Proposal& a, const Proposal& b) { return a.objectness > b.objectness; });
        if (int(all.size()) > top_k) all.resize(std::size_t(top_k));
        std::vector<Box3> boxes;
        std::vector<double> scores;
        for (const auto& p : all) { boxes.push_back(p.box); scores.push_back(p.objectness); }
        std::vector<Proposal> kept;
        for (std::size_t i : nms(boxes, scores, nms_thresh)) kept.push_back(all[i]);
        return kept;
    }

    ClassifyHead::Output classify(const BackboneOut& bb, const Box3& box_fullres) const {
        // box is in full-resolution voxels; the feature map is 4x coarser
        Box3 scaled{{box_fullres.center[0] / 4.0, box_fullres.center[1] / 4.0, box_fullres.center[2] / 4.0},
                    {box_fullres.size[0] / 4.0, box_fullres.size[1] / 4.0, box_fullres.size[2] / 4.0}};
        GridMeta local({bb.level_large->value.dim(1), bb.level_large->value.dim(2),
                        bb.level_large->value.dim(3)}, 1.0);
        nn::Var block = roi_pool(bb.level_large, local, scaled, cfg_.detect.roi_dims);
        GridMeta full_local({bb.full_meta.dims[0], bb.full_meta.dims[1], bb.full_meta.dims[2]}, 1.0);
        nn::Var raw_block = roi_pool(bb.raw, full_local, box_fullres, cfg_.detect.roi_dims);
        int n_block = int(block->value.size()), n_raw = int(raw_block->value.size());
        nn::Var flat = nn::concat0({nn::reshape(block, {n_block}), nn::reshape(raw_block, {n_raw})});
        return cls_head_.forward(flat);
    }

    const MaskBackbone& mask_backbone() const { return mask_backbone_; }
    const Encoder2D& encoder() const { return encoder_; }
    const AnchorSet& anchors() const { return cfg_.anchors; }

private:
    void geo_conv(const std::string& name, int co, int ci, int k, std::mt19937_64& rng) {
        store_.create(name + ".w", nn::he_uniform({co, ci, k, k, k}, std::size_t(ci) * k * k * k, rng));
        store_.create(name + ".b", nn::Tensor({co}));
    }
    nn::Var conv(const std::string& name, const nn::Var& x, int stride, int pad) const {
        return nn::conv3d(x, store_.get(name + ".w"), store_.get(name + ".b"),
                          {stride, stride, stride}, {pad, pad, pad});
    }
    void decode_level(const nn::Var& objectness, const nn::Var& deltas, const PlacedAnchors& pa,
                      std::size_t level_offset, int n_sizes, std::vector<Proposal>& out) const {
        if (n_sizes == 0) return;
        Vec3i dims{objectness->value.dim(1), objectness->value.dim(2), objectness->value.dim(3)};
        for (int x = 0; x < dims[0]; ++x)
            for (int y = 0; y < dims[1]; ++y)
                for (int z = 0; z < dims[2]; ++z)
                    for (int s = 0; s < n_sizes; ++s) {
                        std::size_t ai = level_offset + PlacedAnchors::index(dims, n_sizes, x, y, z, s);
                        double neg = objectness->value.data[rpn_index(dims, s, 0, 2, x, y, z)];
                        double pos = objectness->value.data[rpn_index(dims, s, 1, 2, x, y, z)];
                        double m = std::max(neg, pos);
                        double score = std::exp(pos - m) / (std::exp(neg - m) + std::exp(pos - m));
                        BoxDeltas d;
                        d.dx = deltas->value.data[rpn_index(dims, s, 0, 6, x, y, z)];
                        d.dy = deltas->value.data[rpn_index(dims, s, 1, 6, x, y, z)];
                        d.dz = deltas->value.data[rpn_index(dims, s, 2, 6, x, y, z)];
                        d.dw = deltas->value.data[rpn_index(dims, s, 3, 6, x, y, z)];
                        d.dh = deltas->value.data[rpn_index(dims, s, 4, 6, x, y, z)];
                        d.dl = deltas->value.data[rpn_index(dims, s, 5, 6, x, y, z)];
                        out.push_back({decode_box(d, pa.boxes[ai]), score, ai});
                    }
    }

    ModelConfig cfg_;
    nn::ParamStore store_;
    Encoder2D encoder_;
    RpnHead rpn_small_, rpn_large_;
    ClassifyHead cls_head_;
    MaskBackbone mask_backbone_;
};

} // namespace sis
