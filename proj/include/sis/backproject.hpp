#pragma once

// 2D feature extraction from color images and the back-projection layer:
// feature cells are lifted to single voxels via depth + intrinsics + pose,
// intra-view collisions and cross-view pooling both resolve by elementwise
// max. Gradients flow back to the winning feature cell per voxel/channel.

#include <stdexcept>
#include <vector>

#include "sis/camera.hpp"
#include "sis/grid.hpp"
#include "sis/nn.hpp"

namespace sis {

struct MetaMismatch : std::runtime_error {
    MetaMismatch() : std::runtime_error("feature volumes disagree on grid meta or channels") {}
};

// A C x X x Y x Z autodiff tensor tagged with its grid placement.
struct FeatureVolumeVar {
    GridMeta meta;
    int channels = 0;
    nn::Var var;
};

struct FeatureMap2D {
    int channels = 0, height = 0, width = 0;
    int source_height = 0, source_width = 0; // downscale factor = source/h = 8
    nn::Var var; // {C, h, w}
};

// Trainable 2D encoder: three stride-2 convolutions (2x2 kernels), ReLU after
// each, mapping H x W RGB to C2 channels at (H/8, W/8).
class Encoder2D {
public:
    Encoder2D() = default;
    Encoder2D(nn::ParamStore& store, const std::string& prefix, int c_mid, int c_out,
              std::mt19937_64& rng) {
        w1_ = store.create(prefix + ".w1", nn::he_uniform({c_mid, 3, 2, 2}, 3 * 4, rng));
        b1_ = store.create(prefix + ".b1", nn::Tensor({c_mid}));
        w2_ = store.create(prefix + ".w2", nn::he_uniform({c_mid, c_mid, 2, 2}, std::size_t(c_mid) * 4, rng));
        b2_ = store.create(prefix + ".b2", nn::Tensor({c_mid}));
        w3_ = store.create(prefix + ".w3", nn::he_uniform({c_out, c_mid, 2, 2}, std::size_t(c_mid) * 4, rng));
        b3_ = store.create(prefix + ".b3", nn::Tensor({c_out}));
        c_out_ = c_out;
    }

    FeatureMap2D forward(const Image& color) const {
        if (color.channels != 3) throw nn::ShapeMismatch("encode_2d expects RGB");
        if (color.height % 8 != 0 || color.width % 8 != 0)
            throw nn::ShapeMismatch("encode_2d input dims must be divisible by 8");
        nn::Tensor x({3, color.height, color.width});
        for (int c = 0; c < 3; ++c)
            for (int r = 0; r < color.height; ++r)
                for (int col = 0; col < color.width; ++col)
                    x.data[(std::size_t(c) * color.height + r) * color.width + col] = color.at(r, col, c);
        nn::Var h = nn::constant(std::move(x));
        h = nn::relu(nn::conv2d(h, w1_, b1_, {2, 2}, {0, 0}));
        h = nn::relu(nn::conv2d(h, w2_, b2_, {2, 2}, {0, 0}));
        h = nn::relu(nn::conv2d(h, w3_, b3_, {2, 2}, {0, 0}));
        FeatureMap2D out;
        out.channels = c_out_;
        out.height = h->value.dim(1);
        out.width = h->value.dim(2);
        out.source_height = color.height;
        out.source_width = color.width;
        out.var = h;
        return out;
    }

private:
    nn::Var w1_, b1_, w2_, b2_, w3_, b3_;
    int c_out_ = 0;
};

// Back-project one view's feature map into the voxel grid. Depth is sampled
// at the source-image center pixel of each feature cell; a valid in-bounds
// unprojection writes the feature vector to exactly one voxel.
inline FeatureVolumeVar backproject(const FeatureMap2D& fmap, const CameraView& view,
                                    const GridMeta& meta) {
    if (view.height() != fmap.source_height || view.width() != fmap.source_width)
        throw nn::ShapeMismatch("backproject: depth does not match feature source resolution");
    const int h = fmap.height, w = fmap.width;
    const int down = fmap.source_height / h;
    const int C = fmap.channels;
    const std::size_t vox_count = meta.voxel_count();

    // geometric mapping: feature cell -> voxel flat index
    std::vector<std::pair<std::size_t, std::size_t>> cells; // (cell flat, voxel flat)
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            int row = i * down + down / 2;
            int col = j * down + down / 2;
            double d = view.depth.at(row, col);
            if (d <= 0.0) continue;
            Vec3 pw = view.unproject(col + 0.5, row + 0.5, d);
            Vec3 v = world_to_voxel(pw, meta);
            if (!in_voxel_bounds(v, meta)) continue;
            std::size_t vox = meta.index(int(v[0]), int(v[1]), int(v[2]));
            cells.emplace_back(std::size_t(i) * w + j, vox);
        }

    nn::Tensor out({C, meta.dims[0], meta.dims[1], meta.dims[2]});
    std::vector<std::int64_t> arg(out.size(), -1); // winning fmap flat index per output
    const std::size_t plane = std::size_t(h) * w;
    const auto& fd = fmap.var->value.data;
    for (int c = 0; c < C; ++c) {
        std::size_t cf = std::size_t(c) * plane;
        std::size_t co = std::size_t(c) * vox_count;
        for (const auto& [cell, vox] : cells) {
            double val = fd[cf + cell];
            std::size_t oi = co + vox;
            if (arg[oi] < 0 || val > out.data[oi]) {
                out.data[oi] = val;
                arg[oi] = std::int64_t(cf + cell);
            }
        }
    }
    nn::Var var = nn::make_node(std::move(out), {fmap.var}, [arg = std::move(arg)](nn::Node& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < arg.size(); ++i)
            if (arg[i] >= 0) g[std::size_t(arg[i])] += n.grad[i];
    });
    return {meta, C, var};
}

// Elementwise max across per-view volumes; gradient to the first maximizing view.
inline FeatureVolumeVar view_pool(const std::vector<FeatureVolumeVar>& volumes) {
    if (volumes.empty()) throw MetaMismatch{};
    for (const auto& v : volumes)
        if (!(v.meta == volumes[0].meta) || v.channels != volumes[0].channels) throw MetaMismatch{};
    std::vector<nn::Var> vars;
    vars.reserve(volumes.size());
    for (const auto& v : volumes) vars.push_back(v.var);
    return {volumes[0].meta, volumes[0].channels, nn::max_stack(vars)};
}

// Dense, non-learned surface color volume: every valid depth pixel writes its
// RGB value to the voxel containing its unprojection. Collisions resolve by
// per-channel max, so the result is invariant to pixel and view order.
inline FeatureVolumeVar rgb_splat(const std::vector<CameraView>& views, const GridMeta& meta) {
    const std::size_t vox_count = meta.voxel_count();
    nn::Tensor out({3, meta.dims[0], meta.dims[1], meta.dims[2]});
    std::vector<char> written(vox_count, 0);
    for (const auto& view : views) {
        for (int row = 0; row < view.height(); ++row)
            for (int col = 0; col < view.width(); ++col) {
                double d = view.depth.at(row, col);
                if (d <= 0.0) continue;
                Vec3 pw = view.unproject(col + 0.5, row + 0.5, d);
                Vec3 v = world_to_voxel(pw, meta);
                if (!in_voxel_bounds(v, meta)) continue;
                std::size_t vox = meta.index(int(v[0]), int(v[1]), int(v[2]));
                for (int c = 0; c < 3; ++c) {
                    std::size_t oi = std::size_t(c) * vox_count + vox;
                    double val = view.color.at(row, col, c);
                    if (!written[vox] || val > out.data[oi]) out.data[oi] = val;
                }
                written[vox] = 1;
            }
    }
    return {meta, 3, nn::constant(std::move(out))};
}

} // namespace sis
