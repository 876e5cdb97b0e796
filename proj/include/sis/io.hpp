#pragma once

// File formats: VGRD binary voxel grids (TSDF and feature volumes), SISW
// parameter checkpoints, PFM depth images, binary PPM color images, ASCII
// PLY exports, JSON scene specs, and the line-based prediction/ground-truth
// interchange format. All binary payloads are little-endian 32-bit floats.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sis/camera.hpp"
#include "sis/eval.hpp"
#include "sis/grid.hpp"
#include "sis/nn.hpp"
#include "sis/synth.hpp"

namespace sis::io {

struct BadMagic : std::runtime_error {
    explicit BadMagic(const std::string& path) : std::runtime_error("bad magic in " + path) {}
};
struct VersionUnsupported : std::runtime_error {
    explicit VersionUnsupported(const std::string& path)
        : std::runtime_error("unsupported version in " + path) {}
};
struct TruncatedFile : std::runtime_error {
    explicit TruncatedFile(const std::string& path) : std::runtime_error("truncated file: " + path) {}
};
struct IoFailure : std::runtime_error {
    explicit IoFailure(const std::string& path) : std::runtime_error("io failure: " + path) {}
};

namespace detail {
// this codebase targets little-endian hosts; formats are little-endian on disk
inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_f32(std::ostream& os, float v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline std::uint32_t get_u32(std::istream& is, const std::string& path) {
    std::uint32_t v;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw TruncatedFile(path);
    return v;
}
inline float get_f32(std::istream& is, const std::string& path) {
    float v;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw TruncatedFile(path);
    return v;
}
} // namespace detail

// ---------------------------------------------------------------------------
// VGRD: magic(4) version(u32) kind(u32: 0 tsdf, 1 feature) dims(3xu32)
// channels(u32) voxel_size(f32) origin(3xf32) [tau(f32) if tsdf] payload f32

inline void write_grid(const std::string& path, const TsdfGrid& grid) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoFailure(path);
    os.write("VGRD", 4);
    detail::put_u32(os, 1);
    detail::put_u32(os, 0);
    for (int i = 0; i < 3; ++i) detail::put_u32(os, std::uint32_t(grid.meta.dims[i]));
    detail::put_u32(os, 1);
    detail::put_f32(os, float(grid.meta.voxel_size));
    for (int i = 0; i < 3; ++i) detail::put_f32(os, float(grid.meta.origin[i]));
    detail::put_f32(os, float(grid.truncation));
    for (float v : grid.values) detail::put_f32(os, v);
    for (float w : grid.weights) detail::put_f32(os, w);
    if (!os) throw IoFailure(path);
}

inline void write_grid(const std::string& path, const FeatureVolume& vol) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoFailure(path);
    os.write("VGRD", 4);
    detail::put_u32(os, 1);
    detail::put_u32(os, 1);
    for (int i = 0; i < 3; ++i) detail::put_u32(os, std::uint32_t(vol.meta.dims[i]));
    detail::put_u32(os, std::uint32_t(vol.channels));
    detail::put_f32(os, float(vol.meta.voxel_size));
    for (int i = 0; i < 3; ++i) detail::put_f32(os, float(vol.meta.origin[i]));
    for (float v : vol.data) detail::put_f32(os, v);
    if (!os) throw IoFailure(path);
}

struct GridFile {
    int kind = 0; // 0 tsdf, 1 feature
    TsdfGrid tsdf;
    FeatureVolume feature;
};

inline GridFile read_grid(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoFailure(path);
    char magic[4];
    if (!is.read(magic, 4)) throw TruncatedFile(path);
    if (std::memcmp(magic, "VGRD", 4) != 0) throw BadMagic(path);
    std::uint32_t version = detail::get_u32(is, path);
    if (version != 1) throw VersionUnsupported(path);
    GridFile out;
    out.kind = int(detail::get_u32(is, path));
    Vec3i dims;
    for (int i = 0; i < 3; ++i) dims[i] = int(detail::get_u32(is, path));
    int channels = int(detail::get_u32(is, path));
    double voxel_size = detail::get_f32(is, path);
    Vec3 origin;
    for (int i = 0; i < 3; ++i) origin[i] = detail::get_f32(is, path);
    GridMeta meta(dims, voxel_size, origin);
    if (out.kind == 0) {
        double tau = detail::get_f32(is, path);
        out.tsdf = TsdfGrid(meta, tau);
        for (auto& v : out.tsdf.values) v = detail::get_f32(is, path);
        for (auto& w : out.tsdf.weights) w = detail::get_f32(is, path);
    } else {
        out.feature = FeatureVolume(meta, channels);
        for (auto& v : out.feature.data) v = detail::get_f32(is, path);
    }
    return out;
}

// ---------------------------------------------------------------------------
// SISW checkpoints: magic(4) version(u32) count(u32), then per tensor:
// name_len(u32) name rank(u32) dims(u32 each) data(f32 each)

inline void write_checkpoint(const std::string& path, const nn::ParamStore& store) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoFailure(path);
    os.write("SISW", 4);
    detail::put_u32(os, 1);
    detail::put_u32(os, std::uint32_t(store.names().size()));
    for (const auto& name : store.names()) {
        nn::Var v = store.get(name);
        detail::put_u32(os, std::uint32_t(name.size()));
        os.write(name.data(), std::streamsize(name.size()));
        detail::put_u32(os, std::uint32_t(v->value.shape.size()));
        for (int d : v->value.shape) detail::put_u32(os, std::uint32_t(d));
        for (double x : v->value.data) detail::put_f32(os, float(x));
    }
    if (!os) throw IoFailure(path);
}

inline void read_checkpoint(const std::string& path, nn::ParamStore& store) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoFailure(path);
    char magic[4];
    if (!is.read(magic, 4)) throw TruncatedFile(path);
    if (std::memcmp(magic, "SISW", 4) != 0) throw BadMagic(path);
    if (detail::get_u32(is, path) != 1) throw VersionUnsupported(path);
    std::uint32_t count = detail::get_u32(is, path);
    for (std::uint32_t t = 0; t < count; ++t) {
        std::uint32_t name_len = detail::get_u32(is, path);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw TruncatedFile(path);
        std::uint32_t rank = detail::get_u32(is, path);
        std::vector<int> shape(rank);
        for (auto& d : shape) d = int(detail::get_u32(is, path));
        std::size_t n = nn::Tensor::numel(shape);
        std::vector<double> data(n);
        for (auto& x : data) x = detail::get_f32(is, path);
        if (store.has(name)) {
            nn::Var v = store.get(name);
            if (v->value.shape != shape) throw nn::ShapeMismatch("checkpoint tensor " + name);
            v->value.data = std::move(data);
        }
    }
}

// ---------------------------------------------------------------------------
// PFM (32-bit float grayscale, little-endian) and binary PPM

inline void write_pfm(const std::string& path, const Image& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoFailure(path);
    os << "Pf\n" << img.width << " " << img.height << "\n-1.0\n"; // negative scale = little-endian
    // PFM rows are bottom-to-top
    for (int r = img.height - 1; r >= 0; --r)
        for (int c = 0; c < img.width; ++c) detail::put_f32(os, img.at(r, c));
    if (!os) throw IoFailure(path);
}

inline Image read_pfm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoFailure(path);
    std::string header;
    int w, h;
    double scale;
    is >> header >> w >> h >> scale;
    if (header != "Pf") throw BadMagic(path);
    is.get(); // single whitespace after header
    Image img(h, w, 1);
    for (int r = h - 1; r >= 0; --r)
        for (int c = 0; c < w; ++c) img.at(r, c) = detail::get_f32(is, path);
    return img;
}

inline void write_ppm(const std::string& path, const Image& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoFailure(path);
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c)
            for (int ch = 0; ch < 3; ++ch) {
                int v = int(img.at(r, c, ch) * 255.0f + 0.5f);
                os.put(char(std::clamp(v, 0, 255)));
            }
    if (!os) throw IoFailure(path);
}

inline Image read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoFailure(path);
    std::string header;
    int w, h, maxval;
    is >> header >> w >> h >> maxval;
    if (header != "P6") throw BadMagic(path);
    is.get();
    Image img(h, w, 3);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            for (int ch = 0; ch < 3; ++ch) {
                int v = is.get();
                if (v < 0) throw TruncatedFile(path);
                img.at(r, c, ch) = float(v) / 255.0f;
            }
    return img;
}

// ---------------------------------------------------------------------------
// scene spec JSON

inline nlohmann::json scene_to_json(const SceneSpec& scene) {
    nlohmann::json j;
    j["room_extents"] = scene.room_extents;
    j["seed"] = scene.seed;
    j["objects"] = nlohmann::json::array();
    for (const auto& o : scene.objects) {
        nlohmann::json jo;
        jo["class_id"] = o.class_id;
        jo["center"] = o.box.center;
        jo["size"] = o.box.size;
        jo["albedo"] = o.albedo;
        j["objects"].push_back(jo);
    }
    return j;
}

inline SceneSpec scene_from_json(const nlohmann::json& j) {
    SceneSpec scene;
    scene.room_extents = j.at("room_extents").get<Vec3>();
    scene.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& jo : j.at("objects")) {
        SceneObject o;
        o.class_id = jo.at("class_id").get<int>();
        o.box.center = jo.at("center").get<Vec3>();
        o.box.size = jo.at("size").get<Vec3>();
        o.albedo = jo.at("albedo").get<std::array<float, 3>>();
        scene.objects.push_back(o);
    }
    return scene;
}

// ---------------------------------------------------------------------------
// prediction / ground-truth interchange: one record per line,
//   scene_id class_id score xmin ymin zmin xmax ymax zmax [rle...]
// where the optional mask is run-length encoded over the enclosing integer
// region, z fastest, as alternating zero/one run lengths starting with zeros.

namespace detail {
inline std::vector<std::size_t> rle_encode(const std::vector<Vec3i>& mask, const VoxelRegion& region) {
    Vec3i ext = region.extent();
    std::vector<char> bits(region.volume(), 0);
    for (const auto& v : mask)
        if (region.contains(v[0], v[1], v[2]))
            bits[(std::size_t(v[0] - region.min[0]) * ext[1] + (v[1] - region.min[1])) * ext[2] +
                 (v[2] - region.min[2])] = 1;
    std::vector<std::size_t> runs;
    char cur = 0;
    std::size_t len = 0;
    for (char b : bits) {
        if (b == cur) ++len;
        else { runs.push_back(len); cur = b; len = 1; }
    }
    runs.push_back(len);
    return runs;
}
inline std::vector<Vec3i> rle_decode(const std::vector<std::size_t>& runs, const VoxelRegion& region) {
    Vec3i ext = region.extent();
    std::vector<Vec3i> mask;
    std::size_t pos = 0;
    char cur = 0;
    for (std::size_t len : runs) {
        if (cur == 1)
            for (std::size_t i = pos; i < pos + len; ++i) {
                int z = int(i % std::size_t(ext[2]));
                int y = int((i / std::size_t(ext[2])) % std::size_t(ext[1]));
                int x = int(i / (std::size_t(ext[2]) * ext[1]));
                mask.push_back({region.min[0] + x, region.min[1] + y, region.min[2] + z});
            }
        pos += len;
        cur = 1 - cur;
    }
    return mask;
}
} // namespace detail

inline void write_detections(const std::string& path, const std::vector<DetectionEntry>& dets,
                             const GridMeta& meta) {
    std::ofstream os(path);
    if (!os) throw IoFailure(path);
    os.precision(17);
    for (const auto& e : dets) {
        Vec3 mn = e.detection.box.min_corner(), mx = e.detection.box.max_corner();
        os << e.scene_id << " " << e.detection.class_id << " " << e.detection.score;
        for (int i = 0; i < 3; ++i) os << " " << mn[i];
        for (int i = 0; i < 3; ++i) os << " " << mx[i];
        if (!e.detection.mask.empty()) {
            VoxelRegion region = enclosing_region(e.detection.box, meta);
            for (std::size_t run : detail::rle_encode(e.detection.mask, region)) os << " " << run;
        }
        os << "\n";
    }
    if (!os) throw IoFailure(path);
}

inline std::vector<DetectionEntry> read_detections(const std::string& path, const GridMeta& meta) {
    std::ifstream is(path);
    if (!is) throw IoFailure(path);
    std::vector<DetectionEntry> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        DetectionEntry e;
        Vec3 mn, mx;
        ls >> e.scene_id >> e.detection.class_id >> e.detection.score;
        for (int i = 0; i < 3; ++i) ls >> mn[i];
        for (int i = 0; i < 3; ++i) ls >> mx[i];
        if (!ls) throw TruncatedFile(path);
        e.detection.box = Box3::from_min_max(mn, mx);
        std::vector<std::size_t> runs;
        std::size_t run;
        while (ls >> run) runs.push_back(run);
        if (!runs.empty()) {
            VoxelRegion region = enclosing_region(e.detection.box, meta);
            e.detection.mask = detail::rle_decode(runs, region);
        }
        out.push_back(std::move(e));
    }
    return out;
}

// ---------------------------------------------------------------------------
// ASCII PLY export

namespace detail {
inline std::array<int, 3> instance_color(std::size_t i) {
    // fixed palette cycled by instance index
    static const std::array<int, 3> palette[] = {
        {230, 60, 60}, {60, 200, 60}, {60, 90, 230}, {230, 200, 50},
        {200, 60, 200}, {60, 200, 210}, {240, 140, 40}, {150, 110, 220},
    };
    return palette[i % (sizeof(palette) / sizeof(palette[0]))];
}
} // namespace detail

// Boxes as 8-vertex / 12-edge wireframes, one color per instance.
inline void export_ply_boxes(const std::string& path, const std::vector<Detection>& dets) {
    std::ofstream os(path);
    if (!os) throw IoFailure(path);
    os << "ply\nformat ascii 1.0\n";
    os << "element vertex " << dets.size() * 8 << "\n";
    os << "property float x\nproperty float y\nproperty float z\n";
    os << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    os << "element edge " << dets.size() * 12 << "\n";
    os << "property int vertex1\nproperty int vertex2\nend_header\n";
    for (std::size_t i = 0; i < dets.size(); ++i) {
        Vec3 mn = dets[i].box.min_corner(), mx = dets[i].box.max_corner();
        auto col = detail::instance_color(i);
        for (int corner = 0; corner < 8; ++corner) {
            os << (corner & 1 ? mx[0] : mn[0]) << " " << (corner & 2 ? mx[1] : mn[1]) << " "
               << (corner & 4 ? mx[2] : mn[2]) << " " << col[0] << " " << col[1] << " " << col[2]
               << "\n";
        }
    }
    static const int edges[12][2] = {{0, 1}, {2, 3}, {4, 5}, {6, 7}, {0, 2}, {1, 3},
                                     {4, 6}, {5, 7}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};
    for (std::size_t i = 0; i < dets.size(); ++i)
        for (auto& e : edges) os << i * 8 + std::size_t(e[0]) << " " << i * 8 + std::size_t(e[1]) << "\n";
    if (!os) throw IoFailure(path);
}

// Masks as colored voxel-center point clouds.
inline void export_ply_masks(const std::string& path, const std::vector<Detection>& dets,
                             const GridMeta& meta) {
    std::size_t total = 0;
    for (const auto& d : dets) total += d.mask.size();
    std::ofstream os(path);
    if (!os) throw IoFailure(path);
    os << "ply\nformat ascii 1.0\nelement vertex " << total << "\n";
    os << "property float x\nproperty float y\nproperty float z\n";
    os << "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
    for (std::size_t i = 0; i < dets.size(); ++i) {
        auto col = detail::instance_color(i);
        for (const auto& v : dets[i].mask) {
            Vec3 p = voxel_center_world(v[0], v[1], v[2], meta);
            os << p[0] << " " << p[1] << " " << p[2] << " " << col[0] << " " << col[1] << " "
               << col[2] << "\n";
        }
    }
    if (!os) throw IoFailure(path);
}

// TSDF zero crossing as blocky voxel-face quads: a face is emitted between a
// non-positive voxel and a positive (or unobserved) axis neighbor.
inline void export_ply_surface(const std::string& path, const TsdfGrid& grid) {
    std::vector<std::array<Vec3, 4>> quads;
    const GridMeta& m = grid.meta;
    auto inside = [&](int x, int y, int z) {
        return m.in_bounds(x, y, z) && grid.weight(x, y, z) > 0 && grid.value(x, y, z) <= 0;
    };
    static const Vec3i axes[3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    for (int x = 0; x < m.dims[0]; ++x)
        for (int y = 0; y < m.dims[1]; ++y)
            for (int z = 0; z < m.dims[2]; ++z) {
                if (!inside(x, y, z)) continue;
                for (int a = 0; a < 3; ++a)
                    for (int sgn = -1; sgn <= 1; sgn += 2) {
                        int nx = x + axes[a][0] * sgn, ny = y + axes[a][1] * sgn,
                            nz = z + axes[a][2] * sgn;
                        if (inside(nx, ny, nz)) continue;
                        // face between the two voxel centers, perpendicular to axis a
                        double fx = x + 0.5 + 0.5 * axes[a][0] * sgn;
                        double fy = y + 0.5 + 0.5 * axes[a][1] * sgn;
                        double fz = z + 0.5 + 0.5 * axes[a][2] * sgn;
                        int u = (a + 1) % 3, v = (a + 2) % 3;
                        std::array<Vec3, 4> q;
                        for (int k = 0; k < 4; ++k) {
                            Vec3 corner{fx, fy, fz};
                            corner[u] += (k == 1 || k == 2) ? 0.5 : -0.5;
                            corner[v] += (k >= 2) ? 0.5 : -0.5;
                            q[std::size_t(k)] = voxel_to_world(corner, m);
                        }
                        quads.push_back(q);
                    }
            }
    std::ofstream os(path);
    if (!os) throw IoFailure(path);
    os << "ply\nformat ascii 1.0\nelement vertex " << quads.size() * 4 << "\n";
    os << "property float x\nproperty float y\nproperty float z\n";
    os << "element face " << quads.size() << "\nproperty list uchar int vertex_indices\nend_header\n";
    for (const auto& q : quads)
        for (const auto& p : q) os << p[0] << " " << p[1] << " " << p[2] << "\n";
    for (std::size_t i = 0; i < quads.size(); ++i)
        os << "4 " << 4 * i << " " << 4 * i + 1 << " " << 4 * i + 2 << " " << 4 * i + 3 << "\n";
    if (!os) throw IoFailure(path);
}

} // namespace sis::io
