#pragma once

// Ingestion of 3D instance-label volumes: per-cell geometric records
// (centroid, voxel count, boundary point cloud) and face-adjacency between
// cells. Label 0 is background.

#include "celltrack/core.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <utility>

namespace celltrack {

struct LabelVolume {
    std::array<std::int64_t, 3> dims{0, 0, 0};  // voxel counts (nx, ny, nz)
    Vec3 spacing{1.0, 1.0, 1.0};                // um per voxel
    int time_index = 0;
    std::string dtype = "u16";                  // on-disk element type: "u16" | "u32"
    std::vector<std::uint32_t> labels;          // x-fastest order

    std::int64_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
    std::int64_t flat(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return x + dims[0] * (y + dims[1] * z);
    }
    std::uint32_t at(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return labels[flat(x, y, z)];
    }

    void validate() const {
        if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
            throw ArgumentError("LabelVolume: dims components must be >= 1");
        if (!(spacing.x() > 0 && spacing.y() > 0 && spacing.z() > 0))
            throw ArgumentError("LabelVolume: spacing components must be > 0");
        if (static_cast<std::int64_t>(labels.size()) != voxel_count())
            throw ArgumentError("LabelVolume: label array size does not match dims");
        if (time_index < 0) throw ArgumentError("LabelVolume: negative time_index");
    }
};

struct CellRecord {
    std::uint32_t cell_id = 0;
    int time_index = 0;
    Vec3 centroid = Vec3::Zero();      // um, voxel-count-weighted mean of voxel centers
    std::int64_t voxel_count = 0;
    PointCloud boundary_cloud;         // voxel centers with a 6-neighbor of another label
};

struct CellIndex {
    int time_index = 0;
    std::map<std::uint32_t, CellRecord> cells;
    std::set<std::pair<std::uint32_t, std::uint32_t>> adjacency;  // (lo, hi) id pairs

    bool adjacent(std::uint32_t a, std::uint32_t b) const {
        if (a == b) return false;
        return adjacency.count({std::min(a, b), std::max(a, b)}) > 0;
    }
};

struct ExtractParams {
    std::size_t boundary_cap = 512;  // boundary cloud subsample cap per cell
    std::uint64_t seed = 0;          // subsample seed
};

namespace detail {

inline std::filesystem::path sidecar_path(const std::filesystem::path& vol_path) {
    std::filesystem::path p = vol_path;
    p.replace_extension(".json");
    return p;
}

}  // namespace detail

// Writes `<name>.vol` (little-endian u16/u32 voxels, x-fastest) plus the
// `<name>.json` sidecar. Round trip through load_label_volume is bit-exact.
inline void save_label_volume(const LabelVolume& vol, const std::filesystem::path& path) {
    vol.validate();
    const bool wide = vol.dtype == "u32";
    if (!wide && vol.dtype != "u16") throw ArgumentError("save_label_volume: dtype must be u16 or u32");

    std::vector<unsigned char> bytes;
    bytes.reserve(static_cast<std::size_t>(vol.voxel_count()) * (wide ? 4 : 2));
    for (std::uint32_t v : vol.labels) {
        if (!wide && v > 0xffffu)
            throw FormatError("save_label_volume: label exceeds u16 range");
        bytes.push_back(static_cast<unsigned char>(v & 0xff));
        bytes.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
        if (wide) {
            bytes.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
            bytes.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
        }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("save_label_volume: cannot open " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("save_label_volume: write failed for " + path.string());

    nlohmann::json side;
    side["dims"] = {vol.dims[0], vol.dims[1], vol.dims[2]};
    side["spacing"] = {vol.spacing.x(), vol.spacing.y(), vol.spacing.z()};
    side["dtype"] = vol.dtype;
    side["time_index"] = vol.time_index;
    std::ofstream sc(detail::sidecar_path(path), std::ios::trunc);
    if (!sc) throw FormatError("save_label_volume: cannot open sidecar for " + path.string());
    sc << side.dump(2) << "\n";
}

inline LabelVolume load_label_volume(const std::filesystem::path& path) {
    const auto side_path = detail::sidecar_path(path);
    std::ifstream sc(side_path);
    if (!sc) throw FormatError("load_label_volume: missing sidecar " + side_path.string());
    nlohmann::json side;
    try {
        sc >> side;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("load_label_volume: bad sidecar: " + std::string(e.what()));
    }

    LabelVolume vol;
    try {
        const auto& d = side.at("dims");
        vol.dims = {d.at(0).get<std::int64_t>(), d.at(1).get<std::int64_t>(), d.at(2).get<std::int64_t>()};
        const auto& s = side.at("spacing");
        vol.spacing = Vec3(s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>());
        vol.dtype = side.at("dtype").get<std::string>();
        vol.time_index = side.at("time_index").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("load_label_volume: sidecar field error: " + std::string(e.what()));
    }
    if (vol.dims[0] < 1 || vol.dims[1] < 1 || vol.dims[2] < 1)
        throw FormatError("load_label_volume: sidecar dims must be >= 1");
    if (!(vol.spacing.x() > 0 && vol.spacing.y() > 0 && vol.spacing.z() > 0))
        throw FormatError("load_label_volume: sidecar spacing must be > 0");
    if (vol.dtype != "u16" && vol.dtype != "u32")
        throw FormatError("load_label_volume: dtype must be u16 or u32");
    if (vol.time_index < 0) throw FormatError("load_label_volume: negative time_index");

    const bool wide = vol.dtype == "u32";
    const std::size_t esize = wide ? 4 : 2;
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw FormatError("load_label_volume: cannot open " + path.string());
    const auto length = static_cast<std::uint64_t>(in.tellg());
    const std::uint64_t expected = static_cast<std::uint64_t>(vol.voxel_count()) * esize;
    if (length != expected)
        throw FormatError("load_label_volume: payload length " + std::to_string(length) +
                          " does not match dims*element-size " + std::to_string(expected));
    in.seekg(0);
    std::vector<unsigned char> bytes(length);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(length));
    if (!in) throw FormatError("load_label_volume: short read on " + path.string());

    vol.labels.resize(static_cast<std::size_t>(vol.voxel_count()));
    for (std::size_t i = 0; i < vol.labels.size(); ++i) {
        const unsigned char* b = bytes.data() + i * esize;
        std::uint32_t v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8);
        if (wide) v |= (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
        vol.labels[i] = v;
    }
    vol.validate();
    return vol;
}

// One record per nonzero label plus the 6-connected cross-label adjacency.
// A voxel is boundary if any of its 6 face neighbors carries a different
// label; faces on the volume border count as background. Boundary clouds
// larger than params.boundary_cap are subsampled with a per-cell seeded RNG,
// so results do not depend on traversal or scheduling order.
inline CellIndex extract_cells(const LabelVolume& vol, const ExtractParams& params = {}) {
    vol.validate();

    struct Accum {
        std::int64_t count = 0;
        Vec3 center_sum = Vec3::Zero();
        PointCloud boundary;
    };
    std::map<std::uint32_t, Accum> acc;
    std::set<std::pair<std::uint32_t, std::uint32_t>> adjacency;

    const auto [nx, ny, nz] = vol.dims;
    for (std::int64_t z = 0; z < nz; ++z) {
        for (std::int64_t y = 0; y < ny; ++y) {
            for (std::int64_t x = 0; x < nx; ++x) {
                const std::uint32_t lab = vol.at(x, y, z);
                if (lab == 0) continue;
                const Vec3 center((x + 0.5) * vol.spacing.x(), (y + 0.5) * vol.spacing.y(),
                                  (z + 0.5) * vol.spacing.z());
                Accum& a = acc[lab];
                a.count++;
                a.center_sum += center;

                bool boundary = false;
                const std::int64_t nbr[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z},
                                                {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
                for (const auto& q : nbr) {
                    std::uint32_t other = 0;
                    if (q[0] >= 0 && q[0] < nx && q[1] >= 0 && q[1] < ny && q[2] >= 0 && q[2] < nz)
                        other = vol.at(q[0], q[1], q[2]);
                    if (other != lab) {
                        boundary = true;
                        if (other != 0)
                            adjacency.insert({std::min(lab, other), std::max(lab, other)});
                    }
                }
                if (boundary) a.boundary.push_back(center);
            }
        }
    }

    CellIndex index;
    index.time_index = vol.time_index;
    for (auto& [lab, a] : acc) {
        CellRecord rec;
        rec.cell_id = lab;
        rec.time_index = vol.time_index;
        rec.voxel_count = a.count;
        rec.centroid = a.center_sum / static_cast<double>(a.count);
        if (a.boundary.size() > params.boundary_cap) {
            std::mt19937_64 rng(derive_seed(params.seed, static_cast<std::uint64_t>(vol.time_index), lab));
            auto keep = sample_indices(static_cast<std::uint32_t>(a.boundary.size()),
                                       static_cast<std::uint32_t>(params.boundary_cap), rng);
            std::sort(keep.begin(), keep.end());
            PointCloud sub;
            sub.reserve(keep.size());
            for (auto i : keep) sub.push_back(a.boundary[i]);
            rec.boundary_cloud = std::move(sub);
        } else {
            rec.boundary_cloud = std::move(a.boundary);
        }
        index.cells.emplace(lab, std::move(rec));
    }
    index.adjacency = std::move(adjacency);
    return index;
}

}  // namespace celltrack
