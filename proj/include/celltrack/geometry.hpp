#pragma once

// Spatial primitives shared by every module: exact k-NN / radius queries,
// rigid transforms, surface normal estimation, FPFH descriptors and point
// cloud voxelization. All distances and coordinates are in micrometers.

#include "celltrack/core.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>

namespace celltrack {

struct RigidTransform {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

    RigidTransform inverse() const {
        RigidTransform inv;
        inv.rotation = rotation.transpose();
        inv.translation = -(rotation.transpose() * translation);
        return inv;
    }

    // this ∘ other: apply `other` first, then this.
    RigidTransform compose(const RigidTransform& other) const {
        RigidTransform out;
        out.rotation = rotation * other.rotation;
        out.translation = rotation * other.translation + translation;
        return out;
    }

    bool is_valid(double tol = 1e-9) const {
        const Mat3 rtr = rotation.transpose() * rotation;
        return (rtr - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
               std::abs(rotation.determinant() - 1.0) <= tol;
    }

    // Angle of the rotation in degrees (0 for identity).
    double rotation_angle_deg() const {
        const double c = std::clamp((rotation.trace() - 1.0) / 2.0, -1.0, 1.0);
        return std::acos(c) * 180.0 / M_PI;
    }
};

inline PointCloud apply_transform(const RigidTransform& t, const PointCloud& cloud) {
    PointCloud out;
    out.reserve(cloud.size());
    for (const auto& p : cloud) out.push_back(t.apply(p));
    return out;
}

struct Neighbor {
    std::uint32_t id = 0;
    double distance = 0.0;
};

// Exact nearest-neighbor index (median-split kd-tree). Query results are
// guaranteed identical to an exhaustive linear scan, with equal distances
// ordered by lower point index.
class NeighborIndex {
public:
    NeighborIndex() = default;
    explicit NeighborIndex(PointCloud points) : points_(std::move(points)) {
        if (!points_.empty()) {
            order_.resize(points_.size());
            std::iota(order_.begin(), order_.end(), 0u);
            root_ = build(0, static_cast<std::uint32_t>(points_.size()));
        }
    }

    std::size_t size() const { return points_.size(); }
    const PointCloud& points() const { return points_; }
    const Vec3& point(std::uint32_t id) const { return points_[id]; }

    std::vector<Neighbor> knn(const Vec3& query, std::size_t k) const {
        if (k > points_.size()) throw ArgumentError("knn: k exceeds point count");
        std::vector<Neighbor> best;  // kept sorted worst-last, capacity k
        if (k == 0) return best;
        best.reserve(k + 1);
        search_knn(root_, query, k, best);
        for (auto& n : best) n.distance = std::sqrt(n.distance);
        return best;
    }

    // Ids of points with |p - query| <= radius, ascending id.
    std::vector<std::uint32_t> radius_search(const Vec3& query, double radius) const {
        if (radius < 0) throw ArgumentError("radius_search: negative radius");
        std::vector<std::uint32_t> out;
        if (!points_.empty()) search_radius(root_, query, radius * radius, out);
        std::sort(out.begin(), out.end());
        return out;
    }

private:
    struct Node {
        std::int32_t left = -1, right = -1;
        std::uint32_t begin = 0, end = 0;  // leaf range into order_
        int axis = -1;
        double split = 0.0;
        Vec3 box_min, box_max;
        bool leaf() const { return axis < 0; }
    };

    static constexpr std::uint32_t kLeafSize = 16;

    std::int32_t build(std::uint32_t begin, std::uint32_t end) {
        Node node;
        node.box_min = Vec3::Constant(std::numeric_limits<double>::infinity());
        node.box_max = -node.box_min;
        for (std::uint32_t i = begin; i < end; ++i) {
            const Vec3& p = points_[order_[i]];
            node.box_min = node.box_min.cwiseMin(p);
            node.box_max = node.box_max.cwiseMax(p);
        }
        if (end - begin <= kLeafSize) {
            node.begin = begin;
            node.end = end;
            nodes_.push_back(node);
            return static_cast<std::int32_t>(nodes_.size() - 1);
        }
        int axis = 0;
        (node.box_max - node.box_min).maxCoeff(&axis);
        const std::uint32_t mid = (begin + end) / 2;
        std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                         [&](std::uint32_t a, std::uint32_t b) {
                             const double pa = points_[a][axis], pb = points_[b][axis];
                             return pa < pb || (pa == pb && a < b);
                         });
        node.axis = axis;
        node.split = points_[order_[mid]][axis];
        const std::int32_t self = static_cast<std::int32_t>(nodes_.size());
        nodes_.push_back(node);
        const std::int32_t l = build(begin, mid);
        const std::int32_t r = build(mid, end);
        nodes_[self].left = l;
        nodes_[self].right = r;
        return self;
    }

    static double box_dist2(const Node& n, const Vec3& q) {
        double d2 = 0.0;
        for (int a = 0; a < 3; ++a) {
            const double lo = n.box_min[a] - q[a], hi = q[a] - n.box_max[a];
            const double d = std::max({lo, hi, 0.0});
            d2 += d * d;
        }
        return d2;
    }

    // best holds squared distances, sorted by (d2, id), size <= k.
    static bool worse_than_worst(const std::vector<Neighbor>& best, std::size_t k, double d2,
                                 std::uint32_t id) {
        if (best.size() < k) return false;
        const Neighbor& w = best.back();
        return d2 > w.distance || (d2 == w.distance && id > w.id);
    }

    void search_knn(std::int32_t ni, const Vec3& q, std::size_t k, std::vector<Neighbor>& best) const {
        const Node& node = nodes_[ni];
        if (best.size() == k) {
            // Equal box distance can still hide a lower-index tie, so only
            // prune on strictly greater.
            if (box_dist2(node, q) > best.back().distance) return;
        }
        if (node.leaf()) {
            for (std::uint32_t i = node.begin; i < node.end; ++i) {
                const std::uint32_t id = order_[i];
                const double d2 = (points_[id] - q).squaredNorm();
                if (worse_than_worst(best, k, d2, id)) continue;
                auto pos = std::lower_bound(best.begin(), best.end(), std::make_pair(d2, id),
                                            [](const Neighbor& n, const std::pair<double, std::uint32_t>& v) {
                                                return n.distance < v.first ||
                                                       (n.distance == v.first && n.id < v.second);
                                            });
                best.insert(pos, Neighbor{id, d2});
                if (best.size() > k) best.pop_back();
            }
            return;
        }
        const double dl = box_dist2(nodes_[node.left], q);
        const double dr = box_dist2(nodes_[node.right], q);
        if (dl <= dr) {
            search_knn(node.left, q, k, best);
            search_knn(node.right, q, k, best);
        } else {
            search_knn(node.right, q, k, best);
            search_knn(node.left, q, k, best);
        }
    }

    void search_radius(std::int32_t ni, const Vec3& q, double r2, std::vector<std::uint32_t>& out) const {
        const Node& node = nodes_[ni];
        if (box_dist2(node, q) > r2) return;
        if (node.leaf()) {
            for (std::uint32_t i = node.begin; i < node.end; ++i) {
                const std::uint32_t id = order_[i];
                if ((points_[id] - q).squaredNorm() <= r2) out.push_back(id);
            }
            return;
        }
        search_radius(node.left, q, r2, out);
        search_radius(node.right, q, r2, out);
    }

    PointCloud points_;
    std::vector<std::uint32_t> order_;
    std::vector<Node> nodes_;
    std::int32_t root_ = -1;
};

inline std::vector<Neighbor> knn(const NeighborIndex& index, const Vec3& query, std::size_t k) {
    return index.knn(query, k);
}

struct NormalEstimate {
    PointCloud normals;                // unit length, or zero when degenerate
    std::vector<char> degenerate;      // 1 where the neighborhood had < 3 points
};

// Smallest-eigenvector normal of the radius neighborhood covariance,
// oriented away from the cloud centroid (cells are star-shaped around it).
inline NormalEstimate estimate_normals(const PointCloud& cloud, double radius) {
    if (radius <= 0) throw ArgumentError("estimate_normals: radius must be > 0");
    NormalEstimate est;
    est.normals.assign(cloud.size(), Vec3::Zero());
    est.degenerate.assign(cloud.size(), 0);
    if (cloud.empty()) return est;

    Vec3 cloud_centroid = Vec3::Zero();
    for (const auto& p : cloud) cloud_centroid += p;
    cloud_centroid /= static_cast<double>(cloud.size());

    NeighborIndex index(cloud);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto nbrs = index.radius_search(cloud[i], radius);
        if (nbrs.size() < 3) {
            est.degenerate[i] = 1;
            continue;
        }
        Vec3 mean = Vec3::Zero();
        for (auto j : nbrs) mean += cloud[j];
        mean /= static_cast<double>(nbrs.size());
        Mat3 cov = Mat3::Zero();
        for (auto j : nbrs) {
            const Vec3 d = cloud[j] - mean;
            cov += d * d.transpose();
        }
        Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
        Vec3 n = eig.eigenvectors().col(0);  // smallest eigenvalue
        if (n.dot(cloud[i] - cloud_centroid) < 0) n = -n;
        est.normals[i] = n.normalized();
    }
    return est;
}

// Scale-adaptive default radius: 2x the mean nearest-neighbor spacing.
inline double default_feature_radius(const PointCloud& cloud) {
    if (cloud.size() < 2) return 1.0;
    NeighborIndex index(cloud);
    double sum = 0.0;
    for (const auto& p : cloud) sum += index.knn(p, 2)[1].distance;
    return 2.0 * sum / static_cast<double>(cloud.size());
}

// 33 bins: three concatenated 11-bin angular histograms (alpha, phi, theta),
// each block normalized to sum 100 unless the neighborhood is empty.
struct FpfhDescriptor {
    static constexpr int kBinsPerFeature = 11;
    std::array<double, 3 * kBinsPerFeature> bins{};

    double distance(const FpfhDescriptor& other) const {
        double d2 = 0.0;
        for (std::size_t i = 0; i < bins.size(); ++i) {
            const double d = bins[i] - other.bins[i];
            d2 += d * d;
        }
        return std::sqrt(d2);
    }
};

namespace detail {

// Darboux-frame pair features (alpha, phi, theta); false when degenerate.
inline bool pair_features(const Vec3& p1, const Vec3& n1_in, const Vec3& p2, const Vec3& n2_in,
                          double& alpha, double& phi, double& theta) {
    Vec3 d = p2 - p1;
    const double dist = d.norm();
    if (dist == 0.0) return false;
    Vec3 n1 = n1_in, n2 = n2_in;
    const double angle1 = n1.dot(d) / dist;
    const double angle2 = n2.dot(d) / dist;
    if (std::acos(std::min(std::abs(angle1), 1.0)) > std::acos(std::min(std::abs(angle2), 1.0))) {
        std::swap(n1, n2);
        d = -d;
        phi = -angle2;
    } else {
        phi = angle1;
    }
    Vec3 v = d.cross(n1);
    const double v_norm = v.norm();
    if (v_norm == 0.0) return false;
    v /= v_norm;
    const Vec3 w = n1.cross(v);
    alpha = v.dot(n2);
    theta = std::atan2(w.dot(n2), n1.dot(n2));
    return true;
}

inline int clamp_bin(double value, double lo, double hi) {
    const int nb = FpfhDescriptor::kBinsPerFeature;
    int b = static_cast<int>(std::floor(nb * (value - lo) / (hi - lo)));
    return std::clamp(b, 0, nb - 1);
}

}  // namespace detail

// Standard FPFH: per-point SPFH over radius neighbors, then accumulation of
// neighbor SPFHs weighted by inverse squared distance, re-normalized to
// percent per histogram block. Points with no radius neighbor get an
// all-zero descriptor.
inline std::vector<FpfhDescriptor> compute_fpfh(const PointCloud& cloud, const PointCloud& normals,
                                                double radius) {
    if (radius <= 0) throw ArgumentError("compute_fpfh: radius must be > 0");
    if (normals.size() != cloud.size())
        throw ArgumentError("compute_fpfh: normals size mismatch");

    const std::size_t n = cloud.size();
    NeighborIndex index(cloud);
    std::vector<std::vector<std::uint32_t>> nbrs(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto ids = index.radius_search(cloud[i], radius);
        ids.erase(std::remove(ids.begin(), ids.end(), static_cast<std::uint32_t>(i)), ids.end());
        nbrs[i] = std::move(ids);
    }

    constexpr int nb = FpfhDescriptor::kBinsPerFeature;
    std::vector<FpfhDescriptor> spfh(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (nbrs[i].empty()) continue;
        const double incr = 100.0 / static_cast<double>(nbrs[i].size());
        for (auto j : nbrs[i]) {
            double alpha, phi, theta;
            if (!detail::pair_features(cloud[i], normals[i], cloud[j], normals[j], alpha, phi, theta))
                continue;
            spfh[i].bins[detail::clamp_bin(alpha, -1.0, 1.0)] += incr;
            spfh[i].bins[nb + detail::clamp_bin(phi, -1.0, 1.0)] += incr;
            spfh[i].bins[2 * nb + detail::clamp_bin(theta, -M_PI, M_PI)] += incr;
        }
    }

    std::vector<FpfhDescriptor> fpfh(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (nbrs[i].empty()) continue;  // isolated: all-zero
        FpfhDescriptor acc = spfh[i];
        for (auto j : nbrs[i]) {
            const double d2 = (cloud[i] - cloud[j]).squaredNorm();
            if (d2 == 0.0) continue;
            const double w = 1.0 / d2;
            for (std::size_t b = 0; b < acc.bins.size(); ++b) acc.bins[b] += w * spfh[j].bins[b];
        }
        for (int f = 0; f < 3; ++f) {
            double sum = 0.0;
            for (int b = 0; b < nb; ++b) sum += acc.bins[f * nb + b];
            if (sum > 0.0)
                for (int b = 0; b < nb; ++b) fpfh[i].bins[f * nb + b] = acc.bins[f * nb + b] * 100.0 / sum;
        }
    }
    return fpfh;
}

struct VoxelGrid {
    std::array<int, 3> dims{32, 32, 32};
    Vec3 origin = Vec3::Zero();  // um, corner of voxel (0,0,0)
    double cell_size = 1.0;      // um, cubic voxels
    std::vector<double> occupancy;  // x-fastest, values in [-1, 1]

    std::size_t flat(int x, int y, int z) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(y) +
                                                    static_cast<std::size_t>(dims[1]) * z);
    }
    std::size_t voxel_count() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
};

struct Bounds {
    Vec3 min = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 max = Vec3::Constant(-std::numeric_limits<double>::infinity());

    void extend(const Vec3& p) {
        min = min.cwiseMin(p);
        max = max.cwiseMax(p);
    }
    void extend(const PointCloud& cloud) {
        for (const auto& p : cloud) extend(p);
    }
    bool empty() const { return !(min.x() <= max.x()); }
};

// Rasterizes a cloud into a cubic occupancy grid. The grid covers the
// bounding cube of `bounds` (the cloud's own box by default), so the result
// is invariant under translation of the whole cloud and two clouds rendered
// with shared bounds are directly comparable voxel-by-voxel.
inline VoxelGrid voxelize(const PointCloud& cloud, const std::array<int, 3>& dims,
                          std::optional<Bounds> bounds = std::nullopt) {
    if (cloud.empty()) throw ArgumentError("voxelize: empty cloud");
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1) throw ArgumentError("voxelize: bad grid dims");

    Bounds b;
    if (bounds) {
        b = *bounds;
    } else {
        b.extend(cloud);
    }
    const Vec3 extent = b.max - b.min;
    double edge = extent.maxCoeff();
    if (edge <= 0.0) edge = 1.0;
    const Vec3 center = 0.5 * (b.min + b.max);

    VoxelGrid grid;
    grid.dims = dims;
    const int gmax = std::max({dims[0], dims[1], dims[2]});
    grid.cell_size = edge / static_cast<double>(gmax);
    grid.origin = center - 0.5 * grid.cell_size * Vec3(dims[0], dims[1], dims[2]);
    grid.occupancy.assign(grid.voxel_count(), 0.0);

    for (const auto& p : cloud) {
        const Vec3 rel = (p - grid.origin) / grid.cell_size;
        const int x = std::clamp(static_cast<int>(std::floor(rel.x())), 0, dims[0] - 1);
        const int y = std::clamp(static_cast<int>(std::floor(rel.y())), 0, dims[1] - 1);
        const int z = std::clamp(static_cast<int>(std::floor(rel.z())), 0, dims[2] - 1);
        grid.occupancy[grid.flat(x, y, z)] = 1.0;
    }
    return grid;
}

}  // namespace celltrack
