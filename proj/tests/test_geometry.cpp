#include "celltrack/geometry.hpp"

#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace celltrack;

namespace {

PointCloud random_cloud(std::uint64_t seed, std::size_t n, double extent = 20.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-extent, extent);
    PointCloud cloud;
    cloud.reserve(n);
    for (std::size_t i = 0; i < n; ++i) cloud.emplace_back(dist(rng), dist(rng), dist(rng));
    return cloud;
}

// Evenly covered sphere: every point has a well-conditioned neighborhood.
PointCloud fib_sphere(std::size_t n, double radius) {
    PointCloud cloud;
    const double golden = M_PI * (3.0 - std::sqrt(5.0));
    for (std::size_t i = 0; i < n; ++i) {
        const double y = 1.0 - 2.0 * (i + 0.5) / static_cast<double>(n);
        const double r = std::sqrt(1.0 - y * y);
        const double theta = golden * static_cast<double>(i);
        cloud.emplace_back(radius * r * std::cos(theta), radius * y, radius * r * std::sin(theta));
    }
    return cloud;
}

RigidTransform random_rigid(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    Vec3 axis(dist(rng), dist(rng), dist(rng));
    axis.normalize();
    const double angle = dist(rng) * M_PI;
    RigidTransform t;
    t.rotation = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
    t.translation = Vec3(dist(rng), dist(rng), dist(rng)) * 10.0;
    return t;
}

}  // namespace

TEST_CASE("knn on a line", "[geometry]") {
    NeighborIndex index({Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(3, 0, 0)});
    const auto hits = index.knn(Vec3(0, 0, 0), 2);
    REQUIRE(hits.size() == 2);
    CHECK(hits[0].id == 0);
    CHECK(hits[1].id == 1);
    CHECK(hits[0].distance == 0.0);
    CHECK(hits[1].distance == 1.0);
}

TEST_CASE("knn breaks distance ties by lower index", "[geometry]") {
    NeighborIndex index({Vec3(1, 0, 0), Vec3(1, 0, 0), Vec3(1, 0, 0), Vec3(5, 0, 0)});
    const auto hits = index.knn(Vec3(0, 0, 0), 3);
    REQUIRE(hits.size() == 3);
    CHECK(hits[0].id == 0);
    CHECK(hits[1].id == 1);
    CHECK(hits[2].id == 2);
}

TEST_CASE("knn rejects k beyond point count", "[geometry]") {
    NeighborIndex index({Vec3(0, 0, 0)});
    CHECK_THROWS_AS(index.knn(Vec3(0, 0, 0), 2), ArgumentError);
}

TEST_CASE("knn equals exhaustive scan on random instances", "[geometry]") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto cloud = random_cloud(seed, 200);
        NeighborIndex index(cloud);
        std::mt19937_64 rng(seed + 1000);
        std::uniform_real_distribution<double> dist(-25.0, 25.0);
        const Vec3 query(dist(rng), dist(rng), dist(rng));
        const auto got = index.knn(query, 10);
        const auto want = oracle::knn_scan(cloud, query, 10);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].id == want[i].id);
            CHECK(got[i].distance == Catch::Approx(want[i].distance).margin(1e-12));
        }
    }
}

TEST_CASE("radius search equals linear filter", "[geometry]") {
    const auto cloud = random_cloud(3, 150);
    NeighborIndex index(cloud);
    const Vec3 query(1.0, -2.0, 3.0);
    const double radius = 12.0;
    auto got = index.radius_search(query, radius);
    std::vector<std::uint32_t> want;
    for (std::uint32_t i = 0; i < cloud.size(); ++i)
        if ((cloud[i] - query).norm() <= radius) want.push_back(i);
    CHECK(got == want);
}

TEST_CASE("identity transform leaves cloud unchanged", "[geometry]") {
    const auto cloud = random_cloud(4, 30);
    const auto out = apply_transform(RigidTransform{}, cloud);
    for (std::size_t i = 0; i < cloud.size(); ++i) CHECK(out[i] == cloud[i]);
}

TEST_CASE("transform then inverse recovers the cloud", "[geometry]") {
    const auto cloud = random_cloud(5, 30);
    const auto t = random_rigid(5);
    const auto back = apply_transform(t.inverse(), apply_transform(t, cloud));
    for (std::size_t i = 0; i < cloud.size(); ++i) CHECK((back[i] - cloud[i]).norm() < 1e-9);
}

TEST_CASE("rigid transforms preserve pairwise distances", "[geometry]") {
    const auto cloud = random_cloud(6, 40);
    const auto t = random_rigid(6);
    CHECK(t.is_valid(1e-12));
    const auto moved = apply_transform(t, cloud);
    for (std::size_t i = 0; i < cloud.size(); ++i)
        for (std::size_t j = i + 1; j < cloud.size(); ++j) {
            const double before = (cloud[i] - cloud[j]).norm();
            const double after = (moved[i] - moved[j]).norm();
            CHECK(std::abs(before - after) < 1e-9);
        }
}

TEST_CASE("planar cloud normals are +-z", "[geometry]") {
    PointCloud cloud;
    for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 10; ++j) cloud.emplace_back(i, j, 0.0);
    const auto est = estimate_normals(cloud, 2.5);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        CHECK_FALSE(est.degenerate[i]);
        CHECK(std::abs(std::abs(est.normals[i].z()) - 1.0) < 1e-9);
    }
}

TEST_CASE("sphere normals point outward", "[geometry]") {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const Vec3 center(5, -3, 2);
    PointCloud cloud;
    for (int i = 0; i < 400; ++i) {
        Vec3 dir(gauss(rng), gauss(rng), gauss(rng));
        dir.normalize();
        cloud.push_back(center + 10.0 * dir);
    }
    const auto est = estimate_normals(cloud, 4.0);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        if (est.degenerate[i]) continue;
        CHECK(est.normals[i].dot(cloud[i] - center) > 0.0);
    }
}

TEST_CASE("two-point cloud flags degenerate normals", "[geometry]") {
    const auto est = estimate_normals({Vec3(0, 0, 0), Vec3(1, 0, 0)}, 5.0);
    CHECK(est.degenerate[0]);
    CHECK(est.degenerate[1]);
    CHECK(est.normals[0] == Vec3::Zero());
}

TEST_CASE("fpfh is deterministic and percent-normalized", "[geometry]") {
    const auto cloud = fib_sphere(300, 8.0);
    const double radius = default_feature_radius(cloud);
    const auto normals = estimate_normals(cloud, radius).normals;
    const auto a = compute_fpfh(cloud, normals, radius);
    const auto b = compute_fpfh(cloud, normals, radius);
    REQUIRE(a.size() == cloud.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].bins == b[i].bins);
        for (int f = 0; f < 3; ++f) {
            double sum = 0.0;
            for (int bin = 0; bin < FpfhDescriptor::kBinsPerFeature; ++bin)
                sum += a[i].bins[f * FpfhDescriptor::kBinsPerFeature + bin];
            CHECK(sum == Catch::Approx(100.0).margin(1e-6));
        }
    }
}

TEST_CASE("fpfh is invariant under rigid transforms", "[geometry]") {
    const auto cloud = random_cloud(22, 100, 5.0);
    const double radius = default_feature_radius(cloud);
    const auto normals = estimate_normals(cloud, radius).normals;
    const auto base = compute_fpfh(cloud, normals, radius);

    const auto t = random_rigid(22);
    const auto moved = apply_transform(t, cloud);
    PointCloud moved_normals;
    for (const auto& n : normals) moved_normals.push_back(t.rotation * n);
    const auto rotated = compute_fpfh(moved, moved_normals, radius);
    for (std::size_t i = 0; i < base.size(); ++i)
        for (std::size_t bin = 0; bin < base[i].bins.size(); ++bin)
            CHECK(std::abs(base[i].bins[bin] - rotated[i].bins[bin]) < 1e-6);
}

TEST_CASE("isolated point gets an all-zero descriptor", "[geometry]") {
    PointCloud cloud = {Vec3(0, 0, 0), Vec3(100, 0, 0), Vec3(100.5, 0, 0), Vec3(100, 0.5, 0),
                        Vec3(100, 0, 0.5)};
    const auto normals = estimate_normals(cloud, 2.0).normals;
    const auto desc = compute_fpfh(cloud, normals, 2.0);
    for (double b : desc[0].bins) CHECK(b == 0.0);
}

TEST_CASE("fpfh rejects non-positive radius", "[geometry]") {
    const PointCloud cloud = {Vec3(0, 0, 0)};
    CHECK_THROWS_AS(compute_fpfh(cloud, cloud, 0.0), ArgumentError);
}

TEST_CASE("single point occupies exactly one voxel", "[geometry]") {
    const auto grid = voxelize({Vec3(4, 5, 6)}, {8, 8, 8});
    int occupied = 0;
    for (double v : grid.occupancy) occupied += v != 0.0 ? 1 : 0;
    CHECK(occupied == 1);
}

TEST_CASE("voxelization is invariant under cloud translation", "[geometry]") {
    const auto cloud = random_cloud(31, 60, 4.0);
    PointCloud moved;
    for (const auto& p : cloud) moved.push_back(p + Vec3(17.0, -8.0, 3.5));
    const auto a = voxelize(cloud, {16, 16, 16});
    const auto b = voxelize(moved, {16, 16, 16});
    CHECK(a.occupancy == b.occupancy);
}

TEST_CASE("subtracted occupancies stay in {-1,0,1}", "[geometry]") {
    const auto a = random_cloud(32, 50, 4.0);
    PointCloud b;
    for (const auto& p : a) b.push_back(p + Vec3(9.0, 0, 0));
    Bounds common;
    common.extend(a);
    common.extend(b);
    const auto ga = voxelize(a, {16, 16, 16}, common);
    const auto gb = voxelize(b, {16, 16, 16}, common);
    for (std::size_t i = 0; i < ga.occupancy.size(); ++i) {
        const double d = ga.occupancy[i] - gb.occupancy[i];
        CHECK((d == -1.0 || d == 0.0 || d == 1.0));
    }
}

TEST_CASE("voxelize rejects empty cloud", "[geometry]") {
    CHECK_THROWS_AS(voxelize({}, {8, 8, 8}), ArgumentError);
}
