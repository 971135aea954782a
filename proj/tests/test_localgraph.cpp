#include "celltrack/localgraph.hpp"

#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace celltrack;

namespace {

CellIndex index_from_points(const PointCloud& pts, std::uint32_t first_id = 1) {
    CellIndex index;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        CellRecord rec;
        rec.cell_id = first_id + static_cast<std::uint32_t>(i);
        rec.centroid = pts[i];
        rec.voxel_count = 10;
        rec.boundary_cloud = {pts[i]};
        index.cells.emplace(rec.cell_id, rec);
    }
    return index;
}

PointCloud random_points(std::uint64_t seed, std::size_t n, double extent = 30.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-extent, extent);
    PointCloud pts;
    for (std::size_t i = 0; i < n; ++i) pts.emplace_back(dist(rng), dist(rng), dist(rng));
    return pts;
}

}  // namespace

TEST_CASE("local graph on a line picks the nearest cells", "[localgraph]") {
    // cells at x = 0, 1, 2, 4, 8, 16; anchor at x=1
    PointCloud pts = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0),
                      Vec3(4, 0, 0), Vec3(8, 0, 0), Vec3(16, 0, 0)};
    const auto index = index_from_points(pts);
    const auto g = build_local_graph(index, 2, 4, 2);
    REQUIRE(g.node_count() == 4);
    CHECK(g.node_cell_ids == std::vector<std::uint32_t>{2, 1, 3, 4});
    CHECK(g.node_coords[0] == Vec3::Zero());
    // every node links to its 2 nearest within the set
    for (const auto& edges : g.out_edges) CHECK(edges.size() == 2);
    CHECK(g.out_edges[0] == std::vector<int>{1, 2});  // anchor at x=1 -> x=0 and x=2
}

TEST_CASE("n_p equal to index size uses all cells", "[localgraph]") {
    const auto index = index_from_points(random_points(1, 7));
    const auto g = build_local_graph(index, 1, 7, 3);
    CHECK(g.node_count() == 7);
}

TEST_CASE("too few cells raises", "[localgraph]") {
    const auto index = index_from_points(random_points(2, 5));
    CHECK_THROWS_AS(build_local_graph(index, 1, 6, 2), ArgumentError);
    CHECK_THROWS_AS(build_local_graph(index, 1, 5, 5), ArgumentError);
}

TEST_CASE("adjacency equals brute-force k-NN oracle", "[localgraph]") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto pts = random_points(seed + 10, 24);
        const auto index = index_from_points(pts);
        const auto g = build_local_graph(index, 5, 16, 6);
        for (std::size_t i = 0; i < g.node_count(); ++i) {
            const auto scan = oracle::knn_scan(g.node_coords, g.node_coords[i], 7);
            std::vector<int> expect;
            for (const auto& hit : scan)
                if (hit.id != i && expect.size() < 6) expect.push_back(static_cast<int>(hit.id));
            CHECK(g.out_edges[i] == expect);
        }
    }
}

TEST_CASE("local graph distances are invariant under rigid motion of the index", "[localgraph]") {
    const auto pts = random_points(77, 20);
    auto index = index_from_points(pts);
    const auto g0 = build_local_graph(index, 3, 10, 4);

    RigidTransform t;
    t.rotation = Eigen::AngleAxisd(0.7, Vec3(1, 2, 3).normalized()).toRotationMatrix();
    t.translation = Vec3(4, -2, 9);
    CellIndex moved = index;
    for (auto& [_, rec] : moved.cells) rec.centroid = t.apply(rec.centroid);
    const auto g1 = build_local_graph(moved, 3, 10, 4);

    CHECK(g0.node_cell_ids == g1.node_cell_ids);
    CHECK(g0.out_edges == g1.out_edges);
    for (std::size_t i = 0; i < g0.node_count(); ++i)
        for (std::size_t j = 0; j < g0.node_count(); ++j) {
            const double before = (g0.node_coords[i] - g0.node_coords[j]).norm();
            const double after = (g1.node_coords[i] - g1.node_coords[j]).norm();
            CHECK(std::abs(before - after) < 1e-9);
        }
}

TEST_CASE("roi picks the nearest candidates in order", "[localgraph]") {
    CellRecord anchor;
    anchor.cell_id = 42;
    anchor.centroid = Vec3::Zero();
    const auto next = index_from_points({Vec3(1, 0, 0), Vec3(2, 0, 0), Vec3(3, 0, 0)});
    const auto roi = select_roi(anchor, next, 2);
    CHECK(roi.candidate_ids == std::vector<std::uint32_t>{1, 2});
    CHECK_FALSE(roi.truncated);
}

TEST_CASE("roi flags truncation when cells run out", "[localgraph]") {
    CellRecord anchor;
    anchor.centroid = Vec3::Zero();
    const auto next = index_from_points(random_points(3, 4));
    const auto roi = select_roi(anchor, next, 9);
    CHECK(roi.candidate_ids.size() == 4);
    CHECK(roi.truncated);
}

TEST_CASE("roi distances are sorted on random instances", "[localgraph]") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        CellRecord anchor;
        anchor.centroid = random_points(seed, 1)[0];
        const auto next = index_from_points(random_points(seed + 100, 40));
        const auto roi = select_roi(anchor, next, 20);
        const auto scan = oracle::knn_scan(random_points(seed + 100, 40), anchor.centroid, 20);
        REQUIRE(roi.candidate_ids.size() == 20);
        for (std::size_t i = 0; i < 20; ++i) {
            CHECK(roi.candidate_ids[i] == scan[i].id + 1);
            if (i > 0) CHECK(roi.distances[i] >= roi.distances[i - 1]);
        }
    }
}

TEST_CASE("identical graphs associate as identity", "[localgraph]") {
    const auto index = index_from_points(random_points(8, 12));
    const auto g = build_local_graph(index, 4, 8, 3);
    const auto pairing = associate_nodes(g, g);
    for (std::size_t i = 0; i < g.node_count(); ++i) {
        CHECK(pairing.pairs[i] == static_cast<int>(i));
        CHECK(pairing.pair_distances[i] == 0.0);
    }
}

TEST_CASE("association undoes a node permutation", "[localgraph]") {
    const auto index = index_from_points(random_points(9, 12));
    const auto g = build_local_graph(index, 4, 8, 3);
    LocalGraph shuffled = g;
    std::swap(shuffled.node_coords[2], shuffled.node_coords[5]);
    std::swap(shuffled.node_cell_ids[2], shuffled.node_cell_ids[5]);
    const auto pairing = associate_nodes(g, shuffled);
    CHECK(pairing.pairs[2] == 5);
    CHECK(pairing.pairs[5] == 2);
    CHECK(pairing.pairs[0] == 0);
    CHECK(pairing.total_cost == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("association cost equals permutation oracle for small graphs", "[localgraph]") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto ia = index_from_points(random_points(seed + 200, 8, 5.0));
        const auto ib = index_from_points(random_points(seed + 300, 8, 5.0));
        const auto ga = build_local_graph(ia, 1, 8, 3);
        const auto gb = build_local_graph(ib, 1, 8, 3);
        const auto pairing = associate_nodes(ga, gb);

        const std::size_t m = ga.node_count() - 1;
        std::vector<std::vector<double>> cost(m, std::vector<double>(m));
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j)
                cost[i][j] = (ga.node_coords[i + 1] - gb.node_coords[j + 1]).norm();
        const double best = oracle::assignment_cost_scan(cost);
        const double center = (ga.node_coords[0] - gb.node_coords[0]).norm();
        CHECK(pairing.total_cost == Catch::Approx(best + center).margin(1e-9));
    }
}

TEST_CASE("association cost is invariant under node relabeling", "[localgraph]") {
    const auto ia = index_from_points(random_points(50, 10, 5.0));
    const auto ib = index_from_points(random_points(51, 10, 5.0));
    const auto ga = build_local_graph(ia, 2, 8, 3);
    auto gb = build_local_graph(ib, 2, 8, 3);
    const auto before = associate_nodes(ga, gb).total_cost;
    std::swap(gb.node_coords[1], gb.node_coords[7]);
    std::swap(gb.node_cell_ids[1], gb.node_cell_ids[7]);
    const auto after = associate_nodes(ga, gb).total_cost;
    CHECK(before == Catch::Approx(after).margin(1e-9));
}

TEST_CASE("point ground truth follows the three figure cases", "[localgraph]") {
    const auto index = index_from_points(random_points(60, 10, 5.0));
    const auto g = build_local_graph(index, 3, 8, 3);

    // case 1: identical graphs, matching -> all ones
    auto pairing = associate_nodes(g, g);
    auto gt = make_point_gt(pairing, true, 3.0);
    for (double label : gt.labels) CHECK(label == 1.0);

    // case 2: one node displaced by 2*tau -> that label 0, rest 1
    LocalGraph displaced = g;
    displaced.node_coords[4] += Vec3(6.0, 0, 0);
    pairing = associate_nodes(g, displaced);
    gt = make_point_gt(pairing, true, 3.0);
    int zeros = 0;
    for (double label : gt.labels) zeros += label == 0.0 ? 1 : 0;
    CHECK(zeros == 1);

    // case 3: non-matching -> all zeros
    gt = make_point_gt(pairing, false, 3.0);
    for (double label : gt.labels) CHECK(label == 0.0);
}

TEST_CASE("point gt is monotone in tau", "[localgraph]") {
    const auto ia = index_from_points(random_points(70, 10, 5.0));
    const auto ib = index_from_points(random_points(71, 10, 5.0));
    const auto ga = build_local_graph(ia, 1, 8, 3);
    const auto gb = build_local_graph(ib, 1, 8, 3);
    const auto pairing = associate_nodes(ga, gb);
    PointGt prev;
    for (double tau : {0.5, 1.0, 2.0, 4.0, 8.0, 16.0}) {
        const auto gt = make_point_gt(pairing, true, tau);
        if (!prev.labels.empty())
            for (std::size_t i = 0; i < gt.labels.size(); ++i) CHECK(gt.labels[i] >= prev.labels[i]);
        prev = gt;
    }
}
