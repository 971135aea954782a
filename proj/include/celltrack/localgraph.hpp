#pragma once

// Local 3D k-NN graphs around an anchor cell, region-of-interest candidate
// selection, minimum-cost node association between two graphs, and
// point-to-point training labels.

#include "celltrack/assignment.hpp"
#include "celltrack/geometry.hpp"
#include "celltrack/volume.hpp"

#include <algorithm>
#include <vector>

namespace celltrack {

struct LocalGraph {
    std::uint32_t center_cell_id = 0;
    std::vector<std::uint32_t> node_cell_ids;      // node 0 = center cell
    PointCloud node_coords;                         // relative to the center centroid
    std::vector<std::vector<int>> out_edges;        // node -> its k nearest nodes
    std::vector<std::vector<int>> sym_edges;        // symmetrized adjacency, ascending

    std::size_t node_count() const { return node_coords.size(); }
};

struct RoiCandidates {
    std::uint32_t anchor_cell_id = 0;
    std::vector<std::uint32_t> candidate_ids;  // ascending distance, ties by lower id
    std::vector<double> distances;
    bool truncated = false;  // fewer than the requested n cells were available
};

struct NodePairing {
    std::vector<int> pairs;            // pairs[i] = node of graph B matched to node i of A
    std::vector<double> pair_distances;
    double total_cost = 0.0;
};

struct PointGt {
    std::vector<double> labels;  // one {0,1} value per anchor node
};

// Helper shared with the neighbor-distance scorer in registration: ids of
// the index's cells in ascending order plus a matching NeighborIndex, so
// k-NN tie-breaks by position equal tie-breaks by lower cell id.
struct CentroidIndex {
    std::vector<std::uint32_t> ids;
    NeighborIndex nn;

    explicit CentroidIndex(const CellIndex& index) {
        PointCloud pts;
        ids.reserve(index.cells.size());
        pts.reserve(index.cells.size());
        for (const auto& [id, rec] : index.cells) {
            ids.push_back(id);
            pts.push_back(rec.centroid);
        }
        nn = NeighborIndex(std::move(pts));
    }
};

// Anchor centroid plus its n_p - 1 nearest cell centroids, coordinates
// re-expressed relative to the anchor, each node wired to its k nearest
// nodes within the node set.
inline LocalGraph build_local_graph(const CellIndex& index, std::uint32_t cell_id, std::size_t n_p,
                                    std::size_t k) {
    if (index.cells.size() < n_p)
        throw ArgumentError("build_local_graph: index has fewer than n_p cells");
    if (n_p < 1 || k >= n_p) throw ArgumentError("build_local_graph: need k < n_p and n_p >= 1");
    const auto it = index.cells.find(cell_id);
    if (it == index.cells.end()) throw ArgumentError("build_local_graph: unknown cell id");
    const Vec3 center = it->second.centroid;

    const CentroidIndex cidx(index);
    const auto near = cidx.nn.knn(center, n_p);  // self comes first (distance 0)

    LocalGraph g;
    g.center_cell_id = cell_id;
    g.node_cell_ids.reserve(n_p);
    g.node_coords.reserve(n_p);
    // The anchor may tie with a coincident centroid; make sure node 0 is the
    // anchor itself, keeping the remaining nodes in scan order.
    g.node_cell_ids.push_back(cell_id);
    g.node_coords.push_back(Vec3::Zero());
    for (const auto& nb : near) {
        const std::uint32_t id = cidx.ids[nb.id];
        if (id == cell_id) continue;
        if (g.node_cell_ids.size() == n_p) break;
        g.node_cell_ids.push_back(id);
        g.node_coords.push_back(index.cells.at(id).centroid - center);
    }
    if (g.node_cell_ids.size() < n_p) {
        // anchor was not among its own n_p nearest (coincident duplicates); take one more
        const auto more = cidx.nn.knn(center, n_p + 1);
        for (const auto& nb : more) {
            if (g.node_cell_ids.size() == n_p) break;
            const std::uint32_t id = cidx.ids[nb.id];
            if (std::find(g.node_cell_ids.begin(), g.node_cell_ids.end(), id) != g.node_cell_ids.end())
                continue;
            g.node_cell_ids.push_back(id);
            g.node_coords.push_back(index.cells.at(id).centroid - center);
        }
    }

    NeighborIndex node_nn(g.node_coords);
    g.out_edges.assign(n_p, {});
    g.sym_edges.assign(n_p, {});
    for (std::size_t i = 0; i < n_p; ++i) {
        const auto nbrs = node_nn.knn(g.node_coords[i], k + 1);
        for (const auto& nb : nbrs) {
            if (nb.id == i) continue;
            if (g.out_edges[i].size() == k) break;
            g.out_edges[i].push_back(static_cast<int>(nb.id));
        }
        if (g.out_edges[i].size() < k) {
            // the node itself was not returned among k+1 (duplicate coordinates); extend
            const auto more = node_nn.knn(g.node_coords[i], std::min(n_p, k + 2));
            for (const auto& nb : more) {
                if (nb.id == i) continue;
                if (std::find(g.out_edges[i].begin(), g.out_edges[i].end(), static_cast<int>(nb.id)) !=
                    g.out_edges[i].end())
                    continue;
                if (g.out_edges[i].size() == k) break;
                g.out_edges[i].push_back(static_cast<int>(nb.id));
            }
        }
    }
    for (std::size_t i = 0; i < n_p; ++i)
        for (int j : g.out_edges[i]) {
            g.sym_edges[i].push_back(j);
            g.sym_edges[j].push_back(static_cast<int>(i));
        }
    for (auto& e : g.sym_edges) {
        std::sort(e.begin(), e.end());
        e.erase(std::unique(e.begin(), e.end()), e.end());
    }
    return g;
}

// The n cells of next_index whose centroids are nearest to the anchor,
// ascending distance. Expects next_index already registered into the
// anchor's frame.
inline RoiCandidates select_roi(const CellRecord& anchor, const CellIndex& next_index, std::size_t n) {
    RoiCandidates roi;
    roi.anchor_cell_id = anchor.cell_id;
    if (next_index.cells.empty()) {
        roi.truncated = n > 0;
        return roi;
    }
    const CentroidIndex cidx(next_index);
    std::size_t take = n;
    if (take > cidx.ids.size()) {
        take = cidx.ids.size();
        roi.truncated = true;
    }
    const auto nbrs = cidx.nn.knn(anchor.centroid, take);
    roi.candidate_ids.reserve(take);
    roi.distances.reserve(take);
    for (const auto& nb : nbrs) {
        roi.candidate_ids.push_back(cidx.ids[nb.id]);
        roi.distances.push_back(nb.distance);
    }
    return roi;
}

// Minimum-total-cost bijection between the node sets of two center-overlaid
// graphs on Euclidean node distance. Node 0 pairs with node 0 (both sit at
// the origin, which never worsens the optimum).
inline NodePairing associate_nodes(const LocalGraph& a, const LocalGraph& b) {
    const std::size_t n = a.node_count();
    if (n != b.node_count()) throw ArgumentError("associate_nodes: node-count mismatch");
    NodePairing out;
    out.pairs.assign(n, -1);
    out.pair_distances.assign(n, 0.0);
    if (n == 0) return out;
    out.pairs[0] = 0;
    out.pair_distances[0] = (a.node_coords[0] - b.node_coords[0]).norm();
    if (n > 1) {
        const std::size_t m = n - 1;
        std::vector<std::vector<double>> cost(m, std::vector<double>(m));
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j)
                cost[i][j] = (a.node_coords[i + 1] - b.node_coords[j + 1]).norm();
        const auto sol = solve_assignment(cost);
        for (std::size_t i = 0; i < m; ++i) {
            out.pairs[i + 1] = sol[i] + 1;
            out.pair_distances[i + 1] = cost[i][sol[i]];
        }
    }
    for (double d : out.pair_distances) out.total_cost += d;
    return out;
}

// Matching pair: label 1 where the paired nodes are within tau_pp.
// Non-matching pair: all labels 0.
inline PointGt make_point_gt(const NodePairing& pairing, bool is_match, double tau_pp) {
    PointGt gt;
    gt.labels.assign(pairing.pairs.size(), 0.0);
    if (!is_match) return gt;
    for (std::size_t i = 0; i < pairing.pairs.size(); ++i)
        gt.labels[i] = pairing.pair_distances[i] <= tau_pp ? 1.0 : 0.0;
    return gt;
}

}  // namespace celltrack
