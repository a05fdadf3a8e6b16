#pragma once

#include "sscdl/common.hpp"

#include <algorithm>
#include <optional>
#include <utility>

namespace sscdl {

// An undirected attributed graph. Edges are stored once per undirected pair,
// canonicalized to (min, max) and sorted. Self loops are rejected.
struct Graph {
    Matrix node_features;                   // n x d
    std::vector<std::pair<int, int>> edges; // unique, i < j, sorted
    std::optional<int> label;
    int graph_id = 0;

    int num_nodes() const { return static_cast<int>(node_features.rows()); }
    int feature_dim() const { return static_cast<int>(node_features.cols()); }
};

inline Graph make_graph(Matrix node_features,
                        const std::vector<std::pair<int, int>>& edges,
                        std::optional<int> label = std::nullopt,
                        int graph_id = 0) {
    Graph g;
    const int n = static_cast<int>(node_features.rows());
    g.node_features = std::move(node_features);
    g.edges.reserve(edges.size());
    for (auto [a, b] : edges) {
        if (a < 0 || b < 0 || a >= n || b >= n)
            throw DataError("make_graph: edge endpoint out of range");
        if (a == b) throw DataError("make_graph: self loop not allowed");
        g.edges.emplace_back(std::min(a, b), std::max(a, b));
    }
    std::sort(g.edges.begin(), g.edges.end());
    g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());
    g.label = label;
    g.graph_id = graph_id;
    return g;
}

// Symmetric normalization with self loops: for A' = A + I and degrees
// d_i = sum_j A'_ij, entry (i, j) of the result is A'_ij / sqrt(d_i d_j).
struct NormalizedAdjacency {
    SparseMatrix values;  // n x n, symmetric
    int num_nodes() const { return static_cast<int>(values.rows()); }
};

namespace detail {

inline NormalizedAdjacency normalize_edges(int n,
                                           const std::vector<std::pair<int, int>>& edges,
                                           const char* who) {
    if (n <= 0) throw DataError(std::string(who) + ": graph has no nodes");
    std::vector<double> degree(static_cast<std::size_t>(n), 1.0);  // self loop
    for (auto [a, b] : edges) {
        degree[static_cast<std::size_t>(a)] += 1.0;
        degree[static_cast<std::size_t>(b)] += 1.0;
    }
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(edges.size() * 2 + static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        trip.emplace_back(i, i, 1.0 / degree[static_cast<std::size_t>(i)]);
    for (auto [a, b] : edges) {
        double v = 1.0 / std::sqrt(degree[static_cast<std::size_t>(a)] *
                                   degree[static_cast<std::size_t>(b)]);
        trip.emplace_back(a, b, v);
        trip.emplace_back(b, a, v);
    }
    NormalizedAdjacency out;
    out.values.resize(n, n);
    out.values.setFromTriplets(trip.begin(), trip.end());
    out.values.makeCompressed();
    return out;
}

}  // namespace detail

inline NormalizedAdjacency normalize_adjacency(const Graph& g) {
    return detail::normalize_edges(g.num_nodes(), g.edges, "normalize_adjacency");
}

// Several graphs packed into one block-diagonal structure. Node rows are
// concatenated in graph order; edges use global node indices. Labels use -1
// for graphs without one (class indices are nonnegative).
struct GraphBatch {
    Matrix node_features;                   // N x d
    std::vector<std::pair<int, int>> edges; // global indices, canonical order
    std::vector<int> graph_index;           // node -> position of its graph in the batch
    std::vector<int> node_offset;           // size n_graphs + 1
    std::vector<int> labels;                // per graph, -1 when absent
    std::vector<int> graph_ids;             // per graph
    int n_graphs = 0;

    int total_nodes() const { return static_cast<int>(node_features.rows()); }
    int num_nodes_of(int k) const {
        return node_offset[static_cast<std::size_t>(k) + 1] -
               node_offset[static_cast<std::size_t>(k)];
    }
};

inline GraphBatch pack_batch(const std::vector<Graph>& graphs) {
    if (graphs.empty()) throw DataError("pack_batch: empty graph list");
    const int d = graphs.front().feature_dim();
    int total = 0;
    for (const auto& g : graphs) {
        if (g.num_nodes() == 0) throw DataError("pack_batch: graph with zero nodes");
        if (g.feature_dim() != d) throw DataError("pack_batch: feature dimension mismatch");
        total += g.num_nodes();
    }
    GraphBatch b;
    b.n_graphs = static_cast<int>(graphs.size());
    b.node_features.resize(total, d);
    b.node_offset.resize(graphs.size() + 1, 0);
    b.graph_index.resize(static_cast<std::size_t>(total));
    int off = 0;
    for (std::size_t k = 0; k < graphs.size(); ++k) {
        const Graph& g = graphs[k];
        const int n = g.num_nodes();
        b.node_features.middleRows(off, n) = g.node_features;
        for (int i = 0; i < n; ++i) b.graph_index[static_cast<std::size_t>(off + i)] = static_cast<int>(k);
        for (auto [a, c] : g.edges) b.edges.emplace_back(off + a, off + c);
        b.labels.push_back(g.label ? *g.label : -1);
        b.graph_ids.push_back(g.graph_id);
        off += n;
        b.node_offset[k + 1] = off;
    }
    return b;
}

inline std::vector<Graph> unpack_batch(const GraphBatch& b) {
    std::vector<Graph> out(static_cast<std::size_t>(b.n_graphs));
    std::size_t e = 0;
    for (int k = 0; k < b.n_graphs; ++k) {
        const int off = b.node_offset[static_cast<std::size_t>(k)];
        const int n = b.num_nodes_of(k);
        Graph& g = out[static_cast<std::size_t>(k)];
        g.node_features = b.node_features.middleRows(off, n);
        while (e < b.edges.size() && b.edges[e].first < off + n) {
            g.edges.emplace_back(b.edges[e].first - off, b.edges[e].second - off);
            ++e;
        }
        int lbl = b.labels[static_cast<std::size_t>(k)];
        g.label = lbl < 0 ? std::nullopt : std::optional<int>(lbl);
        g.graph_id = b.graph_ids[static_cast<std::size_t>(k)];
    }
    return out;
}

inline NormalizedAdjacency normalize_adjacency(const GraphBatch& b) {
    return detail::normalize_edges(b.total_nodes(), b.edges, "normalize_adjacency");
}

// perm maps old node index to new node index; must be a bijection on [0, n).
inline Graph permute_nodes(const Graph& g, const std::vector<int>& perm) {
    const int n = g.num_nodes();
    if (static_cast<int>(perm.size()) != n)
        throw DataError("permute_nodes: permutation length mismatch");
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    for (int p : perm) {
        if (p < 0 || p >= n || seen[static_cast<std::size_t>(p)])
            throw DataError("permute_nodes: not a permutation");
        seen[static_cast<std::size_t>(p)] = 1;
    }
    Matrix feat(n, g.feature_dim());
    for (int i = 0; i < n; ++i) feat.row(perm[static_cast<std::size_t>(i)]) = g.node_features.row(i);
    std::vector<std::pair<int, int>> edges;
    edges.reserve(g.edges.size());
    for (auto [a, b] : g.edges)
        edges.emplace_back(perm[static_cast<std::size_t>(a)], perm[static_cast<std::size_t>(b)]);
    return make_graph(std::move(feat), edges, g.label, g.graph_id);
}

}  // namespace sscdl
