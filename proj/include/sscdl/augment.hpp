#pragma once

#include "sscdl/graph.hpp"

#include <set>

namespace sscdl {

enum class AugmentKind { attribute_mask, edge_perturb };

// Weak and strong views of the same batch. The strong perturbation rate is
// weak_ratio * strong_multiplier, and the strong perturbation always
// contains the weak one: for masks the weak mask is a thinned subset of the
// strong mask; for edge edits the weak edit list is a prefix of the strong
// edit list.
struct AugmentConfig {
    AugmentKind kind = AugmentKind::attribute_mask;
    double weak_ratio = 0.3;
    double strong_multiplier = 2.0;
    std::uint64_t seed = 0;
    bool resample_per_epoch = false;

    double strong_ratio() const { return weak_ratio * strong_multiplier; }

    void validate() const {
        if (!(weak_ratio > 0.0) || weak_ratio > 0.5)
            throw ConfigError("augment: weak_ratio must lie in (0, 0.5]");
        if (strong_multiplier < 1.0)
            throw ConfigError("augment: strong_multiplier must be at least 1");
        if (strong_ratio() > 0.95)
            throw ConfigError("augment: weak_ratio * strong_multiplier must not exceed 0.95");
    }
};

struct AugmentedPair {
    GraphBatch original;
    GraphBatch weak;
    GraphBatch strong;
};

namespace detail {

// Both view masks in one pass over the graph's feature block. Two draws per
// entry keep the stream layout independent of the outcomes.
inline void mask_block(Matrix& weak, Matrix& strong, int row0, int rows, Rng& rng,
                       double strong_rate, double keep_in_weak) {
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < weak.cols(); ++j) {
            double u1 = rng.next_unit();
            double u2 = rng.next_unit();
            if (u1 < strong_rate) {
                strong(row0 + i, j) = 0.0;
                if (u2 < keep_in_weak) weak(row0 + i, j) = 0.0;
            }
        }
    }
}

struct EdgeEdits {
    std::vector<std::pair<int, int>> kept_weak, kept_strong;
};

// Removal and addition lists are shuffled once; each view takes a prefix of
// length round(rate * m) so the strong edit set contains the weak one.
inline EdgeEdits perturb_edges(const Graph& g, Rng& rng, double weak_rate, double strong_rate) {
    const int n = g.num_nodes();
    const int m = static_cast<int>(g.edges.size());
    const int kw = static_cast<int>(std::lround(weak_rate * m));
    const int ks = static_cast<int>(std::lround(strong_rate * m));

    std::vector<int> order(g.edges.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    std::set<int> removed_weak(order.begin(), order.begin() + kw);
    std::set<int> removed_strong(order.begin(), order.begin() + ks);

    long long all_pairs = static_cast<long long>(n) * (n - 1) / 2;
    long long non_edges = all_pairs - m;
    int add_strong = static_cast<int>(std::min<long long>(ks, non_edges));
    int add_weak = std::min(kw, add_strong);

    std::set<std::pair<int, int>> existing(g.edges.begin(), g.edges.end());
    std::vector<std::pair<int, int>> additions;
    if (add_strong > 0) {
        if (all_pairs <= 20000) {
            std::vector<std::pair<int, int>> pool;
            for (int i = 0; i < n; ++i)
                for (int j = i + 1; j < n; ++j)
                    if (!existing.count({i, j})) pool.emplace_back(i, j);
            rng.shuffle(pool);
            additions.assign(pool.begin(), pool.begin() + add_strong);
        } else {
            std::set<std::pair<int, int>> picked;
            while (static_cast<int>(additions.size()) < add_strong) {
                int a = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
                int b = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
                if (a == b) continue;
                std::pair<int, int> e{std::min(a, b), std::max(a, b)};
                if (existing.count(e) || picked.count(e)) continue;
                picked.insert(e);
                additions.push_back(e);
            }
        }
    }

    EdgeEdits out;
    for (std::size_t i = 0; i < g.edges.size(); ++i) {
        if (!removed_weak.count(static_cast<int>(i))) out.kept_weak.push_back(g.edges[i]);
        if (!removed_strong.count(static_cast<int>(i))) out.kept_strong.push_back(g.edges[i]);
    }
    out.kept_weak.insert(out.kept_weak.end(), additions.begin(), additions.begin() + add_weak);
    out.kept_strong.insert(out.kept_strong.end(), additions.begin(), additions.end());
    return out;
}

}  // namespace detail

inline AugmentedPair augment_pair(const GraphBatch& batch, const AugmentConfig& cfg) {
    cfg.validate();
    AugmentedPair out;
    out.original = batch;
    out.weak = batch;
    out.strong = batch;

    if (cfg.kind == AugmentKind::attribute_mask) {
        for (int k = 0; k < batch.n_graphs; ++k) {
            Rng rng(derive_seed(cfg.seed, "mask",
                                static_cast<std::uint64_t>(batch.graph_ids[static_cast<std::size_t>(k)])));
            detail::mask_block(out.weak.node_features, out.strong.node_features,
                               batch.node_offset[static_cast<std::size_t>(k)], batch.num_nodes_of(k),
                               rng, cfg.strong_ratio(), 1.0 / cfg.strong_multiplier);
        }
        return out;
    }

    // edge_perturb: features stay identical, the edge set changes per view.
    std::vector<Graph> graphs = unpack_batch(batch);
    std::vector<Graph> weak = graphs, strong = graphs;
    for (std::size_t k = 0; k < graphs.size(); ++k) {
        Rng rng(derive_seed(cfg.seed, "edges",
                            static_cast<std::uint64_t>(graphs[k].graph_id)));
        detail::EdgeEdits edits =
            detail::perturb_edges(graphs[k], rng, cfg.weak_ratio, cfg.strong_ratio());
        weak[k] = make_graph(graphs[k].node_features, edits.kept_weak, graphs[k].label,
                             graphs[k].graph_id);
        strong[k] = make_graph(graphs[k].node_features, edits.kept_strong, graphs[k].label,
                               graphs[k].graph_id);
    }
    out.weak = pack_batch(weak);
    out.strong = pack_batch(strong);
    return out;
}

// Fraction of feature entries that differ between two equally shaped batches.
inline double masked_fraction(const GraphBatch& a, const GraphBatch& b) {
    if (a.node_features.rows() != b.node_features.rows() ||
        a.node_features.cols() != b.node_features.cols())
        throw DataError("masked_fraction: feature shape mismatch");
    long total = a.node_features.size();
    if (total == 0) throw DataError("masked_fraction: empty batch");
    long differing = 0;
    for (long j = 0; j < a.node_features.cols(); ++j)
        for (long i = 0; i < a.node_features.rows(); ++i)
            if (a.node_features(i, j) != b.node_features(i, j)) ++differing;
    return static_cast<double>(differing) / static_cast<double>(total);
}

}  // namespace sscdl
