#pragma once

// View-graph construction and selection of a well-connected edge subset.
//
// Frames are nodes; edge weights count co-visible tracks. The selection is
// a maximum spanning tree (Kruskal) grown by k extra edges chosen greedily
// to maximize tree-connectivity, the log-determinant of the reduced weighted
// Laplacian. Each greedy gain is obtained from a rank-1 determinant update.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

#include "connrsfm/errors.hpp"
#include "connrsfm/tracks.hpp"

namespace connrsfm {

struct GraphEdge {
    int i = 0;
    int j = 0;
    double weight = 0.0;

    friend bool operator==(const GraphEdge&, const GraphEdge&) = default;
};

/// Complete weighted view graph.
struct MatchGraph {
    int n_c = 0;
    Eigen::MatrixXd weights;

    explicit MatchGraph(int n = 0) : n_c(n), weights(Eigen::MatrixXd::Zero(n, n)) {}

    void set(int i, int j, double w) {
        if (i == j) throw GraphError("match graph: self loops are not allowed");
        if (!(w >= 0.0)) throw GraphError("match graph: weights must be non-negative");
        weights(i, j) = w;
        weights(j, i) = w;
    }

    double max_weight() const { return n_c > 0 ? weights.maxCoeff() : 0.0; }

    /// Edges with positive weight in lexicographic (i < j) order.
    std::vector<GraphEdge> edges() const {
        std::vector<GraphEdge> out;
        for (int i = 0; i < n_c; ++i)
            for (int j = i + 1; j < n_c; ++j)
                if (weights(i, j) > 0.0) out.push_back({i, j, weights(i, j)});
        return out;
    }
};

/// Match graph whose weights count the points visible in both frames.
inline MatchGraph build_match_graph(const TrackSet& t) {
    MatchGraph g(t.n_frames);
    for (int i = 0; i < t.n_frames; ++i)
        for (int j = i + 1; j < t.n_frames; ++j) {
            int n = 0;
            for (int k = 0; k < t.n_points; ++k) n += (t.visible(k, i) && t.visible(k, j)) ? 1 : 0;
            g.set(i, j, n);
        }
    return g;
}

struct SelectedSubgraph {
    int n_c = 0;
    std::vector<GraphEdge> edges;

    int n_edges() const { return static_cast<int>(edges.size()); }
};

/// Reduced weighted Laplacian: the full Laplacian with node 0 deleted.
inline Eigen::MatrixXd reduced_laplacian(int n, const std::vector<GraphEdge>& edges) {
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
    for (const auto& e : edges) {
        l(e.i, e.i) += e.weight;
        l(e.j, e.j) += e.weight;
        l(e.i, e.j) -= e.weight;
        l(e.j, e.i) -= e.weight;
    }
    return l.bottomRightCorner(n - 1, n - 1);
}

/// log det of the reduced Laplacian; -infinity when the graph is disconnected.
inline double tree_connectivity(const SelectedSubgraph& g) {
    if (g.n_c <= 1) return 0.0;
    const Eigen::MatrixXd l = reduced_laplacian(g.n_c, g.edges);
    const Eigen::LLT<Eigen::MatrixXd> llt(l);
    if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    const Eigen::MatrixXd lm = llt.matrixL();
    double s = 0.0;
    for (int k = 0; k < lm.rows(); ++k) {
        const double d = lm(k, k);
        if (!(d > 0.0)) return -std::numeric_limits<double>::infinity();
        s += 2.0 * std::log(d);
    }
    // Guard against numerically singular but factorizable matrices.
    if (s < std::log(std::numeric_limits<double>::min())) return -std::numeric_limits<double>::infinity();
    return s;
}

namespace detail {

struct DisjointSets {
    std::vector<int> parent;
    explicit DisjointSets(int n) : parent(static_cast<std::size_t>(n)) { std::iota(parent.begin(), parent.end(), 0); }
    int find(int x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }
    bool unite(int a, int b) {
        a = find(a);
        b = find(b);
        if (a == b) return false;
        parent[std::max(a, b)] = std::min(a, b);
        return true;
    }
};

}  // namespace detail

/// Kruskal maximum spanning tree; equal weights are taken in lexicographic
/// (i, j) order.
inline SelectedSubgraph max_spanning_tree(const MatchGraph& g) {
    auto edges = g.edges();
    std::stable_sort(edges.begin(), edges.end(),
                     [](const GraphEdge& a, const GraphEdge& b) { return a.weight > b.weight; });
    detail::DisjointSets ds(g.n_c);
    SelectedSubgraph out{g.n_c, {}};
    for (const auto& e : edges) {
        if (ds.unite(e.i, e.j)) out.edges.push_back(e);
    }
    if (out.n_edges() != g.n_c - 1) {
        std::string msg = "match graph is disconnected; components:";
        for (int root = 0; root < g.n_c; ++root) {
            if (ds.find(root) != root) continue;
            msg += " {";
            bool first = true;
            for (int v = 0; v < g.n_c; ++v)
                if (ds.find(v) == root) {
                    msg += (first ? "" : ",") + std::to_string(v);
                    first = false;
                }
            msg += "}";
        }
        throw GraphError(msg);
    }
    std::sort(out.edges.begin(), out.edges.end(),
              [](const GraphEdge& a, const GraphEdge& b) { return std::tie(a.i, a.j) < std::tie(b.i, b.j); });
    return out;
}

/// Gain in tree-connectivity from adding edge e, given the inverse of the
/// current reduced Laplacian: log(1 + w a^T L^-1 a) with a = e_i - e_j
/// restricted to nodes 1..n-1.
inline double edge_gain(const Eigen::MatrixXd& l_inv, const GraphEdge& e) {
    const int a = e.i - 1;
    const int b = e.j - 1;
    double q = 0.0;
    if (a >= 0) q += l_inv(a, a);
    if (b >= 0) q += l_inv(b, b);
    if (a >= 0 && b >= 0) q -= 2.0 * l_inv(a, b);
    return std::log1p(e.weight * q);
}

/// Adds k edges to a spanning tree, each chosen to maximize the rank-1
/// connectivity gain; ties go to the lexicographically smallest edge.
inline SelectedSubgraph greedy_k_esp(const MatchGraph& g, const SelectedSubgraph& tree, int k,
                                     std::vector<double>* gains = nullptr) {
    if (k < 0) throw GraphError("greedy_k_esp: k must be non-negative");
    SelectedSubgraph out = tree;
    if (k == 0) return out;
    if (!std::isfinite(tree_connectivity(tree))) throw GraphError("greedy_k_esp: starting tree is not spanning");
    std::vector<GraphEdge> candidates;
    for (const auto& e : g.edges()) {
        const bool used = std::any_of(out.edges.begin(), out.edges.end(),
                                      [&](const GraphEdge& s) { return s.i == e.i && s.j == e.j; });
        if (!used) candidates.push_back(e);
    }
    if (k > static_cast<int>(candidates.size())) throw GraphError("greedy_k_esp: k exceeds the remaining edge count");
    Eigen::MatrixXd l_inv = reduced_laplacian(g.n_c, out.edges).inverse();
    for (int step = 0; step < k; ++step) {
        int best = -1;
        double best_gain = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < static_cast<int>(candidates.size()); ++c) {
            const double gain = edge_gain(l_inv, candidates[c]);
            if (gain > best_gain) {
                best_gain = gain;
                best = c;
            }
        }
        const GraphEdge e = candidates[best];
        candidates.erase(candidates.begin() + best);
        out.edges.push_back(e);
        if (gains) gains->push_back(best_gain);
        // Sherman-Morrison update of the inverse.
        Eigen::VectorXd a = Eigen::VectorXd::Zero(g.n_c - 1);
        if (e.i > 0) a[e.i - 1] += 1.0;
        if (e.j > 0) a[e.j - 1] -= 1.0;
        const Eigen::VectorXd la = l_inv * a;
        l_inv -= (e.weight / (1.0 + e.weight * a.dot(la))) * la * la.transpose();
    }
    std::sort(out.edges.begin(), out.edges.end(),
              [](const GraphEdge& a, const GraphEdge& b) { return std::tie(a.i, a.j) < std::tie(b.i, b.j); });
    return out;
}

/// Spanning tree plus min(extra_k, available) greedy edges.
inline SelectedSubgraph select_edges(const MatchGraph& g, int extra_k) {
    const SelectedSubgraph tree = max_spanning_tree(g);
    const int available = static_cast<int>(g.edges().size()) - tree.n_edges();
    return greedy_k_esp(g, tree, std::clamp(extra_k, 0, available));
}

/// Solver weight of an edge: its match count over the largest match count.
inline double edge_omega(const MatchGraph& g, const GraphEdge& e) {
    const double m = g.max_weight();
    return m > 0.0 ? e.weight / m : 0.0;
}

}  // namespace connrsfm
