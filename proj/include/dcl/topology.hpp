#pragma once

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcl/common.hpp"

namespace dcl {

/// Directed communication graph with per-edge budget (floats per
/// communication; 0 means unconstrained) and frequency (epochs between
/// communications). Generators emit both directions of every link.
struct Topology {
    struct Edge {
        int from = 0, to = 0;
        double budget = 0.0;
        double freq = 1.0;
    };

    int n = 0;
    std::vector<Edge> edges; // sorted by (from, to)

    void add_undirected(int i, int j, double b = 0.0, double f = 1.0) {
        if (i == j) throw std::invalid_argument("self-edges are not allowed");
        edges.push_back({i, j, b, f});
        edges.push_back({j, i, b, f});
    }

    void finalize() {
        std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
            return a.from != b.from ? a.from < b.from : a.to < b.to;
        });
        edges.erase(std::unique(edges.begin(), edges.end(),
                                [](const Edge& a, const Edge& b) {
                                    return a.from == b.from && a.to == b.to;
                                }),
                    edges.end());
    }

    /// Out-neighbors of agent i, ascending.
    std::vector<int> neighbors(int i) const {
        std::vector<int> out;
        for (const auto& e : edges)
            if (e.from == i) out.push_back(e.to);
        return out;
    }

    const Edge* find_edge(int from, int to) const {
        for (const auto& e : edges)
            if (e.from == from && e.to == to) return &e;
        return nullptr;
    }

    size_t edge_count() const { return edges.size(); }
};

inline Topology gen_complete(int n) {
    Topology t;
    t.n = n;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) t.add_undirected(i, j);
    t.finalize();
    return t;
}

inline Topology gen_ring(int n) {
    if (n < 2) throw std::invalid_argument("ring needs at least 2 agents");
    Topology t;
    t.n = n;
    if (n == 2) {
        t.add_undirected(0, 1);
    } else {
        for (int i = 0; i < n; ++i) t.add_undirected(i, (i + 1) % n);
    }
    t.finalize();
    return t;
}

/// Star with agent 0 as the hub.
inline Topology gen_server(int n) {
    if (n < 2) throw std::invalid_argument("server topology needs at least 2 agents");
    Topology t;
    t.n = n;
    for (int i = 1; i < n; ++i) t.add_undirected(0, i);
    t.finalize();
    return t;
}

/// Balanced binary tree rooted at agent 0.
inline Topology gen_tree(int n) {
    if (n < 2) throw std::invalid_argument("tree needs at least 2 agents");
    Topology t;
    t.n = n;
    for (int i = 1; i < n; ++i) t.add_undirected((i - 1) / 2, i);
    t.finalize();
    return t;
}

/// Every unordered pair becomes a bidirectional link with probability p.
inline Topology gen_erdos_renyi(int n, double p, uint64_t seed) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("edge probability outside [0, 1]");
    Topology t;
    t.n = n;
    Rng rng = Rng::derive(seed, "erdos-renyi");
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            if (rng.uniform() < p) t.add_undirected(i, j);
    t.finalize();
    return t;
}

inline Topology gen_disconnected(int n) {
    Topology t;
    t.n = n;
    return t;
}

/// Edge-list file: one `from to budget freq` row per directed edge.
inline Topology load_topology(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open topology file " + path);
    Topology t;
    std::string line;
    int max_node = -1;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        Topology::Edge e;
        if (!(ss >> e.from >> e.to >> e.budget >> e.freq))
            throw ConfigError("malformed topology row: " + line);
        if (e.from == e.to) throw ConfigError("self-edge in topology file: " + line);
        if (e.budget < 0) throw ConfigError("negative budget in topology file: " + line);
        if (e.freq < 1) throw ConfigError("frequency below 1 in topology file: " + line);
        t.edges.push_back(e);
        max_node = std::max({max_node, e.from, e.to});
    }
    t.n = max_node + 1;
    t.finalize();
    return t;
}

} // namespace dcl
