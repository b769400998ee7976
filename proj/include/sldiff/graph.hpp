#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "error.hpp"

namespace sldiff {

using node_id = int;
using node_vector = Eigen::VectorXd;

// Undirected simple graph with CSR adjacency. Neighbor lists are sorted and
// every adjacency slot knows the id of the undirected edge it came from.
class graph {
public:
    graph() = default;

    graph(int node_count, std::vector<std::pair<node_id, node_id>> edge_list) : n_(node_count) {
        require(node_count >= 0, error_kind::invalid_argument, "negative node count");
        for (auto& [u, v] : edge_list) {
            require(u >= 0 && v >= 0 && u < n_ && v < n_, error_kind::invalid_argument,
                    "edge endpoint out of range: " + std::to_string(u) + "-" + std::to_string(v));
            require(u != v, error_kind::invalid_argument, "self-loop on node " + std::to_string(u));
            if (u > v) {
                std::swap(u, v);
            }
        }
        std::sort(edge_list.begin(), edge_list.end());
        require(std::adjacent_find(edge_list.begin(), edge_list.end()) == edge_list.end(),
                error_kind::invalid_argument, "duplicate edge");
        edges_ = std::move(edge_list);

        std::vector<int> degree(n_, 0);
        for (const auto& [u, v] : edges_) {
            ++degree[u];
            ++degree[v];
        }
        offsets_.assign(n_ + 1, 0);
        for (int v = 0; v < n_; ++v) {
            offsets_[v + 1] = offsets_[v] + degree[v];
        }
        neighbors_.resize(offsets_[n_]);
        adj_edge_.resize(offsets_[n_]);
        std::vector<int> fill(offsets_.begin(), offsets_.end() - 1);
        for (int e = 0; e < static_cast<int>(edges_.size()); ++e) {
            const auto [u, v] = edges_[e];
            neighbors_[fill[u]] = v;
            adj_edge_[fill[u]++] = e;
            neighbors_[fill[v]] = u;
            adj_edge_[fill[v]++] = e;
        }
        // Edges are sorted by (u, v), so each list is already sorted except for
        // the interleaving of lower and higher neighbors; sort slot pairs.
        for (int v = 0; v < n_; ++v) {
            std::vector<std::pair<int, int>> slots;
            for (int s = offsets_[v]; s < offsets_[v + 1]; ++s) {
                slots.emplace_back(neighbors_[s], adj_edge_[s]);
            }
            std::sort(slots.begin(), slots.end());
            for (int s = offsets_[v], k = 0; s < offsets_[v + 1]; ++s, ++k) {
                neighbors_[s] = slots[k].first;
                adj_edge_[s] = slots[k].second;
            }
        }
    }

    int node_count() const noexcept { return n_; }
    std::size_t edge_count() const noexcept { return edges_.size(); }
    const std::vector<std::pair<node_id, node_id>>& edges() const noexcept { return edges_; }

    int degree(node_id v) const { return offsets_[v + 1] - offsets_[v]; }

    // Half-open slot range [begin, end) into neighbors()/adjacent_edges().
    int slot_begin(node_id v) const { return offsets_[v]; }
    int slot_end(node_id v) const { return offsets_[v + 1]; }
    const std::vector<int>& neighbors() const noexcept { return neighbors_; }
    const std::vector<int>& adjacent_edges() const noexcept { return adj_edge_; }

    std::vector<node_id> neighbors_of(node_id v) const {
        return {neighbors_.begin() + offsets_[v], neighbors_.begin() + offsets_[v + 1]};
    }

    bool has_edge(node_id u, node_id v) const {
        if (u < 0 || v < 0 || u >= n_ || v >= n_) {
            return false;
        }
        return std::binary_search(neighbors_.begin() + offsets_[u], neighbors_.begin() + offsets_[u + 1], v);
    }

    bool contains(node_id v) const noexcept { return v >= 0 && v < n_; }

    friend bool operator==(const graph& a, const graph& b) { return a.n_ == b.n_ && a.edges_ == b.edges_; }

private:
    int n_ = 0;
    std::vector<std::pair<node_id, node_id>> edges_;
    std::vector<int> offsets_{0};
    std::vector<int> neighbors_;
    std::vector<int> adj_edge_;
};

// Hop distances from a set of seed nodes; unreachable (or beyond max_hops) = -1.
inline std::vector<int> bfs_distances(const graph& g, const std::vector<node_id>& seeds, int max_hops = -1) {
    std::vector<int> dist(g.node_count(), -1);
    std::vector<node_id> frontier;
    for (node_id s : seeds) {
        if (dist[s] != 0) {
            dist[s] = 0;
            frontier.push_back(s);
        }
    }
    int depth = 0;
    while (!frontier.empty() && (max_hops < 0 || depth < max_hops)) {
        std::vector<node_id> next;
        for (node_id v : frontier) {
            for (int s = g.slot_begin(v); s < g.slot_end(v); ++s) {
                const node_id u = g.neighbors()[s];
                if (dist[u] < 0) {
                    dist[u] = depth + 1;
                    next.push_back(u);
                }
            }
        }
        frontier = std::move(next);
        ++depth;
    }
    return dist;
}

struct cascade_entry {
    node_id node;
    int time;

    friend bool operator==(const cascade_entry&, const cascade_entry&) = default;
};

// Time-ordered activation record. source_count is K_s, the number of leading
// entries labelled as sources.
struct cascade {
    std::vector<cascade_entry> entries;
    std::size_t source_count = 1;

    std::size_t length() const noexcept { return entries.size(); }

    std::vector<node_id> nodes() const {
        std::vector<node_id> out;
        out.reserve(entries.size());
        for (const auto& e : entries) {
            out.push_back(e.node);
        }
        return out;
    }

    friend bool operator==(const cascade&, const cascade&) = default;
};

inline void validate_cascade(const cascade& c, int host_nodes) {
    require(!c.entries.empty(), error_kind::invalid_cascade, "empty cascade");
    std::vector<char> seen(host_nodes, 0);
    int prev_time = 0;
    for (std::size_t k = 0; k < c.entries.size(); ++k) {
        const auto& e = c.entries[k];
        require(e.node >= 0 && e.node < host_nodes, error_kind::invalid_cascade,
                "cascade node " + std::to_string(e.node) + " outside graph");
        require(!seen[e.node], error_kind::invalid_cascade, "repeated cascade node " + std::to_string(e.node));
        seen[e.node] = 1;
        require(e.time >= 0, error_kind::invalid_cascade, "negative time index");
        require(k == 0 || e.time >= prev_time, error_kind::invalid_cascade, "time index decreases along cascade");
        prev_time = e.time;
    }
    require(c.source_count >= 1 && c.source_count <= c.entries.size(), error_kind::invalid_cascade,
            "source count out of range");
}

// Cascade graph: every whole-graph edge with at least one endpoint in the
// cascade, over the closure of the cascade nodes and those endpoints. Local
// node ids are assigned in increasing whole-graph id order.
struct cascade_graph {
    graph local;
    std::vector<node_id> node_map;  // local -> whole
    std::vector<node_id> local_of;  // whole -> local, -1 when absent

    int size() const { return local.node_count(); }
};

inline cascade_graph build_cascade_graph(const graph& whole, const cascade& c) {
    validate_cascade(c, whole.node_count());
    std::vector<char> in_cascade(whole.node_count(), 0);
    for (const auto& e : c.entries) {
        in_cascade[e.node] = 1;
    }
    std::vector<char> keep(in_cascade);
    for (const auto& e : c.entries) {
        for (node_id u : whole.neighbors_of(e.node)) {
            keep[u] = 1;
        }
    }
    cascade_graph out;
    out.local_of.assign(whole.node_count(), -1);
    for (node_id v = 0; v < whole.node_count(); ++v) {
        if (keep[v]) {
            out.local_of[v] = static_cast<int>(out.node_map.size());
            out.node_map.push_back(v);
        }
    }
    std::vector<std::pair<node_id, node_id>> edges;
    for (const auto& [u, v] : whole.edges()) {
        if (in_cascade[u] || in_cascade[v]) {
            edges.emplace_back(out.local_of[u], out.local_of[v]);
        }
    }
    out.local = graph(static_cast<int>(out.node_map.size()), std::move(edges));
    return out;
}

// Proximity degree x_k = k / K for the k-th cascade entry; nodes of the host
// that are not in the cascade are maximally distant (1.0). `to_host` maps
// cascade (whole-graph) ids to host ids; empty means identity.
inline node_vector proximity_from_cascade(const cascade& c, int host_nodes, const std::vector<node_id>& to_host = {}) {
    require(!c.entries.empty(), error_kind::invalid_cascade, "empty cascade");
    require(c.entries.size() >= 2, error_kind::degenerate_cascade, "proximity needs a cascade of length >= 2");
    const double big_k = static_cast<double>(c.entries.size() - 1);
    node_vector x = node_vector::Ones(host_nodes);
    for (std::size_t k = 0; k < c.entries.size(); ++k) {
        const node_id v = to_host.empty() ? c.entries[k].node : to_host[c.entries[k].node];
        require(v >= 0 && v < host_nodes, error_kind::invalid_cascade, "cascade node missing from host graph");
        x[v] = static_cast<double>(k) / big_k;
    }
    return x;
}

inline node_vector proximity_from_cascade(const cascade& c, const graph& host) {
    return proximity_from_cascade(c, host.node_count());
}

inline node_vector proximity_from_cascade(const cascade& c, const cascade_graph& host) {
    return proximity_from_cascade(c, host.size(), host.local_of);
}

inline std::size_t source_count_for(std::size_t length, double fraction) {
    require(fraction > 0.0 && fraction <= 1.0, error_kind::invalid_argument, "source fraction must be in (0, 1]");
    const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(length) - 1e-12));
    return std::clamp<std::size_t>(k, 1, length);
}

// Indicator with the 0 = source polarity. Also records K_s on the cascade.
inline node_vector sources_from_cascade(cascade& c, int host_nodes, double fraction = 0.05) {
    require(!c.entries.empty(), error_kind::invalid_cascade, "empty cascade");
    c.source_count = source_count_for(c.entries.size(), fraction);
    node_vector i = node_vector::Ones(host_nodes);
    for (std::size_t k = 0; k < c.source_count; ++k) {
        require(c.entries[k].node >= 0 && c.entries[k].node < host_nodes, error_kind::invalid_cascade,
                "cascade node outside graph");
        i[c.entries[k].node] = 0.0;
    }
    return i;
}

// Indicator built from an already-labelled cascade (source_count fixed).
inline node_vector indicator_of(const cascade& c, int host_nodes) {
    node_vector i = node_vector::Ones(host_nodes);
    for (std::size_t k = 0; k < c.source_count && k < c.entries.size(); ++k) {
        i[c.entries[k].node] = 0.0;
    }
    return i;
}

// Observation with the 0 = affected polarity.
inline node_vector observation_of(const cascade& c, int host_nodes) {
    node_vector y = node_vector::Ones(host_nodes);
    for (const auto& e : c.entries) {
        y[e.node] = 0.0;
    }
    return y;
}

inline std::set<node_id> indicator_to_sources(const node_vector& vec, double threshold = 0.5) {
    std::set<node_id> out;
    for (Eigen::Index v = 0; v < vec.size(); ++v) {
        if (vec[v] < threshold) {
            out.insert(static_cast<node_id>(v));
        }
    }
    return out;
}

// The k nodes with the smallest values (most source-like), ties by id.
inline std::set<node_id> indicator_to_top_k(const node_vector& vec, std::size_t k) {
    std::vector<node_id> order(vec.size());
    std::iota(order.begin(), order.end(), 0);
    k = std::min<std::size_t>(k, order.size());
    std::stable_sort(order.begin(), order.end(), [&](node_id a, node_id b) { return vec[a] < vec[b]; });
    return {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k)};
}

} // namespace sldiff
