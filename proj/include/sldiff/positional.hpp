#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "graph.hpp"
#include "nn.hpp"
#include "rng.hpp"
#include "score_net.hpp"

namespace sldiff {

struct anchor_sets {
    std::vector<std::vector<node_id>> sets;
    std::uint64_t seed = 0;

    std::size_t size() const { return sets.size(); }
    friend bool operator==(const anchor_sets&, const anchor_sets&) = default;
};

// ceil(c * log2(n)^2) random anchor sets; set j has ceil(n / 2^((j mod m) + 1))
// members with m = max(1, floor(log2 n)), drawn without replacement.
inline anchor_sets sample_anchor_sets(const graph& g, std::uint64_t seed, double c = 1.0) {
    const int n = g.node_count();
    require(n >= 2, error_kind::invalid_argument, "anchor sets need at least two nodes");
    const double lg = std::log2(static_cast<double>(n));
    const auto count = static_cast<std::size_t>(std::ceil(c * lg * lg - 1e-9));
    const int period = std::max(1, static_cast<int>(std::floor(lg + 1e-12)));
    anchor_sets out;
    out.seed = seed;
    rng gen(seed);
    std::vector<node_id> pool(n);
    for (std::size_t j = 0; j < std::max<std::size_t>(count, 1); ++j) {
        const int exponent = static_cast<int>(j % static_cast<std::size_t>(period)) + 1;
        const auto size = static_cast<std::size_t>(std::ceil(static_cast<double>(n) / std::ldexp(1.0, exponent)));
        for (int v = 0; v < n; ++v) {
            pool[v] = v;
        }
        // partial Fisher-Yates
        for (std::size_t k = 0; k < size; ++k) {
            std::swap(pool[k], pool[k + gen.below(static_cast<std::uint64_t>(n) - k)]);
        }
        std::vector<node_id> set(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(size));
        std::sort(set.begin(), set.end());
        out.sets.push_back(std::move(set));
    }
    return out;
}

// Hop-count truncation for anchor BFS: twice the eccentricity of node 0,
// which bounds the diameter of its component.
inline int distance_cutoff(const graph& g) {
    if (g.node_count() == 0) {
        return 0;
    }
    const auto d = bfs_distances(g, {0});
    const int ecc = *std::max_element(d.begin(), d.end());
    return std::max(1, 2 * ecc);
}

// Raw P-GNN distance features: entry (v, j) = 1 / (d(v, S_j) + 1), 0 when
// unreachable within the cutoff.
inline feature_matrix anchor_features(const graph& g, const anchor_sets& anchors) {
    const int cutoff = distance_cutoff(g);
    feature_matrix raw = feature_matrix::Zero(g.node_count(), static_cast<Eigen::Index>(anchors.size()));
    for (std::size_t j = 0; j < anchors.size(); ++j) {
        for (node_id a : anchors.sets[j]) {
            require(g.contains(a), error_kind::invalid_argument, "anchor outside graph");
        }
        const auto d = bfs_distances(g, anchors.sets[j], cutoff);
        for (node_id v = 0; v < g.node_count(); ++v) {
            raw(v, static_cast<Eigen::Index>(j)) = d[v] < 0 ? 0.0 : 1.0 / (d[v] + 1.0);
        }
    }
    return raw;
}

// Frozen affine map from anchor features to the embedding width.
struct positional_projection {
    nn::matrix weight;  // anchors x width
    nn::row_vector bias;

    static positional_projection random(Eigen::Index anchors, int width, std::uint64_t seed) {
        positional_projection p;
        p.weight.resize(anchors, width);
        rng gen(seed);
        const double scale = 1.0 / std::sqrt(static_cast<double>(std::max<Eigen::Index>(anchors, 1)));
        for (Eigen::Index j = 0; j < width; ++j) {
            for (Eigen::Index i = 0; i < anchors; ++i) {
                p.weight(i, j) = scale * gen.normal();
            }
        }
        p.bias = nn::row_vector::Zero(width);
        return p;
    }
};

inline feature_matrix embed_nodes(const graph& g, const anchor_sets& anchors, const positional_projection& proj) {
    const feature_matrix raw = anchor_features(g, anchors);
    require(proj.weight.rows() == raw.cols(), error_kind::invalid_argument, "projection does not match anchor count");
    feature_matrix out = raw * proj.weight;
    out.rowwise() += proj.bias;
    return out;
}

// Rows of the whole-graph embedding for each cascade-graph node.
inline feature_matrix restrict_to_cascade(const feature_matrix& embedding, const std::vector<node_id>& node_map) {
    feature_matrix out(static_cast<Eigen::Index>(node_map.size()), embedding.cols());
    for (std::size_t k = 0; k < node_map.size(); ++k) {
        require(node_map[k] >= 0 && node_map[k] < embedding.rows(), error_kind::invalid_argument,
                "node map entry outside embedding");
        out.row(static_cast<Eigen::Index>(k)) = embedding.row(node_map[k]);
    }
    return out;
}

} // namespace sldiff
