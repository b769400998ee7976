#include <gtest/gtest.h>

#include "sldiff/data_io.hpp"
#include "sldiff/positional.hpp"

using namespace sldiff;

namespace {

graph path_graph(int n) {
    std::vector<std::pair<node_id, node_id>> e;
    for (int v = 0; v + 1 < n; ++v) {
        e.emplace_back(v, v + 1);
    }
    return graph(n, e);
}

} // namespace

TEST(AnchorSets, Counts) {
    EXPECT_EQ(sample_anchor_sets(path_graph(2), 1).size(), 1u);
    EXPECT_EQ(sample_anchor_sets(path_graph(16), 1).size(), 16u);
}

TEST(AnchorSets, SizesAndDeterminism) {
    const graph g = erdos_renyi(64, 0.1, 1);
    const auto a = sample_anchor_sets(g, 3);
    EXPECT_EQ(a, sample_anchor_sets(g, 3));
    EXPECT_NE(a, sample_anchor_sets(g, 4));
    // m = 6 size classes: 32, 16, 8, 4, 2, 1
    EXPECT_EQ(a.sets[0].size(), 32u);
    EXPECT_EQ(a.sets[5].size(), 1u);
    EXPECT_EQ(a.sets[6].size(), 32u);
    for (const auto& s : a.sets) {
        EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
        EXPECT_EQ(std::adjacent_find(s.begin(), s.end()), s.end());
    }
}

TEST(AnchorFeatures, PathDistances) {
    anchor_sets a;
    a.sets = {{0}};
    const auto raw = anchor_features(path_graph(4), a);
    EXPECT_DOUBLE_EQ(raw(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(raw(1, 0), 0.5);
    EXPECT_DOUBLE_EQ(raw(2, 0), 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(raw(3, 0), 0.25);
}

TEST(AnchorFeatures, MembersAndDisconnected) {
    const graph g(6, {{0, 1}, {1, 2}, {3, 4}});
    anchor_sets a;
    a.sets = {{1, 4}, {3}};
    const auto raw = anchor_features(g, a);
    EXPECT_DOUBLE_EQ(raw(1, 0), 1.0);
    EXPECT_DOUBLE_EQ(raw(4, 0), 1.0);
    EXPECT_DOUBLE_EQ(raw(5, 0), 0.0);
    EXPECT_DOUBLE_EQ(raw(0, 1), 0.0);
    EXPECT_DOUBLE_EQ(raw(4, 1), 0.5);
}

TEST(AnchorFeatures, RangeAndMonotoneInDistance) {
    const graph g = watts_strogatz(50, 4, 0.2, 7);
    const auto a = sample_anchor_sets(g, 2);
    const auto raw = anchor_features(g, a);
    EXPECT_GE(raw.minCoeff(), 0.0);
    EXPECT_LE(raw.maxCoeff(), 1.0);
    for (std::size_t j = 0; j < a.size(); ++j) {
        const auto d = bfs_distances(g, a.sets[j]);
        for (int u = 0; u < 50; ++u) {
            for (int v = 0; v < 50; ++v) {
                if (d[u] >= 0 && d[v] >= 0 && d[u] <= d[v]) {
                    EXPECT_GE(raw(u, j), raw(v, j));
                }
            }
        }
    }
}

TEST(AnchorFeatures, AutomorphismInvariance) {
    // star with leaves 1..4; swapping leaves 2 and 3 fixes every anchor set below
    const graph g(5, {{0, 1}, {0, 2}, {0, 3}, {0, 4}});
    anchor_sets a;
    a.sets = {{0}, {1}, {4}, {1, 4}, {2, 3}};
    const auto raw = anchor_features(g, a);
    EXPECT_EQ(raw.row(2), raw.row(3));
}

TEST(Embedding, Deterministic) {
    const graph g = watts_strogatz(40, 4, 0.1, 3);
    const auto a = sample_anchor_sets(g, 5);
    const auto p = positional_projection::random(static_cast<Eigen::Index>(a.size()), 8, 9);
    EXPECT_EQ(embed_nodes(g, a, p), embed_nodes(g, a, p));
    EXPECT_EQ(embed_nodes(g, a, p).cols(), 8);
}

TEST(Restrict, Examples) {
    const graph g = watts_strogatz(40, 4, 0.1, 3);
    const auto a = sample_anchor_sets(g, 5);
    const auto e = embed_nodes(g, a, positional_projection::random(static_cast<Eigen::Index>(a.size()), 8, 9));
    std::vector<node_id> id(40);
    for (int v = 0; v < 40; ++v) {
        id[v] = v;
    }
    EXPECT_EQ(restrict_to_cascade(e, id), e);
    const auto one = restrict_to_cascade(e, {17});
    EXPECT_EQ(one.rows(), 1);
    EXPECT_EQ(one.row(0), e.row(17));
    cascade c;
    c.entries = {{3, 0}, {9, 1}, {22, 1}};
    const auto cg = build_cascade_graph(g, c);
    const auto r = restrict_to_cascade(e, cg.node_map);
    for (std::size_t k = 0; k < cg.node_map.size(); ++k) {
        EXPECT_EQ(r.row(static_cast<Eigen::Index>(k)), e.row(cg.node_map[k]));
    }
    EXPECT_THROW(restrict_to_cascade(e, {40}), error);
}
