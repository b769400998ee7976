#include <gtest/gtest.h>

#include <set>

#include "sldiff/data_io.hpp"
#include "sldiff/graph.hpp"
#include "sldiff/rng.hpp"

using namespace sldiff;

namespace {

graph path_graph(int n) {
    std::vector<std::pair<node_id, node_id>> e;
    for (int v = 0; v + 1 < n; ++v) {
        e.emplace_back(v, v + 1);
    }
    return graph(n, e);
}

cascade make_cascade(std::vector<cascade_entry> entries, std::size_t ks = 1) {
    cascade c;
    c.entries = std::move(entries);
    c.source_count = ks;
    return c;
}

} // namespace

TEST(Graph, RejectsSelfLoopsAndDuplicates) {
    EXPECT_THROW(graph(3, {{0, 0}}), error);
    EXPECT_THROW(graph(3, {{0, 1}, {1, 0}}), error);
    EXPECT_THROW(graph(3, {{0, 3}}), error);
}

TEST(Graph, AdjacencySymmetric) {
    const graph g = erdos_renyi(40, 0.15, 5);
    for (node_id v = 0; v < g.node_count(); ++v) {
        for (node_id u : g.neighbors_of(v)) {
            EXPECT_TRUE(g.has_edge(u, v));
            EXPECT_NE(u, v);
        }
    }
}

TEST(Cascade, ValidationErrors) {
    EXPECT_THROW(validate_cascade(make_cascade({}), 4), error);
    EXPECT_THROW(validate_cascade(make_cascade({{0, 0}, {0, 1}}), 4), error);
    EXPECT_THROW(validate_cascade(make_cascade({{0, 1}, {1, 0}}), 4), error);
    EXPECT_THROW(validate_cascade(make_cascade({{0, 0}, {9, 1}}), 4), error);
    EXPECT_THROW(validate_cascade(make_cascade({{0, 0}, {1, 1}}, 3), 4), error);
    EXPECT_NO_THROW(validate_cascade(make_cascade({{2, 0}, {1, 1}, {3, 1}}), 4));
    try {
        validate_cascade(make_cascade({{0, 0}, {0, 1}}), 4);
    } catch (const error& e) {
        EXPECT_EQ(e.kind(), error_kind::invalid_cascade);
    }
}

TEST(CascadeGraph, PathExample) {
    const graph g = path_graph(4);
    const auto cg = build_cascade_graph(g, make_cascade({{1, 0}, {2, 1}}));
    EXPECT_EQ(cg.node_map, (std::vector<node_id>{0, 1, 2, 3}));
    EXPECT_EQ(cg.local.edge_count(), 3u);
    EXPECT_TRUE(cg.local.has_edge(0, 1));
    EXPECT_TRUE(cg.local.has_edge(1, 2));
    EXPECT_TRUE(cg.local.has_edge(2, 3));
}

TEST(CascadeGraph, StarIsWhole) {
    const graph g(5, {{0, 1}, {0, 2}, {0, 3}, {0, 4}});
    const auto cg = build_cascade_graph(g, make_cascade({{0, 0}}));
    EXPECT_EQ(cg.size(), 5);
    EXPECT_EQ(cg.local.edges(), g.edges());
}

TEST(CascadeGraph, RandomMatchesBruteForce) {
    const graph g = erdos_renyi(100, 0.04, 11);
    rng gen(3);
    std::vector<node_id> ids(g.node_count());
    for (int v = 0; v < g.node_count(); ++v) {
        ids[v] = v;
    }
    gen.shuffle(ids);
    cascade c;
    for (int k = 0; k < 10; ++k) {
        c.entries.push_back({ids[k], k});
    }
    const auto cg = build_cascade_graph(g, c);
    std::set<node_id> in(ids.begin(), ids.begin() + 10);
    std::set<node_id> nodes;
    std::set<std::pair<node_id, node_id>> edges;
    for (const auto& [u, v] : g.edges()) {
        if (in.count(u) || in.count(v)) {
            nodes.insert(u);
            nodes.insert(v);
            edges.insert({u, v});
        }
    }
    for (node_id v : in) {
        nodes.insert(v);
    }
    EXPECT_EQ(std::set<node_id>(cg.node_map.begin(), cg.node_map.end()), nodes);
    std::set<std::pair<node_id, node_id>> got;
    for (const auto& [a, b] : cg.local.edges()) {
        const node_id u = cg.node_map[a], v = cg.node_map[b];
        got.insert({std::min(u, v), std::max(u, v)});
    }
    EXPECT_EQ(got, edges);
}

TEST(Proximity, Examples) {
    const auto x5 = proximity_from_cascade(make_cascade({{0, 0}, {1, 1}, {2, 1}, {3, 2}, {4, 3}}), 5);
    for (int k = 0; k < 5; ++k) {
        EXPECT_DOUBLE_EQ(x5[k], 0.25 * k);
    }
    const auto x2 = proximity_from_cascade(make_cascade({{1, 0}, {0, 1}}), 2);
    EXPECT_DOUBLE_EQ(x2[1], 0.0);
    EXPECT_DOUBLE_EQ(x2[0], 1.0);
    const auto x8 = proximity_from_cascade(make_cascade({{0, 0}, {2, 1}, {4, 1}, {6, 2}, {7, 3}}), 8);
    EXPECT_DOUBLE_EQ(x8[1], 1.0);
    EXPECT_DOUBLE_EQ(x8[3], 1.0);
    EXPECT_DOUBLE_EQ(x8[5], 1.0);
    EXPECT_DOUBLE_EQ(x8[4], 0.5);
}

TEST(Proximity, SingleEntryIsDegenerate) {
    try {
        proximity_from_cascade(make_cascade({{0, 0}}), 3);
        FAIL();
    } catch (const error& e) {
        EXPECT_EQ(e.kind(), error_kind::degenerate_cascade);
    }
}

TEST(Sources, FivePercentRule) {
    auto run = [](int len) {
        cascade c;
        for (int k = 0; k < len; ++k) {
            c.entries.push_back({k, k});
        }
        const auto i = sources_from_cascade(c, len);
        return std::make_pair(c.source_count, indicator_to_sources(i));
    };
    auto [k100, s100] = run(100);
    EXPECT_EQ(k100, 5u);
    EXPECT_EQ(s100, (std::set<node_id>{0, 1, 2, 3, 4}));
    EXPECT_EQ(run(10).first, 1u);
    EXPECT_EQ(run(40).first, 2u);
}

TEST(Sources, IndicatorDecode) {
    node_vector v(3);
    v << 0.1, 0.9, 0.4;
    EXPECT_EQ(indicator_to_sources(v), (std::set<node_id>{0, 2}));
    EXPECT_TRUE(indicator_to_sources(node_vector::Ones(7)).empty());
    const auto c = make_cascade({{3, 0}, {1, 1}, {4, 1}, {0, 2}}, 2);
    EXPECT_EQ(indicator_to_sources(indicator_of(c, 6)), (std::set<node_id>{3, 1}));
}

TEST(Sources, TopK) {
    node_vector v(5);
    v << 0.5, 0.1, 0.9, 0.1, 0.3;
    EXPECT_EQ(indicator_to_top_k(v, 2), (std::set<node_id>{1, 3}));
    EXPECT_EQ(indicator_to_top_k(v, 3), (std::set<node_id>{1, 3, 4}));
}

TEST(Bfs, Distances) {
    const auto d = bfs_distances(path_graph(5), {0});
    EXPECT_EQ(d, (std::vector<int>{0, 1, 2, 3, 4}));
    const auto cut = bfs_distances(path_graph(5), {0}, 2);
    EXPECT_EQ(cut[3], -1);
}
