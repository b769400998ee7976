#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fixtures.hpp"

using namespace sldiff;
using fixtures::tiny_config;
using fixtures::tiny_data;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("sldiff_test_" + name);
    fs::remove_all(p);
    return p;
}

void flip_byte(const fs::path& file, std::size_t offset) {
    std::string bytes = read_file(file);
    bytes[offset % bytes.size()] ^= 0x01;
    std::ofstream(file, std::ios::binary) << bytes;
}

bool is_connected(const graph& g) {
    const auto d = bfs_distances(g, {0});
    return std::find(d.begin(), d.end(), -1) == d.end();
}

} // namespace

TEST(GenGraph, Grid) {
    const graph g = gen_graph({"grid", 9, 2, 4, 0.1, 3, 3, 1});
    EXPECT_EQ(g.node_count(), 9);
    EXPECT_EQ(g.edge_count(), 12u);
}

TEST(GenGraph, BarabasiAlbertEdgeCount) {
    const graph g = gen_graph({"barabasi_albert", 50, 2, 4, 0.1, 0, 0, 4});
    EXPECT_EQ(g.node_count(), 50);
    EXPECT_EQ(g.edge_count(), 97u);
}

TEST(GenGraph, SeededAndConnected) {
    for (const std::string kind : {"barabasi_albert", "watts_strogatz", "erdos_renyi"}) {
        graph_spec s{kind, 80, 3, 6, 0.08, 0, 0, 12};
        const graph a = gen_graph(s);
        EXPECT_EQ(a, gen_graph(s)) << kind;
        EXPECT_TRUE(is_connected(a)) << kind;
        s.seed = 13;
        EXPECT_NE(a.edges(), gen_graph(s).edges()) << kind;
    }
    EXPECT_THROW(gen_graph({"ring", 10, 2, 4, 0.1, 0, 0, 1}), error);
}

TEST(GenGraph, LargestComponentKept) {
    const graph g(7, {{0, 1}, {2, 3}, {3, 4}, {4, 2}, {5, 6}});
    const graph c = largest_component(g);
    EXPECT_EQ(c.node_count(), 3);
    EXPECT_EQ(c.edge_count(), 3u);
}

TEST(GenEpisodes, SplitTenIsTwoTwoSix) {
    auto c = tiny_config();
    c.episodes.count = 10;
    const auto d = tiny_data(c);
    ASSERT_EQ(d.episodes.size(), 10u);
    EXPECT_EQ(d.part(split::train).size(), 2u);
    EXPECT_EQ(d.part(split::val).size(), 2u);
    EXPECT_EQ(d.part(split::test).size(), 6u);
}

TEST(GenEpisodes, LabelsValidAndPartitioned) {
    auto c = tiny_config();
    c.episodes.count = 40;
    c.episodes.max_seeds = 3;
    const auto d = tiny_data(c);
    std::size_t total = 0;
    for (split s : {split::train, split::val, split::test}) {
        total += d.part(s).size();
    }
    EXPECT_EQ(total, d.episodes.size());
    for (const auto& e : d.episodes) {
        validate_cascade(e.record, d.whole.node_count());
        EXPECT_GE(e.record.length(), 2u);
        EXPECT_EQ(e.record.source_count, source_count_for(e.record.length(), 0.05));
    }
}

TEST(GenEpisodes, ZeroProbabilityDegenerates) {
    auto c = tiny_config();
    c.episodes.ic.edge_prob = 0.0;
    const auto d = tiny_data(c);
    EXPECT_TRUE(d.episodes.empty());
    EXPECT_EQ(d.skipped, 20u);
}

TEST(GenEpisodes, Deterministic) {
    const auto c = tiny_config();
    EXPECT_EQ(tiny_data(c), tiny_data(c));
}

TEST(Files, GraphText) {
    const graph g = fixtures::path_graph(4);
    const std::string text = graph_to_text(g);
    EXPECT_EQ(text.rfind("#nodes 4\n", 0), 0u);
    EXPECT_EQ(graph_from_text(text), g);
    EXPECT_THROW(graph_from_text("0 1\n"), error);
}

TEST(Files, DatasetRoundTrip) {
    const auto d = tiny_data(tiny_config());
    const fs::path dir = scratch("dataset");
    save_dataset(d, dir);
    EXPECT_EQ(load_dataset(dir), d);
}

TEST(Files, CorruptedByteRejected) {
    const auto d = tiny_data(tiny_config());
    const fs::path dir = scratch("corrupt");
    save_dataset(d, dir);
    flip_byte(dir / "episodes.txt", 40);
    try {
        load_dataset(dir);
        FAIL() << "corruption not detected";
    } catch (const error& e) {
        EXPECT_EQ(e.kind(), error_kind::data);
        EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
    }
}

TEST(Files, VersionAndKindMismatch) {
    const auto d = tiny_data(tiny_config());
    const fs::path dir = scratch("version");
    save_dataset(d, dir);
    json m = json::parse(read_file(dir / "manifest.json"));
    m["format_version"] = format_version + 1;
    write_file_atomic(dir / "manifest.json", m.dump());
    try {
        load_dataset(dir);
        FAIL();
    } catch (const error& e) {
        EXPECT_EQ(e.kind(), error_kind::schema);
    }
    save_dataset(d, dir);
    try {
        load_bundle(dir);
        FAIL();
    } catch (const error& e) {
        EXPECT_EQ(e.kind(), error_kind::schema);
    }
}

TEST(Files, RealsExact) {
    nn::vector v(4);
    v << 0.1, -1.0 / 3.0, 1e-300, 12345.678901234567;
    EXPECT_EQ(reals_from_text(reals_to_text(v), "test"), v);
    EXPECT_THROW(reals_from_text("3\n1\n2\n", "test"), error);
}

TEST(Files, TrainedBundleRoundTrip) {
    const auto cfg = tiny_config();
    const auto data = tiny_data(cfg);
    const auto b = train_bundle(cfg, data);
    const fs::path dir = scratch("bundle");
    save_bundle(b, dir);
    const auto back = load_bundle(dir);
    EXPECT_EQ(json(back.config), json(b.config));
    EXPECT_EQ(back.whole, b.whole);
    EXPECT_EQ(back.anchors, b.anchors);
    EXPECT_EQ(back.embedding, b.embedding);
    EXPECT_EQ(back.coarse->parameters(), b.coarse->parameters());
    EXPECT_EQ(back.fine->parameters(), b.fine->parameters());
    EXPECT_EQ(back.surrogate->edge_logits, b.surrogate->edge_logits);
    EXPECT_EQ(back.surrogate->round_bias, b.surrogate->round_bias);
    EXPECT_EQ(back.noise->parameters(), b.noise->parameters());
    const episode& e = *data.part(split::test).front();
    EXPECT_EQ(localize(back, e, 4).indicator, localize(b, e, 4).indicator);

    flip_byte(dir / "fine.txt", 100);
    EXPECT_THROW(load_bundle(dir), error);
}

TEST(Files, PartialBundle) {
    auto cfg = tiny_config();
    cfg.ablation.no_noise_model = true;
    const auto data = tiny_data(cfg);
    auto b = make_bundle(cfg, data.whole);
    train_stages(b, data, static_cast<unsigned>(stage_mask::coarse) | static_cast<unsigned>(stage_mask::noise));
    const fs::path dir = scratch("partial");
    save_bundle(b, dir);
    const auto back = load_bundle(dir);
    EXPECT_TRUE(back.coarse.has_value());
    EXPECT_FALSE(back.fine.has_value());
    EXPECT_FALSE(back.surrogate.has_value());
    ASSERT_TRUE(back.noise.has_value());
    EXPECT_TRUE(back.noise->is_fixed());
}
