#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "json.hpp"

#include "dissemination.hpp"
#include "error.hpp"
#include "graph.hpp"
#include "rng.hpp"

namespace sldiff {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Graph generators

struct graph_spec {
    std::string kind = "watts_strogatz";  // barabasi_albert | watts_strogatz | erdos_renyi | grid
    int n = 200;
    int m = 2;          // BA attachments per node
    int k = 6;          // WS ring degree (even)
    double p = 0.1;     // WS rewiring / ER edge probability
    int rows = 0;       // grid
    int cols = 0;
    std::uint64_t seed = 1;

    friend bool operator==(const graph_spec&, const graph_spec&) = default;
};

inline void to_json(json& j, const graph_spec& s) {
    j = json{{"kind", s.kind}, {"n", s.n}, {"m", s.m}, {"k", s.k}, {"p", s.p},
             {"rows", s.rows}, {"cols", s.cols}, {"seed", s.seed}};
}

inline void from_json(const json& j, graph_spec& s) {
    s.kind = j.value("kind", s.kind);
    s.n = j.value("n", s.n);
    s.m = j.value("m", s.m);
    s.k = j.value("k", s.k);
    s.p = j.value("p", s.p);
    s.rows = j.value("rows", s.rows);
    s.cols = j.value("cols", s.cols);
    s.seed = j.value("seed", s.seed);
}

// Largest connected component, relabelled in increasing id order (ties: the
// component containing the smallest node id).
inline graph largest_component(const graph& g) {
    std::vector<int> comp(g.node_count(), -1);
    int best = -1;
    std::size_t best_size = 0;
    int label = 0;
    for (node_id s = 0; s < g.node_count(); ++s) {
        if (comp[s] >= 0) {
            continue;
        }
        const auto d = bfs_distances(g, {s});
        std::size_t size = 0;
        for (node_id v = 0; v < g.node_count(); ++v) {
            if (d[v] >= 0) {
                comp[v] = label;
                ++size;
            }
        }
        if (size > best_size) {
            best_size = size;
            best = label;
        }
        ++label;
    }
    if (best_size == static_cast<std::size_t>(g.node_count())) {
        return g;
    }
    std::vector<int> relabel(g.node_count(), -1);
    int next = 0;
    for (node_id v = 0; v < g.node_count(); ++v) {
        if (comp[v] == best) {
            relabel[v] = next++;
        }
    }
    std::vector<std::pair<node_id, node_id>> edges;
    for (const auto& [u, v] : g.edges()) {
        if (relabel[u] >= 0 && relabel[v] >= 0) {
            edges.emplace_back(relabel[u], relabel[v]);
        }
    }
    return graph(next, std::move(edges));
}

// Barabasi-Albert with a seeded star: nodes 0..m-1 form a star around node 0
// (m - 1 edges), then every node v >= m attaches to m distinct existing nodes
// chosen proportionally to degree (uniformly while all degrees are zero).
// Edge count is m * (n - m) + m - 1.
inline graph barabasi_albert(int n, int m, std::uint64_t seed) {
    require(m >= 1 && n > m, error_kind::invalid_argument, "barabasi_albert needs 1 <= m < n");
    rng gen(seed);
    std::vector<std::pair<node_id, node_id>> edges;
    std::vector<node_id> endpoints;  // degree-weighted urn
    for (node_id v = 1; v < m; ++v) {
        edges.emplace_back(0, v);
        endpoints.push_back(0);
        endpoints.push_back(v);
    }
    for (node_id v = m; v < n; ++v) {
        std::set<node_id> targets;
        if (v == m) {
            for (node_id u = 0; u < m; ++u) {
                targets.insert(u);
            }
        } else {
            while (static_cast<int>(targets.size()) < m) {
                const node_id u = endpoints.empty() ? static_cast<node_id>(gen.below(v))
                                                    : endpoints[gen.below(endpoints.size())];
                targets.insert(u);
            }
        }
        for (node_id u : targets) {
            edges.emplace_back(u, v);
            endpoints.push_back(u);
            endpoints.push_back(v);
        }
    }
    return graph(n, std::move(edges));
}

// Ring lattice with k/2 neighbours per side; each lattice edge (u, u + j) is
// rewired with probability p to (u, w), w uniform, avoiding loops and duplicates.
inline graph watts_strogatz(int n, int k, double p, std::uint64_t seed) {
    require(k >= 2 && k % 2 == 0 && k < n, error_kind::invalid_argument, "watts_strogatz needs even 2 <= k < n");
    require(p >= 0.0 && p <= 1.0, error_kind::invalid_argument, "rewiring probability in [0,1]");
    rng gen(seed);
    std::set<std::pair<node_id, node_id>> edges;
    auto key = [](node_id a, node_id b) { return a < b ? std::make_pair(a, b) : std::make_pair(b, a); };
    for (int j = 1; j <= k / 2; ++j) {
        for (node_id u = 0; u < n; ++u) {
            edges.insert(key(u, (u + j) % n));
        }
    }
    for (int j = 1; j <= k / 2; ++j) {
        for (node_id u = 0; u < n; ++u) {
            const node_id v = (u + j) % n;
            if (gen.uniform() < p) {
                node_id w = static_cast<node_id>(gen.below(n));
                int guard = 0;
                while ((w == u || edges.count(key(u, w))) && guard++ < 4 * n) {
                    w = static_cast<node_id>(gen.below(n));
                }
                if (w != u && !edges.count(key(u, w))) {
                    edges.erase(key(u, v));
                    edges.insert(key(u, w));
                }
            }
        }
    }
    return graph(n, {edges.begin(), edges.end()});
}

inline graph erdos_renyi(int n, double p, std::uint64_t seed) {
    require(p >= 0.0 && p <= 1.0, error_kind::invalid_argument, "edge probability in [0,1]");
    rng gen(seed);
    std::vector<std::pair<node_id, node_id>> edges;
    for (node_id u = 0; u < n; ++u) {
        for (node_id v = u + 1; v < n; ++v) {
            if (gen.uniform() < p) {
                edges.emplace_back(u, v);
            }
        }
    }
    return graph(n, std::move(edges));
}

inline graph grid_graph(int rows, int cols) {
    require(rows >= 1 && cols >= 1, error_kind::invalid_argument, "grid needs positive dimensions");
    std::vector<std::pair<node_id, node_id>> edges;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const node_id v = r * cols + c;
            if (c + 1 < cols) {
                edges.emplace_back(v, v + 1);
            }
            if (r + 1 < rows) {
                edges.emplace_back(v, v + cols);
            }
        }
    }
    return graph(rows * cols, std::move(edges));
}

inline graph gen_graph(const graph_spec& spec) {
    graph g;
    if (spec.kind == "grid") {
        int rows = spec.rows;
        int cols = spec.cols;
        if (rows <= 0 || cols <= 0) {
            rows = cols = static_cast<int>(std::lround(std::sqrt(static_cast<double>(spec.n))));
        }
        return grid_graph(rows, cols);
    }
    require(spec.n >= 2, error_kind::invalid_argument, "graph needs at least two nodes");
    if (spec.kind == "barabasi_albert") {
        g = barabasi_albert(spec.n, spec.m, spec.seed);
    } else if (spec.kind == "watts_strogatz") {
        g = watts_strogatz(spec.n, spec.k, spec.p, spec.seed);
    } else if (spec.kind == "erdos_renyi") {
        g = erdos_renyi(spec.n, spec.p, spec.seed);
    } else {
        throw error(error_kind::invalid_argument, "unknown graph kind '" + spec.kind + "'");
    }
    return largest_component(g);
}

// ---------------------------------------------------------------------------
// Episodes

enum class split { train, val, test };

inline const char* split_name(split s) {
    switch (s) {
    case split::train: return "train";
    case split::val: return "val";
    case split::test: return "test";
    }
    return "?";
}

inline split parse_split(const std::string& s) {
    if (s == "train") return split::train;
    if (s == "val") return split::val;
    if (s == "test") return split::test;
    throw error(error_kind::data, "unknown split '" + s + "'");
}

struct episode {
    int id = 0;
    cascade record;  // source_count carries the labelled K_s
    split part = split::train;

    node_vector observation(int n) const { return observation_of(record, n); }
    node_vector indicator(int n) const { return indicator_of(record, n); }
    std::set<node_id> sources() const {
        std::set<node_id> out;
        for (std::size_t k = 0; k < record.source_count; ++k) {
            out.insert(record.entries[k].node);
        }
        return out;
    }
    friend bool operator==(const episode&, const episode&) = default;
};

struct episode_spec {
    int count = 100;
    ic_params ic{0.9, {}, 2};
    int min_seeds = 1;
    int max_seeds = 1;
    double source_fraction = 0.05;
    std::vector<double> split_ratio{2.0, 2.0, 6.0};
    std::uint64_t seed = 2;
};

inline void to_json(json& j, const episode_spec& s) {
    j = json{{"count", s.count},
             {"edge_prob", s.ic.edge_prob},
             {"max_rounds", s.ic.max_rounds},
             {"min_seeds", s.min_seeds},
             {"max_seeds", s.max_seeds},
             {"source_fraction", s.source_fraction},
             {"split_ratio", s.split_ratio},
             {"seed", s.seed}};
}

inline void from_json(const json& j, episode_spec& s) {
    s.count = j.value("count", s.count);
    s.ic.edge_prob = j.value("edge_prob", s.ic.edge_prob);
    s.ic.max_rounds = j.value("max_rounds", s.ic.max_rounds);
    s.min_seeds = j.value("min_seeds", s.min_seeds);
    s.max_seeds = j.value("max_seeds", s.max_seeds);
    s.source_fraction = j.value("source_fraction", s.source_fraction);
    s.split_ratio = j.value("split_ratio", s.split_ratio);
    s.seed = j.value("seed", s.seed);
}

struct dataset_bundle {
    graph whole;
    std::vector<episode> episodes;
    double source_fraction = 0.05;
    std::size_t skipped = 0;  // episodes abandoned after repeated degenerate draws

    std::vector<const episode*> part(split s) const {
        std::vector<const episode*> out;
        for (const auto& e : episodes) {
            if (e.part == s) {
                out.push_back(&e);
            }
        }
        return out;
    }

    friend bool operator==(const dataset_bundle& a, const dataset_bundle& b) {
        return a.whole == b.whole && a.episodes == b.episodes && a.source_fraction == b.source_fraction;
    }
};

// Counts per split from integer-rounded proportions; test takes the remainder.
inline std::vector<std::size_t> split_counts(std::size_t total, const std::vector<double>& ratio) {
    require(ratio.size() == 3, error_kind::invalid_argument, "split ratio needs three entries");
    const double sum = ratio[0] + ratio[1] + ratio[2];
    require(sum > 0.0 && ratio[0] >= 0 && ratio[1] >= 0 && ratio[2] >= 0, error_kind::invalid_argument,
            "split ratio must be nonnegative with positive sum");
    const auto tr = static_cast<std::size_t>(std::lround(static_cast<double>(total) * ratio[0] / sum));
    const auto va = std::min(total - std::min(tr, total),
                             static_cast<std::size_t>(std::lround(static_cast<double>(total) * ratio[1] / sum)));
    return {std::min(tr, total), va, total - std::min(tr, total) - va};
}

inline dataset_bundle gen_episodes(const graph& g, const episode_spec& spec) {
    require(spec.count >= 1, error_kind::invalid_argument, "need at least one episode");
    require(spec.min_seeds >= 1 && spec.max_seeds >= spec.min_seeds && spec.max_seeds <= g.node_count(),
            error_kind::invalid_argument, "invalid seed-count range");
    dataset_bundle out;
    out.whole = g;
    out.source_fraction = spec.source_fraction;
    for (int e = 0; e < spec.count; ++e) {
        bool ok = false;
        for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
            rng gen(derive_seed(derive_seed(spec.seed, static_cast<std::uint64_t>(e)), attempt));
            const int count = spec.min_seeds + static_cast<int>(gen.below(spec.max_seeds - spec.min_seeds + 1));
            std::set<node_id> seeds;
            while (static_cast<int>(seeds.size()) < count) {
                seeds.insert(static_cast<node_id>(gen.below(g.node_count())));
            }
            auto sim = simulate_ic(g, seeds, spec.ic, gen.next_u64());
            if (sim.record.length() < 2) {
                continue;
            }
            episode ep;
            ep.record = std::move(sim.record);
            sources_from_cascade(ep.record, g.node_count(), spec.source_fraction);
            ep.id = static_cast<int>(out.episodes.size());
            out.episodes.push_back(std::move(ep));
            ok = true;
        }
        if (!ok) {
            ++out.skipped;
        }
    }
    std::vector<std::size_t> order(out.episodes.size());
    for (std::size_t k = 0; k < order.size(); ++k) {
        order[k] = k;
    }
    rng shuffler(derive_seed(spec.seed, "split"));
    shuffler.shuffle(order);
    const auto counts = split_counts(order.size(), spec.split_ratio);
    for (std::size_t k = 0; k < order.size(); ++k) {
        out.episodes[order[k]].part = k < counts[0] ? split::train : (k < counts[0] + counts[1] ? split::val : split::test);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Files

constexpr int format_version = 1;

inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    require(static_cast<bool>(in), error_kind::data, "cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::uint32_t checksum(const std::string& bytes) {
    return static_cast<std::uint32_t>(
        crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

// Write through a temporary sibling and rename into place.
inline void write_file_atomic(const fs::path& p, const std::string& bytes) {
    if (p.has_parent_path()) {
        fs::create_directories(p.parent_path());
    }
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), error_kind::data, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        require(static_cast<bool>(out), error_kind::data, "write failed for " + tmp.string());
    }
    fs::rename(tmp, p);
}

inline std::string graph_to_text(const graph& g) {
    std::ostringstream out;
    out << "#nodes " << g.node_count() << '\n';
    for (const auto& [u, v] : g.edges()) {
        out << u << ' ' << v << '\n';
    }
    return out.str();
}

inline graph graph_from_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    int n = -1;
    std::vector<std::pair<node_id, node_id>> edges;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        if (line[0] == '#') {
            std::istringstream hdr(line.substr(1));
            std::string key;
            hdr >> key;
            if (key == "nodes") {
                require(static_cast<bool>(hdr >> n) && n >= 0, error_kind::data, "malformed '#nodes' header");
            }
            continue;
        }
        std::istringstream ls(line);
        node_id u, v;
        require(static_cast<bool>(ls >> u >> v), error_kind::data, "malformed edge line '" + line + "'");
        edges.emplace_back(u, v);
    }
    require(n >= 0, error_kind::data, "edge list lacks '#nodes N' header");
    try {
        return graph(n, std::move(edges));
    } catch (const error& e) {
        throw error(error_kind::data, std::string("invalid edge list: ") + e.what());
    }
}

// Directory bundle: every payload file is listed in manifest.json with its
// CRC-32; all checksums are verified before anything is parsed.
class bundle_writer {
public:
    explicit bundle_writer(fs::path dir, std::string kind) : dir_(std::move(dir)) {
        manifest_["format_version"] = format_version;
        manifest_["kind"] = std::move(kind);
        manifest_["files"] = json::object();
    }

    void add(const std::string& name, const std::string& bytes) {
        write_file_atomic(dir_ / name, bytes);
        manifest_["files"][name] = {{"crc32", checksum(bytes)}, {"bytes", bytes.size()}};
    }

    json& meta() { return manifest_["meta"]; }

    void finish() { write_file_atomic(dir_ / "manifest.json", manifest_.dump(2) + "\n"); }

private:
    fs::path dir_;
    json manifest_;
};

class bundle_reader {
public:
    bundle_reader(const fs::path& dir, const std::string& kind) {
        require(fs::exists(dir / "manifest.json"), error_kind::data, "no manifest in " + dir.string());
        try {
            manifest_ = json::parse(read_file(dir / "manifest.json"));
        } catch (const json::exception& e) {
            throw error(error_kind::data, std::string("malformed manifest: ") + e.what());
        }
        require(manifest_.value("format_version", -1) == format_version, error_kind::schema,
                "unsupported bundle format version " + manifest_.value("format_version", json(-1)).dump());
        require(manifest_.value("kind", std::string{}) == kind, error_kind::schema,
                "bundle kind '" + manifest_.value("kind", std::string{}) + "', expected '" + kind + "'");
        for (const auto& [name, info] : manifest_.at("files").items()) {
            std::string bytes = read_file(dir / name);
            require(checksum(bytes) == info.at("crc32").get<std::uint32_t>(), error_kind::data,
                    "checksum mismatch in " + (dir / name).string());
            files_.emplace(name, std::move(bytes));
        }
    }

    const std::string& file(const std::string& name) const {
        auto it = files_.find(name);
        require(it != files_.end(), error_kind::data, "bundle lacks file " + name);
        return it->second;
    }

    const json& meta() const {
        static const json empty = json::object();
        return manifest_.contains("meta") ? manifest_["meta"] : empty;
    }

private:
    json manifest_;
    std::map<std::string, std::string> files_;
};

inline void save_dataset(const dataset_bundle& d, const fs::path& dir) {
    bundle_writer w(dir, "dataset");
    w.add("graph.txt", graph_to_text(d.whole));
    std::ostringstream ep;
    ep << "# episode_id node_id time_index\n";
    std::ostringstream lab;
    lab << "# episode_id source_count split\n";
    for (const auto& e : d.episodes) {
        for (const auto& entry : e.record.entries) {
            ep << e.id << ' ' << entry.node << ' ' << entry.time << '\n';
        }
        lab << e.id << ' ' << e.record.source_count << ' ' << split_name(e.part) << '\n';
    }
    w.add("episodes.txt", ep.str());
    w.add("labels.txt", lab.str());
    w.meta()["source_fraction"] = format_real(d.source_fraction);
    w.meta()["skipped"] = d.skipped;
    w.finish();
}

inline dataset_bundle load_dataset(const fs::path& dir) {
    bundle_reader r(dir, "dataset");
    dataset_bundle d;
    d.whole = graph_from_text(r.file("graph.txt"));
    d.source_fraction = std::stod(r.meta().value("source_fraction", std::string("0.05")));
    d.skipped = r.meta().value("skipped", std::size_t{0});
    std::map<int, episode> by_id;
    {
        std::istringstream in(r.file("episodes.txt"));
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty() || line[0] == '#') {
                continue;
            }
            std::istringstream ls(line);
            int id, node, time;
            require(static_cast<bool>(ls >> id >> node >> time), error_kind::data, "malformed episode line '" + line + "'");
            auto& e = by_id[id];
            e.id = id;
            e.record.entries.push_back({node, time});
        }
    }
    {
        std::istringstream in(r.file("labels.txt"));
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty() || line[0] == '#') {
                continue;
            }
            std::istringstream ls(line);
            int id;
            std::size_t ks;
            std::string part;
            require(static_cast<bool>(ls >> id >> ks >> part), error_kind::data, "malformed label line '" + line + "'");
            require(by_id.count(id), error_kind::data, "label for unknown episode " + std::to_string(id));
            by_id[id].record.source_count = ks;
            by_id[id].part = parse_split(part);
        }
    }
    for (auto& [id, e] : by_id) {
        try {
            validate_cascade(e.record, d.whole.node_count());
        } catch (const error& ex) {
            throw error(error_kind::data, "episode " + std::to_string(id) + ": " + ex.what());
        }
        d.episodes.push_back(std::move(e));
    }
    return d;
}

} // namespace sldiff
