#pragma once

#include "sldiff/sldiff.hpp"

namespace fixtures {

using namespace sldiff;

inline graph path_graph(int n) {
    std::vector<std::pair<node_id, node_id>> e;
    for (int v = 0; v + 1 < n; ++v) {
        e.emplace_back(v, v + 1);
    }
    return graph(n, e);
}

// Small enough that a full train + evaluate takes a second or two.
inline experiment_config tiny_config() {
    experiment_config c;
    c.graph = {"watts_strogatz", 40, 2, 4, 0.1, 0, 0, 3};
    c.episodes.count = 20;
    c.episodes.seed = 5;
    c.stages = {30, 10};
    c.coarse_net = {8, 1, 2, 8, 16, 2, true, 8, 1e5, true, true};
    c.fine_net = {8, 1, 2, 8, 16, 2, false, 8, 1e5, true, true};
    c.coarse_train.epochs = 3;
    c.fine_train.epochs = 3;
    c.surrogate.epochs = 20;
    c.surrogate_mc_pairs = 10;
    c.noise.epochs = 20;
    return c;
}

inline dataset_bundle tiny_data(const experiment_config& c) { return gen_episodes(gen_graph(c.graph), c.episodes); }

} // namespace fixtures
