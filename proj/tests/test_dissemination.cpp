#include <gtest/gtest.h>

#include <cmath>

#include "sldiff/data_io.hpp"
#include "sldiff/diffusion.hpp"
#include "sldiff/dissemination.hpp"

using namespace sldiff;

namespace {

graph path_graph(int n) {
    std::vector<std::pair<node_id, node_id>> e;
    for (int v = 0; v + 1 < n; ++v) {
        e.emplace_back(v, v + 1);
    }
    return graph(n, e);
}

dissemination_surrogate random_surrogate(const graph& g, int depth, std::uint64_t seed) {
    dissemination_surrogate m(g, depth);
    rng gen(seed);
    for (Eigen::Index e = 0; e < m.edge_logits.size(); ++e) {
        m.edge_logits[e] = gen.normal();
    }
    for (int r = 0; r < depth; ++r) {
        m.round_bias[r] = 0.3 * gen.normal();
    }
    return m;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

} // namespace

TEST(SimulateIc, EdgeProbOneFollowsBfs) {
    const graph g = watts_strogatz(30, 4, 0.2, 3);
    const auto r = simulate_ic(g, {5}, {1.0, {}, -1}, 9);
    EXPECT_EQ(r.observation.sum(), 0.0);
    const auto d = bfs_distances(g, {5});
    for (const auto& e : r.record.entries) {
        EXPECT_EQ(e.time, d[e.node]);
    }
    validate_cascade(r.record, g.node_count());
}

TEST(SimulateIc, EdgeProbZeroOnlySources) {
    const graph g = watts_strogatz(30, 4, 0.2, 3);
    const auto r = simulate_ic(g, {2, 7}, {0.0, {}, -1}, 9);
    EXPECT_EQ(r.record.length(), 2u);
    EXPECT_EQ(r.observation.sum(), 28.0);
}

TEST(SimulateIc, PathFrequency) {
    const graph g = path_graph(3);
    int hits = 0;
    const int trials = 10000;
    for (int s = 0; s < trials; ++s) {
        hits += simulate_ic(g, {0}, {0.5, {}, -1}, derive_seed(17, s)).observation[2] == 0.0;
    }
    EXPECT_NEAR(hits / static_cast<double>(trials), 0.25, 0.02);
}

TEST(SimulateIc, CoupledMonotoneInProbability) {
    const graph g = erdos_renyi(60, 0.08, 4);
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto lo = simulate_ic(g, {0}, {0.2, {}, -1}, s).observation;
        const auto hi = simulate_ic(g, {0}, {0.6, {}, -1}, s).observation;
        for (int v = 0; v < g.node_count(); ++v) {
            if (lo[v] == 0.0) {
                EXPECT_EQ(hi[v], 0.0);
            }
        }
    }
}

TEST(SimulateIc, RoundWindow) {
    const graph g = path_graph(6);
    const auto r = simulate_ic(g, {0}, {1.0, {}, 2}, 1);
    EXPECT_EQ(r.record.length(), 3u);
}

TEST(Surrogate, NoSourcesGivesZero) {
    const graph g = path_graph(5);
    dissemination_surrogate m(g, 3);
    EXPECT_EQ(surrogate_forward(m, node_vector::Ones(5), g).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Surrogate, SourceIsAbsorbing) {
    const graph g = path_graph(5);
    const auto m = random_surrogate(g, 3, 2);
    node_vector s = node_vector::Ones(5);
    s[3] = 0.0;
    EXPECT_EQ(surrogate_forward(m, s, g)[3], 1.0);
}

TEST(Surrogate, SingleEdgeClosedForm) {
    const graph g = path_graph(2);
    dissemination_surrogate m(g, 1, 0.3);
    node_vector s(2);
    s << 0.0, 1.0;
    EXPECT_NEAR(surrogate_forward(m, s, g)[1], 0.3, 1e-12);
}

TEST(Surrogate, MonotoneAndBounded) {
    const graph g = erdos_renyi(25, 0.2, 8);
    const auto m = random_surrogate(g, 3, 5);
    rng gen(1);
    for (int trial = 0; trial < 50; ++trial) {
        node_vector s(25);
        for (int v = 0; v < 25; ++v) {
            s[v] = 1.5 * gen.uniform() - 0.25;
        }
        node_vector lower = s;
        for (int v = 0; v < 25; ++v) {
            lower[v] -= 0.3 * gen.uniform();
        }
        const node_vector a = surrogate_forward(m, s, g);
        const node_vector b = surrogate_forward(m, lower, g);
        EXPECT_GE(a.minCoeff(), 0.0);
        EXPECT_LE(a.maxCoeff(), 1.0);
        for (int v = 0; v < 25; ++v) {
            EXPECT_GE(b[v], a[v] - 1e-15);
        }
    }
}

TEST(Surrogate, ParameterGradientMatchesFiniteDifferences) {
    const graph g = erdos_renyi(12, 0.3, 2);
    const auto m = random_surrogate(g, 3, 4);
    rng gen(6);
    node_vector s(12), w(12);
    for (int v = 0; v < 12; ++v) {
        s[v] = 0.2 + 0.6 * gen.uniform();
        w[v] = gen.normal();
    }
    dissemination_surrogate::cache c;
    m.forward(s, g, &c);
    const auto gr = m.backward(c, w, g);
    auto f = [&](const dissemination_surrogate& mm, const node_vector& ss) { return w.dot(mm.forward(ss, g)); };
    const double h = 1e-5;
    for (Eigen::Index e = 0; e < m.edge_logits.size(); ++e) {
        auto p = m, q = m;
        p.edge_logits[e] += h;
        q.edge_logits[e] -= h;
        EXPECT_LT(rel_err(gr.d_edge_logits[e], (f(p, s) - f(q, s)) / (2 * h)), 1e-5) << "edge " << e;
    }
    for (int r = 0; r < 3; ++r) {
        auto p = m, q = m;
        p.round_bias[r] += h;
        q.round_bias[r] -= h;
        EXPECT_LT(rel_err(gr.d_round_bias[r], (f(p, s) - f(q, s)) / (2 * h)), 1e-5);
    }
    for (int v = 0; v < 12; ++v) {
        node_vector p = s, q = s;
        p[v] += h;
        q[v] -= h;
        EXPECT_LT(rel_err(gr.d_sourceness[v], (f(m, p) - f(m, q)) / (2 * h)), 1e-5);
    }
}

TEST(NoisyObserve, FloorBound) {
    const auto noise = noise_variance_model::constant(1e-3);
    const node_vector y = node_vector::LinSpaced(50, 0.0, 1.0);
    const node_vector o = noisy_observe(y, 3, noise, 5);
    EXPECT_LT((o - y).cwiseAbs().maxCoeff(), 5e-3);
}

TEST(NoisyObserve, VarianceAndDeterminism) {
    const noise_variance_model noise(3);
    const double sig = noise.sigma(4);
    const node_vector y = node_vector::Zero(1);
    double ss = 0.0;
    const int draws = 10000;
    for (int k = 0; k < draws; ++k) {
        const double v = noisy_observe(y, 4, noise, derive_seed(2, k))[0];
        ss += v * v;
    }
    EXPECT_NEAR(ss / draws / (sig * sig), 1.0, 0.05);
    EXPECT_EQ(noisy_observe(y, 4, noise, 9), noisy_observe(y, 4, noise, 9));
}

TEST(Guidance, ZeroAtExactFit) {
    const graph g = erdos_renyi(10, 0.3, 3);
    const auto m = random_surrogate(g, 2, 1);
    const auto sched = make_schedule(50);
    rng gen(2);
    const node_vector i_t = 0.5 * node_vector::Ones(10) + 0.1 * gen.normal_vector(10);
    const node_vector score = gen.normal_vector(10);
    const node_vector y = predicted_observation(m, estimate_i0(i_t, score, sched, 20), g);
    const auto gr = guidance(m, noise_variance_model::constant(0.2), y, i_t, score, sched, 20, g);
    EXPECT_LT(gr.gradient.cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT(gr.residual, 1e-14);
}

TEST(Guidance, SigmaScaling) {
    const graph g = erdos_renyi(10, 0.3, 3);
    const auto m = random_surrogate(g, 2, 1);
    const auto sched = make_schedule(50);
    rng gen(7);
    const node_vector i_t = 0.5 * node_vector::Ones(10) + 0.1 * gen.normal_vector(10);
    const node_vector score = 0.1 * gen.normal_vector(10);
    const node_vector y = node_vector::Ones(10) - node_vector::Unit(10, 2);
    const auto a = guidance_gradient(m, noise_variance_model::constant(0.2), y, i_t, score, sched, 10, g);
    const auto b = guidance_gradient(m, noise_variance_model::constant(0.6), y, i_t, score, sched, 10, g);
    EXPECT_LT((a - 9.0 * b).norm(), 1e-12 * a.norm());
}

TEST(Guidance, BelowFloorRejected) {
    const graph g = path_graph(3);
    dissemination_surrogate m(g, 1);
    const auto sched = make_schedule(5);
    noise_variance_model noise = noise_variance_model::constant(1e-6);
    EXPECT_THROW(guidance(m, noise, node_vector::Ones(3), node_vector::Ones(3), node_vector::Zero(3), sched, 2, g), error);
}

// Finite-difference oracle for the affine-only mode: the score is held fixed.
TEST(Guidance, FiniteDifferencesAffineMode) {
    const auto sched = make_schedule(80);
    for (int inst = 0; inst < 5; ++inst) {
        const int n = 8 + 3 * inst;
        const graph g = erdos_renyi(n, 0.3, 40 + inst);
        const auto m = random_surrogate(g, 3, inst);
        const auto noise = noise_variance_model::constant(0.3);
        rng gen(100 + inst);
        const node_vector i_t = 0.5 * node_vector::Ones(n) + 0.1 * gen.normal_vector(n);
        const node_vector score = 0.05 * gen.normal_vector(n);
        node_vector y = node_vector::Ones(n);
        y[0] = y[1] = 0.0;
        const int t = 1 + inst * 15;
        const node_vector grad = guidance_gradient(m, noise, y, i_t, score, sched, t, g);
        auto objective = [&](const node_vector& x) {
            const node_vector r = y - predicted_observation(m, estimate_i0(x, score, sched, t), g);
            return -r.squaredNorm() / (0.3 * 0.3);
        };
        for (int v = 0; v < n; ++v) {
            node_vector p = i_t, q = i_t;
            p[v] += 1e-4;
            q[v] -= 1e-4;
            const double fd = (objective(p) - objective(q)) / 2e-4;
            EXPECT_LT(rel_err(grad[v], fd), 1e-3) << "instance " << inst << " node " << v;
        }
    }
}

// Through-network mode: the score is recomputed from i_t by the net.
TEST(Guidance, FiniteDifferencesThroughNetwork) {
    const auto sched = make_schedule(40);
    score_net_config cfg{8, 2, 2, 8, 16, 3, false, 0, 1e5, true, true};
    for (int inst = 0; inst < 3; ++inst) {
        const int n = 10 + 5 * inst;
        const graph g = erdos_renyi(n, 0.3, 60 + inst);
        const auto m = random_surrogate(g, 2, 10 + inst);
        const auto noise = noise_variance_model::constant(0.4);
        const score_net net(cfg, 3 + inst);
        rng gen(200 + inst);
        const node_vector i_t = 0.5 * node_vector::Ones(n) + 0.1 * gen.normal_vector(n);
        node_vector y = node_vector::Ones(n);
        y[n - 1] = 0.0;
        const int t = 5 + 10 * inst;
        auto score_at = [&](const node_vector& x) { return score_forward(net, x, t, sched, g, nullptr); };
        score_net::cache c;
        const node_vector s = net.forward(i_t, t, net.output_scale(sched.sigma(t)), g, nullptr, &c);
        const score_vjp vjp = [&](const node_vector& v) {
            nn::vector scratch = nn::vector::Zero(net.parameter_count());
            return net.backward(c, v, scratch);
        };
        const node_vector grad = guidance_gradient(m, noise, y, i_t, s, sched, t, g, &vjp);
        auto objective = [&](const node_vector& x) {
            const node_vector r = y - predicted_observation(m, estimate_i0(x, score_at(x), sched, t), g);
            return -r.squaredNorm() / (0.4 * 0.4);
        };
        for (int v = 0; v < n; ++v) {
            node_vector p = i_t, q = i_t;
            p[v] += 1e-4;
            q[v] -= 1e-4;
            const double fd = (objective(p) - objective(q)) / 2e-4;
            EXPECT_LT(rel_err(grad[v], fd), 1e-3) << "instance " << inst << " node " << v;
        }
    }
}

TEST(FitSurrogate, EmptyDatasetRejected) {
    const graph g = path_graph(3);
    EXPECT_THROW(fit_surrogate(g, {}, {}), error);
}

TEST(FitSurrogate, SingleEdgeWeight) {
    const graph g = path_graph(2);
    std::vector<surrogate_example> data;
    for (int k = 0; k < 10000; ++k) {
        data.push_back({{0}, simulate_ic(g, {0}, {0.3, {}, -1}, derive_seed(5, k)).observation});
    }
    surrogate_fit_config cfg;
    cfg.depth = 1;
    cfg.epochs = 300;
    surrogate_fit_report rep;
    const auto m = fit_surrogate(g, data, cfg, &rep);
    EXPECT_NEAR(m.weight(0, 0), 0.3, 0.05);
    for (std::size_t k = 1; k < rep.loss.size(); ++k) {
        EXPECT_LE(rep.loss[k], rep.loss[k - 1] + 1e-6);
    }
}

TEST(FitSurrogate, IdenticalPairsApproachEntropyFloor) {
    const graph g = path_graph(3);
    // node 1 affected in 3 of 4 copies, node 2 in 1 of 4
    std::vector<surrogate_example> data;
    for (int k = 0; k < 4; ++k) {
        node_vector y = node_vector::Ones(3);
        y[0] = 0.0;
        if (k < 3) {
            y[1] = 0.0;
        }
        if (k == 0) {
            y[2] = 0.0;
        }
        data.push_back({{0}, y});
    }
    surrogate_fit_config cfg;
    cfg.depth = 2;
    cfg.epochs = 2000;
    surrogate_fit_report rep;
    fit_surrogate(g, data, cfg, &rep);
    auto h = [](double p) { return -(p * std::log(p) + (1 - p) * std::log(1 - p)); };
    const double floor = (h(0.75) + h(0.25)) / 3.0;
    EXPECT_GE(rep.loss.back(), floor - 1e-9);
    EXPECT_NEAR(rep.loss.back(), floor, 2e-3);
}

TEST(FitSurrogate, DeterministicDissemination) {
    const graph g = watts_strogatz(30, 4, 0.1, 2);
    std::vector<surrogate_example> data;
    for (int k = 0; k < 30; ++k) {
        data.push_back({{k}, simulate_ic(g, {k}, {1.0, {}, 2}, k).observation});
    }
    surrogate_fit_config cfg;
    cfg.epochs = 300;
    const auto m = fit_surrogate(g, data, cfg);
    for (const auto& ex : data) {
        node_vector s = node_vector::Ones(30);
        for (node_id v : ex.sources) {
            s[v] = 0.0;
        }
        const node_vector p = surrogate_forward(m, s, g);
        for (int v = 0; v < 30; ++v) {
            if (ex.observation[v] == 0.0) {
                EXPECT_GE(p[v], 0.9);
            }
        }
    }
}

namespace {

std::vector<noise_example> residual_data(const dissemination_surrogate& m, const graph& g, double sigma, std::uint64_t seed) {
    std::vector<noise_example> data;
    rng gen(seed);
    for (int k = 0; k < 60; ++k) {
        node_vector i0 = node_vector::Ones(g.node_count());
        i0[k % g.node_count()] = 0.0;
        const node_vector y = predicted_observation(m, i0, g) + sigma * gen.normal_vector(g.node_count());
        data.push_back({i0, y});
    }
    return data;
}

} // namespace

TEST(FitNoise, RecoversConstantSigma) {
    const graph g = path_graph(12);
    dissemination_surrogate m(g, 2);
    const auto sched = make_schedule(40);
    const auto model = fit_noise_model(residual_data(m, g, 0.2, 1), m, g, sched, {300, 0.05, 3});
    for (int t = 1; t <= 40; ++t) {
        EXPECT_GE(model.sigma(t), 0.15);
        EXPECT_LE(model.sigma(t), 0.25);
    }
}

TEST(FitNoise, ZeroResidualsHitFloor) {
    const graph g = path_graph(12);
    dissemination_surrogate m(g, 2);
    const auto sched = make_schedule(40);
    const auto model = fit_noise_model(residual_data(m, g, 0.0, 1), m, g, sched, {400, 0.05, 3});
    for (int t = 1; t <= 40; t += 13) {
        EXPECT_NEAR(model.sigma(t), noise_variance_model::default_floor, 1e-4);
        EXPECT_GE(model.sigma(t), noise_variance_model::default_floor);
    }
}

TEST(FitNoise, ScaleEquivariance) {
    const graph g = path_graph(12);
    dissemination_surrogate m(g, 2);
    const auto sched = make_schedule(40);
    const auto a = fit_noise_model(residual_data(m, g, 0.1, 4), m, g, sched, {400, 0.05, 3});
    const auto b = fit_noise_model(residual_data(m, g, 0.2, 4), m, g, sched, {400, 0.05, 3});
    EXPECT_NEAR(b.sigma(20) / a.sigma(20), 2.0, 0.2);
}

TEST(FitNoise, EmptyRejected) {
    const graph g = path_graph(3);
    dissemination_surrogate m(g, 1);
    EXPECT_THROW(fit_noise_model({}, m, g, make_schedule(5), {}), error);
}
