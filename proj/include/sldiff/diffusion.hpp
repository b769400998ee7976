#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "dissemination.hpp"
#include "graph.hpp"
#include "kernel.hpp"
#include "rng.hpp"
#include "schedule.hpp"
#include "score_net.hpp"

namespace sldiff {

// One training example for denoising score matching.
struct dsm_item {
    const graph* g = nullptr;
    node_vector x0;
    const feature_matrix* positional = nullptr;
};

enum class dsm_weighting {
    one_minus_alpha_bar,  // 1 - abar_t
    beta,                 // 1 - alpha_t
};

inline double dsm_weight(const noise_schedule& sched, int t, dsm_weighting w) {
    return w == dsm_weighting::beta ? sched.beta(t) : 1.0 - sched.alpha_bar(t);
}

struct dsm_draw {
    int t = 1;
    perturbed p;
};

// Step and noise for item k of a batch: t uniform in 1..T, then eps.
inline dsm_draw draw_dsm(const node_vector& x0, const noise_schedule& sched, std::uint64_t seed, std::size_t k) {
    rng gen(derive_seed(seed, k));
    dsm_draw d;
    d.t = 1 + static_cast<int>(gen.below(static_cast<std::uint64_t>(sched.steps())));
    d.p = perturb_with(x0, gen.normal_vector(x0.size()), d.t, sched);
    return d;
}

using score_oracle = std::function<node_vector(const node_vector& x_t, int t, const dsm_item& item)>;

// Weighted mean over the batch of w_t * || s(x_t, t) - target ||^2 for an
// arbitrary score function.
inline double dsm_loss(const score_oracle& score, const std::vector<dsm_item>& batch, const noise_schedule& sched,
                       std::uint64_t seed, dsm_weighting weighting = dsm_weighting::one_minus_alpha_bar) {
    require(!batch.empty(), error_kind::invalid_argument, "empty DSM batch");
    double total = 0.0;
    for (std::size_t k = 0; k < batch.size(); ++k) {
        const auto d = draw_dsm(batch[k].x0, sched, seed, k);
        const node_vector s = score(d.p.x_t, d.t, batch[k]);
        total += dsm_weight(sched, d.t, weighting) * (s - d.p.score_target).squaredNorm();
    }
    return total / static_cast<double>(batch.size());
}

// Same loss for the score network; accumulates d loss / d theta into grad
// when given.
inline double dsm_loss(const score_net& net, const std::vector<dsm_item>& batch, const noise_schedule& sched,
                       std::uint64_t seed, nn::vector* grad = nullptr,
                       dsm_weighting weighting = dsm_weighting::one_minus_alpha_bar) {
    require(!batch.empty(), error_kind::invalid_argument, "empty DSM batch");
    if (grad && grad->size() != net.parameter_count()) {
        *grad = nn::vector::Zero(net.parameter_count());
    }
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    for (std::size_t k = 0; k < batch.size(); ++k) {
        const auto& item = batch[k];
        const auto d = draw_dsm(item.x0, sched, seed, k);
        const double w = dsm_weight(sched, d.t, weighting);
        score_net::cache c;
        const node_vector s = net.forward(d.p.x_t, d.t, net.output_scale(sched.sigma(d.t)), *item.g, item.positional,
                                          grad ? &c : nullptr);
        const node_vector diff = s - d.p.score_target;
        total += w * diff.squaredNorm();
        if (grad) {
            net.backward(c, 2.0 * w * inv_b * diff, *grad);
        }
    }
    return total * inv_b;
}

inline node_vector score_forward(const score_net& net, const node_vector& x_t, int t, const noise_schedule& sched,
                                 const graph& g, const feature_matrix* positional) {
    return net.forward(x_t, t, net.output_scale(sched.sigma(t)), g, positional);
}

// ---------------------------------------------------------------------------
// Samplers

using score_fn = std::function<node_vector(const node_vector& x_t, int t)>;
using drift_fn = std::function<node_vector(const node_vector& x_t, const node_vector& score, int t)>;

// Reverse loop t = T..1 from `init`. The step noise for step t comes from
// derive_seed(seed, t); no noise is injected at t = 1. `extra` adds a drift
// term to the score (posterior guidance).
inline node_vector reverse_chain(node_vector x, const score_fn& score, const noise_schedule& sched,
                                 std::uint64_t seed, const drift_fn& extra = {},
                                 std::function<void(int, const node_vector&)> on_step = {}) {
    for (int t = sched.steps(); t >= 1; --t) {
        node_vector s = score(x, t);
        if (extra) {
            s += extra(x, s, t);
        }
        if (t > 1) {
            rng gen(derive_seed(seed, static_cast<std::uint64_t>(t)));
            const node_vector z = gen.normal_vector(x.size());
            x = reverse_step(x, s, sched, t, &z);
        } else {
            x = reverse_step(x, s, sched, t);
        }
        if (on_step) {
            on_step(t, x);
        }
    }
    return x;
}

inline node_vector initial_noise(Eigen::Index n, std::uint64_t seed) {
    rng gen(derive_seed(seed, "init"));
    return gen.normal_vector(n);
}

// Coarse proximity sample on a cascade graph, clamped to [0,1] at exit only.
inline node_vector sample_coarse(const score_net& net, const graph& cg, const feature_matrix* positional,
                                 const noise_schedule& sched, std::uint64_t seed) {
    const score_fn score = [&](const node_vector& x, int t) { return score_forward(net, x, t, sched, cg, positional); };
    node_vector x = reverse_chain(initial_noise(cg.node_count(), seed), score, sched, seed);
    return x.cwiseMax(0.0).cwiseMin(1.0);
}

struct fine_options {
    double guidance_scale = 1.0;
    bool through_network = false;  // differentiate the score net inside the x0 estimate
    bool renoise_init = false;     // forward-perturb the initialisation to t = T2 first
};

struct fine_result {
    node_vector indicator;           // final state i_0 (unclamped)
    std::vector<double> residuals;   // guidance residual per step, t = T2..1
};

// Lift a cascade-graph vector to the whole graph; absent nodes get `fill`.
inline node_vector lift_to_whole(const node_vector& local, const cascade_graph& cg, int whole_nodes, double fill = 1.0) {
    node_vector out = node_vector::Constant(whole_nodes, fill);
    for (std::size_t k = 0; k < cg.node_map.size(); ++k) {
        out[cg.node_map[k]] = local[static_cast<Eigen::Index>(k)];
    }
    return out;
}

// Posterior-guided reverse diffusion on the whole graph from `init`.
inline fine_result sample_fine(const score_net& net, const dissemination_surrogate& surrogate,
                               const noise_variance_model& noise, const node_vector& y, const node_vector& init,
                               const graph& whole, const noise_schedule& sched, std::uint64_t seed,
                               const fine_options& opt = {}) {
    require(y.size() == whole.node_count() && init.size() == whole.node_count(), error_kind::invalid_argument,
            "fine-stage vectors do not match graph");
    fine_result res;
    node_vector start = init;
    if (opt.renoise_init && sched.steps() >= 1) {
        start = perturb(init, sched.steps(), sched, derive_seed(seed, "renoise")).x_t;
    }
    const score_fn score = [&](const node_vector& x, int t) { return score_forward(net, x, t, sched, whole, nullptr); };
    drift_fn guide;
    if (opt.guidance_scale != 0.0) {
        guide = [&](const node_vector& x, const node_vector& s, int t) -> node_vector {
            guidance_result g;
            if (opt.through_network) {
                score_net::cache c;
                net.forward(x, t, net.output_scale(sched.sigma(t)), whole, nullptr, &c);
                const score_vjp vjp = [&](const node_vector& v) {
                    nn::vector scratch = nn::vector::Zero(net.parameter_count());
                    return net.backward(c, v, scratch);
                };
                g = guidance(surrogate, noise, y, x, s, sched, t, whole, &vjp);
            } else {
                g = guidance(surrogate, noise, y, x, s, sched, t, whole);
            }
            res.residuals.push_back(g.residual);
            return opt.guidance_scale * g.gradient;
        };
    }
    res.indicator = reverse_chain(std::move(start), score, sched, seed, guide);
    return res;
}

inline fine_result sample_fine(const score_net& net, const dissemination_surrogate& surrogate,
                               const noise_variance_model& noise, const node_vector& y, const node_vector& coarse,
                               const cascade_graph& cg, const graph& whole, const noise_schedule& sched,
                               std::uint64_t seed, const fine_options& opt = {}) {
    return sample_fine(net, surrogate, noise, y, lift_to_whole(coarse, cg, whole.node_count()), whole, sched, seed, opt);
}

} // namespace sldiff
