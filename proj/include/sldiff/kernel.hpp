#pragma once

#include <cmath>
#include <cstdint>

#include "graph.hpp"
#include "rng.hpp"
#include "schedule.hpp"

namespace sldiff {

struct perturbed {
    node_vector x_t;
    node_vector score_target;  // grad log N(x_t; sqrt(abar) x0, (1 - abar) I)
    node_vector noise;
};

inline perturbed perturb_with(const node_vector& x0, const node_vector& eps, int t, const noise_schedule& sched) {
    require(t >= 1 && t <= sched.steps(), error_kind::invalid_argument, "perturbation step out of range");
    const double abar = sched.alpha_bar(t);
    const double sig = std::sqrt(1.0 - abar);
    perturbed p;
    p.x_t = std::sqrt(abar) * x0 + sig * eps;
    p.score_target = -eps / sig;
    p.noise = eps;
    return p;
}

inline perturbed perturb(const node_vector& x0, int t, const noise_schedule& sched, std::uint64_t seed) {
    require(t >= 1 && t <= sched.steps(), error_kind::invalid_argument, "perturbation step out of range");
    rng gen(seed);
    return perturb_with(x0, gen.normal_vector(x0.size()), t, sched);
}

// (x_t + (1 - abar_t) s) / sqrt(abar_t)
inline node_vector estimate_i0(const node_vector& i_t, const node_vector& score, const noise_schedule& sched, int t) {
    const double abar = sched.alpha_bar(t);
    return (i_t + (1.0 - abar) * score) / std::sqrt(abar);
}

// Ancestral step of the discretised reverse VP-SDE:
// x_{t-1} = (2 - sqrt(1 - beta_t)) x_t + beta_t s + sqrt(beta_t) z.
inline node_vector reverse_step(const node_vector& x_t, const node_vector& score_like, const noise_schedule& sched,
                                int t, const node_vector* z = nullptr) {
    const double beta = sched.beta(t);
    node_vector out = (2.0 - std::sqrt(1.0 - beta)) * x_t + beta * score_like;
    if (z) {
        out += std::sqrt(beta) * (*z);
    }
    return out;
}

inline node_vector reverse_step(const node_vector& x_t, const node_vector& score_like, const noise_schedule& sched,
                                int t, std::uint64_t seed, bool add_noise) {
    if (!add_noise) {
        return reverse_step(x_t, score_like, sched, t);
    }
    rng gen(seed);
    const node_vector z = gen.normal_vector(x_t.size());
    return reverse_step(x_t, score_like, sched, t, &z);
}

} // namespace sldiff
