#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "error.hpp"
#include "graph.hpp"
#include "nn.hpp"
#include "rng.hpp"
#include "kernel.hpp"
#include "schedule.hpp"
#include "score_net.hpp"

namespace sldiff {

// ---------------------------------------------------------------------------
// Independent cascade simulator

struct ic_params {
    double edge_prob = 0.5;
    std::vector<double> per_edge;  // overrides edge_prob when non-empty
    int max_rounds = -1;           // observation window; -1 = run to quiescence

    double prob(int edge) const { return per_edge.empty() ? edge_prob : per_edge[edge]; }
};

struct ic_result {
    node_vector observation;  // 0 = affected
    cascade record;
};

// Live-edge realisation of IC: every directed edge attempt draws one uniform
// from the seeded stream in a fixed order, and succeeds iff u < p. Raising p
// with the same seed can only add live edges, so activation sets are coupled
// monotonically in p. Activation round = hop distance over live edges.
inline ic_result simulate_ic(const graph& g, const std::set<node_id>& sources, const ic_params& params,
                             std::uint64_t seed) {
    require(!sources.empty(), error_kind::invalid_argument, "IC simulation needs at least one source");
    for (node_id s : sources) {
        require(g.contains(s), error_kind::invalid_argument, "source node outside graph");
    }
    require(params.per_edge.empty() || params.per_edge.size() == g.edge_count(), error_kind::invalid_argument,
            "per-edge probability table does not match graph");

    rng gen(seed);
    // one uniform per adjacency slot; slot s of node v is the attempt v -> neighbor
    std::vector<double> draw(g.neighbors().size());
    for (double& d : draw) {
        d = gen.uniform();
    }

    std::vector<int> round(g.node_count(), -1);
    std::vector<node_id> frontier(sources.begin(), sources.end());
    for (node_id s : frontier) {
        round[s] = 0;
    }
    int r = 0;
    while (!frontier.empty() && (params.max_rounds < 0 || r < params.max_rounds)) {
        std::vector<node_id> next;
        for (node_id v : frontier) {
            for (int s = g.slot_begin(v); s < g.slot_end(v); ++s) {
                const node_id u = g.neighbors()[s];
                if (round[u] < 0 && draw[s] < params.prob(g.adjacent_edges()[s])) {
                    round[u] = r + 1;
                    next.push_back(u);
                }
            }
        }
        std::sort(next.begin(), next.end());
        frontier = std::move(next);
        ++r;
    }

    ic_result out;
    out.observation = node_vector::Ones(g.node_count());
    std::vector<std::pair<int, node_id>> order;
    for (node_id v = 0; v < g.node_count(); ++v) {
        if (round[v] >= 0) {
            order.emplace_back(round[v], v);
            out.observation[v] = 0.0;
        }
    }
    std::sort(order.begin(), order.end());
    for (const auto& [t, v] : order) {
        out.record.entries.push_back({v, t});
    }
    out.record.source_count = sources.size();
    return out;
}

// ---------------------------------------------------------------------------
// Differentiable dissemination surrogate y = f(g(i))

// g: p0 = clamp(1 - sourceness, 0, 1); f: m rounds of
// p_{r+1}[v] = 1 - (1 - p0[v]) * prod_{u ~ v} (1 - w_{e,r} p_r[u])
// with w_{e,r} = sigmoid(slope * (raw_e + bias_r)) in (0, 1).
// Output is an activation probability (1 = affected).
struct dissemination_surrogate {
    int depth = 3;
    nn::vector edge_logits;  // one per undirected edge
    nn::vector round_bias;   // one per round
    double slope = 1.0;

    dissemination_surrogate() = default;
    dissemination_surrogate(const graph& g, int rounds, double init_weight = 0.5) : depth(rounds) {
        require(rounds >= 1, error_kind::invalid_argument, "surrogate depth must be >= 1");
        require(init_weight > 0.0 && init_weight < 1.0, error_kind::invalid_argument, "initial weight in (0,1)");
        edge_logits = nn::vector::Constant(static_cast<Eigen::Index>(g.edge_count()),
                                           std::log(init_weight / (1.0 - init_weight)));
        round_bias = nn::vector::Zero(rounds);
    }

    Eigen::Index parameter_count() const { return edge_logits.size() + round_bias.size(); }

    double weight(int edge, int r) const {
        return std::min(nn::sigmoid(slope * (edge_logits[edge] + round_bias[r])), 1.0 - 1e-12);
    }

    void check(const graph& g) const {
        require(edge_logits.size() == static_cast<Eigen::Index>(g.edge_count()), error_kind::invalid_argument,
                "surrogate edge table does not match graph");
        require(round_bias.size() == depth, error_kind::invalid_argument, "surrogate bias table does not match depth");
    }

    struct cache {
        nn::vector p0;
        std::vector<nn::vector> p;     // p_0 .. p_m
        std::vector<nn::vector> prod;  // per round r+1
        std::vector<char> interior;    // 0 < 1 - s < 1
    };

    node_vector forward(const node_vector& sourceness, const graph& g, cache* c = nullptr) const {
        check(g);
        require(sourceness.size() == g.node_count(), error_kind::invalid_argument, "sourceness size mismatch");
        const int n = g.node_count();
        nn::vector p0 = (1.0 - sourceness.array()).cwiseMax(0.0).cwiseMin(1.0).matrix();
        std::vector<nn::vector> ps{p0};
        std::vector<nn::vector> prods;
        for (int r = 0; r < depth; ++r) {
            const nn::vector& prev = ps.back();
            nn::vector prod(n);
            nn::vector next(n);
            for (node_id v = 0; v < n; ++v) {
                double acc = 1.0;
                for (int s = g.slot_begin(v); s < g.slot_end(v); ++s) {
                    acc *= 1.0 - weight(g.adjacent_edges()[s], r) * prev[g.neighbors()[s]];
                }
                prod[v] = acc;
                next[v] = 1.0 - (1.0 - p0[v]) * acc;
            }
            prods.push_back(std::move(prod));
            ps.push_back(std::move(next));
        }
        node_vector out = ps.back();
        if (c) {
            c->interior.resize(n);
            for (node_id v = 0; v < n; ++v) {
                const double a = 1.0 - sourceness[v];
                c->interior[v] = a > 0.0 && a < 1.0;
            }
            c->p0 = std::move(p0);
            c->p = std::move(ps);
            c->prod = std::move(prods);
        }
        return out;
    }

    struct gradients {
        node_vector d_sourceness;
        nn::vector d_edge_logits;
        nn::vector d_round_bias;
    };

    gradients backward(const cache& c, const node_vector& d_out, const graph& g) const {
        const int n = g.node_count();
        gradients gr;
        gr.d_edge_logits = nn::vector::Zero(edge_logits.size());
        gr.d_round_bias = nn::vector::Zero(depth);
        nn::vector d_p0 = nn::vector::Zero(n);
        nn::vector d_next = d_out;
        for (int r = depth - 1; r >= 0; --r) {
            const nn::vector& prev = c.p[r];
            const nn::vector& prod = c.prod[r];
            nn::vector d_prev = nn::vector::Zero(n);
            for (node_id v = 0; v < n; ++v) {
                const double g_v = d_next[v];
                if (g_v == 0.0) {
                    continue;
                }
                // p_next = 1 - (1 - p0) * prod
                d_p0[v] += g_v * prod[v];
                const double d_prod = -g_v * (1.0 - c.p0[v]);
                if (d_prod == 0.0) {
                    continue;
                }
                for (int s = g.slot_begin(v); s < g.slot_end(v); ++s) {
                    const int e = g.adjacent_edges()[s];
                    const node_id u = g.neighbors()[s];
                    const double w = weight(e, r);
                    const double f = 1.0 - w * prev[u];
                    const double others = prod[v] / f;
                    // d f / d w = -prev[u], d f / d prev[u] = -w
                    const double d_f = d_prod * others;
                    d_prev[u] += -d_f * w;
                    const double d_logit = -d_f * prev[u] * slope * w * (1.0 - w);
                    gr.d_edge_logits[e] += d_logit;
                    gr.d_round_bias[r] += d_logit;
                }
            }
            d_next = std::move(d_prev);
        }
        // p_0 of the recursion is p0 itself
        d_p0 += d_next;
        gr.d_sourceness = node_vector::Zero(n);
        for (node_id v = 0; v < n; ++v) {
            if (c.interior[v]) {
                gr.d_sourceness[v] = -d_p0[v];
            }
        }
        return gr;
    }
};

inline node_vector surrogate_forward(const dissemination_surrogate& model, const node_vector& sourceness,
                                     const graph& g) {
    return model.forward(sourceness, g);
}

// Surrogate prediction in observation polarity (0 = affected).
inline node_vector predicted_observation(const dissemination_surrogate& model, const node_vector& sourceness,
                                         const graph& g) {
    return (1.0 - model.forward(sourceness, g).array()).matrix();
}

// ---------------------------------------------------------------------------
// Step-dependent observation noise scale

// sigma(t) = sigma_min + exp(a(t)), a = MLP(step code). A fixed scale can be
// pinned instead, which is how the noise-free ablation is expressed.
class noise_variance_model {
public:
    static constexpr double default_floor = 1e-3;

    noise_variance_model() : noise_variance_model(0) {}

    explicit noise_variance_model(std::uint64_t seed, int hidden = 16, int code_dim = 8,
                                  double floor = default_floor, double initial_sigma = 0.3)
        : floor_(floor), encoding_(code_dim, 1e4, true) {
        require(floor > 0.0, error_kind::invalid_argument, "noise floor must be positive");
        nn::layout lay;
        net_ = nn::mlp(lay, {code_dim, hidden, 1});
        theta_ = nn::vector::Zero(lay.size());
        rng gen(seed);
        net_.init(theta_, gen, 0.1);
        net_.biases().back().of(theta_)(0, 0) = std::log(std::max(initial_sigma - floor, 1e-6));
    }

    static noise_variance_model constant(double sigma) {
        noise_variance_model m;
        m.fixed_ = sigma;
        return m;
    }

    double floor() const { return floor_; }
    bool is_fixed() const { return fixed_.has_value(); }
    std::optional<double> fixed_value() const { return fixed_; }
    nn::vector& parameters() { return theta_; }
    const nn::vector& parameters() const { return theta_; }
    const nn::mlp& net() const { return net_; }
    const step_encoding& encoding() const { return encoding_; }

    double log_excess(int t, nn::mlp::cache* c = nullptr) const {
        Eigen::MatrixXd in = encoding_(t);
        return net_.forward(theta_, in, c)(0, 0);
    }

    double sigma(int t) const {
        if (fixed_) {
            return *fixed_;
        }
        return floor_ + std::exp(std::min(log_excess(t), 50.0));
    }

private:
    double floor_ = default_floor;
    step_encoding encoding_{8, 1e4, true};
    nn::mlp net_;
    nn::vector theta_;
    std::optional<double> fixed_;
};

inline node_vector noisy_observe(const node_vector& y_hat, int t, const noise_variance_model& noise,
                                 std::uint64_t seed) {
    rng gen(seed);
    return y_hat + noise.sigma(t) * gen.normal_vector(y_hat.size());
}

// ---------------------------------------------------------------------------
// Posterior guidance

// Vector-Jacobian product of the score network at i_t, used when guidance
// differentiates through the network as well as the affine estimate.
using score_vjp = std::function<node_vector(const node_vector&)>;

struct guidance_result {
    node_vector gradient;  // approx. grad_{i_t} log p(y | i_t)
    double residual = 0.0; // || y - y_hat(i0_hat) ||
};

inline guidance_result guidance(const dissemination_surrogate& model, const noise_variance_model& noise,
                                const node_vector& y, const node_vector& i_t, const node_vector& score,
                                const noise_schedule& sched, int t, const graph& g,
                                const score_vjp* through_network = nullptr) {
    const double sig = noise.sigma(t);
    require(std::isfinite(sig) && sig >= noise.floor() * (1.0 - 1e-12), error_kind::numeric,
            "observation noise scale below floor");
    const double abar = sched.alpha_bar(t);
    const node_vector i0 = estimate_i0(i_t, score, sched, t);
    dissemination_surrogate::cache c;
    const node_vector p = model.forward(i0, g, &c);
    // residual in observation polarity: y - (1 - p)
    const node_vector r = y - (1.0 - p.array()).matrix();
    // d ||r||^2 / d p = 2 r
    node_vector d_i0 = model.backward(c, 2.0 * r, g).d_sourceness;
    node_vector d_it = d_i0;
    if (through_network) {
        d_it += (1.0 - abar) * (*through_network)(d_i0);
    }
    d_it /= std::sqrt(abar);
    return {-d_it / (sig * sig), r.norm()};
}

inline node_vector guidance_gradient(const dissemination_surrogate& model, const noise_variance_model& noise,
                                     const node_vector& y, const node_vector& i_t, const node_vector& score,
                                     const noise_schedule& sched, int t, const graph& g,
                                     const score_vjp* through_network = nullptr) {
    return guidance(model, noise, y, i_t, score, sched, t, g, through_network).gradient;
}

// ---------------------------------------------------------------------------
// Fitting

struct surrogate_example {
    std::set<node_id> sources;
    node_vector observation;  // 0 = affected
};

struct surrogate_fit_config {
    int depth = 3;
    int epochs = 200;
    double learning_rate = 1.0;
    double init_weight = 0.5;
    bool fit_bias = true;
};

struct surrogate_fit_report {
    std::vector<double> loss;  // per epoch, before the update
};

namespace detail {

inline double bce(double p, double f) {
    constexpr double eps = 1e-9;
    const double q = std::clamp(p, eps, 1.0 - eps);
    return -(f * std::log(q) + (1.0 - f) * std::log(1.0 - q));
}

inline double bce_grad(double p, double f) {
    constexpr double eps = 1e-9;
    if (p <= eps || p >= 1.0 - eps) {
        return 0.0;
    }
    return (p - f) / (p * (1.0 - p));
}

struct frequency_group {
    node_vector sourceness;
    node_vector frequency;  // empirical activation frequency (1 = affected)
    double weight = 0.0;
};

inline std::vector<frequency_group> group_examples(const std::vector<surrogate_example>& data, int n) {
    std::map<std::set<node_id>, std::pair<node_vector, int>> acc;
    for (const auto& ex : data) {
        require(ex.observation.size() == n, error_kind::invalid_argument, "observation size mismatch");
        auto [it, fresh] = acc.try_emplace(ex.sources, node_vector::Zero(n), 0);
        it->second.first += (1.0 - ex.observation.array()).matrix();
        ++it->second.second;
    }
    std::vector<frequency_group> out;
    for (const auto& [src, sums] : acc) {
        frequency_group grp;
        grp.sourceness = node_vector::Ones(n);
        for (node_id s : src) {
            grp.sourceness[s] = 0.0;
        }
        grp.frequency = sums.first / static_cast<double>(sums.second);
        grp.weight = static_cast<double>(sums.second) / static_cast<double>(data.size());
        out.push_back(std::move(grp));
    }
    return out;
}

} // namespace detail

// Mean per-node binary cross-entropy between surrogate outputs and the
// empirical activation frequencies of each distinct source set.
inline double surrogate_loss(const dissemination_surrogate& model, const std::vector<detail::frequency_group>& groups,
                             const graph& g, dissemination_surrogate::gradients* grad = nullptr) {
    const int n = g.node_count();
    double loss = 0.0;
    if (grad) {
        grad->d_edge_logits = nn::vector::Zero(model.edge_logits.size());
        grad->d_round_bias = nn::vector::Zero(model.depth);
    }
    for (const auto& grp : groups) {
        dissemination_surrogate::cache c;
        const node_vector p = model.forward(grp.sourceness, g, grad ? &c : nullptr);
        node_vector d(n);
        for (int v = 0; v < n; ++v) {
            loss += grp.weight * detail::bce(p[v], grp.frequency[v]) / n;
            d[v] = grp.weight * detail::bce_grad(p[v], grp.frequency[v]) / n;
        }
        if (grad) {
            auto gr = model.backward(c, d, g);
            grad->d_edge_logits += gr.d_edge_logits;
            grad->d_round_bias += gr.d_round_bias;
        }
    }
    return loss;
}

// Full-batch gradient descent with backtracking, so the loss never increases.
inline dissemination_surrogate fit_surrogate(const graph& g, const std::vector<surrogate_example>& data,
                                             const surrogate_fit_config& cfg, surrogate_fit_report* report = nullptr) {
    require(!data.empty(), error_kind::invalid_argument, "surrogate fit needs at least one example");
    const auto groups = detail::group_examples(data, g.node_count());
    dissemination_surrogate model(g, cfg.depth, cfg.init_weight);
    double step = cfg.learning_rate;
    dissemination_surrogate::gradients grad;
    double loss = surrogate_loss(model, groups, g, &grad);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (report) {
            report->loss.push_back(loss);
        }
        if (!cfg.fit_bias) {
            grad.d_round_bias.setZero();
        }
        const double gnorm2 = grad.d_edge_logits.squaredNorm() + grad.d_round_bias.squaredNorm();
        if (gnorm2 < 1e-24) {
            continue;
        }
        bool accepted = false;
        for (int tries = 0; tries < 40 && !accepted; ++tries) {
            dissemination_surrogate trial = model;
            trial.edge_logits -= step * grad.d_edge_logits;
            trial.round_bias -= step * grad.d_round_bias;
            dissemination_surrogate::gradients trial_grad;
            const double trial_loss = surrogate_loss(trial, groups, g, &trial_grad);
            if (trial_loss <= loss - 1e-4 * step * gnorm2) {
                model = std::move(trial);
                loss = trial_loss;
                grad = std::move(trial_grad);
                step *= 1.5;
                accepted = true;
            } else {
                step *= 0.5;
            }
        }
    }
    if (report) {
        report->loss.push_back(loss);
    }
    return model;
}

struct noise_example {
    node_vector indicator;    // clean i0 (0 = source)
    node_vector observation;  // y (0 = affected)
};

struct noise_fit_config {
    int epochs = 300;
    double learning_rate = 0.05;
    std::uint64_t seed = 0;
};

// Gaussian negative log-likelihood of surrogate residuals with variance
// sigma(t)^2, t uniform over the schedule, fitted with Adam.
inline noise_variance_model fit_noise_model(const std::vector<noise_example>& data,
                                            const dissemination_surrogate& surrogate, const graph& g,
                                            const noise_schedule& sched, const noise_fit_config& cfg) {
    require(!data.empty(), error_kind::invalid_argument, "noise fit needs at least one example");
    std::vector<double> sq_residual;
    sq_residual.reserve(data.size());
    for (const auto& ex : data) {
        const node_vector r = ex.observation - predicted_observation(surrogate, ex.indicator, g);
        sq_residual.push_back(r.squaredNorm());
    }
    const double n = static_cast<double>(g.node_count());
    noise_variance_model model(derive_seed(cfg.seed, "noise-init"));
    nn::optimizer opt({nn::optimizer_config::kind::adam, cfg.learning_rate});
    rng gen(derive_seed(cfg.seed, "noise-steps"));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        nn::vector grad = nn::vector::Zero(model.parameters().size());
        for (double rr : sq_residual) {
            const int t = 1 + static_cast<int>(gen.below(static_cast<std::uint64_t>(sched.steps())));
            nn::mlp::cache c;
            const double a = model.log_excess(t, &c);
            const double excess = std::exp(std::min(a, 50.0));
            const double sig = model.floor() + excess;
            // per-node NLL 0.5 * (log sig^2 + r^2 / sig^2), averaged over nodes
            const double d_sig = (1.0 / sig - rr / (n * sig * sig * sig));
            Eigen::MatrixXd d_a(1, 1);
            d_a(0, 0) = d_sig * excess / static_cast<double>(sq_residual.size());
            model.net().backward(model.parameters(), c, d_a, grad);
        }
        opt.step(model.parameters(), grad);
    }
    return model;
}

} // namespace sldiff
