#pragma once

#include <chrono>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "data_io.hpp"
#include "diffusion.hpp"
#include "dissemination.hpp"
#include "graph.hpp"
#include "positional.hpp"
#include "rng.hpp"
#include "schedule.hpp"
#include "score_net.hpp"

namespace sldiff {

// ---------------------------------------------------------------------------
// Configuration

struct training_config {
    nn::optimizer_config optimizer{nn::optimizer_config::kind::adam, 2e-3, 0.0, 0.9, 0.999, 1e-8, 5.0};
    int epochs = 60;
    int patience = 10;
    int draws_per_item = 4;     // (t, eps) draws per cascade per update
    int val_draws = 8;
    dsm_weighting weighting = dsm_weighting::one_minus_alpha_bar;
};

enum class decode_rule { threshold, top_k };

struct ablation_flags {
    bool coarse_only = false;
    bool fine_only = false;
    bool no_positional = false;
    bool no_noise_model = false;

    friend bool operator==(const ablation_flags&, const ablation_flags&) = default;
};

struct experiment_config {
    std::uint64_t seed = 7;
    graph_spec graph;
    episode_spec episodes;
    stage_config stages;
    double beta_min = 1e-4;
    double beta_max = 0.02;

    score_net_config coarse_net{32, 6, 4, 32, 64, 4, true, 32, 1e5, true, true};
    score_net_config fine_net{32, 4, 4, 32, 64, 4, false, 32, 1e5, true, true};
    training_config coarse_train;
    training_config fine_train{{nn::optimizer_config::kind::adam, 5e-4, 0.0, 0.9, 0.999, 1e-8, 5.0}, 60, 10, 8, 8};

    double anchor_scale = 1.0;
    surrogate_fit_config surrogate;
    int surrogate_mc_pairs = 400;
    noise_fit_config noise{300, 0.05, 0};
    double fixed_noise_sigma = 1.0;  // used when the noise model is ablated

    fine_options sampling{0.05, false, true};
    // Guidance weights tried on validation episodes after training; the best
    // mean F1 wins. Empty keeps sampling.guidance_scale.
    std::vector<double> guidance_grid{0.005, 0.01, 0.02, 0.03, 0.05};
    int calibration_episodes = 40;
    decode_rule decode = decode_rule::threshold;
    double threshold = 0.5;

    ablation_flags ablation;
};

// Per-component seeds, all derived from the master seed.
struct seed_plan {
    std::uint64_t anchors, projection, coarse_init, coarse_train, fine_init, fine_train, surrogate_mc, noise, sampling,
        calibration;

    explicit seed_plan(std::uint64_t master)
        : anchors(derive_seed(master, "anchors")),
          projection(derive_seed(master, "projection")),
          coarse_init(derive_seed(master, "coarse-init")),
          coarse_train(derive_seed(master, "coarse-train")),
          fine_init(derive_seed(master, "fine-init")),
          fine_train(derive_seed(master, "fine-train")),
          surrogate_mc(derive_seed(master, "surrogate-mc")),
          noise(derive_seed(master, "noise")),
          sampling(derive_seed(master, "sampling")),
          calibration(derive_seed(master, "calibration")) {}
};

inline noise_schedule coarse_schedule(const experiment_config& c) {
    return noise_schedule(c.stages.coarse_steps, c.beta_min, c.beta_max);
}

inline noise_schedule fine_schedule(const experiment_config& c) {
    return noise_schedule(c.stages.fine_steps, c.beta_min, c.beta_max);
}

// Effective coarse-net settings after the positional ablation.
inline score_net_config effective_coarse_net(const experiment_config& c) {
    score_net_config net = c.coarse_net;
    if (c.ablation.no_positional) {
        net.use_positional = false;
    }
    return net;
}

// ---------------------------------------------------------------------------
// JSON

namespace nn {

inline void to_json(json& j, const optimizer_config& o) {
    j = json{{"method", o.method == optimizer_config::kind::adam ? "adam" : "sgd"},
             {"learning_rate", o.learning_rate},
             {"weight_decay", o.weight_decay},
             {"beta1", o.beta1},
             {"beta2", o.beta2},
             {"eps", o.eps},
             {"clip_norm", o.clip_norm}};
}

inline void from_json(const json& j, optimizer_config& o) {
    const std::string m = j.value("method", std::string(o.method == optimizer_config::kind::adam ? "adam" : "sgd"));
    require(m == "adam" || m == "sgd", error_kind::invalid_argument, "optimizer method must be adam or sgd");
    o.method = m == "adam" ? optimizer_config::kind::adam : optimizer_config::kind::sgd;
    o.learning_rate = j.value("learning_rate", o.learning_rate);
    o.weight_decay = j.value("weight_decay", o.weight_decay);
    o.beta1 = j.value("beta1", o.beta1);
    o.beta2 = j.value("beta2", o.beta2);
    o.eps = j.value("eps", o.eps);
    o.clip_norm = j.value("clip_norm", o.clip_norm);
}

} // namespace nn

inline void to_json(json& j, const training_config& t) {
    j = json{{"optimizer", t.optimizer},
             {"epochs", t.epochs},
             {"patience", t.patience},
             {"draws_per_item", t.draws_per_item},
             {"val_draws", t.val_draws},
             {"weighting", t.weighting == dsm_weighting::beta ? "beta" : "one_minus_alpha_bar"}};
}

inline void from_json(const json& j, training_config& t) {
    if (j.contains("optimizer")) {
        t.optimizer = j.at("optimizer").get<nn::optimizer_config>();
    }
    t.epochs = j.value("epochs", t.epochs);
    t.patience = j.value("patience", t.patience);
    t.draws_per_item = j.value("draws_per_item", t.draws_per_item);
    t.val_draws = j.value("val_draws", t.val_draws);
    const std::string w = j.value("weighting", std::string(t.weighting == dsm_weighting::beta ? "beta" : "one_minus_alpha_bar"));
    require(w == "beta" || w == "one_minus_alpha_bar", error_kind::invalid_argument, "unknown DSM weighting");
    t.weighting = w == "beta" ? dsm_weighting::beta : dsm_weighting::one_minus_alpha_bar;
}

inline void to_json(json& j, const score_net_config& s) {
    j = json{{"width", s.width},
             {"layers", s.layers},
             {"heads", s.heads},
             {"step_dim", s.step_dim},
             {"head_hidden", s.head_hidden},
             {"head_layers", s.head_layers},
             {"use_positional", s.use_positional},
             {"positional_dim", s.positional_dim},
             {"step_base", s.step_base},
             {"inverse_step_frequency", s.inverse_step_frequency},
             {"scale_by_sigma", s.scale_by_sigma}};
}

inline void from_json(const json& j, score_net_config& s) {
    s.width = j.value("width", s.width);
    s.layers = j.value("layers", s.layers);
    s.heads = j.value("heads", s.heads);
    s.step_dim = j.value("step_dim", s.step_dim);
    s.head_hidden = j.value("head_hidden", s.head_hidden);
    s.head_layers = j.value("head_layers", s.head_layers);
    s.use_positional = j.value("use_positional", s.use_positional);
    s.positional_dim = j.value("positional_dim", s.positional_dim);
    s.step_base = j.value("step_base", s.step_base);
    s.inverse_step_frequency = j.value("inverse_step_frequency", s.inverse_step_frequency);
    s.scale_by_sigma = j.value("scale_by_sigma", s.scale_by_sigma);
}

inline void to_json(json& j, const experiment_config& c) {
    j = json{{"seed", c.seed},
             {"graph", c.graph},
             {"episodes", c.episodes},
             {"stages", {{"coarse_steps", c.stages.coarse_steps}, {"fine_steps", c.stages.fine_steps}}},
             {"beta_min", c.beta_min},
             {"beta_max", c.beta_max},
             {"coarse_net", c.coarse_net},
             {"fine_net", c.fine_net},
             {"coarse_train", c.coarse_train},
             {"fine_train", c.fine_train},
             {"anchor_scale", c.anchor_scale},
             {"surrogate",
              {{"depth", c.surrogate.depth},
               {"epochs", c.surrogate.epochs},
               {"learning_rate", c.surrogate.learning_rate},
               {"init_weight", c.surrogate.init_weight},
               {"fit_bias", c.surrogate.fit_bias},
               {"mc_pairs", c.surrogate_mc_pairs}}},
             {"noise", {{"epochs", c.noise.epochs}, {"learning_rate", c.noise.learning_rate}, {"fixed_sigma", c.fixed_noise_sigma}}},
             {"sampling",
              {{"guidance_scale", c.sampling.guidance_scale},
               {"through_network", c.sampling.through_network},
               {"renoise_init", c.sampling.renoise_init},
               {"guidance_grid", c.guidance_grid},
               {"calibration_episodes", c.calibration_episodes},
               {"decode", c.decode == decode_rule::top_k ? "top_k" : "threshold"},
               {"threshold", c.threshold}}},
             {"ablation",
              {{"coarse_only", c.ablation.coarse_only},
               {"fine_only", c.ablation.fine_only},
               {"no_positional", c.ablation.no_positional},
               {"no_noise_model", c.ablation.no_noise_model}}}};
}

// Missing keys keep the defaults already in `c`, so a partial file overlays them.
inline void from_json(const json& j, experiment_config& c) {
    c.seed = j.value("seed", c.seed);
    if (j.contains("graph")) {
        graph_spec g = c.graph;
        from_json(j["graph"], g);
        c.graph = g;
    }
    if (j.contains("episodes")) {
        episode_spec e = c.episodes;
        from_json(j["episodes"], e);
        c.episodes = e;
    }
    if (j.contains("stages")) {
        c.stages.coarse_steps = j["stages"].value("coarse_steps", c.stages.coarse_steps);
        c.stages.fine_steps = j["stages"].value("fine_steps", c.stages.fine_steps);
    }
    c.beta_min = j.value("beta_min", c.beta_min);
    c.beta_max = j.value("beta_max", c.beta_max);
    auto overlay = [&](const char* key, auto& target) {
        if (j.contains(key)) {
            auto copy = target;
            from_json(j[key], copy);
            target = copy;
        }
    };
    overlay("coarse_net", c.coarse_net);
    overlay("fine_net", c.fine_net);
    overlay("coarse_train", c.coarse_train);
    overlay("fine_train", c.fine_train);
    c.anchor_scale = j.value("anchor_scale", c.anchor_scale);
    if (j.contains("surrogate")) {
        const auto& s = j["surrogate"];
        c.surrogate.depth = s.value("depth", c.surrogate.depth);
        c.surrogate.epochs = s.value("epochs", c.surrogate.epochs);
        c.surrogate.learning_rate = s.value("learning_rate", c.surrogate.learning_rate);
        c.surrogate.init_weight = s.value("init_weight", c.surrogate.init_weight);
        c.surrogate.fit_bias = s.value("fit_bias", c.surrogate.fit_bias);
        c.surrogate_mc_pairs = s.value("mc_pairs", c.surrogate_mc_pairs);
    }
    if (j.contains("noise")) {
        c.noise.epochs = j["noise"].value("epochs", c.noise.epochs);
        c.noise.learning_rate = j["noise"].value("learning_rate", c.noise.learning_rate);
        c.fixed_noise_sigma = j["noise"].value("fixed_sigma", c.fixed_noise_sigma);
    }
    if (j.contains("sampling")) {
        const auto& s = j["sampling"];
        c.sampling.guidance_scale = s.value("guidance_scale", c.sampling.guidance_scale);
        c.sampling.through_network = s.value("through_network", c.sampling.through_network);
        c.sampling.renoise_init = s.value("renoise_init", c.sampling.renoise_init);
        c.guidance_grid = s.value("guidance_grid", c.guidance_grid);
        c.calibration_episodes = s.value("calibration_episodes", c.calibration_episodes);
        const std::string d = s.value("decode", std::string(c.decode == decode_rule::top_k ? "top_k" : "threshold"));
        require(d == "top_k" || d == "threshold", error_kind::invalid_argument, "decode must be threshold or top_k");
        c.decode = d == "top_k" ? decode_rule::top_k : decode_rule::threshold;
        c.threshold = s.value("threshold", c.threshold);
    }
    if (j.contains("ablation")) {
        const auto& a = j["ablation"];
        c.ablation.coarse_only = a.value("coarse_only", c.ablation.coarse_only);
        c.ablation.fine_only = a.value("fine_only", c.ablation.fine_only);
        c.ablation.no_positional = a.value("no_positional", c.ablation.no_positional);
        c.ablation.no_noise_model = a.value("no_noise_model", c.ablation.no_noise_model);
    }
}

inline void validate_config(const experiment_config& c) {
    require(c.stages.coarse_steps >= 1 || c.ablation.fine_only, error_kind::invalid_argument,
            "coarse stage needs at least one step");
    require(c.stages.fine_steps >= 0 && c.stages.coarse_steps >= 0, error_kind::invalid_argument,
            "stage lengths must be nonnegative");
    require(!(c.ablation.coarse_only && c.ablation.fine_only), error_kind::invalid_argument,
            "coarse_only and fine_only are exclusive");
    require(c.coarse_train.epochs >= 0 && c.fine_train.epochs >= 0 && c.coarse_train.draws_per_item >= 1 &&
                c.fine_train.draws_per_item >= 1 && c.coarse_train.val_draws >= 1 && c.fine_train.val_draws >= 1,
            error_kind::invalid_argument, "invalid training schedule");
    require(c.fixed_noise_sigma > 0.0, error_kind::invalid_argument, "fixed noise scale must be positive");
    require(c.threshold > 0.0 && c.threshold <= 1.0, error_kind::invalid_argument, "decode threshold must be in (0, 1]");
    require(std::isfinite(c.sampling.guidance_scale) && c.sampling.guidance_scale >= 0.0, error_kind::invalid_argument,
            "guidance scale must be finite and nonnegative");
    for (double w : c.guidance_grid) {
        require(std::isfinite(w) && w >= 0.0, error_kind::invalid_argument, "guidance grid values must be finite and nonnegative");
    }
    require(c.calibration_episodes >= 1, error_kind::invalid_argument, "calibration needs at least one episode");
    require(c.episodes.source_fraction > 0.0 && c.episodes.source_fraction <= 1.0, error_kind::invalid_argument,
            "source fraction must be in (0, 1]");
}

// ---------------------------------------------------------------------------
// Training

struct training_report {
    std::vector<double> train_loss;  // mean per epoch
    std::vector<double> val_loss;
    int best_epoch = -1;             // -1: initial parameters kept
};

// Mini-batch DSM training; one cascade per update. Returns the parameters
// with the lowest validation loss (the initialization counts as epoch -1).
inline score_net train_score_net(score_net net, const std::vector<dsm_item>& train, const std::vector<dsm_item>& val,
                                 const noise_schedule& sched, const training_config& cfg, std::uint64_t seed,
                                 training_report* report = nullptr) {
    require(!train.empty(), error_kind::invalid_argument, "training needs a nonempty dataset");
    const std::vector<dsm_item>& val_set = val.empty() ? train : val;
    std::vector<dsm_item> val_batch;
    for (const auto& item : val_set) {
        for (int d = 0; d < cfg.val_draws; ++d) {
            val_batch.push_back(item);
        }
    }
    const std::uint64_t val_seed = derive_seed(seed, "validation");
    auto validate = [&](const score_net& n) { return dsm_loss(n, val_batch, sched, val_seed, nullptr, cfg.weighting); };

    nn::optimizer opt(cfg.optimizer);
    score_net best = net;
    double best_loss = validate(net);
    int since_best = 0;
    training_report rep;
    std::vector<std::size_t> order(train.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t k = 0; k < order.size(); ++k) {
            order[k] = k;
        }
        rng shuffler(derive_seed(seed, static_cast<std::uint64_t>(epoch)));
        shuffler.shuffle(order);
        double total = 0.0;
        for (std::size_t step = 0; step < order.size(); ++step) {
            const std::vector<dsm_item> batch(static_cast<std::size_t>(cfg.draws_per_item), train[order[step]]);
            nn::vector grad = nn::vector::Zero(net.parameter_count());
            const std::uint64_t batch_seed = derive_seed(derive_seed(seed, static_cast<std::uint64_t>(epoch)), step + 1);
            total += dsm_loss(net, batch, sched, batch_seed, &grad, cfg.weighting);
            require(grad.allFinite(), error_kind::numeric, "non-finite gradient during training");
            opt.step(net.parameters(), grad);
        }
        rep.train_loss.push_back(total / static_cast<double>(order.size()));
        const double v = validate(net);
        rep.val_loss.push_back(v);
        if (v < best_loss) {
            best_loss = v;
            best = net;
            rep.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    if (report) {
        *report = std::move(rep);
    }
    return best;
}

// Coarse-stage examples: cascade graphs with proximity targets and the
// whole-graph positional rows restricted to them.
struct coarse_example {
    cascade_graph cg;
    node_vector proximity;
    feature_matrix positional;
};

inline std::vector<coarse_example> coarse_examples(const graph& whole, const std::vector<const episode*>& eps,
                                                   const feature_matrix* embedding) {
    std::vector<coarse_example> out;
    out.reserve(eps.size());
    for (const episode* e : eps) {
        coarse_example ex;
        ex.cg = build_cascade_graph(whole, e->record);
        ex.proximity = proximity_from_cascade(e->record, ex.cg);
        if (embedding) {
            ex.positional = restrict_to_cascade(*embedding, ex.cg.node_map);
        }
        out.push_back(std::move(ex));
    }
    return out;
}

inline std::vector<dsm_item> as_items(const std::vector<coarse_example>& exs, bool positional) {
    std::vector<dsm_item> items;
    for (const auto& ex : exs) {
        items.push_back({&ex.cg.local, ex.proximity, positional ? &ex.positional : nullptr});
    }
    return items;
}

inline score_net train_coarse(const graph& whole, const std::vector<const episode*>& train,
                              const std::vector<const episode*>& val, const feature_matrix* embedding,
                              const score_net_config& net_cfg, const noise_schedule& sched,
                              const training_config& cfg, std::uint64_t init_seed, std::uint64_t train_seed,
                              training_report* report = nullptr) {
    require(!train.empty(), error_kind::invalid_argument, "coarse training needs a nonempty dataset");
    require(!net_cfg.use_positional || embedding, error_kind::invalid_argument, "positional embedding required");
    const auto tr = coarse_examples(whole, train, net_cfg.use_positional ? embedding : nullptr);
    const auto va = coarse_examples(whole, val, net_cfg.use_positional ? embedding : nullptr);
    return train_score_net(score_net(net_cfg, init_seed), as_items(tr, net_cfg.use_positional),
                           as_items(va, net_cfg.use_positional), sched, cfg, train_seed, report);
}

inline score_net train_fine(const graph& whole, const std::vector<const episode*>& train,
                            const std::vector<const episode*>& val, const score_net_config& net_cfg,
                            const noise_schedule& sched, const training_config& cfg, std::uint64_t init_seed,
                            std::uint64_t train_seed, training_report* report = nullptr) {
    require(!train.empty(), error_kind::invalid_argument, "fine training needs a nonempty dataset");
    require(!net_cfg.use_positional, error_kind::invalid_argument, "the fine stage takes no positional input");
    auto items = [&](const std::vector<const episode*>& eps) {
        std::vector<dsm_item> out;
        for (const episode* e : eps) {
            out.push_back({&whole, e->indicator(whole.node_count()), nullptr});
        }
        return out;
    };
    return train_score_net(score_net(net_cfg, init_seed), items(train), items(val), sched, cfg, train_seed, report);
}

// Training pairs for the surrogate: labelled training episodes plus fresh
// Monte-Carlo cascades drawn with the dataset's own IC settings.
inline std::vector<surrogate_example> surrogate_examples(const graph& whole, const std::vector<const episode*>& train,
                                                         const episode_spec& spec, int mc_pairs, std::uint64_t seed) {
    std::vector<surrogate_example> out;
    for (const episode* e : train) {
        out.push_back({e->sources(), e->observation(whole.node_count())});
    }
    for (int k = 0; k < mc_pairs; ++k) {
        rng gen(derive_seed(seed, static_cast<std::uint64_t>(k)));
        const int count = spec.min_seeds + static_cast<int>(gen.below(spec.max_seeds - spec.min_seeds + 1));
        std::set<node_id> seeds;
        while (static_cast<int>(seeds.size()) < count) {
            seeds.insert(static_cast<node_id>(gen.below(whole.node_count())));
        }
        auto sim = simulate_ic(whole, seeds, spec.ic, gen.next_u64());
        sources_from_cascade(sim.record, whole.node_count(), spec.source_fraction);
        std::set<node_id> labelled;
        for (std::size_t s = 0; s < sim.record.source_count; ++s) {
            labelled.insert(sim.record.entries[s].node);
        }
        out.push_back({std::move(labelled), std::move(sim.observation)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Bundle

struct bundle_reports {
    training_report coarse, fine;
    surrogate_fit_report surrogate;
    std::vector<double> calibration_f1;  // one per guidance_grid entry
};

struct trained_bundle {
    experiment_config config;
    graph whole;
    anchor_sets anchors;
    positional_projection projection;
    feature_matrix embedding;  // derived from anchors + projection
    std::optional<score_net> coarse;
    std::optional<score_net> fine;
    std::optional<dissemination_surrogate> surrogate;
    std::optional<noise_variance_model> noise;
    std::optional<double> guidance;  // calibrated weight, overrides sampling.guidance_scale
    bundle_reports reports;

    bool complete() const { return coarse && fine && surrogate && noise; }
};

enum class stage_mask : unsigned { coarse = 1, fine = 2, surrogate = 4, noise = 8, guidance = 16, all = 31 };

inline bool has_stage(unsigned mask, stage_mask s) { return (mask & static_cast<unsigned>(s)) != 0; }

inline trained_bundle make_bundle(const experiment_config& cfg, const graph& whole) {
    validate_config(cfg);
    const seed_plan seeds(cfg.seed);
    trained_bundle b;
    b.config = cfg;
    b.whole = whole;
    b.anchors = sample_anchor_sets(whole, seeds.anchors, cfg.anchor_scale);
    b.projection = positional_projection::random(static_cast<Eigen::Index>(b.anchors.size()),
                                                 cfg.coarse_net.positional_dim, seeds.projection);
    b.embedding = embed_nodes(whole, b.anchors, b.projection);
    return b;
}

// Learned components only; train_stages below adds guidance calibration.
inline void train_components(trained_bundle& b, const dataset_bundle& data, unsigned mask) {
    require(b.whole == data.whole, error_kind::invalid_argument, "dataset graph differs from bundle graph");
    const experiment_config& cfg = b.config;
    const seed_plan seeds(cfg.seed);
    const auto train = data.part(split::train);
    const auto val = data.part(split::val);
    require(!train.empty(), error_kind::data, "dataset has no training episodes");
    const int n = b.whole.node_count();

    if (has_stage(mask, stage_mask::coarse) && cfg.stages.coarse_steps >= 1) {
        b.coarse = train_coarse(b.whole, train, val, &b.embedding, effective_coarse_net(cfg), coarse_schedule(cfg),
                                cfg.coarse_train, seeds.coarse_init, seeds.coarse_train, &b.reports.coarse);
    }
    if (has_stage(mask, stage_mask::fine) && cfg.stages.fine_steps >= 1) {
        b.fine = train_fine(b.whole, train, val, cfg.fine_net, fine_schedule(cfg), cfg.fine_train, seeds.fine_init,
                            seeds.fine_train, &b.reports.fine);
    }
    if (has_stage(mask, stage_mask::surrogate)) {
        b.surrogate = fit_surrogate(
            b.whole, surrogate_examples(b.whole, train, cfg.episodes,
                                        cfg.surrogate_mc_pairs, seeds.surrogate_mc),
            cfg.surrogate, &b.reports.surrogate);
    }
    if (has_stage(mask, stage_mask::noise)) {
        if (cfg.ablation.no_noise_model) {
            b.noise = noise_variance_model::constant(cfg.fixed_noise_sigma);
        } else {
            require(b.surrogate.has_value(), error_kind::invalid_argument, "noise fit needs a fitted surrogate");
            std::vector<noise_example> pairs;
            for (const episode* e : train) {
                pairs.push_back({e->indicator(n), e->observation(n)});
            }
            noise_fit_config nc = cfg.noise;
            nc.seed = seeds.noise;
            b.noise = fit_noise_model(pairs, *b.surrogate, b.whole,
                                      cfg.stages.fine_steps >= 1 ? fine_schedule(cfg) : noise_schedule(1), nc);
        }
    }
}

// ---------------------------------------------------------------------------
// Localization

struct localization {
    std::set<node_id> sources;
    node_vector indicator;       // whole graph; i0 for the fine stage, lifted x for coarse-only
    node_vector coarse;          // on the cascade graph (empty when fine_only)
    std::vector<node_id> node_map;
    std::vector<double> residuals;
    double coarse_seconds = 0.0;
    double fine_seconds = 0.0;
};

inline std::set<node_id> decode(const node_vector& v, const node_vector& y, const experiment_config& cfg, bool force_top_k) {
    if (force_top_k || cfg.decode == decode_rule::top_k) {
        const auto affected = static_cast<std::size_t>((y.array() < 0.5).count());
        return indicator_to_top_k(v, source_count_for(std::max<std::size_t>(affected, 1), cfg.episodes.source_fraction));
    }
    return indicator_to_sources(v, cfg.threshold);
}

// The calibrated weight applies while the config still asks for calibration;
// clearing guidance_grid falls back to sampling.guidance_scale.
inline double guidance_weight(const trained_bundle& b) {
    return b.guidance && !b.config.guidance_grid.empty() ? *b.guidance : b.config.sampling.guidance_scale;
}

// Fine stage from the coarse sample `coarse` on `cg`, or from N(0, I) when
// `cg` is null.
inline fine_result run_fine_stage(const trained_bundle& b, const node_vector& y, const node_vector& coarse,
                                  const cascade_graph* cg, std::uint64_t seed, double weight) {
    require(b.fine && b.surrogate && b.noise, error_kind::invalid_argument, "bundle lacks fine-stage components");
    fine_options opt = b.config.sampling;
    opt.guidance_scale = weight;
    const auto sched = fine_schedule(b.config);
    if (!cg) {
        return sample_fine(*b.fine, *b.surrogate, *b.noise, y,
                           initial_noise(b.whole.node_count(), derive_seed(seed, "fine-init")), b.whole, sched,
                           derive_seed(seed, "fine"), opt);
    }
    return sample_fine(*b.fine, *b.surrogate, *b.noise, y, coarse, *cg, b.whole, sched, derive_seed(seed, "fine"), opt);
}

// Two-stage localization. `record` supplies the affected node set for the
// cascade graph; only its node set is used.
inline localization localize(const trained_bundle& b, const node_vector& y, const cascade& record, std::uint64_t seed) {
    using clock = std::chrono::steady_clock;
    const experiment_config& cfg = b.config;
    const int n = b.whole.node_count();
    require(y.size() == n, error_kind::invalid_argument, "observation does not match bundle graph");
    validate_cascade(record, n);
    localization out;

    if (cfg.ablation.fine_only) {
        const auto t0 = clock::now();
        auto res = run_fine_stage(b, y, {}, nullptr, seed, guidance_weight(b));
        out.fine_seconds = std::chrono::duration<double>(clock::now() - t0).count();
        out.indicator = std::move(res.indicator);
        out.residuals = std::move(res.residuals);
        out.sources = decode(out.indicator, y, cfg, true);
        return out;
    }

    require(b.coarse.has_value(), error_kind::invalid_argument, "bundle lacks a coarse net");
    const cascade_graph cg = build_cascade_graph(b.whole, record);
    out.node_map = cg.node_map;
    const bool pos = b.coarse->config().use_positional;
    const feature_matrix positional = pos ? restrict_to_cascade(b.embedding, cg.node_map) : feature_matrix{};
    const auto t0 = clock::now();
    out.coarse = sample_coarse(*b.coarse, cg.local, pos ? &positional : nullptr, coarse_schedule(cfg),
                               derive_seed(seed, "coarse"));
    out.coarse_seconds = std::chrono::duration<double>(clock::now() - t0).count();

    if (cfg.ablation.coarse_only || cfg.stages.fine_steps == 0) {
        out.indicator = lift_to_whole(out.coarse, cg, n);
        out.sources = decode(out.indicator, y, cfg, false);
        return out;
    }
    const auto t1 = clock::now();
    auto res = run_fine_stage(b, y, out.coarse, &cg, seed, guidance_weight(b));
    out.fine_seconds = std::chrono::duration<double>(clock::now() - t1).count();
    out.indicator = std::move(res.indicator);
    out.residuals = std::move(res.residuals);
    out.sources = decode(out.indicator, y, cfg, false);
    return out;
}

inline localization localize(const trained_bundle& b, const episode& e, std::uint64_t seed) {
    return localize(b, e.observation(b.whole.node_count()), e.record, seed);
}

// ---------------------------------------------------------------------------
// Guidance calibration

inline double source_f1(const std::set<node_id>& predicted, const std::set<node_id>& truth) {
    std::size_t tp = 0;
    for (node_id v : predicted) {
        tp += truth.count(v);
    }
    return tp == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(predicted.size() + truth.size());
}

// Mean validation F1 for each weight in guidance_grid; picks the best, ties to
// the earlier entry. Coarse samples are drawn once per episode and shared.
inline void calibrate_guidance(trained_bundle& b, const std::vector<const episode*>& val) {
    const experiment_config& cfg = b.config;
    b.guidance.reset();
    b.reports.calibration_f1.clear();
    if (cfg.guidance_grid.empty() || val.empty() || cfg.ablation.coarse_only || cfg.stages.fine_steps < 1) {
        return;
    }
    require(cfg.ablation.fine_only || b.coarse.has_value(), error_kind::invalid_argument, "bundle lacks a coarse net");
    const seed_plan seeds(cfg.seed);
    const int n = b.whole.node_count();
    const std::size_t count = std::min(val.size(), static_cast<std::size_t>(cfg.calibration_episodes));
    std::vector<double> score(cfg.guidance_grid.size(), 0.0);
    for (std::size_t k = 0; k < count; ++k) {
        const episode& e = *val[k];
        const std::uint64_t seed = derive_seed(seeds.calibration, static_cast<std::uint64_t>(e.id));
        const node_vector y = e.observation(n);
        const std::set<node_id> truth = e.sources();
        std::optional<cascade_graph> cg;
        node_vector coarse;
        if (!cfg.ablation.fine_only) {
            cg = build_cascade_graph(b.whole, e.record);
            const bool pos = b.coarse->config().use_positional;
            const feature_matrix positional = pos ? restrict_to_cascade(b.embedding, cg->node_map) : feature_matrix{};
            coarse = sample_coarse(*b.coarse, cg->local, pos ? &positional : nullptr, coarse_schedule(cfg),
                                   derive_seed(seed, "coarse"));
        }
        for (std::size_t w = 0; w < cfg.guidance_grid.size(); ++w) {
            const auto res = run_fine_stage(b, y, coarse, cg ? &*cg : nullptr, seed, cfg.guidance_grid[w]);
            score[w] += source_f1(decode(res.indicator, y, cfg, cfg.ablation.fine_only), truth);
        }
    }
    std::size_t best = 0;
    for (std::size_t w = 0; w < score.size(); ++w) {
        score[w] /= static_cast<double>(count);
        if (score[w] > score[best]) {
            best = w;
        }
    }
    b.reports.calibration_f1 = score;
    b.guidance = cfg.guidance_grid[best];
}

// Train the stages selected by `mask` into `b`. The noise stage needs a
// surrogate, either already present or trained in the same call; guidance
// calibration needs every other component.
inline void train_stages(trained_bundle& b, const dataset_bundle& data, unsigned mask) {
    train_components(b, data, mask);
    if (has_stage(mask, stage_mask::guidance)) {
        calibrate_guidance(b, data.part(split::val));
    }
}

inline trained_bundle train_bundle(const experiment_config& cfg, const dataset_bundle& data) {
    trained_bundle b = make_bundle(cfg, data.whole);
    train_stages(b, data, static_cast<unsigned>(stage_mask::all));
    return b;
}

} // namespace sldiff
