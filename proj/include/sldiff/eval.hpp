#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "checkpoint.hpp"
#include "data_io.hpp"
#include "graph.hpp"
#include "pipeline.hpp"

namespace sldiff {

// ---------------------------------------------------------------------------
// Metrics

struct metrics_report {
    double re = 0.0, pr = 0.0, f1 = 0.0, acc = 0.0;
    long tp = 0, fp = 0, fn = 0, tn = 0;
};

inline double f1_score(double pr, double re) { return pr + re > 0.0 ? 2.0 * pr * re / (pr + re) : 0.0; }

inline metrics_report metrics_from_counts(long tp, long fp, long fn, long tn) {
    metrics_report m;
    m.tp = tp;
    m.fp = fp;
    m.fn = fn;
    m.tn = tn;
    m.pr = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    m.re = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    m.f1 = f1_score(m.pr, m.re);
    const long total = tp + fp + fn + tn;
    m.acc = total > 0 ? static_cast<double>(tp + tn) / static_cast<double>(total) : 0.0;
    return m;
}

// Sources are the positive class; `truth` uses 0 = source.
inline metrics_report compute_metrics(const std::set<node_id>& predicted, const node_vector& truth) {
    long tp = 0, fp = 0, fn = 0, tn = 0;
    for (Eigen::Index v = 0; v < truth.size(); ++v) {
        require(truth[v] == 0.0 || truth[v] == 1.0, error_kind::invalid_argument, "ground-truth indicator must be binary");
    }
    for (node_id v : predicted) {
        require(v >= 0 && v < truth.size(), error_kind::invalid_argument, "predicted node outside graph");
    }
    for (Eigen::Index v = 0; v < truth.size(); ++v) {
        const bool pred = predicted.count(static_cast<node_id>(v)) > 0;
        const bool src = truth[v] == 0.0;
        tp += pred && src;
        fp += pred && !src;
        fn += !pred && src;
        tn += !pred && !src;
    }
    return metrics_from_counts(tp, fp, fn, tn);
}

// Unweighted mean of the per-episode rates; counts are summed.
inline metrics_report mean_metrics(const std::vector<metrics_report>& per_episode) {
    metrics_report m;
    if (per_episode.empty()) {
        return m;
    }
    for (const auto& r : per_episode) {
        m.re += r.re;
        m.pr += r.pr;
        m.f1 += r.f1;
        m.acc += r.acc;
        m.tp += r.tp;
        m.fp += r.fp;
        m.fn += r.fn;
        m.tn += r.tn;
    }
    const double k = static_cast<double>(per_episode.size());
    m.re /= k;
    m.pr /= k;
    m.f1 /= k;
    m.acc /= k;
    return m;
}

// ---------------------------------------------------------------------------
// LPSI baseline

struct lpsi_result {
    node_vector scores;
    std::set<node_id> sources;
    double residual = 0.0;
    int iterations = 0;
};

// Label propagation e = alpha S e + (1 - alpha) b with S = D^-1/2 A D^-1/2 and
// b = +1 on affected nodes, -1 elsewhere. Sources are affected nodes whose
// score strictly exceeds every neighbour's.
inline lpsi_result lpsi_baseline(const graph& g, const node_vector& y, double alpha = 0.5, int max_iterations = 1000,
                                 double tolerance = 1e-12) {
    require(alpha > 0.0 && alpha < 1.0, error_kind::invalid_argument, "LPSI alpha must be in (0,1)");
    require(y.size() == g.node_count(), error_kind::invalid_argument, "observation does not match graph");
    const int n = g.node_count();
    node_vector b(n);
    for (int v = 0; v < n; ++v) {
        require(y[v] == 0.0 || y[v] == 1.0, error_kind::invalid_argument, "LPSI needs a binary observation");
        b[v] = y[v] == 0.0 ? 1.0 : -1.0;
    }
    node_vector inv_sqrt_deg(n);
    for (int v = 0; v < n; ++v) {
        inv_sqrt_deg[v] = g.degree(v) > 0 ? 1.0 / std::sqrt(static_cast<double>(g.degree(v))) : 0.0;
    }
    auto apply_s = [&](const node_vector& e) {
        node_vector out = node_vector::Zero(n);
        for (int v = 0; v < n; ++v) {
            double acc = 0.0;
            for (int s = g.slot_begin(v); s < g.slot_end(v); ++s) {
                const node_id u = g.neighbors()[s];
                acc += inv_sqrt_deg[u] * e[u];
            }
            out[v] = inv_sqrt_deg[v] * acc;
        }
        return out;
    };
    lpsi_result res;
    node_vector e = (1.0 - alpha) * b;
    for (res.iterations = 1; res.iterations <= max_iterations; ++res.iterations) {
        const node_vector next = alpha * apply_s(e) + (1.0 - alpha) * b;
        res.residual = (next - e).lpNorm<Eigen::Infinity>();
        e = next;
        if (res.residual <= tolerance) {
            break;
        }
    }
    res.residual = (alpha * apply_s(e) + (1.0 - alpha) * b - e).lpNorm<Eigen::Infinity>();
    if (res.residual > std::max(tolerance, 1e-10)) {
        std::ostringstream msg;
        msg << "LPSI did not converge in " << max_iterations << " iterations (residual " << res.residual << ")";
        throw error(error_kind::numeric, msg.str());
    }
    res.iterations = std::min(res.iterations, max_iterations);
    res.scores = e;
    for (int v = 0; v < n; ++v) {
        if (y[v] != 0.0) {
            continue;
        }
        bool peak = true;
        for (node_id u : g.neighbors_of(v)) {
            peak = peak && e[v] > e[u];
        }
        if (peak) {
            res.sources.insert(v);
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Evaluation runs

// Calls body(k) for k in [0, count) on up to `jobs` threads. Each index is
// handled exactly once; the first exception is rethrown.
inline void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& body) {
    if (jobs <= 1 || count <= 1) {
        for (std::size_t k = 0; k < count; ++k) {
            body(k);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    const auto workers = static_cast<std::size_t>(std::min<std::size_t>(static_cast<std::size_t>(jobs), count));
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t k = next++; k < count; k = next++) {
                try {
                    body(k);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) {
                        failure = std::current_exception();
                    }
                }
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
}

struct sweep_result {
    std::string configuration;  // "full", "sl_diff_1", "rt=0.1", "lpsi", ...
    std::uint64_t seed = 0;
    int coarse_steps = 0;
    int fine_steps = 0;
    metrics_report metrics;
    double coarse_seconds = 0.0;  // summed sampling wall time over episodes
    double fine_seconds = 0.0;
    std::size_t episodes = 0;
};

struct episode_outcome {
    int episode_id = 0;
    std::set<node_id> predicted;
    metrics_report metrics;
    double coarse_seconds = 0.0;
    double fine_seconds = 0.0;
    double first_residual = 0.0;
    double last_residual = 0.0;
};

// Per-episode sampling seed: independent of the evaluation order.
inline std::uint64_t episode_seed(std::uint64_t seed, int episode_id) {
    return derive_seed(derive_seed(seed, "episode"), static_cast<std::uint64_t>(episode_id));
}

inline std::vector<episode_outcome> evaluate_episodes(const trained_bundle& b, const std::vector<const episode*>& eps,
                                                      std::uint64_t seed, int jobs = 1) {
    std::vector<episode_outcome> out(eps.size());
    const int n = b.whole.node_count();
    parallel_for(eps.size(), jobs, [&](std::size_t k) {
        const episode& e = *eps[k];
        const auto loc = localize(b, e, episode_seed(seed, e.id));
        episode_outcome& o = out[k];
        o.episode_id = e.id;
        o.predicted = loc.sources;
        o.metrics = compute_metrics(loc.sources, e.indicator(n));
        o.coarse_seconds = loc.coarse_seconds;
        o.fine_seconds = loc.fine_seconds;
        if (!loc.residuals.empty()) {
            o.first_residual = loc.residuals.front();
            o.last_residual = loc.residuals.back();
        }
    });
    return out;
}

inline sweep_result summarize(std::string configuration, std::uint64_t seed, const experiment_config& cfg,
                              const std::vector<episode_outcome>& outcomes) {
    sweep_result r;
    r.configuration = std::move(configuration);
    r.seed = seed;
    r.coarse_steps = cfg.ablation.fine_only ? 0 : cfg.stages.coarse_steps;
    r.fine_steps = cfg.ablation.coarse_only ? 0 : cfg.stages.fine_steps;
    std::vector<metrics_report> ms;
    for (const auto& o : outcomes) {
        ms.push_back(o.metrics);
        r.coarse_seconds += o.coarse_seconds;
        r.fine_seconds += o.fine_seconds;
    }
    r.metrics = mean_metrics(ms);
    r.episodes = outcomes.size();
    return r;
}

inline sweep_result trivial_baseline(const dataset_bundle& data, split part) {
    std::vector<metrics_report> ms;
    for (const episode* e : data.part(part)) {
        ms.push_back(compute_metrics({}, e->indicator(data.whole.node_count())));
    }
    sweep_result r;
    r.configuration = "all_non_source";
    r.metrics = mean_metrics(ms);
    r.episodes = ms.size();
    return r;
}

inline sweep_result lpsi_row(const dataset_bundle& data, split part, double alpha = 0.5) {
    std::vector<metrics_report> ms;
    const int n = data.whole.node_count();
    for (const episode* e : data.part(part)) {
        ms.push_back(compute_metrics(lpsi_baseline(data.whole, e->observation(n), alpha).sources, e->indicator(n)));
    }
    sweep_result r;
    r.configuration = "lpsi";
    r.metrics = mean_metrics(ms);
    r.episodes = ms.size();
    return r;
}

// Trained components keyed by the configuration slice that determines them,
// so variants that share a stage reuse it bit for bit.
class component_cache {
public:
    trained_bundle bundle_for(const experiment_config& cfg, const dataset_bundle& data) {
        trained_bundle b = make_bundle(cfg, data.whole);
        const auto k = keys_of(cfg);
        unsigned need = 0;
        if (k.want_coarse) {
            if (auto it = coarse_.find(k.coarse); it != coarse_.end()) {
                b.coarse = it->second.first;
                b.reports.coarse = it->second.second;
            } else {
                need |= static_cast<unsigned>(stage_mask::coarse);
            }
        }
        if (k.want_fine) {
            if (auto it = fine_.find(k.fine); it != fine_.end()) {
                b.fine = it->second.first;
                b.reports.fine = it->second.second;
            } else {
                need |= static_cast<unsigned>(stage_mask::fine);
            }
            if (auto it = surrogate_.find(k.surrogate); it != surrogate_.end()) {
                b.surrogate = it->second;
            } else {
                need |= static_cast<unsigned>(stage_mask::surrogate);
            }
            if (auto it = noise_.find(k.noise); it != noise_.end()) {
                b.noise = it->second;
            } else {
                need |= static_cast<unsigned>(stage_mask::noise);
            }
            if (auto it = guidance_.find(k.guidance); it != guidance_.end()) {
                b.guidance = it->second.first;
                b.reports.calibration_f1 = it->second.second;
            } else {
                need |= static_cast<unsigned>(stage_mask::guidance);
            }
        }
        if (need) {
            train_stages(b, data, need);
        }
        adopt(b);
        return b;
    }

    // Register the components of an already trained bundle.
    void adopt(const trained_bundle& b) {
        const auto k = keys_of(b.config);
        if (k.want_coarse && b.coarse) {
            coarse_.try_emplace(k.coarse, *b.coarse, b.reports.coarse);
        }
        if (k.want_fine) {
            if (b.fine) {
                fine_.try_emplace(k.fine, *b.fine, b.reports.fine);
            }
            if (b.surrogate) {
                surrogate_.try_emplace(k.surrogate, *b.surrogate);
            }
            if (b.noise) {
                noise_.try_emplace(k.noise, *b.noise);
            }
            if (b.guidance) {
                guidance_.try_emplace(k.guidance, *b.guidance, b.reports.calibration_f1);
            }
        }
    }

    std::size_t trained_components() const {
        return coarse_.size() + fine_.size() + surrogate_.size() + noise_.size() + guidance_.size();
    }

private:
    struct keys {
        std::string coarse, fine, surrogate, noise, guidance;
        bool want_coarse = false, want_fine = false;
    };

    static keys keys_of(const experiment_config& cfg) {
        const json j = cfg;
        const json base = {{"seed", j["seed"]}, {"beta", {j["beta_min"], j["beta_max"]}}};
        keys k;
        k.coarse = json{base, j["coarse_net"], j["coarse_train"], cfg.stages.coarse_steps, cfg.ablation.no_positional,
                        j["anchor_scale"]}.dump();
        k.fine = json{base, j["fine_net"], j["fine_train"], cfg.stages.fine_steps}.dump();
        k.surrogate = json{base, j["surrogate"], j["episodes"]}.dump();
        k.noise = json{k.surrogate, j["noise"], cfg.stages.fine_steps, cfg.ablation.no_noise_model}.dump();
        // calibration sees every component and sampling setting except the weight itself
        json calib = j;
        calib["sampling"].erase("guidance_scale");
        k.guidance = calib.dump();
        k.want_coarse = !cfg.ablation.fine_only && cfg.stages.coarse_steps >= 1;
        k.want_fine = !cfg.ablation.coarse_only && cfg.stages.fine_steps >= 1;
        return k;
    }

    std::map<std::string, std::pair<score_net, training_report>> coarse_;
    std::map<std::string, std::pair<score_net, training_report>> fine_;
    std::map<std::string, dissemination_surrogate> surrogate_;
    std::map<std::string, noise_variance_model> noise_;
    std::map<std::string, std::pair<double, std::vector<double>>> guidance_;
};

struct variant {
    std::string id;
    experiment_config config;
};

// Full model plus the four ablations, all with `total` diffusion steps:
// (1) coarse only, (2) fine only from N(0, I) with top-K decode,
// (3) no positional representation, (4) no learned observation noise.
inline std::vector<variant> ablation_variants(const experiment_config& base, int total) {
    experiment_config full = base;
    full.ablation = {};
    if (total > 0) {
        full.stages.coarse_steps = total - base.stages.fine_steps;
        require(full.stages.coarse_steps >= 1, error_kind::invalid_argument, "fine stage exceeds the step budget");
    }
    const int budget = full.stages.coarse_steps + full.stages.fine_steps;
    std::vector<variant> out{{"full", full}};
    experiment_config v1 = full;
    v1.ablation.coarse_only = true;
    v1.stages = {budget, 0};
    out.push_back({"sl_diff_1", v1});
    experiment_config v2 = full;
    v2.ablation.fine_only = true;
    v2.stages = {0, budget};
    out.push_back({"sl_diff_2", v2});
    experiment_config v3 = full;
    v3.ablation.no_positional = true;
    out.push_back({"sl_diff_3", v3});
    experiment_config v4 = full;
    v4.ablation.no_noise_model = true;
    out.push_back({"sl_diff_4", v4});
    return out;
}

struct run_options {
    split part = split::test;
    std::vector<std::uint64_t> seeds{1};
    int jobs = 1;
    std::function<void(const std::string&)> log;
};

inline std::vector<sweep_result> evaluate_variant(const variant& v, const dataset_bundle& data, component_cache& cache,
                                                  const run_options& opt) {
    if (opt.log) {
        opt.log("training/loading components for " + v.id);
    }
    const trained_bundle b = cache.bundle_for(v.config, data);
    std::vector<sweep_result> rows;
    for (std::uint64_t s : opt.seeds) {
        if (opt.log) {
            opt.log("sampling " + v.id + " seed " + std::to_string(s));
        }
        rows.push_back(summarize(v.id, s, v.config, evaluate_episodes(b, data.part(opt.part), s, opt.jobs)));
    }
    return rows;
}

inline std::vector<sweep_result> run_ablations(const experiment_config& base, const dataset_bundle& data,
                                               component_cache& cache, const run_options& opt, int total = 800) {
    std::vector<sweep_result> rows;
    for (const auto& v : ablation_variants(base, total)) {
        auto r = evaluate_variant(v, data, cache, opt);
        rows.insert(rows.end(), r.begin(), r.end());
    }
    return rows;
}

inline std::string ratio_label(double ratio) {
    std::ostringstream s;
    s << "rt=" << ratio;
    return s.str();
}

// One configuration per ratio R_T = T2 / T1 at a constant step total. Ratios
// leaving the coarse stage without steps are skipped (reported via log).
inline std::vector<sweep_result> sweep_ratio(const experiment_config& base, const dataset_bundle& data,
                                             const std::vector<double>& ratios, int total, component_cache& cache,
                                             const run_options& opt) {
    std::vector<sweep_result> rows;
    for (double r : ratios) {
        if (!(r >= 0.0) || !std::isfinite(r)) {
            if (opt.log) {
                opt.log("skipping infeasible ratio " + std::to_string(r));
            }
            continue;
        }
        const stage_config st = split_steps(total, r);
        if (st.coarse_steps < 1 || (r > 0.0 && st.fine_steps < 1)) {
            if (opt.log) {
                opt.log("skipping infeasible ratio " + std::to_string(r));
            }
            continue;
        }
        experiment_config c = base;
        c.ablation = {};
        c.stages = st;
        if (st.fine_steps == 0) {
            c.ablation.coarse_only = true;
        }
        auto part = evaluate_variant({ratio_label(r), c}, data, cache, opt);
        rows.insert(rows.end(), part.begin(), part.end());
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Result files

inline std::string config_hash(const json& resolved) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : resolved.dump()) {
        h = (h ^ c) * 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline const std::vector<std::string>& metric_columns() {
    static const std::vector<std::string> cols{"RE", "PR", "F1", "ACC", "TP", "FP", "FN", "TN"};
    return cols;
}

inline std::string metric_value(const metrics_report& m, const std::string& name) {
    if (name == "RE") return format_real(m.re);
    if (name == "PR") return format_real(m.pr);
    if (name == "F1") return format_real(m.f1);
    if (name == "ACC") return format_real(m.acc);
    if (name == "TP") return std::to_string(m.tp);
    if (name == "FP") return std::to_string(m.fp);
    if (name == "FN") return std::to_string(m.fn);
    return std::to_string(m.tn);
}

inline json results_json(const std::vector<sweep_result>& rows, const json& meta) {
    json out = {{"meta", meta}, {"rows", json::array()}};
    for (const auto& r : rows) {
        json m = json::object();
        for (const auto& c : metric_columns()) {
            m[c] = metric_value(r.metrics, c);
        }
        out["rows"].push_back({{"configuration", r.configuration},
                               {"seed", r.seed},
                               {"coarse_steps", r.coarse_steps},
                               {"fine_steps", r.fine_steps},
                               {"episodes", r.episodes},
                               {"metrics", m}});
    }
    return out;
}

inline std::vector<sweep_result> results_from_json(const json& j) {
    std::vector<sweep_result> rows;
    for (const auto& row : j.at("rows")) {
        sweep_result r;
        r.configuration = row.at("configuration").get<std::string>();
        r.seed = row.at("seed").get<std::uint64_t>();
        r.coarse_steps = row.at("coarse_steps").get<int>();
        r.fine_steps = row.at("fine_steps").get<int>();
        r.episodes = row.at("episodes").get<std::size_t>();
        const auto& m = row.at("metrics");
        r.metrics.re = std::stod(m.at("RE").get<std::string>());
        r.metrics.pr = std::stod(m.at("PR").get<std::string>());
        r.metrics.f1 = std::stod(m.at("F1").get<std::string>());
        r.metrics.acc = std::stod(m.at("ACC").get<std::string>());
        r.metrics.tp = std::stol(m.at("TP").get<std::string>());
        r.metrics.fp = std::stol(m.at("FP").get<std::string>());
        r.metrics.fn = std::stol(m.at("FN").get<std::string>());
        r.metrics.tn = std::stol(m.at("TN").get<std::string>());
        rows.push_back(std::move(r));
    }
    return rows;
}

// results.csv (configuration,seed,coarse_steps,fine_steps,metric,value) and
// results.json are deterministic; wall-clock timings go to timings.json.
inline void emit_results(const std::vector<sweep_result>& rows, const fs::path& dir, const json& meta) {
    std::ostringstream csv;
    csv << "configuration,seed,coarse_steps,fine_steps,metric,value\n";
    for (const auto& r : rows) {
        for (const auto& c : metric_columns()) {
            csv << r.configuration << ',' << r.seed << ',' << r.coarse_steps << ',' << r.fine_steps << ',' << c << ','
                << metric_value(r.metrics, c) << '\n';
        }
    }
    write_file_atomic(dir / "results.csv", csv.str());
    write_file_atomic(dir / "results.json", results_json(rows, meta).dump(2) + "\n");
    json timings = json::array();
    for (const auto& r : rows) {
        timings.push_back({{"configuration", r.configuration},
                           {"seed", r.seed},
                           {"coarse_seconds", r.coarse_seconds},
                           {"fine_seconds", r.fine_seconds}});
    }
    write_file_atomic(dir / "timings.json", timings.dump(2) + "\n");
}

// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() == b.size() && a.size() >= 2, error_kind::invalid_argument, "spearman needs paired samples");
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        for (std::size_t k = 0; k < idx.size(); ++k) {
            idx[k] = k;
        }
        std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < idx.size();) {
            std::size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) {
                ++j;
            }
            for (std::size_t k = i; k <= j; ++k) {
                r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
            }
            i = j + 1;
        }
        return r;
    };
    const auto ra = ranks(a);
    const auto rb = ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t k = 0; k < ra.size(); ++k) {
        sab += (ra[k] - ma) * (rb[k] - mb);
        saa += (ra[k] - ma) * (ra[k] - ma);
        sbb += (rb[k] - mb) * (rb[k] - mb);
    }
    return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

} // namespace sldiff
