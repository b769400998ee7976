// sldiff: data generation, training, localization, evaluation and R_T sweeps.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "sldiff/sldiff.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace sldiff;

namespace {

enum exit_code : int {
    exit_ok = 0,
    exit_internal = 1,
    exit_usage = 2,
    exit_data = 3,
    exit_numeric = 4,
    exit_schema = 5,
    exit_threshold = 6,
};

fs::path data_root() {
    const char* env = std::getenv("SLDIFF_DATA_DIR");
    return env && *env ? fs::path(env) : fs::path("data");
}

// Shared options: config file, dotted overrides and a few common flags.
struct common_options {
    std::string config_file;
    std::vector<std::string> overrides;  // key.path=json-value
    std::optional<std::uint64_t> seed;
    int jobs = 1;
};

void add_common(CLI::App* cmd, common_options& o) {
    cmd->add_option("--config", o.config_file, "JSON config file (overlays built-in defaults)");
    cmd->add_option("--set", o.overrides, "Override a config value, e.g. --set coarse_train.epochs=5");
    cmd->add_option("--seed", o.seed, "Master seed");
    cmd->add_option("--jobs", o.jobs, "Parallel episode workers")->check(CLI::PositiveNumber);
}

// Defaults <- file <- flags.
experiment_config resolve_config(const common_options& o, const std::optional<experiment_config>& base = {}) {
    json j = base ? json(*base) : json(experiment_config{});
    if (!o.config_file.empty()) {
        const std::string text = read_file(o.config_file);
        json file;
        try {
            file = json::parse(text);
        } catch (const json::exception& e) {
            throw error(error_kind::invalid_argument, "config file is not valid JSON: " + std::string(e.what()));
        }
        j.merge_patch(file);
    }
    for (const auto& kv : o.overrides) {
        const auto eq = kv.find('=');
        require(eq != std::string::npos && eq > 0, error_kind::invalid_argument, "--set expects key=value, got '" + kv + "'");
        std::string pointer = "/" + kv.substr(0, eq);
        for (auto& c : pointer) {
            if (c == '.') {
                c = '/';
            }
        }
        const std::string raw = kv.substr(eq + 1);
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::exception&) {
            value = raw;
        }
        const json::json_pointer ptr(pointer);
        require(j.contains(ptr), error_kind::invalid_argument, "unknown config key '" + kv.substr(0, eq) + "'");
        j[ptr] = value;
    }
    if (o.seed) {
        j["seed"] = *o.seed;
    }
    experiment_config cfg;
    try {
        cfg = j.get<experiment_config>();
    } catch (const json::exception& e) {
        throw error(error_kind::invalid_argument, "invalid config value: " + std::string(e.what()));
    }
    validate_config(cfg);
    return cfg;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoull(tok, &used));
            require(used == tok.size(), error_kind::invalid_argument, "bad seed '" + tok + "'");
        } catch (const std::logic_error&) {
            throw error(error_kind::invalid_argument, "bad seed '" + tok + "'");
        }
    }
    require(!out.empty(), error_kind::invalid_argument, "no seeds given");
    return out;
}

std::vector<double> parse_ratios(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(tok, &used));
            require(used == tok.size(), error_kind::invalid_argument, "bad ratio '" + tok + "'");
        } catch (const std::logic_error&) {
            throw error(error_kind::invalid_argument, "bad ratio '" + tok + "'");
        }
    }
    require(!out.empty(), error_kind::invalid_argument, "no ratios given");
    return out;
}

// Written next to every command's outputs; enough to rerun it exactly.
void write_manifest(const fs::path& out, const std::string& command, const experiment_config& cfg,
                    const json& inputs, const json& extra = json::object()) {
    const json resolved = cfg;
    json m = {{"format_version", format_version},
              {"command", command},
              {"config", resolved},
              {"config_hash", config_hash(resolved)},
              {"seeds", {{"master", cfg.seed}, {"graph", cfg.graph.seed}, {"episodes", cfg.episodes.seed}}},
              {"inputs", inputs},
              {"outputs", out.generic_string()},
              {"options", extra}};
    write_file_atomic(out / "run_manifest.json", m.dump(2) + "\n");
}

void log_line(const std::string& s) { std::cerr << "[sldiff] " << s << '\n'; }

int cmd_gen_data(const common_options& co, const std::string& out_dir) {
    const experiment_config cfg = resolve_config(co);
    const fs::path out = out_dir.empty() ? data_root() / "dataset" : fs::path(out_dir);
    const graph g = gen_graph(cfg.graph);
    const dataset_bundle d = gen_episodes(g, cfg.episodes);
    if (d.skipped) {
        log_line("warning: " + std::to_string(d.skipped) + " episode(s) skipped after 100 degenerate draws");
    }
    save_dataset(d, out);
    write_manifest(out, "gen-data", cfg, json::object());
    log_line("wrote " + std::to_string(d.episodes.size()) + " episodes on " + std::to_string(g.node_count()) +
             " nodes to " + out.string());
    return exit_ok;
}

unsigned parse_stage(const std::string& s) {
    if (s == "coarse") return static_cast<unsigned>(stage_mask::coarse);
    if (s == "fine") return static_cast<unsigned>(stage_mask::fine);
    if (s == "surrogate") return static_cast<unsigned>(stage_mask::surrogate);
    if (s == "noise") return static_cast<unsigned>(stage_mask::noise);
    if (s == "guidance") return static_cast<unsigned>(stage_mask::guidance);
    return static_cast<unsigned>(stage_mask::all);
}

int cmd_train(const common_options& co, const std::string& data_dir, const std::string& from, const std::string& out_dir,
              const std::string& stage) {
    const fs::path data_path = data_dir.empty() ? data_root() / "dataset" : fs::path(data_dir);
    const fs::path out = out_dir.empty() ? data_root() / "bundle" : fs::path(out_dir);
    const dataset_bundle d = load_dataset(data_path);
    trained_bundle b;
    if (!from.empty()) {
        b = load_bundle(from);
        require(b.whole == d.whole, error_kind::data, "dataset graph differs from the bundle graph");
        const experiment_config cfg = resolve_config(co, b.config);
        require(json(cfg) == json(b.config), error_kind::invalid_argument,
                "--from bundle config cannot be changed; train a fresh bundle instead");
    } else {
        b = make_bundle(resolve_config(co), d.whole);
    }
    train_stages(b, d, parse_stage(stage));
    save_bundle(b, out);
    write_manifest(out, "train", b.config, {{"data", data_path.generic_string()}, {"from", from}}, {{"stage", stage}});
    log_line("saved bundle to " + out.string());
    return exit_ok;
}

const episode& find_episode(const dataset_bundle& d, int id) {
    for (const auto& e : d.episodes) {
        if (e.id == id) {
            return e;
        }
    }
    throw error(error_kind::data, "no episode with id " + std::to_string(id));
}

json vector_json(const node_vector& v) {
    json a = json::array();
    for (Eigen::Index k = 0; k < v.size(); ++k) {
        a.push_back(format_real(v[k]));
    }
    return a;
}

int cmd_localize(const common_options& co, const std::string& bundle_dir, const std::string& data_dir, int episode_id,
                 const std::string& seeds, const std::string& out_dir) {
    const fs::path bpath = bundle_dir.empty() ? data_root() / "bundle" : fs::path(bundle_dir);
    const fs::path dpath = data_dir.empty() ? data_root() / "dataset" : fs::path(data_dir);
    const fs::path out = out_dir.empty() ? data_root() / "localize" : fs::path(out_dir);
    trained_bundle b = load_bundle(bpath);
    b.config = resolve_config(co, b.config);
    const dataset_bundle d = load_dataset(dpath);
    require(b.whole == d.whole, error_kind::data, "dataset graph differs from the bundle graph");
    const episode& e = find_episode(d, episode_id);
    json preds = json::array();
    for (std::uint64_t s : parse_seeds(seeds)) {
        const auto loc = localize(b, e, s);
        json res = json::array();
        for (double r : loc.residuals) {
            res.push_back(format_real(r));
        }
        const auto m = compute_metrics(loc.sources, e.indicator(d.whole.node_count()));
        preds.push_back({{"seed", s},
                         {"sources", loc.sources},
                         {"true_sources", e.sources()},
                         {"F1", format_real(m.f1)},
                         {"indicator", vector_json(loc.indicator)},
                         {"coarse", vector_json(loc.coarse)},
                         {"coarse_nodes", loc.node_map},
                         {"guidance_weight", format_real(guidance_weight(b))},
                         {"guidance_residuals", res}});
    }
    write_file_atomic(out / "prediction.json", json{{"episode", episode_id}, {"predictions", preds}}.dump(2) + "\n");
    write_manifest(out, "localize", b.config, {{"bundle", bpath.generic_string()}, {"data", dpath.generic_string()}},
                   {{"episode", episode_id}, {"seeds", seeds}});
    return exit_ok;
}

// Returns exit_threshold when a configured minimum F1 is missed.
int check_threshold(const std::vector<sweep_result>& rows, const std::string& configuration, std::optional<double> min_f1) {
    if (!min_f1) {
        return exit_ok;
    }
    for (const auto& r : rows) {
        if (r.configuration == configuration && r.metrics.f1 < *min_f1) {
            log_line("threshold failed: " + configuration + " seed " + std::to_string(r.seed) + " F1 " +
                     format_real(r.metrics.f1) + " < " + format_real(*min_f1));
            return exit_threshold;
        }
    }
    return exit_ok;
}

int cmd_evaluate(const common_options& co, const std::string& bundle_dir, const std::string& data_dir,
                 const std::string& part, bool ablations, const std::string& baseline, const std::string& seeds,
                 int total_steps, std::optional<double> min_f1, const std::string& out_dir) {
    const fs::path bpath = bundle_dir.empty() ? data_root() / "bundle" : fs::path(bundle_dir);
    const fs::path dpath = data_dir.empty() ? data_root() / "dataset" : fs::path(data_dir);
    const fs::path out = out_dir.empty() ? data_root() / "evaluate" : fs::path(out_dir);
    require(baseline.empty() || baseline == "lpsi", error_kind::invalid_argument, "unknown baseline '" + baseline + "'");
    trained_bundle b = load_bundle(bpath);
    const experiment_config trained_cfg = b.config;
    b.config = resolve_config(co, b.config);
    const dataset_bundle d = load_dataset(dpath);
    require(b.whole == d.whole, error_kind::data, "dataset graph differs from the bundle graph");

    run_options opt;
    opt.part = parse_split(part);
    opt.seeds = parse_seeds(seeds);
    opt.jobs = co.jobs;
    opt.log = log_line;
    std::vector<sweep_result> rows;
    if (ablations) {
        component_cache cache;
        trained_bundle adopted = b;
        adopted.config = trained_cfg;
        cache.adopt(adopted);
        rows = run_ablations(b.config, d, cache, opt, total_steps);
    } else {
        for (std::uint64_t s : opt.seeds) {
            rows.push_back(summarize("model", s, b.config, evaluate_episodes(b, d.part(opt.part), s, opt.jobs)));
        }
    }
    rows.push_back(trivial_baseline(d, opt.part));
    if (baseline == "lpsi") {
        rows.push_back(lpsi_row(d, opt.part));
    }
    const json meta = {{"config_hash", config_hash(json(b.config))}, {"split", part}, {"seeds", opt.seeds},
                       {"total_steps", ablations ? total_steps : 0}};
    emit_results(rows, out, meta);
    json options = {{"split", part}, {"ablations", ablations}, {"baseline", baseline}, {"seeds", seeds},
                    {"total_steps", total_steps}};
    if (min_f1) {
        options["min_f1"] = *min_f1;
    }
    write_manifest(out, "evaluate", b.config, {{"bundle", bpath.generic_string()}, {"data", dpath.generic_string()}},
                   options);
    return check_threshold(rows, ablations ? "full" : "model", min_f1);
}

int cmd_sweep(const common_options& co, const std::string& bundle_dir, const std::string& data_dir,
              const std::string& ratios, int total_steps, const std::string& seeds, const std::string& part,
              const std::string& out_dir) {
    const fs::path dpath = data_dir.empty() ? data_root() / "dataset" : fs::path(data_dir);
    const fs::path out = out_dir.empty() ? data_root() / "sweep" : fs::path(out_dir);
    const dataset_bundle d = load_dataset(dpath);
    component_cache cache;
    experiment_config cfg;
    if (!bundle_dir.empty()) {
        const trained_bundle b = load_bundle(bundle_dir);
        require(b.whole == d.whole, error_kind::data, "dataset graph differs from the bundle graph");
        cache.adopt(b);
        cfg = resolve_config(co, b.config);
    } else {
        cfg = resolve_config(co);
    }
    run_options opt;
    opt.part = parse_split(part);
    opt.seeds = parse_seeds(seeds);
    opt.jobs = co.jobs;
    opt.log = log_line;
    const auto rows = sweep_ratio(cfg, d, parse_ratios(ratios), total_steps, cache, opt);
    emit_results(rows, out, {{"config_hash", config_hash(json(cfg))}, {"split", part}, {"total_steps", total_steps}});
    write_manifest(out, "sweep", cfg, {{"bundle", bundle_dir}, {"data", dpath.generic_string()}},
                   {{"ratios", ratios}, {"total_steps", total_steps}, {"seeds", seeds}, {"split", part}});
    return exit_ok;
}

int exit_for(const error& e) {
    switch (e.kind()) {
    case error_kind::invalid_argument: return exit_usage;
    case error_kind::invalid_cascade:
    case error_kind::degenerate_cascade:
    case error_kind::data: return exit_data;
    case error_kind::schema: return exit_schema;
    case error_kind::numeric: return exit_numeric;
    }
    return exit_internal;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-stage diffusion source localization"};
    app.require_subcommand(1);

    common_options co;
    std::string out, data, bundle, from, stage = "all", seeds = "1", part = "test", baseline, ratios = "0.025,0.05,0.1,0.1111111111111111,0.2,0.4";
    int episode_id = 0;
    int total_steps = 800;
    int eval_total = 0;
    bool ablations = false;
    std::optional<double> min_f1;

    auto* gen = app.add_subcommand("gen-data", "Generate a graph and IC episodes");
    add_common(gen, co);
    gen->add_option("--out", out, "Output dataset directory");

    auto* train = app.add_subcommand("train", "Train bundle components");
    add_common(train, co);
    train->add_option("--data", data, "Dataset directory");
    train->add_option("--from", from, "Existing bundle to extend (read-only)");
    train->add_option("--out", out, "Output bundle directory");
    train->add_option("--stage", stage, "Stage to train")->check(CLI::IsMember({"coarse", "fine", "surrogate", "noise", "guidance", "all"}));

    auto* loc = app.add_subcommand("localize", "Localize the sources of one episode");
    add_common(loc, co);
    loc->add_option("--bundle", bundle, "Trained bundle directory");
    loc->add_option("--data", data, "Dataset directory");
    loc->add_option("--episode", episode_id, "Episode id")->required();
    loc->add_option("--seeds", seeds, "Comma-separated sampling seeds");
    loc->add_option("--out", out, "Output directory");

    auto* eval = app.add_subcommand("evaluate", "Evaluate a bundle on a split");
    add_common(eval, co);
    eval->add_option("--bundle", bundle, "Trained bundle directory");
    eval->add_option("--data", data, "Dataset directory");
    eval->add_option("--split", part, "Split")->check(CLI::IsMember({"train", "val", "test"}));
    eval->add_flag("--ablations", ablations, "Also run the four ablation variants");
    eval->add_option("--baseline", baseline, "Comparison baseline")->check(CLI::IsMember({"lpsi"}));
    eval->add_option("--seeds", seeds, "Comma-separated sampling seeds");
    eval->add_option("--total-steps", eval_total, "Step budget shared by ablation variants (0: the bundle's T1 + T2)")
        ->check(CLI::NonNegativeNumber);
    eval->add_option("--min-f1", min_f1, "Fail with exit code 6 when mean F1 is below this");
    eval->add_option("--out", out, "Output directory");

    auto* sweep = app.add_subcommand("sweep", "R_T sweep at a constant step total");
    add_common(sweep, co);
    sweep->add_option("--bundle", bundle, "Optional bundle whose components are reused");
    sweep->add_option("--data", data, "Dataset directory");
    sweep->add_option("--ratios", ratios, "Comma-separated R_T values");
    sweep->add_option("--total-steps", total_steps, "Total diffusion steps")->check(CLI::PositiveNumber);
    sweep->add_option("--seeds", seeds, "Comma-separated sampling seeds");
    sweep->add_option("--split", part, "Split")->check(CLI::IsMember({"train", "val", "test"}));
    sweep->add_option("--out", out, "Output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? exit_ok : exit_usage;
    }

    try {
        if (*gen) {
            return cmd_gen_data(co, out);
        }
        if (*train) {
            return cmd_train(co, data, from, out, stage);
        }
        if (*loc) {
            return cmd_localize(co, bundle, data, episode_id, seeds, out);
        }
        if (*eval) {
            return cmd_evaluate(co, bundle, data, part, ablations, baseline, seeds, eval_total, min_f1, out);
        }
        if (*sweep) {
            return cmd_sweep(co, bundle, data, ratios, total_steps, seeds, part, out);
        }
    } catch (const error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_for(e);
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_data;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return exit_internal;
    }
    return exit_usage;
}
