#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "data_io.hpp"
#include "pipeline.hpp"

namespace sldiff {

// Real arrays as text: a "count" line, then one 17-digit value per line.
inline std::string reals_to_text(const Eigen::Ref<const Eigen::VectorXd>& v) {
    std::ostringstream out;
    out << v.size() << '\n';
    for (Eigen::Index k = 0; k < v.size(); ++k) {
        out << format_real(v[k]) << '\n';
    }
    return out.str();
}

inline Eigen::VectorXd reals_from_text(const std::string& text, const std::string& what) {
    std::istringstream in(text);
    long long count = -1;
    require(static_cast<bool>(in >> count) && count >= 0, error_kind::data, "malformed " + what + " header");
    Eigen::VectorXd v(count);
    std::string tok;
    for (long long k = 0; k < count; ++k) {
        require(static_cast<bool>(in >> tok), error_kind::data, what + " is truncated");
        try {
            std::size_t used = 0;
            v[k] = std::stod(tok, &used);
            require(used == tok.size(), error_kind::data, "malformed real '" + tok + "' in " + what);
        } catch (const std::logic_error&) {
            throw error(error_kind::data, "malformed real '" + tok + "' in " + what);
        }
    }
    require(!(in >> tok), error_kind::data, what + " has trailing data");
    return v;
}

inline json training_report_json(const training_report& r) {
    return {{"train_loss", r.train_loss}, {"val_loss", r.val_loss}, {"best_epoch", r.best_epoch}};
}

inline training_report training_report_from(const json& j) {
    training_report r;
    r.train_loss = j.value("train_loss", std::vector<double>{});
    r.val_loss = j.value("val_loss", std::vector<double>{});
    r.best_epoch = j.value("best_epoch", -1);
    return r;
}

inline void save_bundle(const trained_bundle& b, const fs::path& dir) {
    bundle_writer w(dir, "trained");
    json cfg = b.config;
    w.add("config.json", cfg.dump(2) + "\n");
    w.add("graph.txt", graph_to_text(b.whole));
    {
        std::ostringstream out;
        out << b.anchors.seed << ' ' << b.anchors.size() << '\n';
        for (const auto& set : b.anchors.sets) {
            for (std::size_t k = 0; k < set.size(); ++k) {
                out << (k ? " " : "") << set[k];
            }
            out << '\n';
        }
        w.add("anchors.txt", out.str());
    }
    {
        Eigen::VectorXd flat(b.projection.weight.size() + b.projection.bias.size());
        Eigen::Index k = 0;
        for (Eigen::Index i = 0; i < b.projection.weight.rows(); ++i) {
            for (Eigen::Index j = 0; j < b.projection.weight.cols(); ++j) {
                flat[k++] = b.projection.weight(i, j);
            }
        }
        for (Eigen::Index j = 0; j < b.projection.bias.size(); ++j) {
            flat[k++] = b.projection.bias[j];
        }
        w.add("projection.txt", reals_to_text(flat));
        w.meta()["projection_shape"] = {b.projection.weight.rows(), b.projection.weight.cols()};
    }
    if (b.coarse) {
        w.add("coarse.txt", reals_to_text(b.coarse->parameters()));
        w.meta()["coarse_net"] = b.coarse->config();
    }
    if (b.fine) {
        w.add("fine.txt", reals_to_text(b.fine->parameters()));
        w.meta()["fine_net"] = b.fine->config();
    }
    if (b.surrogate) {
        w.add("surrogate_edges.txt", reals_to_text(b.surrogate->edge_logits));
        w.add("surrogate_bias.txt", reals_to_text(b.surrogate->round_bias));
        w.meta()["surrogate"] = {{"depth", b.surrogate->depth}, {"slope", format_real(b.surrogate->slope)}};
    }
    if (b.noise) {
        if (b.noise->is_fixed()) {
            w.meta()["noise"] = {{"fixed_sigma", format_real(*b.noise->fixed_value())}};
        } else {
            w.add("noise.txt", reals_to_text(b.noise->parameters()));
            w.meta()["noise"] = {{"floor", format_real(b.noise->floor())}};
        }
    }
    if (b.guidance) {
        w.meta()["guidance"] = format_real(*b.guidance);
    }
    json reports = {{"coarse", training_report_json(b.reports.coarse)},
                    {"fine", training_report_json(b.reports.fine)},
                    {"surrogate_loss", b.reports.surrogate.loss},
                    {"calibration_f1", b.reports.calibration_f1}};
    w.add("reports.json", reports.dump(2) + "\n");
    w.finish();
}

inline trained_bundle load_bundle(const fs::path& dir) {
    bundle_reader r(dir, "trained");
    trained_bundle b;
    try {
        b.config = json::parse(r.file("config.json")).get<experiment_config>();
    } catch (const json::exception& e) {
        throw error(error_kind::data, std::string("malformed bundle config: ") + e.what());
    }
    b.whole = graph_from_text(r.file("graph.txt"));
    {
        std::istringstream in(r.file("anchors.txt"));
        std::size_t count = 0;
        require(static_cast<bool>(in >> b.anchors.seed >> count), error_kind::data, "malformed anchors header");
        std::string line;
        std::getline(in, line);
        for (std::size_t k = 0; k < count; ++k) {
            require(static_cast<bool>(std::getline(in, line)), error_kind::data, "anchors file truncated");
            std::istringstream ls(line);
            std::vector<node_id> set;
            node_id v;
            while (ls >> v) {
                require(b.whole.contains(v), error_kind::data, "anchor node outside graph");
                set.push_back(v);
            }
            b.anchors.sets.push_back(std::move(set));
        }
    }
    const auto& meta = r.meta();
    try {
        const auto shape = meta.at("projection_shape").get<std::vector<Eigen::Index>>();
        require(shape.size() == 2 && shape[0] == static_cast<Eigen::Index>(b.anchors.size()), error_kind::data,
                "projection does not match anchors");
        const Eigen::VectorXd flat = reals_from_text(r.file("projection.txt"), "projection");
        require(flat.size() == shape[0] * shape[1] + shape[1], error_kind::data, "projection size mismatch");
        b.projection.weight.resize(shape[0], shape[1]);
        Eigen::Index k = 0;
        for (Eigen::Index i = 0; i < shape[0]; ++i) {
            for (Eigen::Index j = 0; j < shape[1]; ++j) {
                b.projection.weight(i, j) = flat[k++];
            }
        }
        b.projection.bias.resize(shape[1]);
        for (Eigen::Index j = 0; j < shape[1]; ++j) {
            b.projection.bias[j] = flat[k++];
        }
        b.embedding = embed_nodes(b.whole, b.anchors, b.projection);

        auto load_net = [&](const char* key, const char* file) -> std::optional<score_net> {
            if (!meta.contains(key)) {
                return std::nullopt;
            }
            score_net net(meta.at(key).get<score_net_config>());
            const Eigen::VectorXd theta = reals_from_text(r.file(file), file);
            require(theta.size() == net.parameter_count(), error_kind::data, std::string(file) + " size mismatch");
            net.parameters() = theta;
            return net;
        };
        b.coarse = load_net("coarse_net", "coarse.txt");
        b.fine = load_net("fine_net", "fine.txt");
        if (meta.contains("surrogate")) {
            dissemination_surrogate s;
            s.depth = meta["surrogate"].at("depth").get<int>();
            s.slope = std::stod(meta["surrogate"].at("slope").get<std::string>());
            s.edge_logits = reals_from_text(r.file("surrogate_edges.txt"), "surrogate edges");
            s.round_bias = reals_from_text(r.file("surrogate_bias.txt"), "surrogate bias");
            s.check(b.whole);
            b.surrogate = std::move(s);
        }
        if (meta.contains("noise")) {
            const auto& n = meta["noise"];
            if (n.contains("fixed_sigma")) {
                b.noise = noise_variance_model::constant(std::stod(n["fixed_sigma"].get<std::string>()));
            } else {
                noise_variance_model m(0, 16, 8, std::stod(n.at("floor").get<std::string>()));
                const Eigen::VectorXd theta = reals_from_text(r.file("noise.txt"), "noise");
                require(theta.size() == m.parameters().size(), error_kind::data, "noise parameter size mismatch");
                m.parameters() = theta;
                b.noise = std::move(m);
            }
        }
        if (meta.contains("guidance")) {
            b.guidance = std::stod(meta["guidance"].get<std::string>());
        }
        const json reports = json::parse(r.file("reports.json"));
        b.reports.coarse = training_report_from(reports.at("coarse"));
        b.reports.fine = training_report_from(reports.at("fine"));
        b.reports.surrogate.loss = reports.value("surrogate_loss", std::vector<double>{});
        b.reports.calibration_f1 = reports.value("calibration_f1", std::vector<double>{});
    } catch (const json::exception& e) {
        throw error(error_kind::data, std::string("malformed bundle: ") + e.what());
    } catch (const error& e) {
        if (e.kind() == error_kind::invalid_argument) {
            throw error(error_kind::data, e.what());
        }
        throw;
    }
    return b;
}

} // namespace sldiff
