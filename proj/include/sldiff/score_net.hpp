#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "error.hpp"
#include "graph.hpp"
#include "nn.hpp"
#include "rng.hpp"

namespace sldiff {

using feature_matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Sinusoidal diffusion-step code of even width D: pairs
// (cos(t / r^(-2d/D)), sin(t / r^(-2d/D))) for d = 1..D/2.
// With `inverse_frequency` the exponent sign is flipped to the usual
// transformer form t / r^(2d/D), which varies smoothly in t.
struct step_encoding {
    int dim = 64;
    double base = 1e5;
    bool inverse_frequency = false;

    step_encoding() = default;
    step_encoding(int d, double r = 1e5, bool inverse = false) : dim(d), base(r), inverse_frequency(inverse) {
        require(d > 0 && d % 2 == 0, error_kind::invalid_argument, "step encoding width must be even and positive");
    }

    double frequency(int d) const {
        const double e = 2.0 * static_cast<double>(d) / static_cast<double>(dim);
        // t / r^(-e) = t * r^e, or t / r^e when inverted
        return inverse_frequency ? std::pow(base, -e) : std::pow(base, e);
    }

    nn::row_vector operator()(int t) const {
        require(t >= 0, error_kind::invalid_argument, "negative diffusion step");
        nn::row_vector out(dim);
        for (int d = 1; d <= dim / 2; ++d) {
            const double arg = static_cast<double>(t) * frequency(d);
            out[2 * (d - 1)] = std::cos(arg);
            out[2 * (d - 1) + 1] = std::sin(arg);
        }
        return out;
    }
};

inline nn::row_vector encode_step(int t, const step_encoding& enc) { return enc(t); }

struct score_net_config {
    int width = 64;
    int layers = 3;
    int heads = 4;
    int step_dim = 64;
    int head_hidden = 64;
    int head_layers = 4;
    bool use_positional = true;
    int positional_dim = 32;
    double step_base = 1e5;
    bool inverse_step_frequency = false;
    // Divide the head output by the kernel standard deviation at step t.
    bool scale_by_sigma = true;

    friend bool operator==(const score_net_config&, const score_net_config&) = default;
};

// Neighborhood {v} u adj(v) in CSR form, self first.
struct attention_mask {
    std::vector<int> offsets;
    std::vector<int> index;

    explicit attention_mask(const graph& g) {
        offsets.reserve(g.node_count() + 1);
        offsets.push_back(0);
        index.reserve(g.node_count() + g.neighbors().size());
        for (node_id v = 0; v < g.node_count(); ++v) {
            index.push_back(v);
            for (int s = g.slot_begin(v); s < g.slot_end(v); ++s) {
                index.push_back(g.neighbors()[s]);
            }
            offsets.push_back(static_cast<int>(index.size()));
        }
    }
};

// Conditional score network: lift -> L residual attention layers -> MLP head
// over [positional, H0..HL, step code].
class score_net {
public:
    struct layer_blocks {
        nn::block wq, wk, wv, wo, bo;
    };

    score_net() = default;

    explicit score_net(score_net_config cfg, std::uint64_t seed = 0) : cfg_(cfg) {
        require(cfg.width > 0 && cfg.heads > 0 && cfg.width % cfg.heads == 0, error_kind::invalid_argument,
                "layer width must be a positive multiple of the head count");
        require(cfg.layers >= 0 && cfg.head_layers >= 1, error_kind::invalid_argument, "invalid depth");
        encoding_ = step_encoding(cfg.step_dim, cfg.step_base, cfg.inverse_step_frequency);
        nn::layout lay;
        lift_w_ = lay.add(1, cfg.width);
        lift_b_ = lay.add(1, cfg.width);
        if (cfg.use_positional) {
            pos_proj_ = lay.add(cfg.positional_dim, cfg.width);
        }
        for (int l = 0; l < cfg.layers; ++l) {
            layer_blocks b;
            b.wq = lay.add(cfg.width, cfg.width);
            b.wk = lay.add(cfg.width, cfg.width);
            b.wv = lay.add(cfg.width, cfg.width);
            b.wo = lay.add(cfg.width, cfg.width);
            b.bo = lay.add(1, cfg.width);
            layers_.push_back(b);
        }
        std::vector<int> widths{head_input_width()};
        for (int l = 0; l + 1 < cfg.head_layers; ++l) {
            widths.push_back(cfg.head_hidden);
        }
        widths.push_back(1);
        head_ = nn::mlp(lay, widths);
        theta_ = nn::vector::Zero(lay.size());
        initialize(seed);
    }

    void initialize(std::uint64_t seed) {
        rng gen(seed);
        nn::init_weight(theta_, lift_w_, gen);
        lift_b_.of(theta_).setZero();
        if (cfg_.use_positional) {
            nn::init_weight(theta_, pos_proj_, gen);
        }
        for (const auto& b : layers_) {
            nn::init_weight(theta_, b.wq, gen);
            nn::init_weight(theta_, b.wk, gen);
            nn::init_weight(theta_, b.wv, gen);
            nn::init_weight(theta_, b.wo, gen, 0.5);
            b.bo.of(theta_).setZero();
        }
        head_.init(theta_, gen, 0.1);
    }

    const score_net_config& config() const { return cfg_; }
    nn::vector& parameters() { return theta_; }
    const nn::vector& parameters() const { return theta_; }
    Eigen::Index parameter_count() const { return theta_.size(); }
    const step_encoding& encoding() const { return encoding_; }
    const std::vector<layer_blocks>& layer_parameters() const { return layers_; }
    const nn::mlp& head() const { return head_; }

    int head_input_width() const {
        return (cfg_.use_positional ? cfg_.positional_dim : 0) + (cfg_.layers + 1) * cfg_.width + cfg_.step_dim;
    }

    struct layer_cache {
        feature_matrix q, k, v, o, z;
        Eigen::MatrixXd alpha;  // nnz x heads
    };

    struct cache {
        nn::vector x;
        feature_matrix positional;
        std::vector<feature_matrix> hidden;  // H0..HL
        std::vector<layer_cache> layers;
        nn::mlp::cache head;
        double scale = 1.0;
        std::vector<int> offsets;
        std::vector<int> index;
    };

    // One residual attention layer: H + silu(MultiHead(H) Wo + bo).
    feature_matrix attention_layer(const feature_matrix& h, const attention_mask& mask, int layer,
                                   layer_cache* lc = nullptr) const {
        require(h.cols() == cfg_.width, error_kind::invalid_argument, "attention input width mismatch");
        require(static_cast<std::size_t>(h.rows()) + 1 == mask.offsets.size(), error_kind::invalid_argument,
                "attention input rows do not match graph");
        const auto& b = layers_.at(layer);
        const int heads = cfg_.heads;
        const int dh = cfg_.width / heads;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        const Eigen::Index n = h.rows();

        feature_matrix q = h * b.wq.of(theta_);
        feature_matrix k = h * b.wk.of(theta_);
        feature_matrix v = h * b.wv.of(theta_);
        feature_matrix o = feature_matrix::Zero(n, cfg_.width);
        Eigen::MatrixXd alpha(mask.index.size(), heads);

        std::vector<double> e;
        for (Eigen::Index node = 0; node < n; ++node) {
            const int beg = mask.offsets[node];
            const int end = mask.offsets[node + 1];
            e.resize(end - beg);
            for (int hd = 0; hd < heads; ++hd) {
                const auto qv = q.row(node).segment(hd * dh, dh);
                double mx = -std::numeric_limits<double>::infinity();
                for (int s = beg; s < end; ++s) {
                    e[s - beg] = inv_sqrt * qv.dot(k.row(mask.index[s]).segment(hd * dh, dh));
                    mx = std::max(mx, e[s - beg]);
                }
                double sum = 0.0;
                for (int s = beg; s < end; ++s) {
                    e[s - beg] = std::exp(e[s - beg] - mx);
                    sum += e[s - beg];
                }
                auto out = o.row(node).segment(hd * dh, dh);
                for (int s = beg; s < end; ++s) {
                    const double a = e[s - beg] / sum;
                    alpha(s, hd) = a;
                    out.noalias() += a * v.row(mask.index[s]).segment(hd * dh, dh);
                }
            }
        }
        feature_matrix z = o * b.wo.of(theta_);
        z.rowwise() += b.bo.of(theta_).row(0);
        feature_matrix out = h + feature_matrix(nn::silu(z));
        if (lc) {
            lc->q = std::move(q);
            lc->k = std::move(k);
            lc->v = std::move(v);
            lc->o = std::move(o);
            lc->z = std::move(z);
            lc->alpha = std::move(alpha);
        }
        return out;
    }

    // Score estimate per node. `positional` must have one row per graph node
    // when the net uses positional conditioning. `scale` multiplies the head
    // output (see output_scale()).
    nn::vector forward(const nn::vector& x, int t, double scale, const graph& g, const feature_matrix* positional,
                       cache* c = nullptr) const {
        const Eigen::Index n = g.node_count();
        require(x.size() == n, error_kind::invalid_argument, "state size does not match graph");
        if (cfg_.use_positional) {
            require(positional != nullptr, error_kind::invalid_argument, "positional embedding required");
            require(positional->rows() == n && positional->cols() == cfg_.positional_dim,
                    error_kind::invalid_argument, "positional embedding shape mismatch");
        }
        attention_mask mask(g);
        feature_matrix h0 = x * lift_w_.of(theta_).row(0);
        h0.rowwise() += lift_b_.of(theta_).row(0);
        if (cfg_.use_positional) {
            h0.noalias() += (*positional) * pos_proj_.of(theta_);
        }
        std::vector<feature_matrix> hidden{std::move(h0)};
        std::vector<layer_cache> lcs(c ? cfg_.layers : 0);
        for (int l = 0; l < cfg_.layers; ++l) {
            hidden.push_back(attention_layer(hidden.back(), mask, l, c ? &lcs[l] : nullptr));
        }
        Eigen::MatrixXd head_in(n, head_input_width());
        Eigen::Index col = 0;
        if (cfg_.use_positional) {
            head_in.leftCols(cfg_.positional_dim) = *positional;
            col += cfg_.positional_dim;
        }
        for (const auto& hl : hidden) {
            head_in.middleCols(col, cfg_.width) = hl;
            col += cfg_.width;
        }
        head_in.rightCols(cfg_.step_dim).rowwise() = encoding_(t);
        nn::vector out = head_.forward(theta_, head_in, c ? &c->head : nullptr).col(0) * scale;
        if (c) {
            c->x = x;
            if (cfg_.use_positional) {
                c->positional = *positional;
            }
            c->hidden = std::move(hidden);
            c->layers = std::move(lcs);
            c->scale = scale;
            c->offsets = std::move(mask.offsets);
            c->index = std::move(mask.index);
        }
        return out;
    }

    // Backpropagate d loss / d score. Parameter gradients accumulate into
    // `grad` (same size as parameters()); returns d loss / d x.
    nn::vector backward(const cache& c, const nn::vector& d_score, nn::vector& grad) const {
        const Eigen::Index n = c.x.size();
        const int heads = cfg_.heads;
        const int dh = cfg_.width / heads;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

        Eigen::MatrixXd d_head_in = head_.backward(theta_, c.head, d_score * c.scale, grad);
        Eigen::Index col = cfg_.use_positional ? cfg_.positional_dim : 0;
        std::vector<feature_matrix> d_hidden;
        for (int l = 0; l <= cfg_.layers; ++l) {
            d_hidden.emplace_back(d_head_in.middleCols(col, cfg_.width));
            col += cfg_.width;
        }

        for (int l = cfg_.layers - 1; l >= 0; --l) {
            const auto& b = layers_[l];
            const auto& lc = c.layers[l];
            const feature_matrix& h = c.hidden[l];
            const feature_matrix& d_out = d_hidden[l + 1];
            // residual path
            d_hidden[l] += d_out;

            feature_matrix dz = d_out.cwiseProduct(feature_matrix(nn::silu_grad(lc.z)));
            b.wo.of(grad).noalias() += lc.o.transpose() * dz;
            b.bo.of(grad).row(0) += dz.colwise().sum();
            feature_matrix d_o = dz * b.wo.of(theta_).transpose();

            feature_matrix dq = feature_matrix::Zero(n, cfg_.width);
            feature_matrix dk = feature_matrix::Zero(n, cfg_.width);
            feature_matrix dv = feature_matrix::Zero(n, cfg_.width);
            std::vector<double> da;
            for (Eigen::Index node = 0; node < n; ++node) {
                const int beg = c.offsets[node];
                const int end = c.offsets[node + 1];
                da.resize(end - beg);
                for (int hd = 0; hd < heads; ++hd) {
                    const auto g_o = d_o.row(node).segment(hd * dh, dh);
                    double weighted = 0.0;
                    for (int s = beg; s < end; ++s) {
                        const int u = c.index[s];
                        const double a = lc.alpha(s, hd);
                        dv.row(u).segment(hd * dh, dh).noalias() += a * g_o;
                        da[s - beg] = g_o.dot(lc.v.row(u).segment(hd * dh, dh));
                        weighted += a * da[s - beg];
                    }
                    for (int s = beg; s < end; ++s) {
                        const int u = c.index[s];
                        const double de = lc.alpha(s, hd) * (da[s - beg] - weighted) * inv_sqrt;
                        dq.row(node).segment(hd * dh, dh).noalias() += de * lc.k.row(u).segment(hd * dh, dh);
                        dk.row(u).segment(hd * dh, dh).noalias() += de * lc.q.row(node).segment(hd * dh, dh);
                    }
                }
            }
            b.wq.of(grad).noalias() += h.transpose() * dq;
            b.wk.of(grad).noalias() += h.transpose() * dk;
            b.wv.of(grad).noalias() += h.transpose() * dv;
            d_hidden[l].noalias() += dq * b.wq.of(theta_).transpose();
            d_hidden[l].noalias() += dk * b.wk.of(theta_).transpose();
            d_hidden[l].noalias() += dv * b.wv.of(theta_).transpose();
        }

        const feature_matrix& d0 = d_hidden[0];
        lift_w_.of(grad).row(0) += c.x.transpose() * d0;
        lift_b_.of(grad).row(0) += d0.colwise().sum();
        if (cfg_.use_positional) {
            pos_proj_.of(grad).noalias() += c.positional.transpose() * d0;
        }
        return d0 * lift_w_.of(theta_).row(0).transpose();
    }

    // Zero every attention-layer parameter (residual identity).
    void zero_attention() {
        for (const auto& b : layers_) {
            for (const auto* blk : {&b.wq, &b.wk, &b.wv, &b.wo, &b.bo}) {
                blk->of(theta_).setZero();
            }
        }
    }

    void zero_head() {
        for (const auto& blk : head_.weights()) {
            blk.of(theta_).setZero();
        }
        for (const auto& blk : head_.biases()) {
            blk.of(theta_).setZero();
        }
    }

    double output_scale(double sigma_t) const { return cfg_.scale_by_sigma ? 1.0 / sigma_t : 1.0; }

private:
    score_net_config cfg_;
    step_encoding encoding_;
    nn::block lift_w_, lift_b_, pos_proj_;
    std::vector<layer_blocks> layers_;
    nn::mlp head_;
    nn::vector theta_;
};

} // namespace sldiff
