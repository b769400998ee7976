#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "error.hpp"
#include "rng.hpp"

namespace sldiff::nn {

using matrix = Eigen::MatrixXd;
using vector = Eigen::VectorXd;
using row_vector = Eigen::RowVectorXd;

inline double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double softplus(double x) {
    return x > 30.0 ? x : std::log1p(std::exp(x));
}

inline matrix silu(const matrix& a) {
    return a.unaryExpr([](double x) { return x * sigmoid(x); });
}

inline matrix silu_grad(const matrix& a) {
    return a.unaryExpr([](double x) {
        const double s = sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
    });
}

// A named rectangular slice of a flat parameter vector (column-major).
struct block {
    Eigen::Index offset = 0;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;

    Eigen::Index size() const { return rows * cols; }

    Eigen::Map<matrix> of(vector& theta) const { return {theta.data() + offset, rows, cols}; }
    Eigen::Map<const matrix> of(const vector& theta) const { return {theta.data() + offset, rows, cols}; }
};

class layout {
public:
    block add(Eigen::Index rows, Eigen::Index cols) {
        block b{size_, rows, cols};
        size_ += rows * cols;
        return b;
    }
    Eigen::Index size() const { return size_; }

private:
    Eigen::Index size_ = 0;
};

// Scaled-normal fill of a weight block (fan-in scaling).
inline void init_weight(vector& theta, const block& b, rng& gen, double gain = 1.0) {
    const double scale = gain / std::sqrt(static_cast<double>(b.rows));
    auto m = b.of(theta);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            m(i, j) = scale * gen.normal();
        }
    }
}

// Dense MLP on row-major batches: X (n x in) -> (n x out), SiLU between layers.
class mlp {
public:
    mlp() = default;

    mlp(layout& lay, const std::vector<int>& widths) : widths_(widths) {
        require(widths.size() >= 2, error_kind::invalid_argument, "mlp needs at least one layer");
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            weights_.push_back(lay.add(widths[l], widths[l + 1]));
            biases_.push_back(lay.add(1, widths[l + 1]));
        }
    }

    void init(vector& theta, rng& gen, double last_gain = 1.0) const {
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            init_weight(theta, weights_[l], gen, l + 1 == weights_.size() ? last_gain : 1.0);
            biases_[l].of(theta).setZero();
        }
    }

    int input_width() const { return widths_.front(); }
    int output_width() const { return widths_.back(); }
    std::size_t depth() const { return weights_.size(); }

    struct cache {
        std::vector<matrix> inputs;  // input to each layer
        std::vector<matrix> pre;     // pre-activation of each layer
        matrix output;
    };

    matrix forward(const vector& theta, const matrix& x, cache* c = nullptr) const {
        matrix h = x;
        if (c) {
            c->inputs.clear();
            c->pre.clear();
        }
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            matrix a = h * weights_[l].of(theta);
            a.rowwise() += biases_[l].of(theta).row(0);
            if (c) {
                c->inputs.push_back(std::move(h));
                c->pre.push_back(a);
            }
            h = (l + 1 == weights_.size()) ? a : silu(a);
        }
        if (c) {
            c->output = h;
        }
        return h;
    }

    // Accumulates parameter gradients into grad; returns d loss / d input.
    matrix backward(const vector& theta, const cache& c, const matrix& d_out, vector& grad) const {
        matrix d = d_out;
        for (std::size_t l = weights_.size(); l-- > 0;) {
            if (l + 1 != weights_.size()) {
                d = d.cwiseProduct(silu_grad(c.pre[l]));
            }
            weights_[l].of(grad).noalias() += c.inputs[l].transpose() * d;
            biases_[l].of(grad).row(0) += d.colwise().sum();
            d = (d * weights_[l].of(theta).transpose()).eval();
        }
        return d;
    }

    const std::vector<block>& weights() const { return weights_; }
    const std::vector<block>& biases() const { return biases_; }

private:
    std::vector<int> widths_;
    std::vector<block> weights_;
    std::vector<block> biases_;
};

struct optimizer_config {
    enum class kind { sgd, adam };
    kind method = kind::adam;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0;  // 0 disables global-norm clipping
};

class optimizer {
public:
    explicit optimizer(optimizer_config cfg = {}) : cfg_(cfg) {}

    void step(vector& theta, vector grad) {
        if (cfg_.clip_norm > 0.0) {
            const double norm = grad.norm();
            if (norm > cfg_.clip_norm) {
                grad *= cfg_.clip_norm / norm;
            }
        }
        if (cfg_.weight_decay > 0.0) {
            grad += cfg_.weight_decay * theta;
        }
        if (cfg_.method == optimizer_config::kind::sgd) {
            theta -= cfg_.learning_rate * grad;
            return;
        }
        if (m_.size() != theta.size()) {
            m_ = vector::Zero(theta.size());
            v_ = vector::Zero(theta.size());
            t_ = 0;
        }
        ++t_;
        m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
        v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseAbs2();
        const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
        theta.array() -= cfg_.learning_rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.eps);
    }

private:
    optimizer_config cfg_;
    vector m_;
    vector v_;
    long t_ = 0;
};

} // namespace sldiff::nn
