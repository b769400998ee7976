#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "error.hpp"

namespace sldiff {

// Linear variance schedule over steps t = 1..T. Arrays are 1-indexed through
// the accessors; slot 0 holds the t = 0 identity (beta 0, alpha_bar 1).
class noise_schedule {
public:
    noise_schedule() = default;

    noise_schedule(int steps, double beta_min = 1e-4, double beta_max = 0.02) : steps_(steps) {
        require(steps >= 1, error_kind::invalid_argument, "schedule needs at least one step");
        require(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0, error_kind::invalid_argument,
                "schedule endpoints must satisfy 0 < beta_min <= beta_max < 1");
        beta_.assign(steps + 1, 0.0);
        alpha_bar_.assign(steps + 1, 1.0);
        for (int t = 1; t <= steps; ++t) {
            const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(steps - 1);
            beta_[t] = beta_min + frac * (beta_max - beta_min);
            alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - beta_[t]);
        }
    }

    int steps() const noexcept { return steps_; }
    double beta(int t) const { return beta_[check(t)]; }
    double alpha(int t) const { return 1.0 - beta_[check(t)]; }
    double alpha_bar(int t) const { return alpha_bar_[check(t)]; }
    // Standard deviation of the perturbation kernel at step t.
    double sigma(int t) const { return std::sqrt(1.0 - alpha_bar_[check(t)]); }

private:
    int check(int t) const {
        require(t >= 0 && t <= steps_, error_kind::invalid_argument,
                "diffusion step " + std::to_string(t) + " outside 0.." + std::to_string(steps_));
        return t;
    }

    int steps_ = 0;
    std::vector<double> beta_{0.0};
    std::vector<double> alpha_bar_{1.0};
};

inline noise_schedule make_schedule(int steps, double beta_min = 1e-4, double beta_max = 0.02) {
    return noise_schedule(steps, beta_min, beta_max);
}

struct stage_config {
    int coarse_steps = 800;
    int fine_steps = 80;

    double ratio() const { return static_cast<double>(fine_steps) / static_cast<double>(coarse_steps); }
};

// Split a fixed step budget by R_T = T2 / T1, rounding T2 to the nearest integer.
inline stage_config split_steps(int total, double ratio) {
    require(total >= 1 && ratio >= 0.0, error_kind::invalid_argument, "invalid step budget");
    const int fine = static_cast<int>(std::lround(static_cast<double>(total) * ratio / (1.0 + ratio)));
    return {total - fine, fine};
}

} // namespace sldiff
