#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ew/errors.hpp"
#include "ew/tensor.hpp"

namespace ew {

/// Variance-preserving grid with sigma linear in t: t_i = i/(n-1), sigma_t = t,
/// alpha_t = sqrt(1 - t^2). alpha_0 = 1 exactly and alpha at t = 1 is 0.
class DiffusionSchedule {
public:
    explicit DiffusionSchedule(std::size_t points = 9) {
        if (points < 2) throw ConfigError("diffusion schedule needs at least two grid points");
        t_.resize(points);
        alpha_.resize(points);
        sigma_.resize(points);
        for (std::size_t i = 0; i < points; ++i) {
            t_[i] = static_cast<double>(i) / static_cast<double>(points - 1);
            sigma_[i] = t_[i];
            alpha_[i] = std::sqrt(1.0 - t_[i] * t_[i]);
        }
    }

    std::size_t size() const { return t_.size(); }
    double t(std::size_t i) const { return t_.at(i); }
    double alpha(std::size_t i) const { return alpha_.at(i); }
    double sigma(std::size_t i) const { return sigma_.at(i); }
    const std::vector<double>& ts() const { return t_; }

    /// Grid index of t; anything off the grid is a schedule error.
    std::size_t index_of(double t) const {
        for (std::size_t i = 0; i < t_.size(); ++i)
            if (std::abs(t_[i] - t) <= 1e-12) return i;
        throw ScheduleError("t = " + std::to_string(t) + " is not on the diffusion schedule");
    }

private:
    std::vector<double> t_, alpha_, sigma_;
};

/// x_t = alpha_t x0 + sigma_t noise, differentiable in both inputs.
inline Tensor forward_diffuse(const Tensor& x0, std::size_t t_index, const Tensor& noise,
                              const DiffusionSchedule& sched) {
    if (t_index >= sched.size()) throw ScheduleError("diffusion step index " + std::to_string(t_index) + " out of range");
    return add(scale(x0, sched.alpha(t_index)), scale(noise, sched.sigma(t_index)));
}

inline Tensor forward_diffuse(const Tensor& x0, double t, const Tensor& noise, const DiffusionSchedule& sched) {
    return forward_diffuse(x0, sched.index_of(t), noise, sched);
}

}  // namespace ew
