#pragma once

// Central finite-difference oracle for reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "ew/rng.hpp"
#include "ew/tensor.hpp"

namespace ew {

struct GradCheckResult {
    double rel_error = 0.0;      // |analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)
    double max_abs_error = 0.0;
    double analytic_norm = 0.0;
    std::size_t evaluations = 0;
};

/// As check_gradients, but probes at most `per_tensor` random coordinates of each input
/// (0 = all of them). For nets with tens of thousands of weights.
inline GradCheckResult check_gradients_sampled(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                                               std::size_t per_tensor, std::uint64_t seed, double h = 1e-5) {
    for (auto& t : inputs) t.zero_grad();
    backward(loss());
    GradCheckResult r;
    double diff2 = 0.0, an2 = 0.0, nu2 = 0.0;
    Rng rng(seed);
    for (auto& t : inputs) {
        const std::vector<double> analytic = t.grad();
        auto w = t.mutable_data();
        std::vector<std::size_t> idx;
        if (per_tensor == 0 || per_tensor >= w.size()) {
            idx.resize(w.size());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        } else {
            for (std::size_t k = 0; k < per_tensor; ++k) idx.push_back(static_cast<std::size_t>(rng.below(w.size())));
        }
        for (const std::size_t i : idx) {
            const double orig = w[i];
            double fp, fm;
            {
                NoGradGuard ng;
                w[i] = orig + h;
                fp = loss().item();
                w[i] = orig - h;
                fm = loss().item();
            }
            w[i] = orig;
            r.evaluations += 2;
            const double numeric = (fp - fm) / (2.0 * h);
            const double d = analytic[i] - numeric;
            diff2 += d * d;
            an2 += analytic[i] * analytic[i];
            nu2 += numeric * numeric;
            r.max_abs_error = std::max(r.max_abs_error, std::abs(d));
        }
    }
    const double denom = std::max({std::sqrt(an2), std::sqrt(nu2), 1e-300});
    r.rel_error = std::sqrt(diff2) / denom;
    r.analytic_norm = std::sqrt(an2);
    return r;
}

/// Compares backward() of the scalar `loss` against central differences of step h
/// on every element of `inputs` (which must be leaves).
inline GradCheckResult check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                                       double h = 1e-5) {
    return check_gradients_sampled(loss, std::move(inputs), 0, 0, h);
}

/// Fixed random projection so vector-valued ops can be checked through a scalar.
inline Tensor project_to_scalar(const Tensor& y, std::uint64_t seed = 99) {
    Rng rng(seed);
    return sum(mul(y, Tensor::randn(y.shape(), rng)));
}

}  // namespace ew
