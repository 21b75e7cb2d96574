#pragma once

#include <cmath>
#include <vector>

#include "ew/tensor.hpp"

namespace ew {

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam over a fixed parameter list. Parameters must be leaves.
class Adam {
public:
    Adam(std::vector<Tensor> params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
        if (!(opt_.lr > 0.0)) throw ConfigError("learning rate must be > 0");
        for (const auto& p : params_) {
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            const auto& g = p.grad();
            auto w = p.mutable_data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                m_[k][i] = opt_.beta1 * m_[k][i] + (1.0 - opt_.beta1) * g[i];
                v_[k][i] = opt_.beta2 * v_[k][i] + (1.0 - opt_.beta2) * g[i] * g[i];
                w[i] -= opt_.lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + opt_.eps);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    long steps() const { return t_; }

private:
    std::vector<Tensor> params_;
    AdamOptions opt_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

}  // namespace ew
