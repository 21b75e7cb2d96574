#pragma once

// Training objectives: distribution-matching generator gradient, 3D cosine loss,
// and the weighted total.
//
// Score models are Gaussian over a [sites x n] layout (time fastest). Sites are
// split into equal contiguous groups; each group has its own temporal mean and
// covariance, and sites inside a group are i.i.d. For the synthetic supervision
// process the real score is analytic and frozen; the fake score is refit by
// moment matching to the generator's current samples.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ew/diffusion.hpp"
#include "ew/errors.hpp"
#include "ew/fusion.hpp"
#include "ew/optim.hpp"
#include "ew/tensor.hpp"

namespace ew {

struct LossWeights {
    double lambda_3d = 0.1;

    void validate() const {
        if (!(lambda_3d >= 0.0)) throw ConfigError("lambda_3d must be >= 0");
    }
};

/// L_gen + lambda_3d * L_3D.
inline Tensor total_loss(const Tensor& gen_term, const Tensor& l3d, const LossWeights& w) {
    w.validate();
    return add(gen_term, scale(l3d, w.lambda_3d));
}

/// 1 - cos(pred, ref), in [0, 2].
inline Tensor loss_3d(const Tensor& pred, const Tensor& ref) {
    return sub(Tensor::scalar(1.0), cosine_similarity(pred, ref));
}

inline Tensor loss_3d(const Feature3D& pred, const Feature3D& ref) { return loss_3d(pred.data, ref.data); }

class GaussianSequenceScore {
public:
    GaussianSequenceScore() = default;

    /// groups x (mean[n], cov[n x n]).
    GaussianSequenceScore(std::size_t n, std::vector<Eigen::VectorXd> means, std::vector<Eigen::MatrixXd> covs)
        : n_(n), means_(std::move(means)), covs_(std::move(covs)) {
        if (means_.empty() || means_.size() != covs_.size()) throw ConfigError("score model needs >= 1 group");
        for (std::size_t g = 0; g < means_.size(); ++g)
            if (static_cast<std::size_t>(means_[g].size()) != n_ || static_cast<std::size_t>(covs_[g].rows()) != n_ ||
                static_cast<std::size_t>(covs_[g].cols()) != n_)
                throw DimensionError("score model group dimension mismatch");
    }

    /// Stationary AR(1) per group with unit marginal variance: cov_ij = a_g^|i-j|.
    static GaussianSequenceScore ar1(std::size_t n, const std::vector<double>& coeffs) {
        std::vector<Eigen::VectorXd> ms;
        std::vector<Eigen::MatrixXd> cs;
        for (double a : coeffs) {
            Eigen::MatrixXd c(n, n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                        std::pow(a, static_cast<double>(i > j ? i - j : j - i));
            ms.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n)));
            cs.push_back(std::move(c));
        }
        return {n, std::move(ms), std::move(cs)};
    }

    static GaussianSequenceScore scalar(double mean, double var) {
        Eigen::VectorXd m(1);
        m(0) = mean;
        Eigen::MatrixXd c(1, 1);
        c(0, 0) = var;
        return {1, {m}, {c}};
    }

    /// Moment fit over a batch of samples, each laid out [sites x n]. A ridge keeps small batches invertible.
    static GaussianSequenceScore fit(const std::vector<std::span<const double>>& samples, std::size_t n,
                                     std::size_t groups, double ridge = 1e-4) {
        if (samples.empty() || n == 0 || groups == 0) throw DimensionError("score fit needs samples");
        const std::size_t sites = samples[0].size() / n;
        if (sites * n != samples[0].size() || sites < groups) throw DimensionError("score fit: bad sample layout");
        std::vector<Eigen::VectorXd> ms(groups, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n)));
        std::vector<Eigen::MatrixXd> cs(groups, Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)));
        std::vector<double> counts(groups, 0.0);
        for (const auto& s : samples) {
            if (s.size() != sites * n) throw DimensionError("score fit: inconsistent sample sizes");
            for (std::size_t site = 0; site < sites; ++site) {
                const auto g = group_of(site, sites, groups);
                ms[g] += Eigen::Map<const Eigen::VectorXd>(s.data() + site * n, static_cast<Eigen::Index>(n));
                counts[g] += 1.0;
            }
        }
        for (std::size_t g = 0; g < groups; ++g) ms[g] /= counts[g];
        for (const auto& s : samples)
            for (std::size_t site = 0; site < sites; ++site) {
                const auto g = group_of(site, sites, groups);
                const Eigen::VectorXd d =
                    Eigen::Map<const Eigen::VectorXd>(s.data() + site * n, static_cast<Eigen::Index>(n)) - ms[g];
                cs[g] += d * d.transpose();
            }
        for (std::size_t g = 0; g < groups; ++g) {
            cs[g] /= counts[g];
            cs[g].diagonal().array() += ridge;
        }
        return {n, std::move(ms), std::move(cs)};
    }

    static std::size_t group_of(std::size_t site, std::size_t sites, std::size_t groups) {
        return site * groups / sites;
    }

    /// Score of the noised marginal: -(a^2 C + s^2 I)^{-1} (x - a mu), per site.
    std::vector<double> score(std::span<const double> x, double alpha, double sigma) const {
        if (n_ == 0 || x.size() % n_ != 0) throw DimensionError("score: input not a multiple of the sequence length");
        const std::size_t sites = x.size() / n_, groups = means_.size();
        if (sites < groups) throw DimensionError("score: fewer sites than groups");
        std::vector<Eigen::LLT<Eigen::MatrixXd>> llt;
        for (std::size_t g = 0; g < groups; ++g) {
            Eigen::MatrixXd m = alpha * alpha * covs_[g];
            m.diagonal().array() += sigma * sigma;
            llt.emplace_back(m);
            if (llt.back().info() != Eigen::Success) throw NumericError("score: noised covariance not positive definite");
        }
        std::vector<double> out(x.size());
        for (std::size_t site = 0; site < sites; ++site) {
            const auto g = group_of(site, sites, groups);
            const Eigen::VectorXd r =
                Eigen::Map<const Eigen::VectorXd>(x.data() + site * n_, static_cast<Eigen::Index>(n_)) - alpha * means_[g];
            Eigen::Map<Eigen::VectorXd>(out.data() + site * n_, static_cast<Eigen::Index>(n_)) = -llt[g].solve(r);
        }
        return out;
    }

    std::size_t length() const { return n_; }
    std::size_t groups() const { return means_.size(); }
    const Eigen::VectorXd& mean(std::size_t g) const { return means_.at(g); }
    const Eigen::MatrixXd& cov(std::size_t g) const { return covs_.at(g); }

private:
    std::size_t n_ = 0;
    std::vector<Eigen::VectorXd> means_;
    std::vector<Eigen::MatrixXd> covs_;
};

/// Real (frozen) and fake (refit) score models plus the fake model's staleness bookkeeping.
struct ScorePair {
    GaussianSequenceScore real;
    GaussianSequenceScore fake;
    std::uint64_t fitted_at = 0;  // generator version the fake model was fit to
    bool fitted = false;
    std::uint64_t max_staleness = 1;

    void refit(const std::vector<std::span<const double>>& samples, std::size_t n, std::size_t groups,
               std::uint64_t generator_version, double ridge = 1e-4) {
        fake = GaussianSequenceScore::fit(samples, n, groups, ridge);
        fitted_at = generator_version;
        fitted = true;
    }

    void check_fresh(std::uint64_t generator_version) const {
        if (!fitted) throw StalenessError("fake score was never fit");
        if (generator_version - fitted_at > max_staleness)
            throw StalenessError("fake score is " + std::to_string(generator_version - fitted_at) +
                                 " generator updates stale (limit " + std::to_string(max_staleness) + ")");
    }
};

/// Reverse-KL gradient w.r.t. the generator output at one diffusion time:
/// alpha_t (s_fake(x_t) - s_real(x_t)), x_t = alpha_t x + sigma_t noise. Returns plain values.
inline Tensor dmd_generator_grad(const Tensor& gen_out, const ScorePair& scores, std::size_t t_index,
                                 const Tensor& noise, const DiffusionSchedule& sched, std::uint64_t generator_version) {
    scores.check_fresh(generator_version);
    if (noise.numel() != gen_out.numel()) throw DimensionError("dmd: noise size differs from generator output");
    if (t_index >= sched.size()) throw ScheduleError("dmd: t index out of range");
    const double a = sched.alpha(t_index), s = sched.sigma(t_index);
    std::vector<double> xt(gen_out.numel());
    for (std::size_t i = 0; i < xt.size(); ++i) xt[i] = a * gen_out[i] + s * noise[i];
    const auto sf = scores.fake.score(xt, a, s);
    const auto sr = scores.real.score(xt, a, s);
    std::vector<double> g(xt.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = a * (sf[i] - sr[i]);
    return Tensor::from(gen_out.shape(), std::move(g));
}

/// 0.5 * mean((x - stopgrad(x - g))^2); its gradient w.r.t. x is g / numel.
inline Tensor dmd_surrogate_loss(const Tensor& gen_out, const Tensor& grad) {
    const Tensor target = detach(sub(gen_out, grad));
    const Tensor d = sub(gen_out, target);
    return scale(mean(mul(d, d)), 0.5);
}

/// Closed-form KL(N(m1,v1) || N(m2,v2)).
inline double gaussian_kl(double m1, double v1, double m2, double v2) {
    return 0.5 * (std::log(v2 / v1) + (v1 + (m1 - m2) * (m1 - m2)) / v2 - 1.0);
}

struct GaussianDmdConfig {
    double target_mean = 3.0;
    double target_var = 1.0;
    std::size_t steps = 400;
    std::size_t batch = 256;
    double lr = 0.05;
    std::size_t schedule_points = 9;
    std::uint64_t seed = 7;
};

struct GaussianDmdResult {
    double mean = 0.0;
    double var = 0.0;
    double final_kl = 0.0;
    std::vector<double> kl_trace;
};

/// One-dimensional distillation toy: generator x = a z + b, z ~ N(0,1), matched to N(target_mean, target_var).
inline GaussianDmdResult train_gaussian_dmd(const GaussianDmdConfig& cfg) {
    const DiffusionSchedule sched(cfg.schedule_points);
    Tensor ab = Tensor::from({2}, {1.0, 0.0}, true);  // (a, b)
    Adam opt({ab}, {cfg.lr, 0.9, 0.999, 1e-8});
    ScorePair scores;
    scores.real = GaussianSequenceScore::scalar(cfg.target_mean, cfg.target_var);
    const auto idx_a = std::make_shared<std::vector<std::size_t>>(cfg.batch, 0);
    const auto idx_b = std::make_shared<std::vector<std::size_t>>(cfg.batch, 1);
    GaussianDmdResult res;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        auto rng = Rng::derive(cfg.seed, 0xd3d, step);
        const Tensor z = Tensor::randn({cfg.batch}, rng);
        const Tensor gen = add(mul(gather(ab, idx_a, {cfg.batch}), z), gather(ab, idx_b, {cfg.batch}));
        scores.refit({gen.data()}, 1, 1, step, 1e-9);
        // Uniform weighting over interior grid times; one t and one noise draw per sample.
        std::vector<double> g(cfg.batch);
        std::vector<double> xt(1);
        for (std::size_t i = 0; i < cfg.batch; ++i) {
            const std::size_t ti = 1 + rng.below(sched.size() - 2);
            const double al = sched.alpha(ti), si = sched.sigma(ti);
            xt[0] = al * gen[i] + si * rng.normal();
            g[i] = al * (scores.fake.score(xt, al, si)[0] - scores.real.score(xt, al, si)[0]);
        }
        opt.zero_grad();
        backward(dmd_surrogate_loss(gen, Tensor::from({cfg.batch}, std::move(g))));
        opt.step();
        res.kl_trace.push_back(gaussian_kl(ab[1], ab[0] * ab[0], cfg.target_mean, cfg.target_var));
    }
    res.mean = ab[1];
    res.var = ab[0] * ab[0];
    res.final_kl = gaussian_kl(res.mean, res.var, cfg.target_mean, cfg.target_var);
    return res;
}

}  // namespace ew
