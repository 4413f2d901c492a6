#pragma once

// Conditional Gaussian density estimators and the pairwise mutual-information
// losses built on them. Each estimator owns its parameters; the main model only
// ever sees detached copies, so the two are trained in separate phases.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "ivcxr/diff/ops.hpp"
#include "ivcxr/diff/param.hpp"
#include "ivcxr/nn.hpp"

namespace ivcxr::mi {

using diff::Tensor;

enum class Role { IC, IR, IY };

inline const char* role_name(Role r) {
    switch (r) {
        case Role::IC: return "IC";
        case Role::IR: return "IR";
        case Role::IY: return "IY";
    }
    return "?";
}

inline constexpr double kLogVarBound = 6.0;

template <typename T>
struct Gaussian {
    Tensor<T> mean;     // [n, D]
    Tensor<T> logvar;   // [n, D], clamped to [-6, 6]
};

struct FitReport {
    double nll_before = 0.0;
    double nll_after = 0.0;
    int retries = 0;       // halvings of the learning rate
    bool forced = false;   // accepted although the NLL went up
};

/// Diagonal Gaussian over the target space with mean and log-variance produced
/// by a perceptron with two hidden rectifier layers.
template <typename T>
class CondDensityEstimator {
public:
    CondDensityEstimator(std::uint64_t seed, const std::string& name, std::size_t cond_dim, std::size_t target_dim,
                         std::size_t hidden = 64)
        : store_(seed), cond_dim_(cond_dim), target_dim_(target_dim) {
        require(cond_dim > 0 && target_dim > 0 && hidden > 0, "estimator dimensions must be positive");
        l1_ = nn::Linear<T>(store_, name + ".l1", cond_dim, hidden);
        l2_ = nn::Linear<T>(store_, name + ".l2", hidden, hidden);
        mu_ = nn::Linear<T>(store_, name + ".mu", hidden, target_dim);
        lv_ = nn::Linear<T>(store_, name + ".logvar", hidden, target_dim);
    }

    std::size_t cond_dim() const { return cond_dim_; }
    std::size_t target_dim() const { return target_dim_; }
    diff::ParameterStore<T>& store() { return store_; }
    const diff::ParameterStore<T>& store() const { return store_; }

    /// cond: [n, cond_dim]. With detached parameters no gradient reaches the estimator.
    Gaussian<T> forward(const Tensor<T>& cond, bool detached_params = false) const {
        require(cond.rank() == 2 && cond.dim(1) == cond_dim_,
                "estimator conditioning must be [n," + std::to_string(cond_dim_) + "], got " +
                    diff::to_string(cond.shape()));
        auto lin = [detached_params](const nn::Linear<T>& l, const Tensor<T>& x) {
            if (!detached_params) return l(x);
            return diff::add(diff::matmul(x, l.weight.detach()), l.bias.detach());
        };
        auto h = diff::relu(lin(l2_, diff::relu(lin(l1_, cond))));
        const T b = static_cast<T>(kLogVarBound);
        return {lin(mu_, h), diff::clamp(lin(lv_, h), -b, b)};
    }

    /// log N(target_i; mu(cond_i), diag exp(logvar(cond_i))) for each row i, as [n].
    Tensor<T> log_density(const Tensor<T>& cond, const Tensor<T>& target, bool detached_params = false) const {
        check_target(cond, target);
        auto g = forward(cond, detached_params);
        auto diff2 = diff::sub(target, g.mean);
        auto quad = diff::sum_axis(diff::mul(diff::mul(diff2, diff2), diff::exp(diff::scale(g.logvar, T(-1)))), 1);
        auto logdet = diff::sum_axis(g.logvar, 1);
        const T c = static_cast<T>(-0.5 * static_cast<double>(target_dim_) * std::log(2.0 * std::numbers::pi));
        return diff::add_scalar(diff::scale(diff::add(quad, logdet), T(-0.5)), c);
    }

    /// Mean negative log-likelihood over the batch.
    Tensor<T> nll(const Tensor<T>& cond, const Tensor<T>& target) const {
        return diff::scale(diff::mean(log_density(cond, target)), T(-1));
    }

    /// sign * (1/n^2) sum_i sum_j [log f(t_i|c_i) - log f(t_j|c_i)], with the estimator
    /// held constant. The normalizer and log-variance terms cancel inside each i, so
    /// with Q_ij = sum_d (t_j - mu_i)^2 / sigma_i^2 this is
    ///   sign * ( -1/(2n) sum_i Q_ii + 1/(2n^2) sum_ij Q_ij ).
    Tensor<T> pairwise_loss(const Tensor<T>& cond, const Tensor<T>& target, T sign) const {
        check_target(cond, target);
        const std::size_t n = cond.dim(0), D = target_dim_;
        auto g = forward(cond, true);
        auto mu = diff::reshape(g.mean, {n, 1, D});
        auto prec = diff::reshape(diff::exp(diff::scale(g.logvar, T(-1))), {n, 1, D});
        auto t = diff::reshape(target, {1, n, D});
        auto dev = diff::sub(t, mu);                                        // [n, n, D]
        auto q = diff::sum_axis(diff::mul(diff::mul(dev, dev), prec), 2);   // [n, n]
        std::vector<T> eye(n * n, T(0));
        for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = T(1);
        auto diag = diff::sum(diff::mul(q, Tensor<T>({n, n}, std::move(eye))));
        auto joint = diff::scale(diag, T(-0.5) / T(n));
        auto marginal = diff::scale(diff::mean(q), T(0.5));
        return diff::scale(diff::add(joint, marginal), sign);
    }

    /// One Adam step (no weight decay) raising the mean log-likelihood of a detached
    /// batch. If the batch NLL rises, the step is undone and retried at half the
    /// learning rate, at most three times; the last attempt is then kept.
    FitReport fit_step(const Tensor<T>& cond, const Tensor<T>& target, double lr) {
        require(!cond.requires_grad() && !target.requires_grad(), "estimator fit inputs must be detached");
        FitReport rep;
        store_.zero_grad();
        auto loss = nll(cond, target);
        rep.nll_before = loss.item();
        loss.backward();

        struct Saved {
            std::vector<T> value, grad, m, v;
            std::uint64_t step;
        };
        std::vector<Saved> saved;
        for (auto& p : store_.params())
            saved.push_back({std::vector<T>(p.tensor.values().begin(), p.tensor.values().end()),
                             std::vector<T>(p.tensor.grad().begin(), p.tensor.grad().end()), p.m, p.v, p.step});
        diff::AdamConfig cfg;
        cfg.weight_decay = 0.0;
        cfg.lr = lr;
        for (int attempt = 0;; ++attempt) {
            diff::adam_step(store_, cfg);
            {
                diff::NoGradGuard guard;
                rep.nll_after = nll(cond, target).item();
            }
            if (rep.nll_after <= rep.nll_before || lr == 0.0) break;
            if (attempt == 3) {
                rep.forced = true;
                break;
            }
            std::size_t i = 0;
            for (auto& p : store_.params()) {
                const Saved& s = saved[i++];
                std::copy(s.value.begin(), s.value.end(), p.tensor.mutable_values().begin());
                std::copy(s.grad.begin(), s.grad.end(), p.tensor.mutable_grad().begin());
                p.m = s.m;
                p.v = s.v;
                p.step = s.step;
            }
            cfg.lr *= 0.5;
            rep.retries += 1;
        }
        return rep;
    }

private:
    void check_target(const Tensor<T>& cond, const Tensor<T>& target) const {
        require(cond.rank() == 2 && cond.dim(0) > 0, "estimator needs a non-empty [n, dim] batch");
        require(target.rank() == 2 && target.dim(0) == cond.dim(0) && target.dim(1) == target_dim_,
                "estimator target must be [" + std::to_string(cond.dim(0)) + "," + std::to_string(target_dim_) +
                    "], got " + diff::to_string(target.shape()));
    }

    diff::ParameterStore<T> store_;
    std::size_t cond_dim_, target_dim_;
    nn::Linear<T> l1_, l2_, mu_, lv_;
};

/// Log-density of a diagonal Gaussian at one point, from explicit mean and log-variance.
inline double gaussian_log_density(const std::vector<double>& target, const std::vector<double>& mean,
                                   const std::vector<double>& logvar) {
    require(target.size() == mean.size() && mean.size() == logvar.size(), "gaussian_log_density: size mismatch");
    double s = -0.5 * static_cast<double>(target.size()) * std::log(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double lv = std::clamp(logvar[i], -kLogVarBound, kLogVarBound);
        s -= 0.5 * lv + 0.5 * (target[i] - mean[i]) * (target[i] - mean[i]) * std::exp(-lv);
    }
    return s;
}

/// Per-sample reduction used for conditioning and targets: mean over the k class rows.
template <typename T>
Tensor<T> row_mean(const Tensor<T>& x) {
    require(x.rank() == 3, "row_mean expects [B, k, d], got " + diff::to_string(x.shape()));
    return diff::mean_axis(x, 1);
}

}  // namespace ivcxr::mi
