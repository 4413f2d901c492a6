#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "ivcxr/diff/tensor.hpp"
#include "ivcxr/rng.hpp"

namespace ivcxr::diff {

/// A trainable tensor plus its Adam moment estimates.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
    std::vector<T> m;  // first moment
    std::vector<T> v;  // second moment
    std::uint64_t step = 0;
};

enum class Init { zeros, fan_in_uniform };

/// Owns named parameters. Initial values come from the named stream
/// "init/<name>", so two stores that declare the same names with the same seed
/// hold bit-identical values regardless of declaration order.
template <typename T>
class ParameterStore {
public:
    explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

    Tensor<T> add(const std::string& name, const Shape& shape, Init init, std::size_t fan_in = 1) {
        require(!index_.contains(name), "duplicate parameter name '" + name + "'");
        std::vector<T> values(numel(shape), T(0));
        if (init == Init::fan_in_uniform) {
            StreamRng rng(seed_, "init/" + name);
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (T& x : values) x = static_cast<T>(rng.uniform(-bound, bound));
        }
        Parameter<T> p{name, Tensor<T>(shape, std::move(values), true), {}, {}, 0};
        p.m.assign(p.tensor.size(), T(0));
        p.v.assign(p.tensor.size(), T(0));
        index_[name] = params_.size();
        params_.push_back(std::move(p));
        return params_.back().tensor;
    }

    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.size();
        return n;
    }
    bool contains(const std::string& name) const { return index_.contains(name); }
    Parameter<T>& at(const std::string& name) {
        auto it = index_.find(name);
        require(it != index_.end(), "no parameter named '" + name + "'");
        return params_[it->second];
    }
    std::deque<Parameter<T>>& params() { return params_; }
    const std::deque<Parameter<T>>& params() const { return params_; }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    /// Overwrites all values and optimizer state from another store with the same layout.
    void copy_from(const ParameterStore& other) {
        require(other.params_.size() == params_.size(), "parameter layout mismatch");
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& dst = params_[i];
            const auto& src = other.params_[i];
            require(dst.name == src.name && dst.tensor.shape() == src.tensor.shape(),
                    "parameter layout mismatch at '" + dst.name + "'");
            std::copy(src.tensor.values().begin(), src.tensor.values().end(), dst.tensor.mutable_values().begin());
            dst.m = src.m;
            dst.v = src.v;
            dst.step = src.step;
        }
    }

private:
    std::uint64_t seed_;
    std::deque<Parameter<T>> params_;
    std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

/// Adam with decoupled weight decay on one parameter:
///   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
/// The gradient slot is zeroed afterwards.
template <typename T>
void adam_step(Parameter<T>& p, const AdamConfig& cfg) {
    if (!p.tensor.has_grad()) throw ContractViolation("adam_step: parameter '" + p.name + "' has no gradient");
    p.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
    auto theta = p.tensor.mutable_values();
    auto grad = p.tensor.mutable_grad();
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = grad[i];
        const double m = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
        const double v = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
        p.m[i] = static_cast<T>(m);
        p.v[i] = static_cast<T>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        const double th = theta[i];
        theta[i] = static_cast<T>(th - cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * th));
        grad[i] = T(0);
    }
}

template <typename T>
void adam_step(ParameterStore<T>& store, const AdamConfig& cfg) {
    for (auto& p : store.params())
        if (!p.tensor.has_grad()) throw ContractViolation("adam_step: parameter '" + p.name + "' has no gradient");
    for (auto& p : store.params()) adam_step(p, cfg);
}

}  // namespace ivcxr::diff
