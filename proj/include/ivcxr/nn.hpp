#pragma once

// Small layers shared by several modules, plus the two probability losses.

#include <cmath>
#include <string>

#include "ivcxr/diff/ops.hpp"
#include "ivcxr/diff/param.hpp"

namespace ivcxr::nn {

using diff::Init;
using diff::ParameterStore;
using diff::Tensor;

/// y = x W + b over the last axis of a rank-2 or rank-3 input.
template <typename T>
struct Linear {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]

    Linear() = default;
    Linear(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
           Init weight_init = Init::fan_in_uniform)
        : weight(store.add(name + ".weight", {in, out}, weight_init, in)),
          bias(store.add(name + ".bias", {out}, Init::zeros)) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return diff::add(diff::matmul(x, weight), bias); }
};

/// One affine score per class row: logits[b, i] = <x[b, i, :], W[i, :]> + bias[i].
template <typename T>
struct ClassHead {
    Tensor<T> weight;  // [k, in]
    Tensor<T> bias;    // [k]

    ClassHead() = default;
    ClassHead(ParameterStore<T>& store, const std::string& name, std::size_t k, std::size_t in)
        : weight(store.add(name + ".weight", {k, in}, Init::fan_in_uniform, in)),
          bias(store.add(name + ".bias", {k}, Init::zeros)) {}

    /// x: [B, k, in] -> logits [B, k]
    Tensor<T> operator()(const Tensor<T>& x) const {
        require(x.rank() == 3 && x.dim(1) == weight.dim(0) && x.dim(2) == weight.dim(1),
                "class head expects [B," + std::to_string(weight.dim(0)) + "," + std::to_string(weight.dim(1)) +
                    "], got " + diff::to_string(x.shape()));
        return diff::add(diff::sum_axis(diff::mul(x, weight), 2), bias);
    }
};

/// Floor applied inside every log of a probability.
inline constexpr double kProbFloor = 1e-12;

template <typename T>
void require_binary(const Tensor<T>& labels) {
    for (T v : labels.values())
        require(v == T(0) || v == T(1), "labels must be 0 or 1, found " + std::to_string(static_cast<double>(v)));
}

/// Mean binary cross-entropy over all entries of probs against 0/1 labels.
template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& probs, const Tensor<T>& labels) {
    require(probs.shape() == labels.shape(), "binary_cross_entropy: shape " + diff::to_string(probs.shape()) +
                                                 " vs labels " + diff::to_string(labels.shape()));
    require_binary(labels);
    const T floor = static_cast<T>(kProbFloor);
    auto log_p = diff::log(diff::clamp(probs, floor, T(1)));
    auto log_q = diff::log(diff::clamp(diff::add_scalar(diff::scale(probs, T(-1)), T(1)), floor, T(1)));
    auto neg = diff::add_scalar(diff::scale(labels, T(-1)), T(1));
    return diff::scale(diff::mean(diff::add(diff::mul(labels, log_p), diff::mul(neg, log_q))), T(-1));
}

/// Batch mean of KL(uniform || p) where each row of probs [B, k] is a distribution:
///   sum_i (1/k) ln((1/k) / p_i) = -ln k - mean_i ln p_i
template <typename T>
Tensor<T> kl_uniform(const Tensor<T>& probs) {
    const std::size_t k = probs.shape().back();
    require(k >= 2, "KL to uniform needs at least 2 classes");
    auto log_p = diff::log(diff::clamp(probs, static_cast<T>(kProbFloor), T(1)));
    return diff::add_scalar(diff::scale(diff::mean(log_p), T(-1)), static_cast<T>(-std::log(double(k))));
}

}  // namespace ivcxr::nn
