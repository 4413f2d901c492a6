#pragma once

// Causal representation R from [I | C], the final classifier over [R | C], and the
// six-term objective.

#include <array>
#include <cmath>
#include <string>

#include "ivcxr/diff/ops.hpp"
#include "ivcxr/diff/param.hpp"
#include "ivcxr/nn.hpp"

namespace ivcxr::causal {

using diff::Tensor;

/// Point-wise two-layer perceptron applied to every class row of [I | C].
template <typename T>
struct CausalMlp {
    nn::Linear<T> l1;  // 2d -> d_R
    nn::Linear<T> l2;  // d_R -> d_R

    CausalMlp() = default;
    CausalMlp(diff::ParameterStore<T>& store, const std::string& name, std::size_t d, std::size_t d_r)
        : l1(store, name + ".l1", 2 * d, d_r), l2(store, name + ".l2", d_r, d_r) {}
};

/// R = W2 relu(W1 [I | C] + b1) + b2, row by row. I and C: [B, k, d].
template <typename T>
Tensor<T> causal_rep(const Tensor<T>& instrument, const Tensor<T>& confounder, const CausalMlp<T>& mlp) {
    require(instrument.shape() == confounder.shape(), "causal_rep: I and C shapes differ: " +
                                                          diff::to_string(instrument.shape()) + " vs " +
                                                          diff::to_string(confounder.shape()));
    return mlp.l2(diff::relu(mlp.l1(diff::concat_last(instrument, confounder))));
}

/// Per-class score sigmoid(<[R_i | C_i], w_i> + b_i), as [B, k].
template <typename T>
Tensor<T> predict(const Tensor<T>& rep, const Tensor<T>& confounder, const nn::ClassHead<T>& head) {
    return diff::sigmoid(head(diff::concat_last(rep, confounder)));
}

/// Mean per-class binary cross-entropy of the final scores.
template <typename T>
Tensor<T> task_loss(const Tensor<T>& scores, const Tensor<T>& labels) {
    return nn::binary_cross_entropy(scores, labels);
}

inline constexpr std::array<const char*, 6> kTermNames = {"L_I", "L_C", "L_IC", "L_IR", "L_IY", "L_Y"};

/// The six loss terms in logging order.
template <typename T>
struct LossTerms {
    std::array<Tensor<T>, 6> terms;

    Tensor<T>& operator[](std::size_t i) { return terms[i]; }
    const Tensor<T>& operator[](std::size_t i) const { return terms[i]; }
};

using LossWeights = std::array<double, 6>;
inline constexpr LossWeights kUnitWeights = {1, 1, 1, 1, 1, 1};

/// Weighted sum of the six terms; a non-finite term is reported by name.
template <typename T>
Tensor<T> total_loss(const LossTerms<T>& t, const LossWeights& w = kUnitWeights) {
    Tensor<T> total;
    for (std::size_t i = 0; i < 6; ++i) {
        require(t[i].defined() && t[i].size() == 1, std::string("loss term ") + kTermNames[i] + " is not a scalar");
        if (!std::isfinite(static_cast<double>(t[i].item())))
            throw NumericFault(std::string("non-finite loss term ") + kTermNames[i]);
        auto part = diff::scale(t[i], static_cast<T>(w[i]));
        total = total.defined() ? diff::add(total, part) : part;
    }
    return total;
}

/// Same sum over plain numbers, used for logging and for the log's consistency check.
inline double total_loss(const std::array<double, 6>& terms, const LossWeights& w = kUnitWeights) {
    double s = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
        if (!std::isfinite(terms[i])) throw NumericFault(std::string("non-finite loss term ") + kTermNames[i]);
        s += w[i] * terms[i];
    }
    return s;
}

}  // namespace ivcxr::causal
