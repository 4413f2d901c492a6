#pragma once

// Query decoder that splits a spatial feature map into an instrument branch
// (attention-weighted features) and a confounder branch (complement-weighted
// features), plus the two heads that supervise them.

#include <cmath>
#include <string>
#include <vector>

#include "ivcxr/diff/ops.hpp"
#include "ivcxr/diff/param.hpp"
#include "ivcxr/nn.hpp"

namespace ivcxr::ivlearn {

using diff::Tensor;

template <typename T>
struct LayerOutput {
    Tensor<T> instrument;  // [.., k, d]
    Tensor<T> confounder;  // [.., k, d]
    Tensor<T> attention;   // [.., k, h*w]
};

/// One decoder layer. queries: [k, d] or [B, k, d]; features: flattened F, [n, d] or [B, n, d].
///   A = softmax(Q F^T / sqrt(d)),  instrument = A F,  confounder = (1 - A) F
template <typename T>
LayerOutput<T> decode_layer(const Tensor<T>& queries, const Tensor<T>& features) {
    require(queries.rank() >= 2 && features.rank() >= 2 && queries.shape().back() == features.shape().back(),
            "decode_layer: query width must equal feature width: " + diff::to_string(queries.shape()) + " vs " +
                diff::to_string(features.shape()));
    const T inv_sqrt_d = T(1) / static_cast<T>(std::sqrt(static_cast<double>(features.shape().back())));
    auto attention = diff::softmax(diff::scale(diff::matmul(queries, diff::transpose(features)), inv_sqrt_d));
    auto complement = diff::add_scalar(diff::scale(attention, T(-1)), T(1));
    return {diff::matmul(attention, features), diff::matmul(complement, features), attention};
}

struct DecoderConfig {
    std::size_t layers = 2;
    bool residual = true;  // next queries = instrument + Lin(instrument)
};

template <typename T>
struct DecoderOutput {
    Tensor<T> instrument;  // I', [B, k, d]
    Tensor<T> confounder;  // C from the last layer, [B, k, d]
    Tensor<T> attention;   // last layer's A, [B, k, h*w]
};

/// Stack of decode_layer calls starting from zero-initialized learnable queries.
template <typename T>
class Decoder {
public:
    Decoder() = default;
    Decoder(diff::ParameterStore<T>& store, const std::string& name, std::size_t k, std::size_t d,
            const DecoderConfig& cfg)
        : cfg_(cfg), k_(k), d_(d) {
        require(cfg.layers >= 1, "decoder needs at least one layer");
        queries_ = store.add(name + ".queries", {k, d}, diff::Init::zeros);
        for (std::size_t l = 0; l < cfg.layers; ++l)
            projections_.emplace_back(store, name + ".proj" + std::to_string(l), d, d);
    }

    std::size_t layers() const { return cfg_.layers; }
    const Tensor<T>& queries() const { return queries_; }
    nn::Linear<T>& projection(std::size_t l) { return projections_.at(l); }

    /// features: flattened F, [B, n, d].
    DecoderOutput<T> operator()(const Tensor<T>& features) const {
        require(features.rank() == 3 && features.dim(2) == d_,
                "decoder expects features [B,n," + std::to_string(d_) + "], got " +
                    diff::to_string(features.shape()));
        Tensor<T> q = diff::broadcast_to(queries_, {features.dim(0), k_, d_});
        LayerOutput<T> out;
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            out = decode_layer(q, features);
            auto projected = projections_[l](out.instrument);
            q = cfg_.residual ? diff::add(out.instrument, projected) : projected;
        }
        return {q, out.confounder, out.attention};
    }

private:
    DecoderConfig cfg_;
    std::size_t k_ = 0, d_ = 0;
    Tensor<T> queries_;
    std::vector<nn::Linear<T>> projections_;
};

/// Instrument head: per-class sigmoid score from each row of I', trained with BCE.
template <typename T>
Tensor<T> iv_loss(const Tensor<T>& instrument, const Tensor<T>& labels, const nn::ClassHead<T>& head) {
    return nn::binary_cross_entropy(diff::sigmoid(head(instrument)), labels);
}

/// Confounder head: softmax over the k class scores of C, pulled towards uniform.
template <typename T>
Tensor<T> confounder_loss(const Tensor<T>& confounder, const nn::ClassHead<T>& head) {
    return nn::kl_uniform(diff::softmax(head(confounder)));
}

}  // namespace ivcxr::ivlearn
