#pragma once

// A plain two-backbone multi-label classifier trained on the task loss alone: the
// reference the all-off ablation cell is checked against.

#include <string>
#include <vector>

#include "ivcxr/harness.hpp"

namespace ivcxr {

template <typename T>
class PlainClassifier {
public:
    PlainClassifier(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), store_(seed) {
        const std::size_t k = cfg.k, d = cfg.backbone.d, dr = cfg.causal_dim();
        first_ = backbone::Backbone<T>(store_, "backbone_i", cfg.backbone);
        second_ = backbone::Backbone<T>(store_, "backbone_c", cfg.backbone);
        map_first_ = nn::Linear<T>(store_, "inst_map", d, k * d);
        map_second_ = nn::Linear<T>(store_, "conf_map", d, k * d);
        text_ = semfuse::ConcatFusion<T>(store_, "fusion", d, cfg.fusion);
        mlp_ = causal::CausalMlp<T>(store_, "causal", d, dr);
        head_ = nn::ClassHead<T>(store_, "classifier", k, dr + d);
    }

    diff::ParameterStore<T>& params() { return store_; }

    Tensor<T> scores(const Batch<T>& batch) const {
        const std::size_t B = batch.size(), k = cfg_.k, d = cfg_.backbone.d;
        auto a = diff::mean_axis(first_.forward(batch.images).flat(), 1);
        auto b = diff::mean_axis(second_.forward(batch.images).flat(), 1);
        auto x = text_(diff::reshape(map_first_(a), {B, k, d}), batch.tokens);
        auto c = diff::reshape(map_second_(b), {B, k, d});
        return causal::predict(causal::causal_rep(x, c, mlp_), c, head_);
    }

private:
    ModelConfig cfg_;
    diff::ParameterStore<T> store_;
    backbone::Backbone<T> first_, second_;
    nn::Linear<T> map_first_, map_second_;
    semfuse::ConcatFusion<T> text_;
    causal::CausalMlp<T> mlp_;
    nn::ClassHead<T> head_;
};

/// Trains a PlainClassifier with the batch schedule of Trainer and returns the
/// per-step task loss.
template <typename T>
std::vector<double> train_plain(PlainClassifier<T>& net, const TrainConfig& t, const DataSplit& train,
                                std::size_t steps) {
    std::vector<double> losses;
    for (std::size_t s = 0; s < steps; ++s) {
        auto idx = batch_indices(t.seed, s, train.samples.size(), t.batch_size);
        auto batch = make_batch<T>(train, idx, t.model.max_len);
        auto loss = diff::scale(causal::task_loss(net.scores(batch), batch.labels), static_cast<T>(t.weights[5]));
        losses.push_back(static_cast<double>(loss.item()));
        net.params().zero_grad();
        loss.backward();
        diff::adam_step(net.params(), t.optimizer);
    }
    return losses;
}

}  // namespace ivcxr
