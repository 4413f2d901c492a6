#pragma once

// The full classifier with its three ablation switches:
//   IV learning      on: one backbone + query decoder gives I' and C
//                    off: two backbones, each pooled and mapped to k rows
//   semantic fusion  on: cross-attention of I' over the token record
//                    off: I' concatenated with the mean token embedding
//   constraints      on: three conditional-density estimators and MI terms
//                    off: those terms are zero and no estimator exists

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ivcxr/backbone.hpp"
#include "ivcxr/causalhead.hpp"
#include "ivcxr/config.hpp"
#include "ivcxr/ivlearn.hpp"
#include "ivcxr/miconstraint.hpp"
#include "ivcxr/nn.hpp"
#include "ivcxr/semfuse.hpp"

namespace ivcxr {

using diff::Tensor;

/// One mini-batch: images [B,H,W,C], padded token records, labels [B,k].
template <typename T>
struct Batch {
    Tensor<T> images;
    std::vector<std::vector<semfuse::TokenId>> tokens;
    Tensor<T> labels;

    std::size_t size() const { return tokens.size(); }
};

template <typename T>
struct ForwardResult {
    Tensor<T> i_prime;     // [B,k,d]
    Tensor<T> instrument;  // I after fusion, [B,k,d]
    Tensor<T> confounder;  // [B,k,d]
    Tensor<T> rep;         // R, [B,k,d_R]
    Tensor<T> scores;      // [B,k]
    Tensor<T> attention;   // last decoder attention [B,k,h*w]; undefined with IV learning off
    std::size_t h = 0, w = 0;
};

template <typename T>
class Model {
public:
    Model(const ModelConfig& cfg, const Toggles& toggles, std::uint64_t seed, const EstimatorConfig& est = {})
        : cfg_(cfg), toggles_(toggles), est_cfg_(est), store_(seed) {
        const std::size_t k = cfg.k, d = cfg.backbone.d, dr = cfg.causal_dim();
        require(k >= 2, "model needs at least two classes");
        require(cfg.fusion.vocab > static_cast<std::size_t>(semfuse::kClsId), "vocabulary must hold <pad> and <cls>");
        if (toggles.iv_learning) {
            backbone_ = backbone::Backbone<T>(store_, "backbone", cfg.backbone);
            decoder_ = ivlearn::Decoder<T>(store_, "decoder", k, d, cfg.decoder);
            head_i_ = nn::ClassHead<T>(store_, "head_I", k, d);
            head_c_ = nn::ClassHead<T>(store_, "head_C", k, d);
        } else {
            backbone_ = backbone::Backbone<T>(store_, "backbone_i", cfg.backbone);
            backbone_c_ = backbone::Backbone<T>(store_, "backbone_c", cfg.backbone);
            inst_map_ = nn::Linear<T>(store_, "inst_map", d, k * d);
            conf_map_ = nn::Linear<T>(store_, "conf_map", d, k * d);
        }
        if (toggles.semantic_fusion)
            fusion_ = semfuse::Fusion<T>(store_, "fusion", d, cfg.fusion);
        else
            concat_ = semfuse::ConcatFusion<T>(store_, "fusion", d, cfg.fusion);
        mlp_ = causal::CausalMlp<T>(store_, "causal", d, dr);
        classifier_ = nn::ClassHead<T>(store_, "classifier", k, dr + d);
        if (toggles.constraints) {
            estimators_[0].emplace(seed, "est_IC", d, d, est.hidden);
            estimators_[1].emplace(seed, "est_IR", d, dr, est.hidden);
            estimators_[2].emplace(seed, "est_IY", d, k, est.hidden);
        }
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return cfg_; }
    const Toggles& toggles() const { return toggles_; }
    diff::ParameterStore<T>& params() { return store_; }
    const diff::ParameterStore<T>& params() const { return store_; }
    bool has_estimators() const { return toggles_.constraints; }
    mi::CondDensityEstimator<T>& estimator(mi::Role r) {
        auto& e = estimators_[static_cast<std::size_t>(r)];
        require(e.has_value(), "estimators are disabled in this configuration");
        return *e;
    }
    const nn::ClassHead<T>& head_i() const { return head_i_; }
    const nn::ClassHead<T>& head_c() const { return head_c_; }

    /// Every parameter store, main model first.
    std::vector<diff::ParameterStore<T>*> stores() {
        std::vector<diff::ParameterStore<T>*> out{&store_};
        for (auto& e : estimators_)
            if (e) out.push_back(&e->store());
        return out;
    }

    ForwardResult<T> forward(const Batch<T>& batch, bool training) const {
        ForwardResult<T> r;
        const std::size_t B = batch.size(), k = cfg_.k, d = cfg_.backbone.d;
        auto fmap = backbone_.forward(batch.images);
        r.h = fmap.h;
        r.w = fmap.w;
        if (toggles_.iv_learning) {
            auto dec = decoder_(fmap.flat());
            r.i_prime = dec.instrument;
            r.confounder = dec.confounder;
            r.attention = dec.attention;
        } else {
            auto pooled_i = diff::mean_axis(fmap.flat(), 1);
            auto pooled_c = diff::mean_axis(backbone_c_.forward(batch.images).flat(), 1);
            r.i_prime = diff::reshape(inst_map_(pooled_i), {B, k, d});
            r.confounder = diff::reshape(conf_map_(pooled_c), {B, k, d});
        }
        r.instrument = toggles_.semantic_fusion ? fusion_(r.i_prime, batch.tokens) : concat_(r.i_prime, batch.tokens);
        Tensor<T> c = r.confounder;
        if (cfg_.stop_grad_c) c = c.detach();
        if (!training && cfg_.zero_c_at_test) c = Tensor<T>::zeros(c.shape());
        r.rep = causal::causal_rep(r.instrument, c, mlp_);
        r.scores = causal::predict(r.rep, c, classifier_);
        return r;
    }

    /// The six loss terms for a forward result. MI terms use the estimators as
    /// constants; the IV-learning heads are absent (zero) with IV learning off.
    causal::LossTerms<T> losses(const ForwardResult<T>& f, const Batch<T>& batch) const {
        causal::LossTerms<T> t;
        const Tensor<T> zero = Tensor<T>::scalar(T(0));
        if (toggles_.iv_learning) {
            t[0] = ivlearn::iv_loss(f.i_prime, batch.labels, head_i_);
            t[1] = ivlearn::confounder_loss(f.confounder, head_c_);
        } else {
            t[0] = t[1] = zero;
        }
        if (toggles_.constraints) {
            auto cond = mi_vector(f.instrument);
            t[2] = estimators_[0]->pairwise_loss(cond, mi_vector(f.confounder), T(1));
            t[3] = estimators_[1]->pairwise_loss(cond, mi_vector(f.rep), T(-1));
            t[4] = estimators_[2]->pairwise_loss(cond, f.scores, T(1));
        } else {
            t[2] = t[3] = t[4] = zero;
        }
        t[5] = causal::task_loss(f.scores, batch.labels);
        return t;
    }

    /// Detached (condition, target) pairs for each estimator, in role order.
    std::array<std::pair<Tensor<T>, Tensor<T>>, 3> estimator_inputs(const ForwardResult<T>& f) const {
        auto cond = mi_vector(f.instrument).detach();
        return {{{cond, mi_vector(f.confounder).detach()},
                 {cond, mi_vector(f.rep).detach()},
                 {cond, f.scores.detach()}}};
    }

    /// Per-sample vector seen by the estimators: the mean over the k rows, optionally
    /// standardized so the main model cannot move the MI terms by rescaling.
    Tensor<T> mi_vector(const Tensor<T>& x) const {
        auto v = mi::row_mean(x);
        return est_cfg_.normalize ? diff::layer_norm(v) : v;
    }

private:
    ModelConfig cfg_;
    Toggles toggles_;
    EstimatorConfig est_cfg_;
    diff::ParameterStore<T> store_;
    backbone::Backbone<T> backbone_, backbone_c_;
    ivlearn::Decoder<T> decoder_;
    nn::ClassHead<T> head_i_, head_c_;
    nn::Linear<T> inst_map_, conf_map_;
    semfuse::Fusion<T> fusion_;
    semfuse::ConcatFusion<T> concat_;
    causal::CausalMlp<T> mlp_;
    nn::ClassHead<T> classifier_;
    std::array<std::optional<mi::CondDensityEstimator<T>>, 3> estimators_;
};

}  // namespace ivcxr
