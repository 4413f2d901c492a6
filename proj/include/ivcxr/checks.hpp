#pragma once

// Self-checks shared by the unit tests, the `check` subcommand and the acceptance
// run: finite-difference checks of every op and of the full objective, the
// decoder's complementarity identity, estimator null and ordering experiments,
// the AUC oracle and the uncertain-label policies.

#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ivcxr/diff/gradcheck.hpp"
#include "ivcxr/diff/ops.hpp"
#include "ivcxr/ingest.hpp"
#include "ivcxr/ivlearn.hpp"
#include "ivcxr/metrics.hpp"
#include "ivcxr/miconstraint.hpp"
#include "ivcxr/model.hpp"

namespace ivcxr::checks {

using Td = diff::Tensor<double>;
using diff::NamedTensor;

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

inline Td random_tensor(const diff::Shape& shape, StreamRng& rng, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = false) {
    std::vector<double> v(diff::numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Td(shape, std::move(v), requires_grad);
}

inline std::string sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

inline Td weighted_sum(const Td& x, const Td& w) { return diff::sum(diff::mul(x, w)); }

// ---------------------------------------------------------------- op gradients

/// Inputs to probe and the scalar objective over them, for one random instance.
using OpInstance = std::pair<std::vector<NamedTensor>, std::function<Td()>>;
using OpCase = std::function<OpInstance(StreamRng&)>;

/// One case per op of the closed set. Inputs to kinked ops are kept away from the kinks.
inline std::map<std::string, OpCase> op_cases() {
    using namespace diff;
    std::map<std::string, OpCase> cases;
    using Gen = std::function<Td(const Shape&, StreamRng&)>;
    auto unary = [](std::function<Td(const Td&)> f, Gen gen) -> OpCase {
        return [f, gen](StreamRng& rng) {
            auto x = gen({3, 4}, rng);
            auto w = random_tensor(f(x).shape(), rng);
            return OpInstance{{{"x", x}}, [=] { return weighted_sum(f(x), w); }};
        };
    };
    Gen plain = [](const Shape& s, StreamRng& rng) { return random_tensor(s, rng, -1, 1, true); };
    Gen positive = [](const Shape& s, StreamRng& rng) { return random_tensor(s, rng, 0.5, 2.0, true); };
    Gen away_from_zero = [](const Shape& s, StreamRng& rng) {
        std::vector<double> v(numel(s));
        for (auto& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
        return Td(s, std::move(v), true);
    };
    Gen away_from_bounds = [](const Shape& s, StreamRng& rng) {
        std::vector<double> v(numel(s));
        for (auto& x : v) {
            const double u = rng.uniform(-1, 1);
            x = std::abs(std::abs(u) - 0.5) < 0.05 ? u * 0.5 : u;
        }
        return Td(s, std::move(v), true);
    };
    auto binary = [](std::function<Td(const Td&, const Td&)> f) -> OpCase {
        return [f](StreamRng& rng) {
            // equal shapes and the three broadcast patterns the model uses
            static const std::vector<std::pair<Shape, Shape>> shapes = {
                {{3, 4}, {3, 4}}, {{2, 3, 4}, {4}}, {{3, 1}, {1, 4}}, {{2, 3, 4}, {2, 1, 4}}};
            const auto& [sa, sb] = shapes[rng.below(shapes.size())];
            auto a = random_tensor(sa, rng, -1, 1, true);
            auto b = random_tensor(sb, rng, -1, 1, true);
            auto w = random_tensor(f(a, b).shape(), rng);
            return OpInstance{{{"a", a}, {"b", b}}, [=] { return weighted_sum(f(a, b), w); }};
        };
    };

    cases["add"] = binary([](const Td& a, const Td& b) { return add(a, b); });
    cases["sub"] = binary([](const Td& a, const Td& b) { return sub(a, b); });
    cases["mul"] = binary([](const Td& a, const Td& b) { return mul(a, b); });
    cases["scale"] = unary([](const Td& x) { return scale(x, -2.5); }, plain);
    cases["add_scalar"] = unary([](const Td& x) { return mul(add_scalar(x, 0.7), x); }, plain);
    cases["exp"] = unary([](const Td& x) { return exp(x); }, plain);
    cases["log"] = unary([](const Td& x) { return log(x); }, positive);
    cases["relu"] = unary([](const Td& x) { return relu(x); }, away_from_zero);
    cases["sigmoid"] = unary([](const Td& x) { return sigmoid(scale(x, 3.0)); }, plain);
    cases["clamp"] = unary([](const Td& x) { return clamp(x, -0.5, 0.5); }, away_from_bounds);
    cases["softmax"] = unary([](const Td& x) { return softmax(scale(x, 2.0)); }, plain);
    cases["layer_norm"] = unary([](const Td& x) { return layer_norm(x); }, plain);
    cases["sum"] = unary([](const Td& x) { return mul(sum(x), sum(mul(x, x))); }, plain);
    cases["mean"] = unary([](const Td& x) { return mul(mean(x), mean(mul(x, x))); }, plain);
    cases["transpose"] = unary([](const Td& x) { return transpose(x); }, plain);
    cases["reshape"] = unary([](const Td& x) { return reshape(x, {2, 6}); }, plain);

    cases["sum_axis"] = [](StreamRng& rng) {
        auto x = random_tensor({2, 3, 4}, rng, -1, 1, true);
        const std::size_t axis = rng.below(3);
        auto w = random_tensor(sum_axis(x, axis).shape(), rng);
        return OpInstance{{{"x", x}}, [=] { return weighted_sum(sum_axis(x, axis), w); }};
    };
    cases["mean_axis"] = [](StreamRng& rng) {
        auto x = random_tensor({2, 3, 4}, rng, -1, 1, true);
        const std::size_t axis = rng.below(3);
        auto w = random_tensor(mean_axis(x, axis, true).shape(), rng);
        return OpInstance{{{"x", x}}, [=] { return weighted_sum(mean_axis(x, axis, true), w); }};
    };
    cases["broadcast_to"] = [](StreamRng& rng) {
        auto x = random_tensor({3, 1}, rng, -1, 1, true);
        auto w = random_tensor({2, 3, 4}, rng);
        return OpInstance{{{"x", x}}, [=] { return weighted_sum(broadcast_to(x, {2, 3, 4}), w); }};
    };
    cases["concat_last"] = [](StreamRng& rng) {
        auto a = random_tensor({2, 3, 2}, rng, -1, 1, true);
        auto b = random_tensor({2, 3, 5}, rng, -1, 1, true);
        auto w = random_tensor({2, 3, 7}, rng);
        return OpInstance{{{"a", a}, {"b", b}}, [=] { return weighted_sum(concat_last(a, b), w); }};
    };
    cases["embedding"] = [](StreamRng& rng) {
        auto table = random_tensor({6, 3}, rng, -1, 1, true);
        std::vector<std::int64_t> ids(8);
        for (auto& id : ids) id = static_cast<std::int64_t>(rng.below(6));
        auto w = random_tensor({2, 4, 3}, rng);
        return OpInstance{{{"table", table}},
                          [=] { return weighted_sum(embedding(table, ids, {2, 4}, std::int64_t{0}), w); }};
    };
    cases["matmul"] = [](StreamRng& rng) {
        static const std::vector<std::pair<Shape, Shape>> shapes = {
            {{3, 4}, {4, 2}}, {{2, 3, 4}, {4, 5}}, {{3, 4}, {2, 4, 5}}, {{2, 3, 4}, {2, 4, 5}}};
        const auto& [sa, sb] = shapes[rng.below(shapes.size())];
        auto a = random_tensor(sa, rng, -1, 1, true);
        auto b = random_tensor(sb, rng, -1, 1, true);
        auto w = random_tensor(matmul(a, b).shape(), rng);
        return OpInstance{{{"a", a}, {"b", b}}, [=] { return weighted_sum(matmul(a, b), w); }};
    };
    cases["conv2d"] = [](StreamRng& rng) {
        auto x = random_tensor({2, 5, 4, 3}, rng, -1, 1, true);
        auto k = random_tensor({3, 3, 3, 2}, rng, -1, 1, true);
        auto w = random_tensor({2, 5, 4, 2}, rng);
        return OpInstance{{{"x", x}, {"kernel", k}}, [=] { return weighted_sum(conv2d(x, k), w); }};
    };
    cases["max_pool2d"] = [](StreamRng& rng) {
        auto x = random_tensor({2, 4, 6, 3}, rng, -1, 1, true);
        auto w = random_tensor({2, 2, 3, 3}, rng);
        return OpInstance{{{"x", x}}, [=] { return weighted_sum(max_pool2d(x), w); }};
    };
    return cases;
}

inline void randomize(diff::ParameterStore<double>& store, const std::string& stream, double bound) {
    StreamRng rng(0, stream);
    for (auto& p : store.params())
        for (auto& x : p.tensor.mutable_values()) x = rng.uniform(-bound, bound);
}

/// Finite differences of the complete six-term objective with respect to every
/// model parameter, on a 4-sample batch through a tiny all-on model.
inline diff::GradCheckReport objective_gradcheck(double rel_tol = 1e-4, std::size_t probes = 80) {
    ModelConfig cfg;
    cfg.k = 2;
    cfg.backbone.height = cfg.backbone.width = 8;
    cfg.backbone.downsample = 2;
    cfg.backbone.width1 = 3;
    cfg.backbone.width2 = 4;
    cfg.backbone.d = 4;
    cfg.decoder.layers = 2;
    cfg.fusion = {1, 3, 12, false};
    EstimatorConfig est;
    est.hidden = 8;
    Model<double> model(cfg, Toggles{}, 11, est);
    randomize(model.params(), "objective/params", 0.5);
    for (auto* s : model.stores())
        if (s != &model.params()) randomize(*s, "objective/estimators", 0.5);

    StreamRng rng(11, "objective/batch");
    Batch<double> batch;
    batch.images = random_tensor({4, 8, 8, 1}, rng, 0.0, 1.0);
    batch.tokens = {semfuse::tokenize_pad({2, 5}, 4), semfuse::tokenize_pad({7}, 4),
                    semfuse::tokenize_pad({3, 4, 9}, 4), semfuse::tokenize_pad({}, 4)};
    batch.labels = Td({4, 2}, {1, 0, 0, 1, 1, 1, 0, 0});
    auto objective = [&] { return causal::total_loss(model.losses(model.forward(batch, true), batch)); };
    return diff::finite_diff_check(objective, model.params(), probes, rel_tol, 11);
}

/// Every op over `instances` random instances, then the full objective.
inline std::vector<CheckResult> gradient_suite(std::size_t instances = 20) {
    std::vector<CheckResult> out;
    for (auto& [name, make] : op_cases()) {
        CheckResult r{"grad/" + name, true, ""};
        double worst = 0.0;
        for (std::uint64_t inst = 0; inst < instances; ++inst) {
            StreamRng rng(inst, "op-case/" + name);
            auto [inputs, fn] = make(rng);
            auto rep = diff::finite_diff_check(fn, inputs, 12, 1e-4, inst);
            worst = std::max(worst, rep.max_rel_error());
            r.pass = r.pass && rep.all_pass();
        }
        r.detail = "max rel err " + sci(worst);
        out.push_back(r);
    }
    auto rep = objective_gradcheck();
    out.push_back({"grad/objective", rep.all_pass(), "max rel err " + sci(rep.max_rel_error())});
    return out;
}

// ---------------------------------------------------------------- decoder identity

/// Largest deviation of instrument + confounder from the replicated column sums of F,
/// and of attention row sums from 1, over random 64-bit instances.
inline std::pair<double, double> decoupling_errors(std::size_t instances = 100) {
    StreamRng rng(12, "checks/complement");
    double worst_identity = 0.0, worst_rows = 0.0;
    for (std::size_t trial = 0; trial < instances; ++trial) {
        const std::size_t k = 2 + rng.below(4), n = 1 + rng.below(10), d = 1 + rng.below(6);
        auto f = random_tensor({n, d}, rng, -3, 3);
        auto q = random_tensor({k, d}, rng, -3, 3);
        auto out = ivlearn::decode_layer(q, f);
        for (std::size_t i = 0; i < k; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < n; ++j) row += out.attention[i * n + j];
            worst_rows = std::max(worst_rows, std::abs(row - 1.0));
            for (std::size_t c = 0; c < d; ++c) {
                double col = 0.0;
                for (std::size_t j = 0; j < n; ++j) col += f[j * d + c];
                worst_identity = std::max(worst_identity, std::abs(out.instrument[i * d + c] + out.confounder[i * d + c] - col));
            }
        }
    }
    return {worst_identity, worst_rows};
}

// ---------------------------------------------------------------- estimator experiments

/// Largest |pairwise loss| of estimators whose output ignores the condition.
inline double mi_null_error(std::size_t seeds = 10) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
        mi::CondDensityEstimator<double> est(seed, "est", 4, 3, 16);
        StreamRng init(seed, "est/random");
        for (auto& p : est.store().params())
            for (auto& x : p.tensor.mutable_values()) x = init.uniform(-0.8, 0.8);
        auto w = est.store().at("est.l1.weight").tensor.mutable_values();
        std::fill(w.begin(), w.end(), 0.0);
        StreamRng rng(seed, "pairwise/null");
        auto cond = random_tensor({9, 4}, rng, -3, 3);
        auto target = random_tensor({9, 3}, rng, -3, 3);
        for (double sign : {1.0, -1.0}) worst = std::max(worst, std::abs(est.pairwise_loss(cond, target, sign).item()));
    }
    return worst;
}

/// Analytic mutual information of a bivariate Gaussian with correlation rho, in nats.
inline double gaussian_mi(double rho) { return -0.5 * std::log(1.0 - rho * rho); }

/// Fits an estimator on n paired 1-D Gaussians with correlation rho and returns
/// the pairwise loss (sign +1) on the fitted batch.
inline double fitted_pairwise_mi(double rho, std::uint64_t seed, std::size_t n = 256, std::size_t steps = 300,
                                 double lr = 1e-2) {
    StreamRng rng(seed, "gaussian-oracle/rho" + std::to_string(static_cast<int>(std::lround(rho * 100))));
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = rng.normal();
        y[i] = rho * x[i] + std::sqrt(1.0 - rho * rho) * rng.normal();
    }
    Td cond({n, 1}, x), target({n, 1}, y);
    mi::CondDensityEstimator<double> est(seed, "oracle", 1, 1, 64);
    for (std::size_t s = 0; s < steps; ++s) est.fit_step(cond, target, lr);
    return est.pairwise_loss(cond, target, 1.0).item();
}

/// Number of seeds (out of `seeds`) for which the fitted losses increase across rho = 0, 0.5, 0.9.
inline std::size_t gaussian_ordering_hits(std::size_t seeds, std::vector<std::vector<double>>* values = nullptr) {
    std::size_t hits = 0;
    for (std::size_t s = 0; s < seeds; ++s) {
        std::vector<double> v;
        for (double rho : {0.0, 0.5, 0.9}) v.push_back(fitted_pairwise_mi(rho, 100 + s));
        if (v[0] < v[1] && v[1] < v[2]) ++hits;
        if (values) values->push_back(v);
    }
    return hits;
}

// ---------------------------------------------------------------- auc

/// Fraction of concordant positive/negative pairs, ties counted one half.
inline double brute_force_auc(const std::vector<double>& scores, const std::vector<double>& labels) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i)
        for (std::size_t j = 0; j < scores.size(); ++j)
            if (labels[i] == 1.0 && labels[j] == 0.0) {
                den += 1.0;
                num += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
            }
    return num / den;
}

/// Number of (n, label pattern) instances, n <= 8, where auc differs from brute force.
inline std::size_t auc_mismatches() {
    StreamRng rng(1, "auc/exhaustive");
    std::size_t bad = 0;
    for (std::size_t n = 2; n <= 8; ++n)
        for (std::uint32_t pattern = 1; pattern + 1 < (1u << n); ++pattern) {
            std::vector<double> labels(n), scores(n);
            for (std::size_t i = 0; i < n; ++i) {
                labels[i] = (pattern >> i) & 1u;
                scores[i] = static_cast<double>(rng.below(5)) / 4.0;  // coarse grid forces ties
            }
            bad += metrics::auc(scores, labels) != brute_force_auc(scores, labels);
        }
    return bad;
}

// ---------------------------------------------------------------- all

/// Everything except the Gaussian ordering experiment when `quick`.
inline std::vector<CheckResult> run_all(bool quick = false) {
    auto out = gradient_suite();
    const auto [identity, rows] = decoupling_errors();
    out.push_back({"decoder/complementarity", identity <= 1e-10, "max err " + sci(identity)});
    out.push_back({"decoder/row-stochastic", rows <= 1e-8, "max err " + sci(rows)});
    const double null = mi_null_error();
    out.push_back({"mi/null", null <= 1e-9, "max |loss| " + sci(null)});
    if (!quick) {
        const auto hits = gaussian_ordering_hits(5);
        out.push_back({"mi/gaussian-ordering", hits >= 4, std::to_string(hits) + " of 5 seeds ordered"});
    }
    const auto bad = auc_mismatches();
    const double worked = metrics::auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<double>{0, 0, 1, 1});
    out.push_back({"auc/oracle", bad == 0 && worked == 0.75,
                   std::to_string(bad) + " mismatches, worked case " + sci(worked)});
    const auto ones = ingest::apply_uncertain_policy({-1, 1, 0}, ingest::UncertainPolicy::ones);
    const auto zeros = ingest::apply_uncertain_policy({-1, 1, 0}, ingest::UncertainPolicy::zeros);
    out.push_back({"ingest/policies", ones == std::vector<float>{1, 1, 0} && zeros == std::vector<float>{0, 1, 0},
                   "u-ones and u-zeros on [-1,1,0]"});
    return out;
}

}  // namespace ivcxr::checks
