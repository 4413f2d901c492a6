#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ivcxr/diff/param.hpp"
#include "ivcxr/diff/tensor.hpp"
#include "ivcxr/rng.hpp"

namespace ivcxr::diff {

struct GradProbe {
    std::string tensor;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
    bool pass = false;
};

struct GradCheckReport {
    std::vector<GradProbe> probes;
    double rel_tol = 0.0;

    bool all_pass() const {
        return std::all_of(probes.begin(), probes.end(), [](const GradProbe& p) { return p.pass; });
    }
    double max_rel_error() const {
        double m = 0.0;
        for (const auto& p : probes) m = std::max(m, p.rel_error);
        return m;
    }
};

struct NamedTensor {
    std::string name;
    Tensor<double> tensor;
};

/// Relative error with a small floor so that exactly-zero gradients compare sanely.
inline double gradient_rel_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// Compares reverse-mode gradients of a scalar objective against central finite
/// differences (step 1e-5 * max(1, |x|)) at randomly chosen coordinates.
inline GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& fn, std::vector<NamedTensor> inputs,
                                         std::size_t probe_count, double rel_tol, std::uint64_t seed = 0) {
    require(!inputs.empty(), "finite_diff_check: no inputs to probe");
    const double base = fn().item();
    if (fn().item() != base) throw CheckInvalid("finite_diff_check: objective is not deterministic");

    for (auto& in : inputs) in.tensor.zero_grad();
    fn().backward();

    std::size_t total = 0;
    for (const auto& in : inputs) total += in.tensor.size();
    StreamRng rng(seed, "gradcheck/probes");
    GradCheckReport report;
    report.rel_tol = rel_tol;
    for (std::size_t probe = 0; probe < probe_count; ++probe) {
        std::size_t flat = rng.below(total);
        std::size_t which = 0;
        while (flat >= inputs[which].tensor.size()) flat -= inputs[which++].tensor.size();
        auto& t = inputs[which].tensor;
        auto vals = t.mutable_values();
        const double x0 = vals[flat];
        const double h = 1e-5 * std::max(1.0, std::abs(x0));
        vals[flat] = x0 + h;
        const double fp = fn().item();
        vals[flat] = x0 - h;
        const double fm = fn().item();
        vals[flat] = x0;
        GradProbe p;
        p.tensor = inputs[which].name;
        p.index = flat;
        p.analytic = t.grad()[flat];
        p.numeric = (fp - fm) / (2.0 * h);
        p.rel_error = gradient_rel_error(p.analytic, p.numeric);
        p.pass = p.rel_error <= rel_tol;
        report.probes.push_back(p);
    }
    return report;
}

inline GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& fn, ParameterStore<double>& store,
                                         std::size_t probe_count, double rel_tol, std::uint64_t seed = 0) {
    std::vector<NamedTensor> inputs;
    for (auto& p : store.params()) inputs.push_back({p.name, p.tensor});
    return finite_diff_check(fn, std::move(inputs), probe_count, rel_tol, seed);
}

}  // namespace ivcxr::diff
