#pragma once

// Plain-text key=value configuration with section prefixes, e.g.
//   optimizer.lr=0.001
//   toggles.semantic_fusion=false
// Blank lines and lines starting with '#' are ignored. Unknown keys are errors.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ivcxr/backbone.hpp"
#include "ivcxr/causalhead.hpp"
#include "ivcxr/diff/param.hpp"
#include "ivcxr/ingest.hpp"
#include "ivcxr/ivlearn.hpp"
#include "ivcxr/rng.hpp"
#include "ivcxr/scmgen.hpp"
#include "ivcxr/semfuse.hpp"

namespace ivcxr {

struct Toggles {
    bool iv_learning = true;
    bool semantic_fusion = true;
    bool constraints = true;

    bool operator==(const Toggles&) const = default;
};

/// Ablation numbering: model m has fusion on iff bit 0 of m-1, IV learning iff bit 1,
/// constraints iff bit 2.
inline Toggles toggles_for_model(int m) {
    require(m >= 1 && m <= 8, "ablation model number must be 1..8");
    const int b = m - 1;
    return {(b & 2) != 0, (b & 1) != 0, (b & 4) != 0};
}

struct ModelConfig {
    backbone::BackboneConfig backbone;
    std::size_t k = 4;
    ivlearn::DecoderConfig decoder;
    semfuse::FusionConfig fusion;
    std::size_t max_len = semfuse::kDefaultMaxLen;
    std::size_t d_r = 0;  // 0 means d
    bool stop_grad_c = false;
    bool zero_c_at_test = false;

    std::size_t causal_dim() const { return d_r == 0 ? backbone.d : d_r; }
};

struct EstimatorConfig {
    std::size_t steps = 3;  // fit steps per main step
    double lr = 1e-3;
    std::size_t hidden = 64;
    bool normalize = true;  // standardize each per-sample representation vector
};

struct TrainConfig {
    ModelConfig model;
    Toggles toggles;
    diff::AdamConfig optimizer;
    causal::LossWeights weights = causal::kUnitWeights;
    EstimatorConfig estimator;
    std::size_t batch_size = 32;
    std::size_t steps = 2000;
    std::size_t eval_every = 100;
    std::uint64_t seed = 0;
    ingest::UncertainPolicy policy = ingest::UncertainPolicy::ones;
    std::size_t resize = 256;
    std::size_t crop = 224;
};

struct ExperimentConfig {
    TrainConfig train;
    scm::ScmConfig scm;
    std::size_t seeds = 5;  // ablation seeds per cell
};

namespace config_detail {

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <typename Int>
Int parse_uint(const std::string& key, const std::string& s) {
    Int v{};
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size() || s.empty())
        throw ContractViolation("config " + key + ": '" + s + "' is not a non-negative integer");
    return v;
}

inline double parse_real(const std::string& key, const std::string& s) {
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size() || s.empty() || !std::isfinite(v))
        throw ContractViolation("config " + key + ": '" + s + "' is not a finite number");
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1" || s == "on") return true;
    if (s == "false" || s == "0" || s == "off") return false;
    throw ContractViolation("config " + key + ": '" + s + "' is not a boolean");
}

struct Entry {
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
};

}  // namespace config_detail

/// The full key table. Keys map onto fields of an ExperimentConfig.
inline std::map<std::string, config_detail::Entry> config_entries(ExperimentConfig& c) {
    using namespace config_detail;
    std::map<std::string, Entry> e;
    auto size_key = [&e](const std::string& key, std::size_t& f) {
        e[key] = {[&f] { return std::to_string(f); }, [&f, key](const std::string& s) { f = parse_uint<std::size_t>(key, s); }};
    };
    auto u64_key = [&e](const std::string& key, std::uint64_t& f) {
        e[key] = {[&f] { return std::to_string(f); },
                  [&f, key](const std::string& s) { f = parse_uint<std::uint64_t>(key, s); }};
    };
    auto int_key = [&e](const std::string& key, int& f) {
        e[key] = {[&f] { return std::to_string(f); },
                  [&f, key](const std::string& s) { f = static_cast<int>(parse_uint<unsigned>(key, s)); }};
    };
    auto real_key = [&e](const std::string& key, double& f) {
        e[key] = {[&f] { return fmt(f); }, [&f, key](const std::string& s) { f = parse_real(key, s); }};
    };
    auto bool_key = [&e](const std::string& key, bool& f) {
        e[key] = {[&f] { return std::string(f ? "true" : "false"); },
                  [&f, key](const std::string& s) { f = parse_bool(key, s); }};
    };

    TrainConfig& t = c.train;
    ModelConfig& m = t.model;
    size_key("model.channels", m.backbone.channels);
    size_key("model.downsample", m.backbone.downsample);
    size_key("model.width1", m.backbone.width1);
    size_key("model.width2", m.backbone.width2);
    size_key("model.d", m.backbone.d);
    bool_key("model.position_embedding", m.backbone.position_embedding);
    size_key("model.k", m.k);
    size_key("model.decoder_layers", m.decoder.layers);
    bool_key("model.decoder_residual", m.decoder.residual);
    size_key("model.fusion_layers", m.fusion.layers);
    size_key("model.d_t", m.fusion.d_t);
    size_key("model.vocab", m.fusion.vocab);
    bool_key("model.mask_cls", m.fusion.mask_cls);
    size_key("model.max_len", m.max_len);
    size_key("model.d_r", m.d_r);
    bool_key("model.stop_grad_c", m.stop_grad_c);
    bool_key("model.zero_c_at_test", m.zero_c_at_test);

    real_key("optimizer.lr", t.optimizer.lr);
    real_key("optimizer.beta1", t.optimizer.beta1);
    real_key("optimizer.beta2", t.optimizer.beta2);
    real_key("optimizer.eps", t.optimizer.eps);
    real_key("optimizer.weight_decay", t.optimizer.weight_decay);

    for (std::size_t i = 0; i < 6; ++i) real_key(std::string("loss.") + causal::kTermNames[i], t.weights[i]);

    size_key("estimator.steps", t.estimator.steps);
    real_key("estimator.lr", t.estimator.lr);
    size_key("estimator.hidden", t.estimator.hidden);
    bool_key("estimator.normalize", t.estimator.normalize);

    size_key("train.batch_size", t.batch_size);
    size_key("train.steps", t.steps);
    size_key("train.eval_every", t.eval_every);
    u64_key("train.seed", t.seed);
    size_key("train.seeds", c.seeds);

    bool_key("toggles.iv_learning", t.toggles.iv_learning);
    bool_key("toggles.semantic_fusion", t.toggles.semantic_fusion);
    bool_key("toggles.constraints", t.toggles.constraints);

    size_key("data.resize", t.resize);
    size_key("data.crop", t.crop);
    e["data.policy"] = {[&t] { return std::string(t.policy == ingest::UncertainPolicy::ones ? "u-ones" : "u-zeros"); },
                        [&t](const std::string& s) { t.policy = ingest::parse_policy(s); }};

    scm::ScmConfig& s = c.scm;
    size_key("scm.image_size", s.image_size);
    size_key("scm.k", s.k);
    size_key("scm.n_train", s.n_train);
    size_key("scm.n_test", s.n_test);
    real_key("scm.prevalence", s.prevalence);
    real_key("scm.rho_train", s.rho_train);
    real_key("scm.rho_test", s.rho_test);
    real_key("scm.ring_radius", s.ring_radius);
    real_key("scm.blob_radius", s.blob_radius);
    real_key("scm.blob_intensity", s.blob_intensity);
    int_key("scm.blob_jitter", s.blob_jitter);
    e["scm.marker_corner"] = {[&s] { return std::string(scm::corner_name(s.marker_corner)); },
                              [&s](const std::string& v) { s.marker_corner = scm::parse_corner(v); }};
    size_key("scm.marker_size", s.marker_size);
    size_key("scm.marker_margin", s.marker_margin);
    real_key("scm.marker_intensity", s.marker_intensity);
    real_key("scm.noise_sigma", s.noise_sigma);
    size_key("scm.vocab_size", s.vocab_size);
    size_key("scm.tokens_per_sample", s.tokens_per_sample);
    size_key("scm.attrs_per_class", s.attrs_per_class);
    real_key("scm.token_fidelity", s.token_fidelity);
    u64_key("scm.seed", s.seed);
    return e;
}

/// Applies key=value text on top of the current values.
inline void apply_config_text(ExperimentConfig& c, const std::string& text) {
    auto entries = config_entries(c);
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        auto body = std::string(ingest::detail::trim(line));
        if (body.empty() || body[0] == '#') continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw ParseError("expected key=value", line_no);
        const std::string key(ingest::detail::trim(std::string_view(body).substr(0, eq)));
        const std::string value(ingest::detail::trim(std::string_view(body).substr(eq + 1)));
        auto it = entries.find(key);
        if (it == entries.end()) throw ParseError("unknown config key '" + key + "'", line_no);
        try {
            it->second.set(value);
        } catch (const ParseError&) {
            throw;
        } catch (const ContractViolation& err) {
            throw ParseError(err.what(), line_no);
        }
    }
}

inline ExperimentConfig load_config(const std::string& path) {
    ExperimentConfig c;
    apply_config_text(c, ingest::read_file(path));
    return c;
}

/// Every key with its current value, sorted by key.
inline std::string config_text(const ExperimentConfig& c) {
    auto copy = c;
    std::string out;
    for (const auto& [key, entry] : config_entries(copy)) out += key + "=" + entry.get() + "\n";
    return out;
}

/// Fingerprint of everything that defines the model and its optimization; run
/// length, evaluation cadence and data-generation keys are excluded so that a
/// checkpoint can be resumed with a longer run.
inline std::string config_digest(const ExperimentConfig& c) {
    auto copy = c;
    std::string text;
    for (const auto& [key, entry] : config_entries(copy)) {
        if (key == "train.steps" || key == "train.eval_every" || key == "train.seeds" || key.starts_with("scm."))
            continue;
        text += key + "=" + entry.get() + "\n";
    }
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(text)));
    return buf;
}

/// Image geometry seen by the backbone follows the crop size.
inline backbone::BackboneConfig effective_backbone(const TrainConfig& t) {
    auto b = t.model.backbone;
    b.height = b.width = t.crop;
    return b;
}

}  // namespace ivcxr
