#pragma once

// Training loop with alternating estimator fits, evaluation, metrics log,
// checkpoints, the eight-model ablation grid and attention export.

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ivcxr/config.hpp"
#include "ivcxr/ingest.hpp"
#include "ivcxr/metrics.hpp"
#include "ivcxr/model.hpp"
#include "ivcxr/rng.hpp"
#include "ivcxr/scmgen.hpp"
#include "ivcxr/semfuse.hpp"

namespace ivcxr {

// ---------------------------------------------------------------- data

struct LabeledSample {
    RasterImage image;
    std::vector<float> labels;  // resolved, 0/1
    std::vector<semfuse::TokenId> tokens;
    RasterImage mask;  // ground-truth blob pixels when known (synthetic data), else empty
};

struct DataSplit {
    std::string name;
    std::vector<std::string> classes;
    std::vector<LabeledSample> samples;
};

inline DataSplit from_scm(const scm::Split& split, std::size_t k) {
    DataSplit out{split.name, scm::class_names(k), {}};
    out.samples.reserve(split.samples.size());
    for (const auto& s : split.samples) out.samples.push_back({s.image, s.labels, s.tokens, s.mask});
    return out;
}

/// Reads a manifest and its rasters, resolves uncertain labels and applies the
/// resize/crop pipeline.
inline DataSplit load_split(const std::string& manifest_path, ingest::UncertainPolicy policy, std::size_t resize,
                            std::size_t crop) {
    auto m = ingest::parse_manifest(manifest_path);
    DataSplit out{manifest_path, m.classes, {}};
    for (const auto& r : m.records) {
        auto img = ingest::load_raster(m.resolve(r));
        if (img.height != crop || img.width != crop || resize != crop)
            img = ingest::resize_center_crop(img, resize, crop);
        out.samples.push_back({std::move(img), ingest::apply_uncertain_policy(r.labels, policy), r.tokens, {}});
    }
    require(!out.samples.empty(), "manifest " + manifest_path + " has no records");
    return out;
}

/// Images, padded token records truncated to the longest record in the batch, labels.
template <typename T>
Batch<T> make_batch(const DataSplit& split, std::span<const std::size_t> indices, std::size_t max_len) {
    require(!indices.empty(), "empty batch");
    std::vector<const RasterImage*> imgs;
    Batch<T> b;
    std::vector<T> labels;
    std::size_t longest = 1;
    for (std::size_t i : indices) {
        const auto& s = split.samples.at(i);
        imgs.push_back(&s.image);
        b.tokens.push_back(semfuse::tokenize_pad(s.tokens, max_len));
        longest = std::max(longest, semfuse::valid_length(b.tokens.back()));
        for (float l : s.labels) labels.push_back(static_cast<T>(l));
    }
    for (auto& t : b.tokens) t.resize(longest);
    b.images = backbone::images_to_tensor<T>(imgs);
    const std::size_t k = split.samples.at(indices[0]).labels.size();
    b.labels = Tensor<T>({indices.size(), k}, std::move(labels));
    return b;
}

/// Sample indices for one step, drawn without replacement from the ("batch", step) stream.
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t step, std::size_t n,
                                              std::size_t batch_size) {
    require(n > 0, "cannot draw a batch from an empty split");
    const std::size_t b = std::min(batch_size, n);
    StreamRng rng(seed, "batch", step);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < b; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
    idx.resize(b);
    return idx;
}

// ---------------------------------------------------------------- metrics log

struct StepRow {
    std::size_t step = 0;
    std::array<double, 6> terms{};
    double total = 0.0;
};

struct EvalRow {
    std::size_t step = 0;
    std::string split;
    std::vector<double> auc;  // NaN marks a class skipped as undefined
    double mean = 0.0;
};

inline std::string fmt_real(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct MetricsLog {
    std::vector<StepRow> steps;
    std::vector<EvalRow> evals;

    std::string steps_csv() const {
        std::string out = "step";
        for (const char* n : causal::kTermNames) out += std::string(",") + n;
        out += ",total\n";
        for (const auto& r : steps) {
            out += std::to_string(r.step);
            for (double t : r.terms) out += "," + fmt_real(t);
            out += "," + fmt_real(r.total) + "\n";
        }
        return out;
    }

    std::string evals_csv(const std::vector<std::string>& classes) const {
        std::string out = "step,split";
        for (const auto& c : classes) out += ",auc_" + c;
        out += ",mean_auc\n";
        for (const auto& r : evals) {
            out += std::to_string(r.step) + "," + r.split;
            for (double a : r.auc) out += "," + fmt_real(a);
            out += "," + fmt_real(r.mean) + "\n";
        }
        return out;
    }

    /// Parses a steps CSV and checks the total column against the weighted sum.
    static std::vector<StepRow> parse_steps_csv(const std::string& text, const causal::LossWeights& w) {
        std::vector<StepRow> rows;
        std::istringstream in(text);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line_no == 1) {
                if (!line.starts_with("step,L_I,L_C,L_IC,L_IR,L_IY,L_Y,total"))
                    throw ParseError("unexpected metrics header", line_no);
                continue;
            }
            if (line.empty()) continue;
            auto cols = ingest::detail::split(line, ',');
            if (cols.size() != 8) throw ParseError("expected 8 columns", line_no);
            StepRow r;
            if (!ingest::detail::parse_int(cols[0], r.step)) throw ParseError("bad step", line_no);
            auto real = [&](std::string_view s) {
                const std::string str(s);
                char* end = nullptr;
                const double v = std::strtod(str.c_str(), &end);
                if (end != str.c_str() + str.size()) throw ParseError("bad number '" + str + "'", line_no);
                return v;
            };
            for (std::size_t i = 0; i < 6; ++i) r.terms[i] = real(cols[i + 1]);
            r.total = real(cols[7]);
            const double expect = causal::total_loss(r.terms, w);
            if (std::abs(expect - r.total) > 1e-12 * std::max(1.0, std::abs(expect)))
                throw ContractViolation("metrics row at step " + std::to_string(r.step) +
                                        ": total does not equal the weighted sum of its terms");
            rows.push_back(r);
        }
        return rows;
    }
};

// ---------------------------------------------------------------- evaluation

struct EvalResult {
    std::vector<double> auc;  // NaN where undefined
    double mean = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::vector<double>> scores;  // [n][k]
};

/// Per-class AUC and the mean over classes where it is defined. With
/// require_defined, an undefined class is an error instead of a skip.
inline EvalResult auc_table(const std::vector<std::vector<double>>& scores,
                            const std::vector<std::vector<double>>& labels, bool require_defined = false) {
    require(!scores.empty() && scores.size() == labels.size(), "auc_table: empty or mismatched input");
    const std::size_t k = scores.front().size();
    EvalResult r;
    r.scores = scores;
    double sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t c = 0; c < k; ++c) {
        std::vector<double> s, l;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            s.push_back(scores[i][c]);
            l.push_back(labels[i][c]);
        }
        try {
            r.auc.push_back(metrics::auc(s, l));
            sum += r.auc.back();
            ++defined;
        } catch (const UndefinedMetric& e) {
            if (require_defined)
                throw UndefinedMetric("class " + std::to_string(c) + ": " + e.what());
            r.auc.push_back(std::numeric_limits<double>::quiet_NaN());
        }
    }
    if (defined == 0) throw UndefinedMetric("auc undefined for every class: labels contain a single class");
    r.mean = sum / static_cast<double>(defined);
    return r;
}

template <typename T>
std::vector<std::vector<double>> predict_scores(const Model<T>& model, const DataSplit& split,
                                                std::size_t chunk = 100) {
    diff::NoGradGuard guard;
    std::vector<std::vector<double>> out;
    const std::size_t k = model.config().k;
    for (std::size_t start = 0; start < split.samples.size(); start += chunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(start + chunk, split.samples.size()); ++i) idx.push_back(i);
        auto f = model.forward(make_batch<T>(split, idx, model.config().max_len), false);
        for (std::size_t b = 0; b < idx.size(); ++b) {
            std::vector<double> row(k);
            for (std::size_t c = 0; c < k; ++c) row[c] = f.scores[b * k + c];
            out.push_back(std::move(row));
        }
    }
    return out;
}

template <typename T>
EvalResult evaluate(const Model<T>& model, const DataSplit& split, bool require_defined = false) {
    require(!split.samples.empty(), "evaluate: split is empty");
    std::vector<std::vector<double>> labels;
    for (const auto& s : split.samples) labels.emplace_back(s.labels.begin(), s.labels.end());
    return auc_table(predict_scores(model, split), labels, require_defined);
}

// ---------------------------------------------------------------- checkpoint

struct Checkpoint {
    struct Param {
        std::string store, name;
        diff::Shape shape;
        std::uint64_t adam_step = 0;
        std::vector<double> value, m, v;
    };
    std::string config;  // full config text
    std::string digest;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    std::vector<Param> params;
};

inline std::string hexfloat(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
}

inline std::string format_checkpoint(const Checkpoint& c) {
    std::ostringstream os;
    std::size_t config_lines = static_cast<std::size_t>(std::count(c.config.begin(), c.config.end(), '\n'));
    os << "ivcxr-checkpoint 1\n"
       << "digest " << c.digest << "\n"
       << "rng batch seed " << c.seed << " next " << c.step << "\n"
       << "step " << c.step << "\n"
       << "config " << config_lines << "\n"
       << c.config << "params " << c.params.size() << "\n";
    auto row = [&os](const char* tag, const std::vector<double>& xs) {
        os << tag;
        for (double x : xs) os << ' ' << hexfloat(x);
        os << '\n';
    };
    for (const auto& p : c.params) {
        os << "param " << p.store << ' ' << p.name << ' ' << p.adam_step << ' ' << p.shape.size();
        for (auto d : p.shape) os << ' ' << d;
        os << '\n';
        row("value", p.value);
        row("m", p.m);
        row("v", p.v);
    }
    os << "end\n";
    return os.str();
}

inline Checkpoint parse_checkpoint(const std::string& text) {
    Checkpoint c;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    auto next = [&]() -> std::string {
        if (!std::getline(in, line)) throw ParseError("checkpoint ends early", line_no + 1);
        ++line_no;
        return line;
    };
    auto expect_word = [&](std::istringstream& ls, const std::string& w) {
        std::string got;
        if (!(ls >> got) || got != w) throw ParseError("expected '" + w + "'", line_no);
    };
    if (next() != "ivcxr-checkpoint 1") throw ParseError("not an ivcxr checkpoint", line_no);
    {
        std::istringstream ls(next());
        expect_word(ls, "digest");
        ls >> c.digest;
    }
    {
        std::istringstream ls(next());
        expect_word(ls, "rng");
        expect_word(ls, "batch");
        expect_word(ls, "seed");
        ls >> c.seed;
        expect_word(ls, "next");
        std::uint64_t n = 0;
        ls >> n;
        if (!ls) throw ParseError("malformed rng line", line_no);
    }
    {
        std::istringstream ls(next());
        expect_word(ls, "step");
        if (!(ls >> c.step)) throw ParseError("malformed step", line_no);
    }
    std::size_t config_lines = 0;
    {
        std::istringstream ls(next());
        expect_word(ls, "config");
        if (!(ls >> config_lines)) throw ParseError("malformed config count", line_no);
    }
    for (std::size_t i = 0; i < config_lines; ++i) c.config += next() + "\n";
    std::size_t count = 0;
    {
        std::istringstream ls(next());
        expect_word(ls, "params");
        if (!(ls >> count)) throw ParseError("malformed param count", line_no);
    }
    auto read_row = [&](const char* tag, std::size_t n) {
        std::istringstream ls(next());
        expect_word(ls, tag);
        std::vector<double> xs;
        xs.reserve(n);
        std::string tok;
        while (ls >> tok) {
            char* end = nullptr;
            xs.push_back(std::strtod(tok.c_str(), &end));
            if (end != tok.c_str() + tok.size()) throw ParseError("bad number '" + tok + "'", line_no);
        }
        if (xs.size() != n) throw ParseError(std::string(tag) + " row has the wrong length", line_no);
        return xs;
    };
    for (std::size_t i = 0; i < count; ++i) {
        Checkpoint::Param p;
        std::istringstream ls(next());
        expect_word(ls, "param");
        std::size_t rank = 0;
        if (!(ls >> p.store >> p.name >> p.adam_step >> rank)) throw ParseError("malformed param header", line_no);
        p.shape.resize(rank);
        for (auto& d : p.shape)
            if (!(ls >> d)) throw ParseError("malformed param shape", line_no);
        const std::size_t n = diff::numel(p.shape);
        p.value = read_row("value", n);
        p.m = read_row("m", n);
        p.v = read_row("v", n);
        c.params.push_back(std::move(p));
    }
    if (next() != "end") throw ParseError("expected 'end'", line_no);
    return c;
}

// ---------------------------------------------------------------- trainer

struct FitStats {
    std::size_t fits = 0;
    std::size_t retries = 0;
    std::size_t forced = 0;  // steps accepted although the batch NLL rose
};

template <typename T>
class Trainer {
public:
    explicit Trainer(const ExperimentConfig& cfg)
        : cfg_(cfg), model_(std::make_unique<Model<T>>(model_config(cfg.train), cfg.train.toggles, cfg.train.seed,
                                                       cfg.train.estimator)) {
        require(cfg.train.optimizer.lr > 0, "optimizer.lr must be positive");
        require(cfg.train.batch_size > 0, "train.batch_size must be positive");
    }

    static ModelConfig model_config(const TrainConfig& t) {
        ModelConfig m = t.model;
        m.backbone = effective_backbone(t);
        return m;
    }

    const ExperimentConfig& config() const { return cfg_; }
    Model<T>& model() { return *model_; }
    const Model<T>& model() const { return *model_; }
    std::uint64_t step() const { return step_; }
    const MetricsLog& log() const { return log_; }
    const FitStats& fit_stats() const { return fit_stats_; }

    /// One optimization step on a batch drawn from train.
    const StepRow& train_step(const DataSplit& train) {
        const auto& t = cfg_.train;
        auto idx = batch_indices(t.seed, step_, train.samples.size(), t.batch_size);
        auto batch = make_batch<T>(train, idx, t.model.max_len);
        auto fwd = model_->forward(batch, true);
        if (t.toggles.constraints) {
            auto inputs = model_->estimator_inputs(fwd);
            for (std::size_t e = 0; e < t.estimator.steps; ++e)
                for (std::size_t r = 0; r < 3; ++r) {
                    auto rep = model_->estimator(static_cast<mi::Role>(r))
                                   .fit_step(inputs[r].first, inputs[r].second, t.estimator.lr);
                    fit_stats_.fits += 1;
                    fit_stats_.retries += static_cast<std::size_t>(rep.retries);
                    fit_stats_.forced += rep.forced;
                }
        }
        auto terms = model_->losses(fwd, batch);
        StepRow row;
        row.step = step_ + 1;
        for (std::size_t i = 0; i < 6; ++i) {
            row.terms[i] = static_cast<double>(terms[i].item());
            if (!std::isfinite(row.terms[i]))
                throw NumericFault("step " + std::to_string(row.step) + ": non-finite loss term " +
                                   causal::kTermNames[i]);
        }
        row.total = causal::total_loss(row.terms, t.weights);
        auto total = causal::total_loss(terms, t.weights);
        auto& store = model_->params();
        store.zero_grad();
        try {
            total.backward();
        } catch (const NumericFault& e) {
            throw NumericFault("step " + std::to_string(row.step) + ": " + e.what());
        }
        diff::adam_step(store, t.optimizer);
        step_ += 1;
        log_.steps.push_back(row);
        return log_.steps.back();
    }

    /// Trains until `steps` total steps, evaluating every eval_every steps and at the end.
    void run(const DataSplit& train, std::size_t steps, const std::vector<const DataSplit*>& eval_splits = {}) {
        require(!train.samples.empty(), "training split is empty");
        const std::size_t every = cfg_.train.eval_every;
        while (step_ < steps) {
            train_step(train);
            if ((every > 0 && step_ % every == 0) || step_ == steps) record_eval(eval_splits);
        }
    }

    void record_eval(const std::vector<const DataSplit*>& eval_splits) {
        for (const DataSplit* s : eval_splits) {
            auto r = evaluate(*model_, *s);
            log_.evals.push_back({step_, s->name, r.auc, r.mean});
        }
    }

    Checkpoint checkpoint() const {
        Checkpoint c;
        c.config = config_text(cfg_);
        c.digest = config_digest(cfg_);
        c.seed = cfg_.train.seed;
        c.step = step_;
        std::size_t si = 0;
        for (auto* store : const_cast<Model<T>&>(*model_).stores()) {
            const std::string sname = si++ == 0 ? "main" : "estimator";
            for (const auto& p : store->params()) {
                Checkpoint::Param q;
                q.store = sname;
                q.name = p.name;
                q.shape = p.tensor.shape();
                q.adam_step = p.step;
                q.value.assign(p.tensor.values().begin(), p.tensor.values().end());
                q.m.assign(p.m.begin(), p.m.end());
                q.v.assign(p.v.begin(), p.v.end());
                c.params.push_back(std::move(q));
            }
        }
        return c;
    }

    void restore(const Checkpoint& c) {
        if (c.digest != config_digest(cfg_))
            throw ContractViolation("checkpoint config digest " + c.digest + " does not match " +
                                    config_digest(cfg_));
        std::size_t i = 0;
        for (auto* store : model_->stores())
            for (auto& p : store->params()) {
                require(i < c.params.size(), "checkpoint holds too few parameters");
                const auto& q = c.params[i++];
                require(q.name == p.name && q.shape == p.tensor.shape(),
                        "checkpoint parameter '" + q.name + "' does not match '" + p.name + "'");
                auto vals = p.tensor.mutable_values();
                for (std::size_t j = 0; j < vals.size(); ++j) {
                    vals[j] = static_cast<T>(q.value[j]);
                    p.m[j] = static_cast<T>(q.m[j]);
                    p.v[j] = static_cast<T>(q.v[j]);
                }
                p.step = q.adam_step;
                p.tensor.clear_grad();
            }
        require(i == c.params.size(), "checkpoint holds extra parameters");
        step_ = c.step;
    }

private:
    ExperimentConfig cfg_;
    std::unique_ptr<Model<T>> model_;
    std::uint64_t step_ = 0;
    MetricsLog log_;
    FitStats fit_stats_;
};

/// Rebuilds a trainer from a checkpoint alone.
template <typename T>
std::unique_ptr<Trainer<T>> trainer_from_checkpoint(const Checkpoint& c) {
    ExperimentConfig cfg;
    apply_config_text(cfg, c.config);
    auto t = std::make_unique<Trainer<T>>(cfg);
    t->restore(c);
    return t;
}

// ---------------------------------------------------------------- attention export

struct AttentionMap {
    std::vector<double> row;  // k-th attention row before upsampling, h*w entries
    std::size_t h = 0, w = 0;
    RasterImage heatmap;      // upsampled to the image size
};

/// The last decoder layer's attention row for one class of one sample.
template <typename T>
AttentionMap export_attention(const Model<T>& model, const LabeledSample& sample, std::size_t class_index) {
    require(class_index < model.config().k, "class index " + std::to_string(class_index) + " out of range");
    require(model.toggles().iv_learning, "attention export needs the query decoder (IV learning on)");
    diff::NoGradGuard guard;
    DataSplit one{"sample", {}, {sample}};
    const std::size_t idx[] = {0};
    auto f = model.forward(make_batch<T>(one, idx, model.config().max_len), false);
    AttentionMap a;
    a.h = f.h;
    a.w = f.w;
    const std::size_t n = f.h * f.w;
    RasterImage small(f.h, f.w, 1);
    for (std::size_t j = 0; j < n; ++j) {
        a.row.push_back(static_cast<double>(f.attention[class_index * n + j]));
        small.pixels[j] = static_cast<float>(std::clamp(a.row.back(), 0.0, 1.0));
    }
    a.heatmap = ingest::resize_bilinear(small, sample.image.height, sample.image.width);
    return a;
}

/// Share of heatmap mass on mask pixels.
inline double mass_inside(const RasterImage& heat, const RasterImage& mask) {
    require(heat.pixels.size() == mask.pixels.size(), "heatmap and mask sizes differ");
    double in = 0.0, all = 0.0;
    for (std::size_t i = 0; i < heat.pixels.size(); ++i) {
        all += heat.pixels[i];
        if (mask.pixels[i] > 0.5f) in += heat.pixels[i];
    }
    return all > 0 ? in / all : 0.0;
}

// ---------------------------------------------------------------- ablation

struct RunResult {
    int model = 0;
    std::size_t seed_index = 0;
    bool failed = false;
    std::string error;
    EvalResult ood;
    EvalResult id;
};

struct AblationRow {
    int model = 0;
    Toggles toggles;
    double mean_ood_auc = std::numeric_limits<double>::quiet_NaN();
    double std = std::numeric_limits<double>::quiet_NaN();
    bool failed = false;
    std::vector<RunResult> runs;
};

using RunHook = std::function<void(const RunResult&, Trainer<float>&)>;

/// Trains the eight toggle combinations over cfg.seeds seeds (train.seed, +1, ...)
/// and reports the mean and sample standard deviation of the per-run mean OOD AUC.
inline std::vector<AblationRow> ablate(const ExperimentConfig& base, const DataSplit& train, const DataSplit& ood,
                                       const DataSplit* id = nullptr, const RunHook& hook = {},
                                       const std::vector<int>& models = {1, 2, 3, 4, 5, 6, 7, 8}) {
    std::vector<AblationRow> rows;
    for (int m : models) {
        AblationRow row;
        row.model = m;
        row.toggles = toggles_for_model(m);
        std::vector<double> means;
        for (std::size_t s = 0; s < base.seeds; ++s) {
            RunResult run;
            run.model = m;
            run.seed_index = s;
            try {
                ExperimentConfig cfg = base;
                cfg.train.toggles = row.toggles;
                cfg.train.seed = base.train.seed + s;
                cfg.train.eval_every = 0;
                Trainer<float> trainer(cfg);
                trainer.run(train, cfg.train.steps);
                run.ood = evaluate(trainer.model(), ood);
                if (id) run.id = evaluate(trainer.model(), *id);
                means.push_back(run.ood.mean);
                if (hook) hook(run, trainer);
            } catch (const std::exception& e) {
                run.failed = true;
                run.error = e.what();
                row.failed = true;
            }
            row.runs.push_back(std::move(run));
        }
        if (!means.empty()) {
            double mu = 0.0;
            for (double x : means) mu += x;
            mu /= static_cast<double>(means.size());
            double var = 0.0;
            for (double x : means) var += (x - mu) * (x - mu);
            row.mean_ood_auc = mu;
            row.std = means.size() > 1 ? std::sqrt(var / static_cast<double>(means.size() - 1)) : 0.0;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string out = "model,iv_learning,semantic_fusion,constraints,mean_ood_auc,std\n";
    auto pm = [](bool b) { return b ? "+" : "-"; };
    for (const auto& r : rows) {
        out += std::to_string(r.model) + "," + pm(r.toggles.iv_learning) + "," + pm(r.toggles.semantic_fusion) +
               "," + pm(r.toggles.constraints) + "," + (r.failed && std::isnan(r.mean_ood_auc) ? "failed" : fmt_real(r.mean_ood_auc)) +
               "," + fmt_real(r.std) + "\n";
    }
    return out;
}

}  // namespace ivcxr
