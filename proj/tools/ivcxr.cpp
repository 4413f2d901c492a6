// ivcxr: dataset generation, training, evaluation, ablation, attention export and self-checks.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "ivcxr/checks.hpp"
#include "ivcxr/harness.hpp"
#include "ivcxr/runtime.hpp"

namespace fs = std::filesystem;
using namespace ivcxr;

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string policy;
    std::string data;
    std::string checkpoint;
    std::string manifest;
    std::size_t index = 0;
    std::size_t class_index = 0;
    bool quick = false;
};

ExperimentConfig load(const Options& o) {
    ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
    if (o.seed) {
        cfg.train.seed = *o.seed;
        cfg.scm.seed = *o.seed;
    }
    if (!o.policy.empty()) cfg.train.policy = ingest::parse_policy(o.policy);
    return cfg;
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string auc_line(const std::vector<std::string>& classes, const EvalResult& r) {
    std::string out;
    for (std::size_t c = 0; c < r.auc.size(); ++c)
        out += (c < classes.size() ? classes[c] : "class" + std::to_string(c)) + "=" +
               (std::isnan(r.auc[c]) ? std::string("undefined") : fmt_real(r.auc[c])) + " ";
    return out + "mean=" + fmt_real(r.mean);
}

std::unique_ptr<Trainer<float>> open_checkpoint(const std::string& path) {
    return trainer_from_checkpoint<float>(parse_checkpoint(ingest::read_file(path)));
}

DataSplit open_split(const ExperimentConfig& cfg, const std::string& manifest, const std::string& policy) {
    const auto p = policy.empty() ? cfg.train.policy : ingest::parse_policy(policy);
    return load_split(manifest, p, cfg.train.resize, cfg.train.crop);
}

int cmd_gen(const Options& o) {
    const auto cfg = load(o);
    auto data = scm::generate_dataset(cfg.scm);
    scm::write_dataset(data, cfg.scm, o.out);
    std::cout << "wrote " << data.train.samples.size() << "/" << data.test.samples.size() << "/"
              << data.id_test.samples.size() << " samples to " << o.out << "\n";
    return 0;
}

int cmd_train(const Options& o) {
    const auto cfg = load(o);
    std::vector<DataSplit> splits;
    if (o.data.empty()) {
        auto data = scm::generate_dataset(cfg.scm);
        for (const auto* s : {&data.train, &data.test, &data.id_test}) splits.push_back(from_scm(*s, cfg.scm.k));
    } else {
        for (const char* name : {"train", "test", "id_test"}) {
            const auto path = fs::path(o.data) / (std::string(name) + ".manifest");
            if (splits.empty() || fs::exists(path)) {
                splits.push_back(load_split(path.string(), cfg.train.policy, cfg.train.resize, cfg.train.crop));
                splits.back().name = name;
            }
        }
    }
    std::vector<const DataSplit*> evals;
    for (std::size_t i = 1; i < splits.size(); ++i) evals.push_back(&splits[i]);

    Trainer<float> trainer(cfg);
    trainer.run(splits[0], cfg.train.steps, evals);
    make_dir(o.out);
    const fs::path out(o.out);
    ingest::write_file(out / "checkpoint.txt", format_checkpoint(trainer.checkpoint()));
    ingest::write_file(out / "metrics.csv", trainer.log().steps_csv());
    ingest::write_file(out / "evals.csv", trainer.log().evals_csv(splits[0].classes));
    const auto& last = trainer.log().steps.back();
    std::cout << "trained " << trainer.step() << " steps, final total loss " << fmt_real(last.total) << "\n";
    for (const auto* s : evals) std::cout << s->name << ": " << auc_line(s->classes, evaluate(trainer.model(), *s)) << "\n";
    return 0;
}

int cmd_eval(const Options& o) {
    auto trainer = open_checkpoint(o.checkpoint);
    const auto split = open_split(trainer->config(), o.manifest, o.policy);
    std::cout << auc_line(split.classes, evaluate(trainer->model(), split)) << "\n";
    return 0;
}

int cmd_ablate(const Options& o) {
    const auto cfg = load(o);
    auto data = scm::generate_dataset(cfg.scm);
    const auto train = from_scm(data.train, cfg.scm.k), ood = from_scm(data.test, cfg.scm.k),
               id = from_scm(data.id_test, cfg.scm.k);
    const auto rows = ablate(cfg, train, ood, &id);
    const auto csv = ablation_csv(rows);
    make_dir(o.out);
    ingest::write_file(fs::path(o.out) / "ablation.csv", csv);
    std::cout << csv;
    for (const auto& r : rows)
        for (const auto& run : r.runs)
            if (run.failed) std::cerr << "model " << run.model << " seed " << run.seed_index << " failed: " << run.error << "\n";
    return 0;
}

int cmd_viz(const Options& o) {
    auto trainer = open_checkpoint(o.checkpoint);
    const auto split = open_split(trainer->config(), o.manifest, o.policy);
    require(o.index < split.samples.size(),
            "sample index " + std::to_string(o.index) + " out of range for " + std::to_string(split.samples.size()));
    const auto map = export_attention(trainer->model(), split.samples[o.index], o.class_index);
    make_dir(o.out);
    const auto path = fs::path(o.out) / ("attention_" + std::to_string(o.index) + "_" + std::to_string(o.class_index) + ".ivr");
    ingest::save_raster(path, map.heatmap);
    double sum = 0.0;
    for (double v : map.row) sum += v;
    std::cout << "wrote " << path.string() << " (" << map.h << "x" << map.w << " row, sum " << fmt_real(sum) << ")\n";
    return 0;
}

int cmd_check(const Options& o) {
    bool ok = true;
    for (const auto& r : checks::run_all(o.quick)) {
        std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << " (" << r.detail << ")\n";
        ok = ok && r.pass;
    }
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"ivcxr: deconfounded multi-label classification toolkit"};
    app.require_subcommand(1);
    Options o;
    int (*handler)(const Options&) = nullptr;

    auto config_flags = [&](CLI::App* sub, bool config_required) {
        auto* c = sub->add_option("--config", o.config, "key=value config file");
        if (config_required) c->required();
        sub->add_option("--seed", o.seed, "overrides train.seed and scm.seed");
        sub->add_option("--policy", o.policy, "uncertain-label policy: u-ones or u-zeros");
    };

    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    config_flags(gen, true);
    gen->add_option("--out", o.out, "output directory")->required();
    gen->callback([&] { handler = cmd_gen; });

    auto* train = app.add_subcommand("train", "train one model; writes checkpoint, metrics and evals");
    config_flags(train, true);
    train->add_option("--data", o.data, "directory with train/test/id_test manifests (default: synthetic from scm.*)");
    train->add_option("--out", o.out, "output directory")->required();
    train->callback([&] { handler = cmd_train; });

    auto* eval = app.add_subcommand("eval", "per-class AUC of a checkpoint on a manifest");
    eval->add_option("checkpoint", o.checkpoint)->required();
    eval->add_option("manifest", o.manifest)->required();
    eval->add_option("--policy", o.policy, "uncertain-label policy: u-ones or u-zeros");
    eval->callback([&] { handler = cmd_eval; });

    auto* abl = app.add_subcommand("ablate", "train the eight toggle combinations; writes ablation.csv");
    config_flags(abl, true);
    abl->add_option("--out", o.out, "output directory")->required();
    abl->callback([&] { handler = cmd_ablate; });

    auto* viz = app.add_subcommand("viz", "export a decoder attention heatmap");
    viz->add_option("checkpoint", o.checkpoint)->required();
    viz->add_option("manifest", o.manifest)->required();
    viz->add_option("--index", o.index, "sample index in the manifest");
    viz->add_option("--class", o.class_index, "class index");
    viz->add_option("--policy", o.policy, "uncertain-label policy: u-ones or u-zeros");
    viz->add_option("--out", o.out, "output directory")->required();
    viz->callback([&] { handler = cmd_viz; });

    auto* check = app.add_subcommand("check", "run the gradient and invariant suites");
    check->add_flag("--quick", o.quick, "skip the estimator ordering experiment");
    check->callback([&] { handler = cmd_check; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        return handler(o);
    } catch (const NumericFault& e) {
        std::cerr << "numeric fault: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const UndefinedMetric& e) {
        std::cerr << "undefined metric: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
