#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "ivcxr/baseline.hpp"
#include "ivcxr/harness.hpp"
#include "oracles.hpp"

using namespace ivcxr;
using ivcxr::testing::brute_force_auc;

namespace {

ExperimentConfig tiny(std::size_t n_train = 64) {
    ExperimentConfig c;
    auto& t = c.train;
    t.resize = t.crop = 32;
    t.model.backbone.width1 = 4;
    t.model.backbone.width2 = 8;
    t.model.backbone.d = 8;
    t.model.decoder.layers = 1;
    t.model.fusion.layers = 1;
    t.model.fusion.d_t = 8;
    t.estimator.hidden = 16;
    t.batch_size = 8;
    t.steps = 20;
    t.eval_every = 0;
    c.scm.n_train = n_train;
    c.scm.n_test = 40;
    c.seeds = 2;
    return c;
}

struct Data {
    DataSplit train, test;
    explicit Data(const ExperimentConfig& c) {
        auto d = scm::generate_dataset(c.scm);
        train = from_scm(d.train, c.scm.k);
        test = from_scm(d.test, c.scm.k);
    }
};

template <typename T>
std::vector<double> all_params(Trainer<T>& t) {
    std::vector<double> out;
    for (auto* s : t.model().stores())
        for (const auto& p : s->params())
            for (T v : p.tensor.values()) out.push_back(static_cast<double>(v));
    return out;
}

}  // namespace

// ---------------------------------------------------------------- auc

TEST(Auc, Examples) {
    EXPECT_EQ(metrics::auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<double>{0, 0, 1, 1}), 1.0);
    EXPECT_EQ(metrics::auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<double>{1, 1, 0, 0}), 0.0);
    EXPECT_EQ(metrics::auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<double>{0, 0, 1, 1}), 0.75);
    EXPECT_EQ(metrics::auc(std::vector<double>(6, 0.3), std::vector<double>{0, 1, 0, 1, 1, 0}), 0.5);
    EXPECT_THROW(metrics::auc(std::vector<double>{0.1, 0.2}, std::vector<double>{1, 1}), UndefinedMetric);
}

TEST(Auc, MatchesExhaustiveConcordanceUpToEight) {
    StreamRng rng(1, "auc/exhaustive");
    for (std::size_t n = 2; n <= 8; ++n)
        for (std::uint32_t pattern = 1; pattern + 1 < (1u << n); ++pattern) {
            std::vector<double> labels(n), scores(n);
            for (std::size_t i = 0; i < n; ++i) {
                labels[i] = (pattern >> i) & 1u;
                scores[i] = static_cast<double>(rng.below(5)) / 4.0;  // coarse grid forces ties
            }
            ASSERT_EQ(metrics::auc(scores, labels), brute_force_auc(scores, labels)) << "n " << n << " pattern " << pattern;
        }
}

TEST(AucTable, OracleConstantAndUndefinedClasses) {
    std::vector<std::vector<double>> labels = {{1, 0, 1}, {0, 0, 1}, {1, 0, 1}, {0, 0, 1}};
    auto oracle = auc_table(labels, labels);
    EXPECT_EQ(oracle.auc[0], 1.0);
    EXPECT_TRUE(std::isnan(oracle.auc[1]));
    EXPECT_TRUE(std::isnan(oracle.auc[2]));
    EXPECT_EQ(oracle.mean, 1.0);
    auto constant = auc_table(std::vector<std::vector<double>>(4, {0.5, 0.5, 0.5}), labels);
    EXPECT_EQ(constant.auc[0], 0.5);
    EXPECT_THROW(auc_table(labels, labels, true), UndefinedMetric);
    EXPECT_THROW(auc_table({{1.0}, {0.0}}, {{1.0}, {1.0}}), UndefinedMetric);
}

// ---------------------------------------------------------------- metrics log

TEST(MetricsLog, CsvRoundTripAndTotalIdentity) {
    MetricsLog log;
    const causal::LossWeights w = {1, 0.5, 0.001, 0, 0.001, 1};
    StreamRng rng(2, "log/rows");
    for (std::size_t s = 1; s <= 10; ++s) {
        StepRow r;
        r.step = s;
        for (auto& x : r.terms) x = rng.uniform(-3, 3);
        r.total = causal::total_loss(r.terms, w);
        log.steps.push_back(r);
    }
    const auto csv = log.steps_csv();
    EXPECT_TRUE(csv.starts_with("step,L_I,L_C,L_IC,L_IR,L_IY,L_Y,total\n"));
    auto back = MetricsLog::parse_steps_csv(csv, w);
    ASSERT_EQ(back.size(), 10u);
    for (std::size_t i = 0; i < 10; ++i) {
        EXPECT_EQ(back[i].terms, log.steps[i].terms);
        EXPECT_EQ(back[i].total, log.steps[i].total);
    }
    auto tampered = log;
    tampered.steps[4].total += 1e-3;
    EXPECT_THROW(MetricsLog::parse_steps_csv(tampered.steps_csv(), w), ContractViolation);
    EXPECT_THROW(MetricsLog::parse_steps_csv("step,x\n", w), ParseError);
}

// ---------------------------------------------------------------- training

TEST(Training, SameSeedGivesByteIdenticalLog) {
    auto cfg = tiny();
    Data data(cfg);
    Trainer<float> a(cfg), b(cfg);
    a.run(data.train, 15, {&data.test});
    b.run(data.train, 15, {&data.test});
    EXPECT_EQ(a.log().steps_csv(), b.log().steps_csv());
    EXPECT_EQ(a.log().evals_csv(data.test.classes), b.log().evals_csv(data.test.classes));
    EXPECT_EQ(evaluate(a.model(), data.test).scores, evaluate(a.model(), data.test).scores);
    EXPECT_GT(a.fit_stats().fits, 0u);
}

TEST(Training, EveryLoggedRowSatisfiesTheTotalIdentity) {
    auto cfg = tiny();
    cfg.train.weights = {1, 1, 0.001, 0, 0.001, 1};
    Data data(cfg);
    Trainer<float> t(cfg);
    t.run(data.train, 10);
    EXPECT_EQ(MetricsLog::parse_steps_csv(t.log().steps_csv(), cfg.train.weights).size(), 10u);
}

TEST(Training, ResumeAtHalfMatchesStraightRun) {
    auto cfg = tiny();
    Data data(cfg);
    Trainer<float> straight(cfg);
    straight.run(data.train, 50);

    Trainer<float> first(cfg);
    first.run(data.train, 25);
    const auto text = format_checkpoint(first.checkpoint());
    auto resumed = trainer_from_checkpoint<float>(parse_checkpoint(text));
    EXPECT_EQ(resumed->step(), 25u);
    resumed->run(data.train, 50);

    const auto a = all_params(straight), b = all_params(*resumed);
    ASSERT_EQ(a.size(), b.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    EXPECT_LE(worst, 1e-9);
}

TEST(Training, TaskLossFallsOnTheEasyConfig) {
    auto cfg = tiny(256);
    cfg.scm.rho_train = cfg.scm.rho_test = 0.5;
    cfg.scm.noise_sigma = 0.0;
    Data data(cfg);
    Trainer<float> t(cfg);
    t.run(data.train, 50);
    double early = 0.0, late = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
        early += t.log().steps[i].terms[5];
        late += t.log().steps[40 + i].terms[5];
    }
    EXPECT_LT(late, early);
}

TEST(Training, AllOffCellEqualsPlainClassifier) {
    auto cfg = tiny();
    cfg.train.toggles = toggles_for_model(1);
    Data data(cfg);
    Trainer<float> t(cfg);
    t.run(data.train, 12);
    PlainClassifier<float> plain(Trainer<float>::model_config(cfg.train), cfg.train.seed);
    auto losses = train_plain(plain, cfg.train, data.train, 12);
    for (std::size_t s = 0; s < 12; ++s) EXPECT_EQ(t.log().steps[s].terms[5], losses[s]) << "step " << s + 1;
    const auto& a = t.model().params().params();
    const auto& b = plain.params().params();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].name, b[i].name);
        EXPECT_TRUE(std::ranges::equal(a[i].tensor.values(), b[i].tensor.values())) << a[i].name;
    }
}

TEST(Toggles, GridEnumeratesTheEightCombinations) {
    std::set<std::tuple<bool, bool, bool>> seen;
    for (int m = 1; m <= 8; ++m) {
        auto t = toggles_for_model(m);
        seen.insert({t.iv_learning, t.semantic_fusion, t.constraints});
    }
    EXPECT_EQ(seen.size(), 8u);
    EXPECT_EQ(toggles_for_model(1), (Toggles{false, false, false}));
    EXPECT_EQ(toggles_for_model(2), (Toggles{false, true, false}));
    EXPECT_EQ(toggles_for_model(3), (Toggles{true, false, false}));
    EXPECT_EQ(toggles_for_model(5), (Toggles{false, false, true}));
    EXPECT_EQ(toggles_for_model(8), (Toggles{true, true, true}));
    EXPECT_THROW(toggles_for_model(9), ContractViolation);
}

TEST(Toggles, AllOffHasNoDecoderFusionOrEstimatorParameters) {
    auto cfg = tiny();
    cfg.train.toggles = toggles_for_model(1);
    Trainer<float> t(cfg);
    EXPECT_EQ(t.model().stores().size(), 1u);
    for (const auto& p : t.model().params().params()) {
        EXPECT_FALSE(p.name.starts_with("decoder")) << p.name;
        EXPECT_FALSE(p.name.starts_with("head_")) << p.name;
        EXPECT_FALSE(p.name.starts_with("fusion.layer")) << p.name;
        EXPECT_FALSE(p.name.starts_with("est_")) << p.name;
    }
    PlainClassifier<float> plain(Trainer<float>::model_config(cfg.train), 0);
    EXPECT_EQ(t.model().params().scalar_count(), plain.params().scalar_count());

    auto full = tiny();
    Trainer<float> t8(full);
    EXPECT_EQ(t8.model().stores().size(), 4u);
    EXPECT_TRUE(t8.model().params().contains("decoder.queries"));
}

TEST(Toggles, ConstraintsOffSkipsEstimatorFitting) {
    auto cfg = tiny();
    cfg.train.toggles = toggles_for_model(4);
    Data data(cfg);
    Trainer<float> t(cfg);
    t.run(data.train, 3);
    EXPECT_EQ(t.fit_stats().fits, 0u);
    for (const auto& row : t.log().steps)
        for (std::size_t i = 2; i < 5; ++i) EXPECT_EQ(row.terms[i], 0.0);
}

// ---------------------------------------------------------------- checkpoint

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    auto cfg = tiny();
    Data data(cfg);
    Trainer<float> t(cfg);
    t.run(data.train, 3);
    const auto once = format_checkpoint(t.checkpoint());
    auto restored = trainer_from_checkpoint<float>(parse_checkpoint(once));
    EXPECT_EQ(format_checkpoint(restored->checkpoint()), once);
    EXPECT_EQ(format_checkpoint(parse_checkpoint(once)), once);
}

TEST(Checkpoint, DigestMismatchIsAnError) {
    auto cfg = tiny();
    Trainer<float> t(cfg);
    auto c = t.checkpoint();
    auto other = cfg;
    other.train.optimizer.lr = 5e-4;
    Trainer<float> u(other);
    EXPECT_THROW(u.restore(c), ContractViolation);
    EXPECT_THROW(parse_checkpoint("ivcxr-checkpoint 2\n"), ParseError);
    auto text = format_checkpoint(c);
    text.resize(text.size() / 2);
    EXPECT_THROW(parse_checkpoint(text), ParseError);
}

// ---------------------------------------------------------------- attention

TEST(Attention, RowSumsToOneAndBlankImageIsNearUniform) {
    auto cfg = tiny();
    Trainer<double> t(cfg);
    LabeledSample blank{RasterImage(32, 32, 1), {0, 0, 0, 0}, {}, RasterImage(32, 32, 1)};
    for (std::size_t c = 0; c < 4; ++c) {
        auto a = export_attention(t.model(), blank, c);
        double sum = 0.0;
        for (double v : a.row) sum += v;
        EXPECT_NEAR(sum, 1.0, 1e-8);
        EXPECT_EQ(a.heatmap.height, 32u);
        const auto [lo, hi] = std::minmax_element(a.row.begin(), a.row.end());
        EXPECT_LT(*hi / *lo, 1.5);
        for (float v : a.heatmap.pixels) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
    auto off = cfg;
    off.train.toggles = toggles_for_model(2);
    Trainer<double> u(off);
    EXPECT_THROW(export_attention(u.model(), blank, 0), ContractViolation);
    EXPECT_THROW(export_attention(t.model(), blank, 4), ContractViolation);
}

TEST(Attention, MassInside) {
    RasterImage heat(2, 2, 1), mask(2, 2, 1);
    heat.pixels = {0.1f, 0.2f, 0.3f, 0.4f};
    mask.pixels = {0, 1, 0, 1};
    EXPECT_NEAR(mass_inside(heat, mask), 0.6, 1e-6);
}

// ---------------------------------------------------------------- config

TEST(Config, ParseErrorsNameTheLine) {
    ExperimentConfig c;
    try {
        apply_config_text(c, "optimizer.lr=0.002\n# comment\nmodel.bogus=3\n");
        FAIL() << "expected a parse error";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 3u);
    }
    EXPECT_EQ(c.train.optimizer.lr, 0.002);
    EXPECT_THROW(apply_config_text(c, "train.steps=-4\n"), ParseError);
    EXPECT_THROW(apply_config_text(c, "optimizer.lr\n"), ParseError);
    EXPECT_THROW(apply_config_text(c, "data.policy=u-maybe\n"), ParseError);
}

TEST(Config, TextRoundTripsAndDigestIgnoresRunLength) {
    auto a = tiny();
    ExperimentConfig b;
    apply_config_text(b, config_text(a));
    EXPECT_EQ(config_text(b), config_text(a));
    EXPECT_EQ(config_digest(b), config_digest(a));
    b.train.steps = 999;
    EXPECT_EQ(config_digest(b), config_digest(a));
    b.train.batch_size = 9;
    EXPECT_NE(config_digest(b), config_digest(a));
}

// ---------------------------------------------------------------- data loading

TEST(LoadSplit, AppliesThePolicyAndGeometry) {
    const auto dir = std::filesystem::temp_directory_path() / "ivcxr_load_split";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    ingest::save_raster(dir / "a.ivr", RasterImage(8, 8, 1, 0.25f));
    ingest::save_raster(dir / "b.ivr", RasterImage(8, 8, 1, 0.75f));
    ingest::write_file(dir / "m.txt", "classes:x,y,z\na.ivr|-1,1,0|4\nb.ivr|0,-1,1|\n");
    auto ones = load_split((dir / "m.txt").string(), ingest::UncertainPolicy::ones, 6, 4);
    auto zeros = load_split((dir / "m.txt").string(), ingest::UncertainPolicy::zeros, 6, 4);
    EXPECT_EQ(ones.samples[0].labels, (std::vector<float>{1, 1, 0}));
    EXPECT_EQ(zeros.samples[0].labels, (std::vector<float>{0, 1, 0}));
    EXPECT_EQ(zeros.samples[1].labels, (std::vector<float>{0, 0, 1}));
    EXPECT_EQ(ones.samples[0].image.height, 4u);
    EXPECT_FLOAT_EQ(ones.samples[1].image.at(2, 2), 0.75f);
    EXPECT_EQ(ones.samples[0].tokens, (std::vector<semfuse::TokenId>{4}));
    std::filesystem::remove_all(dir);
}

TEST(Batches, IndicesAreDistinctAndDeterministic) {
    for (std::uint64_t step = 0; step < 20; ++step) {
        auto a = batch_indices(3, step, 50, 16);
        EXPECT_EQ(a, batch_indices(3, step, 50, 16));
        EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 16u);
        for (auto i : a) EXPECT_LT(i, 50u);
    }
    EXPECT_NE(batch_indices(3, 0, 50, 16), batch_indices(3, 1, 50, 16));
    EXPECT_EQ(batch_indices(3, 0, 5, 16).size(), 5u);
}

// ---------------------------------------------------------------- ablation

TEST(Ablation, FailedRunMarksOnlyItsCell) {
    auto cfg = tiny();
    cfg.train.steps = 2;
    Data data(cfg);
    auto hook = [](const RunResult& r, Trainer<float>&) {
        if (r.model == 2) throw NumericFault("injected");
    };
    auto rows = ablate(cfg, data.train, data.test, nullptr, hook, {1, 2});
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_FALSE(rows[0].failed);
    EXPECT_EQ(rows[0].runs.size(), 2u);
    EXPECT_TRUE(std::isfinite(rows[0].mean_ood_auc));
    EXPECT_TRUE(rows[1].failed);
    EXPECT_EQ(rows[1].runs[0].error, "injected");
    const auto csv = ablation_csv(rows);
    EXPECT_TRUE(csv.starts_with("model,iv_learning,semantic_fusion,constraints,mean_ood_auc,std\n1,-,-,-,"));
}
