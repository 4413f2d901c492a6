#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "ivcxr/diff/gradcheck.hpp"
#include "ivcxr/ivlearn.hpp"
#include "test_util.hpp"

using namespace ivcxr;
using namespace ivcxr::diff;
using ivcxr::testing::random_tensor;
using ivcxr::testing::values_of;
using Td = Tensor<double>;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Td& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
    Mat m(rows, std::vector<double>(cols));
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) m[i][j] = t[offset + i * cols + j];
    return m;
}

struct LoopLayer {
    Mat instrument, confounder, attention;
};

// Scalar-loop re-computation of one decoder layer.
LoopLayer loop_layer(const Mat& q, const Mat& f) {
    const std::size_t k = q.size(), n = f.size(), d = f[0].size();
    LoopLayer out{Mat(k, std::vector<double>(d, 0.0)), Mat(k, std::vector<double>(d, 0.0)),
                  Mat(k, std::vector<double>(n, 0.0))};
    for (std::size_t i = 0; i < k; ++i) {
        std::vector<double> logits(n);
        double mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += q[i][c] * f[j][c];
            logits[j] = s / std::sqrt(double(d));
            mx = std::max(mx, logits[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(logits[j] - mx);
        for (std::size_t j = 0; j < n; ++j) out.attention[i][j] = std::exp(logits[j] - mx) / z;
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t c = 0; c < d; ++c) {
                out.instrument[i][c] += out.attention[i][j] * f[j][c];
                out.confounder[i][c] += (1.0 - out.attention[i][j]) * f[j][c];
            }
    }
    return out;
}

void expect_mat_near(const Td& t, const Mat& m, double tol, std::size_t offset = 0) {
    const std::size_t cols = m[0].size();
    for (std::size_t i = 0; i < m.size(); ++i)
        for (std::size_t j = 0; j < cols; ++j) EXPECT_NEAR(t[offset + i * cols + j], m[i][j], tol);
}

}  // namespace

TEST(DecodeLayer, SingleCellGivesAllMassToInstrument) {
    Td f({1, 2}, {2.0, -1.0});
    Td q({2, 2}, {0.3, -4.0, 1.5, 0.2});
    auto out = ivlearn::decode_layer(q, f);
    EXPECT_EQ(values_of(out.instrument), (std::vector<double>{2, -1, 2, -1}));
    EXPECT_EQ(values_of(out.confounder), (std::vector<double>{0, 0, 0, 0}));
}

TEST(DecodeLayer, ZeroQueryAttendsUniformly) {
    Td f({2, 2}, {1.0, 0.0, 3.0, 2.0});
    Td q({1, 2}, {0.0, 0.0});
    auto out = ivlearn::decode_layer(q, f);
    EXPECT_DOUBLE_EQ(out.instrument[0], 2.0);
    EXPECT_DOUBLE_EQ(out.instrument[1], 1.0);
    EXPECT_DOUBLE_EQ(out.confounder[0], 2.0);
    EXPECT_DOUBLE_EQ(out.confounder[1], 1.0);
}

TEST(DecodeLayer, MatchesScalarLoopOracle) {
    StreamRng rng(11, "ivlearn/oracle");
    auto f = random_tensor({3, 4}, rng, -2, 2);
    auto q = random_tensor({2, 4}, rng, -2, 2);
    auto out = ivlearn::decode_layer(q, f);
    auto ref = loop_layer(to_mat(q, 2, 4), to_mat(f, 3, 4));
    expect_mat_near(out.instrument, ref.instrument, 1e-10);
    expect_mat_near(out.confounder, ref.confounder, 1e-10);
    expect_mat_near(out.attention, ref.attention, 1e-10);
}

TEST(DecodeLayer, ComplementarityAndRowStochasticOnRandomInstances) {
    StreamRng rng(12, "ivlearn/complement");
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t k = 2 + rng.below(4), n = 1 + rng.below(10), d = 1 + rng.below(6);
        auto f = random_tensor({n, d}, rng, -3, 3);
        auto q = random_tensor({k, d}, rng, -3, 3);
        auto out = ivlearn::decode_layer(q, f);
        for (std::size_t i = 0; i < k; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                EXPECT_GE(out.attention[i * n + j], 0.0);
                row += out.attention[i * n + j];
            }
            EXPECT_NEAR(row, 1.0, 1e-8);
            for (std::size_t c = 0; c < d; ++c) {
                double col = 0.0;
                for (std::size_t j = 0; j < n; ++j) col += f[j * d + c];
                EXPECT_NEAR(out.instrument[i * d + c] + out.confounder[i * d + c], col, 1e-10);
            }
        }
    }
}

TEST(DecodeLayer, ComplementarityAtSinglePrecision) {
    StreamRng rng(13, "ivlearn/complement32");
    std::vector<float> fv(16 * 8), qv(4 * 8);
    for (auto& x : fv) x = static_cast<float>(rng.uniform(-1, 1));
    for (auto& x : qv) x = static_cast<float>(rng.uniform(-1, 1));
    Tensor<float> f({16, 8}, fv), q({4, 8}, qv);
    auto out = ivlearn::decode_layer(q, f);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t c = 0; c < 8; ++c) {
            double col = 0.0;
            for (std::size_t j = 0; j < 16; ++j) col += fv[j * 8 + c];
            EXPECT_NEAR(out.instrument[i * 8 + c] + out.confounder[i * 8 + c], col, 1e-6);
        }
}

TEST(DecodeLayer, WidthMismatchIsAContractViolation) {
    auto f = Td::zeros({3, 4}), q = Td::zeros({2, 5});
    EXPECT_THROW(ivlearn::decode_layer(q, f), ContractViolation);
}

TEST(Decoder, SingleLayerWithIdentityProjectionEqualsDecodeLayer) {
    ParameterStore<double> store(1);
    ivlearn::Decoder<double> dec(store, "dec", 2, 3, {1, false});
    auto& proj = dec.projection(0);
    auto w = proj.weight.mutable_values();
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < 3; ++i) w[i * 3 + i] = 1.0;
    StreamRng rng(2, "decoder/identity");
    auto q = store.at("dec.queries").tensor.mutable_values();
    for (auto& x : q) x = rng.uniform(-1, 1);
    auto f = random_tensor({1, 5, 3}, rng);
    auto out = dec(f);
    auto ref = ivlearn::decode_layer(reshape(dec.queries(), {2, 3}), reshape(f, {5, 3}));
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_DOUBLE_EQ(out.instrument[i], ref.instrument[i]);
        EXPECT_DOUBLE_EQ(out.confounder[i], ref.confounder[i]);
    }
}

TEST(Decoder, ZeroProjectionsPassTheInstrumentThroughTheResidual) {
    ParameterStore<double> store(1);
    ivlearn::Decoder<double> dec(store, "dec", 2, 3, {2, true});
    for (std::size_t l = 0; l < 2; ++l) {
        auto w = dec.projection(l).weight.mutable_values();
        std::fill(w.begin(), w.end(), 0.0);
    }
    StreamRng rng(3, "decoder/zero");
    auto f = random_tensor({1, 4, 3}, rng);
    auto first = ivlearn::decode_layer(Td::zeros({2, 3}), reshape(f, {4, 3}));
    auto second = ivlearn::decode_layer(first.instrument, reshape(f, {4, 3}));
    auto out = dec(f);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_DOUBLE_EQ(out.instrument[i], second.instrument[i]);
        EXPECT_DOUBLE_EQ(out.confounder[i], second.confounder[i]);
    }
}

TEST(Decoder, TwoRandomLayersMatchScalarLoopOracle) {
    ParameterStore<double> store(4);
    ivlearn::Decoder<double> dec(store, "dec", 3, 4, {2, true});
    StreamRng rng(4, "decoder/random");
    for (auto& x : store.at("dec.queries").tensor.mutable_values()) x = rng.uniform(-1, 1);
    for (std::size_t l = 0; l < 2; ++l)
        for (auto& x : dec.projection(l).bias.mutable_values()) x = rng.uniform(-0.5, 0.5);
    auto f = random_tensor({2, 5, 4}, rng, -2, 2);
    auto out = dec(f);
    for (std::size_t b = 0; b < 2; ++b) {
        Mat fm = to_mat(f, 5, 4, b * 20);
        Mat q = to_mat(dec.queries(), 3, 4);
        LoopLayer layer;
        for (std::size_t l = 0; l < 2; ++l) {
            layer = loop_layer(q, fm);
            const auto& lin = dec.projection(l);
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t c = 0; c < 4; ++c) {
                    double s = lin.bias[c];
                    for (std::size_t j = 0; j < 4; ++j) s += layer.instrument[i][j] * lin.weight[j * 4 + c];
                    q[i][c] = layer.instrument[i][c] + s;
                }
        }
        expect_mat_near(out.instrument, q, 1e-8, b * 12);
        expect_mat_near(out.confounder, layer.confounder, 1e-8, b * 12);
        expect_mat_near(out.attention, layer.attention, 1e-8, b * 15);
    }
}

TEST(Decoder, ZeroLayersIsAContractViolation) {
    ParameterStore<double> store(0);
    EXPECT_THROW(ivlearn::Decoder<double>(store, "dec", 2, 3, {0, true}), ContractViolation);
}

TEST(Decoder, GradientsPassFiniteDifferences) {
    ParameterStore<double> store(5);
    ivlearn::Decoder<double> dec(store, "dec", 2, 3, {2, true});
    StreamRng rng(5, "decoder/fd");
    for (auto& x : store.at("dec.queries").tensor.mutable_values()) x = rng.uniform(-1, 1);
    auto f = random_tensor({2, 4, 3}, rng, -1, 1, true);
    auto w = random_tensor({2, 2, 3}, rng);
    auto fn = [&] {
        auto o = dec(f);
        return add(sum(mul(o.instrument, w)), sum(mul(o.confounder, o.confounder)));
    };
    std::vector<NamedTensor> inputs{{"features", f}};
    for (auto& p : store.params()) inputs.push_back({p.name, p.tensor});
    auto rep = finite_diff_check(fn, inputs, 40, 1e-4, 5);
    EXPECT_TRUE(rep.all_pass()) << rep.max_rel_error();
}

namespace {

nn::ClassHead<double> head_with(ParameterStore<double>& store, const std::string& name, std::size_t k,
                                std::size_t d, StreamRng& rng) {
    nn::ClassHead<double> h(store, name, k, d);
    for (auto& x : h.weight.mutable_values()) x = rng.uniform(-1, 1);
    for (auto& x : h.bias.mutable_values()) x = rng.uniform(-1, 1);
    return h;
}

}  // namespace

TEST(IvLoss, HalfProbabilitiesGiveLn2) {
    ParameterStore<double> store(0);
    nn::ClassHead<double> head(store, "h", 2, 3);
    head.weight.mutable_values()[0] = 0.0;
    for (auto& x : head.weight.mutable_values()) x = 0.0;
    Td inst({1, 2, 3}, std::vector<double>(6, 0.7));
    for (auto labels : {std::vector<double>{1, 0}, std::vector<double>{1, 1}, std::vector<double>{0, 0}})
        EXPECT_NEAR(ivlearn::iv_loss(inst, Td({1, 2}, labels), head).item(), std::log(2.0), 1e-15);
}

TEST(Bce, PerfectPredictionIsNearZero) {
    Td labels({1, 3}, {1, 0, 1});
    Td probs({1, 3}, {1.0 - 1e-7, 1e-7, 1.0 - 1e-7});
    EXPECT_LE(nn::binary_cross_entropy(probs, labels).item(), 1.1e-6);
}

TEST(Bce, HandEvaluatedCase) {
    Td probs({1, 2}, {0.9, 0.2});
    Td labels({1, 2}, {1, 0});
    EXPECT_NEAR(nn::binary_cross_entropy(probs, labels).item(), 0.1642520335, 1e-9);
}

TEST(IvLoss, NonBinaryLabelsAreAContractViolation) {
    ParameterStore<double> store(0);
    nn::ClassHead<double> head(store, "h", 2, 3);
    auto inst = Td::zeros({1, 2, 3});
    EXPECT_THROW(ivlearn::iv_loss(inst, Td({1, 2}, {0.5, 1.0}), head), ContractViolation);
    EXPECT_THROW(ivlearn::iv_loss(inst, Td({1, 2}, {-1.0, 1.0}), head), ContractViolation);
}

TEST(IvLoss, InvariantUnderJointClassPermutation) {
    StreamRng rng(21, "ivloss/perm");
    const std::size_t k = 4, d = 3, B = 2;
    ParameterStore<double> s1(0), s2(0);
    auto h1 = head_with(s1, "h", k, d, rng);
    nn::ClassHead<double> h2(s2, "h", k, d);
    auto inst = random_tensor({B, k, d}, rng);
    std::vector<double> lab(B * k);
    for (auto& x : lab) x = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const std::vector<std::size_t> perm = {2, 0, 3, 1};
    auto inst_p = Td::zeros({B, k, d}), lab_p = Td::zeros({B, k});
    auto iv = inst_p.mutable_values();
    auto lv = lab_p.mutable_values();
    auto w2 = h2.weight.mutable_values();
    auto b2 = h2.bias.mutable_values();
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t p = perm[i];
        for (std::size_t c = 0; c < d; ++c) w2[i * d + c] = h1.weight[p * d + c];
        b2[i] = h1.bias[p];
        for (std::size_t b = 0; b < B; ++b) {
            lv[b * k + i] = lab[b * k + p];
            for (std::size_t c = 0; c < d; ++c) iv[(b * k + i) * d + c] = inst[(b * k + p) * d + c];
        }
    }
    EXPECT_NEAR(ivlearn::iv_loss(inst, Td({B, k}, lab), h1).item(), ivlearn::iv_loss(inst_p, lab_p, h2).item(),
                1e-14);
}

TEST(KlUniform, UniformIsZero) {
    Td p({1, 4}, {0.25, 0.25, 0.25, 0.25});
    EXPECT_NEAR(nn::kl_uniform(p).item(), 0.0, 1e-15);
}

TEST(KlUniform, HandEvaluatedCases) {
    EXPECT_NEAR(nn::kl_uniform(Td({1, 2}, {0.7, 0.3})).item(),
                0.5 * std::log(0.5 / 0.7) + 0.5 * std::log(0.5 / 0.3), 1e-12);
    EXPECT_NEAR(nn::kl_uniform(Td({1, 2}, {0.7, 0.3})).item(), 0.0871766936, 1e-9);
    EXPECT_NEAR(nn::kl_uniform(Td({1, 2}, {0.99, 0.01})).item(), 1.6144630804, 1e-9);
}

TEST(KlUniform, DecreasesStrictlyWhenMixedTowardUniform) {
    StreamRng rng(22, "kl/mix");
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t k = 2 + rng.below(5);
        std::vector<double> p(k);
        for (auto& x : p) x = rng.uniform(0.01, 1.0);
        const double z = std::accumulate(p.begin(), p.end(), 0.0);
        for (auto& x : p) x /= z;
        double prev = nn::kl_uniform(Td({1, k}, p)).item();
        for (double lambda : {0.1, 0.3, 0.6, 1.0}) {
            std::vector<double> mix(k);
            for (std::size_t i = 0; i < k; ++i) mix[i] = (1 - lambda) * p[i] + lambda / double(k);
            const double now = nn::kl_uniform(Td({1, k}, mix)).item();
            EXPECT_LT(now, prev);
            prev = now;
        }
    }
}

TEST(ConfounderLoss, UniformScoresGiveZero) {
    ParameterStore<double> store(0);
    nn::ClassHead<double> head(store, "h", 3, 2);
    for (auto& x : head.weight.mutable_values()) x = 0.0;
    Td conf({2, 3, 2}, std::vector<double>(12, 1.3));
    EXPECT_NEAR(ivlearn::confounder_loss(conf, head).item(), 0.0, 1e-15);
}

TEST(KlUniform, ZeroProbabilityIsClampedToFloor) {
    const double v = nn::kl_uniform(Td({1, 2}, {1.0, 0.0})).item();
    EXPECT_NEAR(v, -std::log(2.0) - 0.5 * std::log(1e-12), 1e-9);
}
