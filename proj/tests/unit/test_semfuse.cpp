#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ivcxr/diff/gradcheck.hpp"
#include "ivcxr/semfuse.hpp"
#include "test_util.hpp"

using namespace ivcxr;
using namespace ivcxr::diff;
using namespace ivcxr::semfuse;
using ivcxr::testing::random_tensor;
using ivcxr::testing::values_of;
using Td = Tensor<double>;

TEST(TokenizePad, ShortRecord) {
    EXPECT_EQ(tokenize_pad({5, 9}, 8), (std::vector<TokenId>{1, 5, 9, 0, 0, 0, 0, 0}));
}

TEST(TokenizePad, EmptyRecord) {
    EXPECT_EQ(tokenize_pad({}, 8), (std::vector<TokenId>{1, 0, 0, 0, 0, 0, 0, 0}));
}

TEST(TokenizePad, LongRecordKeepsClsAndFirst255) {
    std::vector<TokenId> words(300);
    for (std::size_t i = 0; i < words.size(); ++i) words[i] = static_cast<TokenId>(2 + i % 60);
    auto out = tokenize_pad(words, 256);
    ASSERT_EQ(out.size(), 256u);
    EXPECT_EQ(out[0], kClsId);
    for (std::size_t i = 0; i < 255; ++i) EXPECT_EQ(out[i + 1], words[i]);
}

TEST(TokenizePad, ReservedIdsAreRejected) {
    EXPECT_THROW(tokenize_pad({3, 0}, 8), ContractViolation);
    EXPECT_THROW(tokenize_pad({-4}, 8), ContractViolation);
}

TEST(Vocabulary, RoundTripAndHeaderChecks) {
    const auto dir = std::filesystem::temp_directory_path() / "ivcxr_vocab_test";
    std::filesystem::create_directories(dir);
    Vocabulary v{{"<pad>", "<cls>", "opacity", "effusion"}};
    v.save((dir / "v.txt").string());
    auto back = Vocabulary::load((dir / "v.txt").string());
    EXPECT_EQ(back.tokens, v.tokens);
    {
        std::ofstream bad(dir / "bad.txt");
        bad << "<cls>\n<pad>\n";
    }
    try {
        Vocabulary::load((dir / "bad.txt").string());
        FAIL() << "expected a parse error";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 1u);
    }
    EXPECT_THROW(Vocabulary::load((dir / "missing.txt").string()), IoError);
    std::filesystem::remove_all(dir);
}

TEST(EmbedTokens, PadRowsAreZero) {
    StreamRng rng(1, "embed/pad");
    auto table = random_tensor({5, 3}, rng);
    auto out = embed_tokens<double>({{1, 4, 0, 0}}, table);
    for (std::size_t i = 6; i < 12; ++i) EXPECT_EQ(out[i], 0.0);
}

TEST(EmbedTokens, OneHotTableGivesIndicators) {
    std::vector<double> eye(16, 0.0);
    for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
    Td table({4, 4}, eye);
    auto out = embed_tokens<double>({{1, 3, 2}}, table);
    EXPECT_EQ(values_of(out), (std::vector<double>{0, 1, 0, 0, 0, 0, 0, 1, 0, 0, 1, 0}));
}

TEST(EmbedTokens, RandomTableLookupIsExact) {
    StreamRng rng(2, "embed/random");
    auto table = random_tensor({6, 5}, rng);
    auto out = embed_tokens<double>({{1, 3}}, table);
    for (std::size_t c = 0; c < 5; ++c) {
        EXPECT_EQ(out[c], table[1 * 5 + c]);
        EXPECT_EQ(out[5 + c], table[3 * 5 + c]);
    }
}

TEST(EmbedTokens, OutOfVocabularyIdIsNamed) {
    auto table = Td::zeros({4, 2});
    try {
        embed_tokens<double>({{1, 7}}, table);
        FAIL() << "expected a contract violation";
    } catch (const ContractViolation& e) {
        EXPECT_NE(std::string(e.what()).find('7'), std::string::npos) << e.what();
    }
}

namespace {

struct FusionFixture {
    ParameterStore<double> store{7};
    Fusion<double> fusion;

    FusionFixture(std::size_t d, FusionConfig cfg, bool randomize) : fusion(store, "fusion", d, cfg) {
        if (!randomize) return;
        StreamRng rng(8, "fusion/params");
        for (auto& p : store.params())
            for (auto& x : p.tensor.mutable_values()) x = rng.uniform(-0.6, 0.6);
    }
};

}  // namespace

TEST(Fusion, ZeroLayersIsIdentity) {
    FusionFixture f(4, {0, 3, 10, false}, true);
    StreamRng rng(3, "fusion/zero");
    auto inst = random_tensor({2, 2, 4}, rng);
    auto out = f.fusion(inst, {tokenize_pad({4, 5}, 6), tokenize_pad({7}, 6)});
    EXPECT_EQ(values_of(out), values_of(inst));
}

TEST(Fusion, UntrainedStackIsIdentity) {
    FusionFixture f(4, {2, 3, 10, false}, false);
    StreamRng rng(4, "fusion/init");
    auto inst = random_tensor({2, 3, 4}, rng);
    auto out = f.fusion(inst, {tokenize_pad({4, 5}, 6), tokenize_pad({7}, 6)});
    EXPECT_EQ(values_of(out), values_of(inst));
}

TEST(Fusion, AllPadRecordWithMaskedClsFallsBackToInput) {
    FusionFixture f(4, {2, 3, 10, true}, true);
    StreamRng rng(5, "fusion/fallback");
    auto inst = random_tensor({2, 2, 4}, rng);
    auto out = f.fusion(inst, {tokenize_pad({}, 5), tokenize_pad({3, 8}, 5)});
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(out[i], inst[i]);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_TRUE(std::isfinite(out[8 + i]));
    double moved = 0.0;
    for (std::size_t i = 8; i < 16; ++i) moved += std::abs(out[i] - inst[i]);
    EXPECT_GT(moved, 0.0);
}

TEST(Fusion, AppendingPadsNeverChangesTheOutput) {
    FusionFixture f(4, {2, 3, 10, false}, true);
    StreamRng rng(6, "fusion/pad");
    auto inst = random_tensor({1, 3, 4}, rng);
    auto base = f.fusion(inst, {tokenize_pad({4, 5, 9}, 4)});
    for (std::size_t len : {5, 8, 17, 64}) {
        auto longer = f.fusion(inst, {tokenize_pad({4, 5, 9}, len)});
        for (std::size_t i = 0; i < base.size(); ++i) EXPECT_EQ(longer[i], base[i]) << "len " << len;
    }
}

TEST(Fusion, OneLayerMatchesScalarLoopOracle) {
    const std::size_t d = 3, dt = 2, k = 2;
    FusionFixture f(d, {1, dt, 6, false}, true);
    StreamRng rng(9, "fusion/oracle");
    auto inst = random_tensor({1, k, d}, rng);
    const std::vector<TokenId> ids = {1, 4, 2, 0, 0};
    auto out = f.fusion(inst, {ids});

    const auto& table = f.fusion.table();
    auto& proj = f.fusion.text_projection();
    auto& layer = f.fusion.layer(0);
    auto lin = [](const nn::Linear<double>& l, const std::vector<double>& x) {
        const std::size_t in = l.weight.dim(0), outd = l.weight.dim(1);
        std::vector<double> y(outd);
        for (std::size_t o = 0; o < outd; ++o) {
            y[o] = l.bias[o];
            for (std::size_t i = 0; i < in; ++i) y[o] += x[i] * l.weight[i * outd + o];
        }
        return y;
    };
    std::vector<std::vector<double>> keys;
    for (TokenId id : ids) {
        if (id == kPadId) continue;
        std::vector<double> e(dt);
        for (std::size_t c = 0; c < dt; ++c) e[c] = table[static_cast<std::size_t>(id) * dt + c];
        keys.push_back(lin(proj, e));
    }
    for (std::size_t r = 0; r < k; ++r) {
        std::vector<double> x(d);
        for (std::size_t c = 0; c < d; ++c) x[c] = inst[r * d + c];
        std::vector<double> logits;
        double mx = -1e300;
        for (const auto& key : keys) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += x[c] * key[c];
            logits.push_back(s / std::sqrt(double(d)));
            mx = std::max(mx, logits.back());
        }
        double z = 0.0;
        for (double l : logits) z += std::exp(l - mx);
        std::vector<double> ctx(d, 0.0);
        for (std::size_t j = 0; j < keys.size(); ++j)
            for (std::size_t c = 0; c < d; ++c) ctx[c] += std::exp(logits[j] - mx) / z * keys[j][c];
        auto attn_out = lin(layer.out, ctx);
        for (std::size_t c = 0; c < d; ++c) x[c] += attn_out[c];
        auto hidden = lin(layer.ff1, x);
        for (auto& h : hidden) h = std::max(0.0, h);
        auto ff = lin(layer.ff2, hidden);
        for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out[r * d + c], x[c] + ff[c], 1e-8);
    }
}

TEST(Fusion, GradientsPassFiniteDifferences) {
    FusionFixture f(3, {2, 2, 6, false}, true);
    StreamRng rng(10, "fusion/fd");
    auto inst = random_tensor({2, 2, 3}, rng, -1, 1, true);
    auto w = random_tensor({2, 2, 3}, rng);
    const std::vector<std::vector<TokenId>> ids = {tokenize_pad({2, 5}, 4), tokenize_pad({3}, 4)};
    std::vector<NamedTensor> inputs{{"instrument", inst}};
    for (auto& p : f.store.params()) inputs.push_back({p.name, p.tensor});
    auto rep = finite_diff_check([&] { return sum(mul(f.fusion(inst, ids), w)); }, inputs, 40, 1e-4, 10);
    EXPECT_TRUE(rep.all_pass()) << rep.max_rel_error();
}

TEST(ConcatFusion, MapsConcatenatedFeaturesBackToWidthD) {
    ParameterStore<double> store(3);
    ConcatFusion<double> cf(store, "fusion", 4, {2, 3, 10, false});
    StreamRng rng(11, "concat/shape");
    auto inst = random_tensor({2, 3, 4}, rng);
    auto out = cf(inst, {tokenize_pad({4, 5}, 5), tokenize_pad({}, 5)});
    EXPECT_EQ(out.shape(), (Shape{2, 3, 4}));
    EXPECT_TRUE(store.contains("fusion.concat.weight"));
    EXPECT_FALSE(store.contains("fusion.layer0.out.weight"));
}
