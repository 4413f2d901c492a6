#pragma once

// Auxiliary token records: padding, embedding, and cross-attention fusion of the
// text feature into the instrument queries.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "ivcxr/diff/ops.hpp"
#include "ivcxr/diff/param.hpp"
#include "ivcxr/nn.hpp"

namespace ivcxr::semfuse {

using diff::Tensor;
using TokenId = std::int64_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kClsId = 1;
inline constexpr std::size_t kDefaultMaxLen = 256;

/// [CLS, w1..wn, 0...] of exactly max_len ids; words beyond max_len - 1 are dropped.
inline std::vector<TokenId> tokenize_pad(const std::vector<TokenId>& words, std::size_t max_len = kDefaultMaxLen,
                                         TokenId cls = kClsId) {
    require(max_len >= 1, "tokenize_pad: max_len must be positive");
    std::vector<TokenId> out(max_len, kPadId);
    out[0] = cls;
    const std::size_t n = std::min(words.size(), max_len - 1);
    for (std::size_t i = 0; i < n; ++i) {
        require(words[i] > 0, "tokenize_pad: token id " + std::to_string(words[i]) + " is reserved");
        out[i + 1] = words[i];
    }
    return out;
}

/// Number of leading positions up to and including the last non-pad id.
inline std::size_t valid_length(const std::vector<TokenId>& ids) {
    std::size_t n = ids.size();
    while (n > 0 && ids[n - 1] == kPadId) --n;
    return n;
}

/// One token string per line; the line number is the id.
struct Vocabulary {
    std::vector<std::string> tokens;

    static Vocabulary load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open vocabulary file " + path);
        Vocabulary v;
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            v.tokens.push_back(line);
        }
        if (v.tokens.empty() || v.tokens[0] != "<pad>") throw ParseError("expected <pad> as token 0", 1);
        if (v.tokens.size() < 2 || v.tokens[1] != "<cls>") throw ParseError("expected <cls> as token 1", 2);
        return v;
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw IoError("cannot write vocabulary file " + path);
        for (const auto& t : tokens) out << t << '\n';
    }

    std::size_t size() const { return tokens.size(); }
};

/// Rows of table for each id; pad rows are zero whatever table row 0 holds.
/// ids: B records of equal length L -> [B, L, d_t].
template <typename T>
Tensor<T> embed_tokens(const std::vector<std::vector<TokenId>>& ids, const Tensor<T>& table) {
    require(!ids.empty(), "embed_tokens: empty batch");
    const std::size_t len = ids.front().size();
    std::vector<TokenId> flat;
    flat.reserve(ids.size() * len);
    for (const auto& rec : ids) {
        require(rec.size() == len, "embed_tokens: records in a batch must share a length");
        flat.insert(flat.end(), rec.begin(), rec.end());
    }
    return diff::embedding(table, flat, {ids.size(), len}, kPadId);
}

/// Additive attention mask [B, 1, L]: 0 where a position may be attended, -1e9 elsewhere.
/// support[b] is set to whether record b has any attendable position.
template <typename T>
Tensor<T> attention_mask(const std::vector<std::vector<TokenId>>& ids, bool mask_cls, std::vector<bool>& support) {
    const std::size_t len = ids.front().size();
    std::vector<T> m(ids.size() * len, T(0));
    support.assign(ids.size(), false);
    for (std::size_t b = 0; b < ids.size(); ++b)
        for (std::size_t i = 0; i < len; ++i) {
            const bool open = ids[b][i] != kPadId && !(mask_cls && i == 0);
            m[b * len + i] = open ? T(0) : T(-1e9);
            support[b] = support[b] || open;
        }
    return Tensor<T>({ids.size(), 1, len}, std::move(m));
}

struct FusionConfig {
    std::size_t layers = 2;
    std::size_t d_t = 32;
    std::size_t vocab = 64;
    bool mask_cls = false;  // exclude the CLS position from attention
};

/// Queries I' attend over the projected token embeddings; output projection and
/// the second feed-forward matrix start at zero, so an untrained stack is the identity.
template <typename T>
class Fusion {
public:
    struct Layer {
        nn::Linear<T> out;  // d -> d, zero init
        nn::Linear<T> ff1;  // d -> d
        nn::Linear<T> ff2;  // d -> d, zero init
    };

    Fusion() = default;
    Fusion(diff::ParameterStore<T>& store, const std::string& name, std::size_t d, const FusionConfig& cfg)
        : cfg_(cfg), d_(d) {
        table_ = store.add(name + ".embedding", {cfg.vocab, cfg.d_t}, diff::Init::fan_in_uniform, 1);
        project_ = nn::Linear<T>(store, name + ".text_proj", cfg.d_t, d);
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const std::string p = name + ".layer" + std::to_string(l);
            layers_.push_back({nn::Linear<T>(store, p + ".out", d, d, diff::Init::zeros),
                               nn::Linear<T>(store, p + ".ff1", d, d),
                               nn::Linear<T>(store, p + ".ff2", d, d, diff::Init::zeros)});
        }
    }

    const FusionConfig& config() const { return cfg_; }
    const Tensor<T>& table() const { return table_; }
    Layer& layer(std::size_t l) { return layers_.at(l); }
    nn::Linear<T>& text_projection() { return project_; }

    /// instrument: I' [B, k, d]; ids: B padded records of equal length.
    Tensor<T> operator()(const Tensor<T>& instrument, const std::vector<std::vector<TokenId>>& ids) const {
        require(instrument.rank() == 3 && instrument.dim(2) == d_ && instrument.dim(0) == ids.size(),
                "fusion expects I' [B,k," + std::to_string(d_) + "] matching " + std::to_string(ids.size()) +
                    " records, got " + diff::to_string(instrument.shape()));
        if (layers_.empty()) return instrument;
        std::vector<bool> support;
        auto mask = attention_mask<T>(ids, cfg_.mask_cls, support);
        auto keys = project_(embed_tokens(ids, table_));
        const T inv_sqrt_d = T(1) / static_cast<T>(std::sqrt(static_cast<double>(d_)));
        Tensor<T> x = instrument;
        for (const auto& layer : layers_) {
            auto scores = diff::add(diff::scale(diff::matmul(x, diff::transpose(keys)), inv_sqrt_d), mask);
            x = diff::add(x, layer.out(diff::matmul(diff::softmax(scores), keys)));
            x = diff::add(x, layer.ff2(diff::relu(layer.ff1(x))));
        }
        bool all = true;
        for (bool s : support) all = all && s;
        if (all) return x;
        // records without any attendable position keep I' unchanged
        std::vector<T> gate(ids.size());
        for (std::size_t b = 0; b < ids.size(); ++b) gate[b] = support[b] ? T(1) : T(0);
        Tensor<T> g({ids.size(), 1, 1}, std::move(gate));
        return diff::add(instrument, diff::mul(g, diff::sub(x, instrument)));
    }

private:
    FusionConfig cfg_;
    std::size_t d_ = 0;
    Tensor<T> table_;
    nn::Linear<T> project_;
    std::vector<Layer> layers_;
};

/// Fusion switched off: each row of I' is concatenated with the masked mean of the
/// raw token embeddings and mapped back to width d.
template <typename T>
class ConcatFusion {
public:
    ConcatFusion() = default;
    ConcatFusion(diff::ParameterStore<T>& store, const std::string& name, std::size_t d, const FusionConfig& cfg)
        : cfg_(cfg), d_(d) {
        table_ = store.add(name + ".embedding", {cfg.vocab, cfg.d_t}, diff::Init::fan_in_uniform, 1);
        map_ = nn::Linear<T>(store, name + ".concat", d + cfg.d_t, d);
    }

    Tensor<T> operator()(const Tensor<T>& instrument, const std::vector<std::vector<TokenId>>& ids) const {
        require(instrument.rank() == 3 && instrument.dim(2) == d_ && instrument.dim(0) == ids.size(),
                "concat fusion expects I' [B,k," + std::to_string(d_) + "], got " +
                    diff::to_string(instrument.shape()));
        const std::size_t B = ids.size(), len = ids.front().size(), k = instrument.dim(1);
        std::vector<T> w(B * len, T(0));
        for (std::size_t b = 0; b < B; ++b) {
            std::size_t count = 0;
            for (std::size_t i = 0; i < len; ++i) count += ids[b][i] != kPadId && !(cfg_.mask_cls && i == 0);
            for (std::size_t i = 0; i < len; ++i)
                if (ids[b][i] != kPadId && !(cfg_.mask_cls && i == 0)) w[b * len + i] = T(1) / T(count);
        }
        Tensor<T> weights({B, 1, len}, std::move(w));
        auto pooled = diff::matmul(weights, embed_tokens(ids, table_));  // [B, 1, d_t]
        auto text = diff::broadcast_to(pooled, {B, k, cfg_.d_t});
        return map_(diff::concat_last(instrument, text));
    }

private:
    FusionConfig cfg_;
    std::size_t d_ = 0;
    Tensor<T> table_;
    nn::Linear<T> map_;
};

}  // namespace ivcxr::semfuse
