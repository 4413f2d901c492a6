#pragma once

// The closed operation set. Every op here has a gradient test in
// tests/unit/test_diff.cpp; adding an op means adding its test.
//
//   arithmetic   add sub mul scale add_scalar (numpy-style broadcasting)
//   linear       matmul (rank 2/3, batch broadcast) transpose
//   nonlinear    softmax (last axis) log exp relu sigmoid clamp
//   reduction    sum mean sum_axis mean_axis
//   layout       reshape broadcast_to concat_last embedding
//   spatial      conv2d (NHWC, same padding) max_pool2d (2x2) layer_norm

#include <cstdint>
#include <limits>
#include <memory>

#include "ivcxr/diff/gemm.hpp"
#include "ivcxr/diff/tensor.hpp"

namespace ivcxr::diff {

namespace detail {

inline std::string shape_pair(const Shape& a, const Shape& b) { return to_string(a) + " vs " + to_string(b); }

struct Broadcast {
    Shape out;
    std::vector<std::size_t> sa, sb;  // strides of a and b indexed by output axis (0 when broadcast)
};

inline Broadcast plan_broadcast(const Shape& a, const Shape& b, std::string_view op) {
    const std::size_t r = std::max(a.size(), b.size());
    Broadcast p;
    p.out.assign(r, 1);
    p.sa.assign(r, 0);
    p.sb.assign(r, 0);
    std::size_t stride_a = 1, stride_b = 1;
    for (std::size_t k = 0; k < r; ++k) {
        const std::size_t ax = r - 1 - k;
        const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
        const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
        if (da != db && da != 1 && db != 1)
            throw ContractViolation(std::string(op) + ": shapes do not broadcast: " + shape_pair(a, b));
        p.out[ax] = std::max(da, db);
        p.sa[ax] = da == 1 ? 0 : stride_a;
        p.sb[ax] = db == 1 ? 0 : stride_b;
        stride_a *= da;
        stride_b *= db;
    }
    return p;
}

/// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const Broadcast& p, F&& f) {
    const std::size_t r = p.out.size();
    const std::size_t total = numel(p.out);
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0, ib = 0;
    const std::size_t inner = r ? p.out[r - 1] : 1;
    const std::size_t inner_sa = r ? p.sa[r - 1] : 0;
    const std::size_t inner_sb = r ? p.sb[r - 1] : 0;
    for (std::size_t o = 0; o < total; o += inner) {
        for (std::size_t j = 0; j < inner; ++j) f(o + j, ia + j * inner_sa, ib + j * inner_sb);
        // advance the outer multi-index
        for (std::size_t ax = r >= 1 ? r - 1 : 0; ax-- > 0;) {
            ++idx[ax];
            ia += p.sa[ax];
            ib += p.sb[ax];
            if (idx[ax] < p.out[ax]) break;
            ia -= p.sa[ax] * idx[ax];
            ib -= p.sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// True when `small` equals the trailing axes of `big` (and is strictly smaller).
inline bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() >= big.size()) return false;
    return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary(std::string_view op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db) {
    if (a.shape() == b.shape()) {
        const std::size_t n = a.size();
        std::vector<T> out(n);
        const T* x = a.values().data();
        const T* y = b.values().data();
        for (std::size_t i = 0; i < n; ++i) out[i] = fwd(x[i], y[i]);
        return make_result<T>(op, a.shape(), std::move(out), {a, b}, [n, da, db](Node<T>& self) {
            const T* g = self.grad.data();
            const T* x = self.parents[0]->value.data();
            const T* y = self.parents[1]->value.data();
            if (T* gx = grad_of(self, 0))
                for (std::size_t i = 0; i < n; ++i) gx[i] += da(x[i], y[i], g[i]);
            if (T* gy = grad_of(self, 1))
                for (std::size_t i = 0; i < n; ++i) gy[i] += db(x[i], y[i], g[i]);
        });
    }
    if (is_suffix(b.shape(), a.shape())) {
        // bias-style broadcast: b repeats along the leading axes of a
        const std::size_t n = a.size(), nb = b.size();
        std::vector<T> out(n);
        const T* x = a.values().data();
        const T* y = b.values().data();
        for (std::size_t o = 0; o < n; o += nb)
            for (std::size_t j = 0; j < nb; ++j) out[o + j] = fwd(x[o + j], y[j]);
        return make_result<T>(op, a.shape(), std::move(out), {a, b}, [n, nb, da, db](Node<T>& self) {
            const T* g = self.grad.data();
            const T* x = self.parents[0]->value.data();
            const T* y = self.parents[1]->value.data();
            T* gx = grad_of(self, 0);
            T* gy = grad_of(self, 1);
            if (gx)
                for (std::size_t o = 0; o < n; o += nb)
                    for (std::size_t j = 0; j < nb; ++j) gx[o + j] += da(x[o + j], y[j], g[o + j]);
            if (gy) {
                std::vector<T> acc(nb, T(0));
                for (std::size_t o = 0; o < n; o += nb)
                    for (std::size_t j = 0; j < nb; ++j) acc[j] += db(x[o + j], y[j], g[o + j]);
                for (std::size_t j = 0; j < nb; ++j) gy[j] += acc[j];
            }
        });
    }
    auto plan = std::make_shared<Broadcast>(plan_broadcast(a.shape(), b.shape(), op));
    std::vector<T> out(numel(plan->out));
    const T* x = a.values().data();
    const T* y = b.values().data();
    for_each_broadcast(*plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(x[i], y[j]); });
    return make_result<T>(op, plan->out, std::move(out), {a, b}, [plan, da, db](Node<T>& self) {
        const T* g = self.grad.data();
        const T* x = self.parents[0]->value.data();
        const T* y = self.parents[1]->value.data();
        T* gx = grad_of(self, 0);
        T* gy = grad_of(self, 1);
        for_each_broadcast(*plan, [&](std::size_t o, std::size_t i, std::size_t j) {
            if (gx) gx[i] += da(x[i], y[j], g[o]);
            if (gy) gy[j] += db(x[i], y[j], g[o]);
        });
    });
}

/// Elementwise op whose derivative is expressed through input x and output y.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(std::string_view op, const Tensor<T>& a, Fwd fwd, Deriv deriv) {
    const std::size_t n = a.size();
    std::vector<T> out(n);
    const T* x = a.values().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(x[i]);
    return make_result<T>(op, a.shape(), std::move(out), {a}, [n, deriv](Node<T>& self) {
        T* gx = grad_of(self, 0);
        if (!gx) return;
        const T* g = self.grad.data();
        const T* x = self.parents[0]->value.data();
        const T* y = self.value.data();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * deriv(x[i], y[i]);
    });
}

}  // namespace detail

// ---------------------------------------------------------------- arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T g) { return g; }, [](T, T, T g) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
        [](T x, T, T g) { return g * x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    return detail::unary<T>("scale", a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return detail::unary<T>("add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// ---------------------------------------------------------------- nonlinear

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    return detail::unary<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    return detail::unary<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    return detail::unary<T>(
        "relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return detail::unary<T>(
        "sigmoid", a,
        [](T x) {
            if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
            const T e = std::exp(x);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    require(lo <= hi, "clamp: lower bound exceeds upper bound");
    return detail::unary<T>(
        "clamp", a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
        [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

/// Softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
    require(a.rank() >= 1, "softmax on a rank-0 tensor");
    const std::size_t cols = a.shape().back();
    const std::size_t rows = a.size() / cols;
    std::vector<T> out(a.size());
    const T* x = a.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        T* yr = out.data() + r * cols;
        const T mx = *std::max_element(xr, xr + cols);
        T s = T(0);
        for (std::size_t c = 0; c < cols; ++c) s += (yr[c] = std::exp(xr[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) yr[c] /= s;
    }
    return detail::make_result<T>("softmax", a.shape(), std::move(out), {a}, [rows, cols](Node<T>& self) {
        T* gx = detail::grad_of(self, 0);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = self.value.data() + r * cols;
            const T* g = self.grad.data() + r * cols;
            T dot = T(0);
            for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
            for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (g[c] - dot);
        }
    });
}

/// Normalizes the last axis to zero mean and unit variance (no affine part).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, T eps = T(1e-5)) {
    const std::size_t cols = a.shape().back();
    const std::size_t rows = a.size() / cols;
    std::vector<T> out(a.size());
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    const T* x = a.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        T mu = T(0);
        for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
        mu /= T(cols);
        T var = T(0);
        for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= T(cols);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = (xr[c] - mu) * is;
    }
    return detail::make_result<T>("layer_norm", a.shape(), std::move(out), {a}, [rows, cols, inv_std](Node<T>& self) {
        T* gx = detail::grad_of(self, 0);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = self.value.data() + r * cols;
            const T* g = self.grad.data() + r * cols;
            T mg = T(0), mgy = T(0);
            for (std::size_t c = 0; c < cols; ++c) {
                mg += g[c];
                mgy += g[c] * y[c];
            }
            mg /= T(cols);
            mgy /= T(cols);
            for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += (*inv_std)[r] * (g[c] - mg - y[c] * mgy);
        }
    });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = T(0);
    for (T v : a.values()) s += v;
    const std::size_t n = a.size();
    return detail::make_result<T>("sum", {1}, {s}, {a}, [n](Node<T>& self) {
        if (T* gx = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    T s = T(0);
    for (T v : a.values()) s += v;
    const std::size_t n = a.size();
    return detail::make_result<T>("mean", {1}, {s / T(n)}, {a}, [n](Node<T>& self) {
        if (T* gx = detail::grad_of(self, 0)) {
            const T g = self.grad[0] / T(n);
            for (std::size_t i = 0; i < n; ++i) gx[i] += g;
        }
    });
}

namespace detail {
template <typename T>
Tensor<T> reduce_axis(std::string_view op, const Tensor<T>& a, std::size_t axis, bool keepdim, T factor) {
    require(axis < a.rank(), std::string(op) + ": axis out of range for shape " + to_string(a.shape()));
    const Shape& s = a.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = s[axis];
    Shape os = s;
    if (keepdim) {
        os[axis] = 1;
    } else {
        os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
        if (os.empty()) os = {1};
    }
    std::vector<T> out(outer * inner, T(0));
    const T* x = a.values().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < len; ++l)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * len + l) * inner + i];
    if (factor != T(1))
        for (T& v : out) v *= factor;
    return make_result<T>(op, std::move(os), std::move(out), {a}, [outer, inner, len, factor](Node<T>& self) {
        T* gx = grad_of(self, 0);
        if (!gx) return;
        const T* g = self.grad.data();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t l = 0; l < len; ++l)
                for (std::size_t i = 0; i < inner; ++i) gx[(o * len + l) * inner + i] += factor * g[o * inner + i];
    });
}
}  // namespace detail

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis, bool keepdim = false) {
    return detail::reduce_axis<T>("sum_axis", a, axis, keepdim, T(1));
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis, bool keepdim = false) {
    require(axis < a.rank(), "mean_axis: axis out of range");
    return detail::reduce_axis<T>("mean_axis", a, axis, keepdim, T(1) / T(a.dim(axis)));
}

// ---------------------------------------------------------------- layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    require(numel(shape) == a.size(), "reshape: " + detail::shape_pair(a.shape(), shape));
    std::vector<T> v(a.values().begin(), a.values().end());
    const std::size_t n = a.size();
    return detail::make_result<T>("reshape", std::move(shape), std::move(v), {a}, [n](Node<T>& self) {
        if (T* gx = detail::grad_of(self, 0))
            for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[i];
    });
}

/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    require(a.rank() >= 2, "transpose needs rank >= 2, got " + to_string(a.shape()));
    Shape s = a.shape();
    const std::size_t r = s[s.size() - 2], c = s[s.size() - 1];
    const std::size_t batch = a.size() / (r * c);
    std::swap(s[s.size() - 2], s[s.size() - 1]);
    std::vector<T> out(a.size());
    const T* x = a.values().data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = x[b * r * c + i * c + j];
    return detail::make_result<T>("transpose", std::move(s), std::move(out), {a}, [batch, r, c](Node<T>& self) {
        T* gx = detail::grad_of(self, 0);
        if (!gx) return;
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gx[b * r * c + i * c + j] += self.grad[b * r * c + j * r + i];
    });
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape) {
    auto plan = std::make_shared<detail::Broadcast>(detail::plan_broadcast(a.shape(), shape, "broadcast_to"));
    require(plan->out == shape, "broadcast_to: " + detail::shape_pair(a.shape(), shape));
    std::vector<T> out(numel(shape));
    const T* x = a.values().data();
    detail::for_each_broadcast(*plan, [&](std::size_t o, std::size_t i, std::size_t) { out[o] = x[i]; });
    return detail::make_result<T>("broadcast_to", shape, std::move(out), {a}, [plan](Node<T>& self) {
        T* gx = detail::grad_of(self, 0);
        if (!gx) return;
        detail::for_each_broadcast(*plan, [&](std::size_t o, std::size_t i, std::size_t) { gx[i] += self.grad[o]; });
    });
}

/// Concatenates along the last axis; leading axes must agree.
template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
    Shape la(a.shape().begin(), a.shape().end() - 1), lb(b.shape().begin(), b.shape().end() - 1);
    require(la == lb, "concat_last: leading axes differ: " + detail::shape_pair(a.shape(), b.shape()));
    const std::size_t ca = a.shape().back(), cb = b.shape().back();
    const std::size_t rows = a.size() / ca;
    Shape s = a.shape();
    s.back() = ca + cb;
    std::vector<T> out(rows * (ca + cb));
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(a.values().data() + r * ca, ca, out.data() + r * (ca + cb));
        std::copy_n(b.values().data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
    }
    return detail::make_result<T>("concat_last", std::move(s), std::move(out), {a, b}, [rows, ca, cb](Node<T>& self) {
        const T* g = self.grad.data();
        if (T* ga = detail::grad_of(self, 0))
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < ca; ++c) ga[r * ca + c] += g[r * (ca + cb) + c];
        if (T* gb = detail::grad_of(self, 1))
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cb; ++c) gb[r * cb + c] += g[r * (ca + cb) + ca + c];
    });
}

/// Row lookup: out[..., :] = table[ids[...], :]; rows whose id equals pad_id are zero.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::int64_t>& ids, const Shape& ids_shape,
                    std::int64_t pad_id = -1) {
    require(table.rank() == 2, "embedding table must be rank 2, got " + to_string(table.shape()));
    require(numel(ids_shape) == ids.size(), "embedding: ids length does not match ids shape");
    const std::size_t vocab = table.dim(0), width = table.dim(1);
    for (auto id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= vocab)
            throw ContractViolation("token id " + std::to_string(id) + " outside vocabulary of size " +
                                    std::to_string(vocab));
    Shape s = ids_shape;
    s.push_back(width);
    std::vector<T> out(ids.size() * width, T(0));
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] != pad_id)
            std::copy_n(table.values().data() + ids[i] * width, width, out.data() + i * width);
    auto saved = std::make_shared<std::vector<std::int64_t>>(ids);
    return detail::make_result<T>("embedding", std::move(s), std::move(out), {table},
                                  [saved, width, pad_id](Node<T>& self) {
                                      T* gt = detail::grad_of(self, 0);
                                      if (!gt) return;
                                      for (std::size_t i = 0; i < saved->size(); ++i) {
                                          if ((*saved)[i] == pad_id) continue;
                                          T* row = gt + (*saved)[i] * width;
                                          for (std::size_t c = 0; c < width; ++c) row[c] += self.grad[i * width + c];
                                      }
                                  });
}

// ---------------------------------------------------------------- linear

/// Matrix product over the last two axes. Rank-2 operands broadcast across the
/// batch axis of a rank-3 partner.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.rank() >= 2 && a.rank() <= 3 && b.rank() >= 2 && b.rank() <= 3,
            "matmul supports rank 2 or 3 operands: " + detail::shape_pair(a.shape(), b.shape()));
    const std::size_t m = a.shape()[a.rank() - 2], k = a.shape().back();
    const std::size_t kb = b.shape()[b.rank() - 2], n = b.shape().back();
    require(k == kb, "matmul inner dimensions differ: " + detail::shape_pair(a.shape(), b.shape()));
    const std::size_t ba = a.rank() == 3 ? a.dim(0) : 1;
    const std::size_t bb = b.rank() == 3 ? b.dim(0) : 1;
    require(a.rank() == 2 || b.rank() == 2 || ba == bb,
            "matmul batch sizes differ: " + detail::shape_pair(a.shape(), b.shape()));
    const std::size_t batch = std::max(ba, bb);
    const bool a_batched = a.rank() == 3, b_batched = b.rank() == 3;
    Shape s = (a_batched || b_batched) ? Shape{batch, m, n} : Shape{m, n};
    std::vector<T> out(batch * m * n, T(0));
    const T* x = a.values().data();
    const T* y = b.values().data();
    for (std::size_t i = 0; i < batch; ++i)
        kernels::gemm_nn(m, n, k, x + (a_batched ? i * m * k : 0), y + (b_batched ? i * k * n : 0),
                         out.data() + i * m * n);
    return detail::make_result<T>(
        "matmul", std::move(s), std::move(out), {a, b}, [=](Node<T>& self) {
            const T* g = self.grad.data();
            const T* x = self.parents[0]->value.data();
            const T* y = self.parents[1]->value.data();
            if (T* ga = detail::grad_of(self, 0))
                for (std::size_t i = 0; i < batch; ++i)
                    kernels::gemm_nt(m, k, n, g + i * m * n, y + (b_batched ? i * k * n : 0),
                                     ga + (a_batched ? i * m * k : 0));
            if (T* gb = detail::grad_of(self, 1))
                for (std::size_t i = 0; i < batch; ++i)
                    kernels::gemm_tn(k, n, m, x + (a_batched ? i * m * k : 0), g + i * m * n,
                                     gb + (b_batched ? i * k * n : 0));
        });
}

// ---------------------------------------------------------------- spatial

/// 2D convolution, stride 1, zero "same" padding.
/// input [N,H,W,Cin] (channel-last), kernel [KH,KW,Cin,Cout] with odd KH, KW.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel) {
    require(input.rank() == 4 && kernel.rank() == 4,
            "conv2d expects [N,H,W,C] input and [KH,KW,Cin,Cout] kernel: " +
                detail::shape_pair(input.shape(), kernel.shape()));
    const std::size_t N = input.dim(0), H = input.dim(1), W = input.dim(2), Ci = input.dim(3);
    const std::size_t KH = kernel.dim(0), KW = kernel.dim(1), Co = kernel.dim(3);
    require(kernel.dim(2) == Ci, "conv2d channel mismatch: " + detail::shape_pair(input.shape(), kernel.shape()));
    require(KH % 2 == 1 && KW % 2 == 1, "conv2d kernel extents must be odd");
    const std::size_t ph = KH / 2, pw = KW / 2;
    const std::size_t M = N * H * W, K = KH * KW * Ci;
    auto cols = std::make_shared<std::vector<T>>(M * K, T(0));
    const T* x = input.values().data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
                T* row = cols->data() + ((n * H + i) * W + j) * K;
                for (std::size_t ki = 0; ki < KH; ++ki) {
                    const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i + ki) - static_cast<std::ptrdiff_t>(ph);
                    if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t kj = 0; kj < KW; ++kj) {
                        const std::ptrdiff_t jj =
                            static_cast<std::ptrdiff_t>(j + kj) - static_cast<std::ptrdiff_t>(pw);
                        if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
                        std::copy_n(x + ((n * H + ii) * W + jj) * Ci, Ci, row + (ki * KW + kj) * Ci);
                    }
                }
            }
    std::vector<T> out(M * Co, T(0));
    kernels::gemm_nn(M, Co, K, cols->data(), kernel.values().data(), out.data());
    return detail::make_result<T>(
        "conv2d", {N, H, W, Co}, std::move(out), {input, kernel}, [=](Node<T>& self) {
            const T* g = self.grad.data();
            if (T* gk = detail::grad_of(self, 1)) kernels::gemm_tn(K, Co, M, cols->data(), g, gk);
            T* gx = detail::grad_of(self, 0);
            if (!gx) return;
            std::vector<T> dcols(M * K, T(0));
            kernels::gemm_nt(M, K, Co, g, self.parents[1]->value.data(), dcols.data());
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < H; ++i)
                    for (std::size_t j = 0; j < W; ++j) {
                        const T* row = dcols.data() + ((n * H + i) * W + j) * K;
                        for (std::size_t ki = 0; ki < KH; ++ki) {
                            const std::ptrdiff_t ii =
                                static_cast<std::ptrdiff_t>(i + ki) - static_cast<std::ptrdiff_t>(ph);
                            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t kj = 0; kj < KW; ++kj) {
                                const std::ptrdiff_t jj =
                                    static_cast<std::ptrdiff_t>(j + kj) - static_cast<std::ptrdiff_t>(pw);
                                if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
                                T* dst = gx + ((n * H + ii) * W + jj) * Ci;
                                const T* src = row + (ki * KW + kj) * Ci;
                                for (std::size_t c = 0; c < Ci; ++c) dst[c] += src[c];
                            }
                        }
                    }
        });
}

/// 2x2 max-pool with stride 2 over [N,H,W,C]; H and W must be even.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input) {
    require(input.rank() == 4, "max_pool2d expects [N,H,W,C], got " + to_string(input.shape()));
    const std::size_t N = input.dim(0), H = input.dim(1), W = input.dim(2), C = input.dim(3);
    require(H % 2 == 0 && W % 2 == 0, "max_pool2d needs even spatial extents, got " + to_string(input.shape()));
    const std::size_t Ho = H / 2, Wo = W / 2;
    std::vector<T> out(N * Ho * Wo * C);
    auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
    const T* x = input.values().data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < Ho; ++i)
            for (std::size_t j = 0; j < Wo; ++j)
                for (std::size_t c = 0; c < C; ++c) {
                    std::size_t best = ((n * H + 2 * i) * W + 2 * j) * C + c;
                    for (std::size_t di = 0; di < 2; ++di)
                        for (std::size_t dj = 0; dj < 2; ++dj) {
                            const std::size_t idx = ((n * H + 2 * i + di) * W + 2 * j + dj) * C + c;
                            if (x[idx] > x[best]) best = idx;
                        }
                    const std::size_t o = ((n * Ho + i) * Wo + j) * C + c;
                    out[o] = x[best];
                    (*arg)[o] = best;
                }
    return detail::make_result<T>("max_pool2d", {N, Ho, Wo, C}, std::move(out), {input}, [arg](Node<T>& self) {
        T* gx = detail::grad_of(self, 0);
        if (!gx) return;
        for (std::size_t o = 0; o < arg->size(); ++o) gx[(*arg)[o]] += self.grad[o];
    });
}

}  // namespace ivcxr::diff
