#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "apex/errors.hpp"
#include "apex/rng.hpp"

namespace apex {

// Number of worker threads for row-parallel kernels, from APEX_THREADS.
// Defaults to 1 (fully serial). Row partitioning never changes the
// per-element accumulation order, so results are bitwise identical for
// any thread count.
inline int numerics_threads() {
    static const int n = [] {
        const char* env = std::getenv("APEX_THREADS");
        if (!env) return 1;
        const int v = std::atoi(env);
        return v < 1 ? 1 : v;
    }();
    return n;
}

template <class T>
struct TensorT {
    std::vector<int64_t> dims;
    std::vector<T> data;
    bool requires_grad = false;

    TensorT() = default;
    explicit TensorT(std::vector<int64_t> d) : dims(std::move(d)) {
        data.assign(static_cast<size_t>(numel_of(dims)), T(0));
    }

    static int64_t numel_of(const std::vector<int64_t>& d) {
        int64_t n = 1;
        for (int64_t e : d) {
            if (e <= 0) throw ShapeError("extent must be positive");
            n *= e;
        }
        return n;
    }

    static TensorT zeros(std::vector<int64_t> d) { return TensorT(std::move(d)); }

    static TensorT full(std::vector<int64_t> d, T v) {
        TensorT t(std::move(d));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static TensorT randn(std::vector<int64_t> d, T mean, T stddev, Rng& rng) {
        TensorT t(std::move(d));
        for (auto& x : t.data) x = static_cast<T>(rng.gauss(mean, stddev));
        return t;
    }

    static TensorT from_rows(std::initializer_list<std::initializer_list<T>> rows) {
        const int64_t m = static_cast<int64_t>(rows.size());
        const int64_t n = static_cast<int64_t>(rows.begin()->size());
        TensorT t({m, n});
        int64_t i = 0;
        for (const auto& row : rows) {
            if (static_cast<int64_t>(row.size()) != n) throw ShapeError("ragged rows");
            for (T v : row) t.data[static_cast<size_t>(i++)] = v;
        }
        return t;
    }

    static TensorT vector_of(std::initializer_list<T> vals) {
        TensorT t({static_cast<int64_t>(vals.size())});
        std::copy(vals.begin(), vals.end(), t.data.begin());
        return t;
    }

    static TensorT identity(int64_t n) {
        TensorT t({n, n});
        for (int64_t i = 0; i < n; ++i) t.data[static_cast<size_t>(i * n + i)] = T(1);
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(dims.size()); }
    int64_t rows() const { return dims.at(0); }
    int64_t cols() const { return dims.at(1); }

    T& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * dims[1] + j)]; }
    const T& at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * dims[1] + j)]; }
    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    bool same_shape(const TensorT& o) const { return dims == o.dims; }

    template <class U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.dims = dims;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        out.requires_grad = requires_grad;
        return out;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
        os << "]";
        return os.str();
    }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

namespace detail {

template <class Fn>
void parallel_rows(int64_t m, int64_t flops, Fn&& fn) {
    const int threads = numerics_threads();
    // Spawning threads only pays off for big blocks; tiny kernels stay serial.
    if (threads <= 1 || m < 2 * threads || flops < (1 << 18)) {
        fn(0, m);
        return;
    }
    const int nt = static_cast<int>(std::min<int64_t>(threads, m));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(nt - 1));
    const int64_t chunk = (m + nt - 1) / nt;
    for (int t = 1; t < nt; ++t) {
        const int64_t lo = t * chunk;
        const int64_t hi = std::min<int64_t>(m, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    fn(0, std::min<int64_t>(m, chunk));
    for (auto& th : pool) th.join();
}

}  // namespace detail

// C = A(m x k) * B(k x n). i-k-j loop order: the inner j loop vectorizes and
// accumulation over k is in fixed left-to-right order, so the result is
// deterministic.
template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul expects 2-d operands");
    if (a.cols() != b.rows())
        throw ShapeError("matmul inner dims " + a.shape_str() + " vs " + b.shape_str());
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    TensorT<T> c({m, n});
    const T* pa = a.data.data();
    const T* pb = b.data.data();
    T* pc = c.data.data();
    detail::parallel_rows(m, m * k * n * 2, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            T* crow = pc + i * n;
            for (int64_t kk = 0; kk < k; ++kk) {
                const T av = pa[i * k + kk];
                const T* brow = pb + kk * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    });
    return c;
}

template <class T>
TensorT<T> transpose(const TensorT<T>& a) {
    if (a.ndim() != 2) throw ShapeError("transpose expects 2-d");
    const int64_t m = a.rows(), n = a.cols();
    TensorT<T> out({n, m});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

// A * B^T and A^T * B, routed through the single deterministic kernel.
template <class T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
    return matmul(a, transpose(b));
}

template <class T>
TensorT<T> matmul_tn(const TensorT<T>& a, const TensorT<T>& b) {
    return matmul(transpose(a), b);
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("add shape mismatch");
    TensorT<T> out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("mul shape mismatch");
    TensorT<T> out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
    return out;
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, T s) {
    TensorT<T> out = a;
    for (auto& x : out.data) x *= s;
    return out;
}

// Row-wise softmax with per-row max subtraction.
template <class T>
TensorT<T> softmax_rows(const TensorT<T>& x) {
    if (x.ndim() != 2) throw ShapeError("softmax_rows expects 2-d");
    const int64_t m = x.rows(), n = x.cols();
    TensorT<T> y({m, n});
    for (int64_t i = 0; i < m; ++i) {
        T mx = x.at(i, 0);
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x.at(i, j));
        T sum = T(0);
        for (int64_t j = 0; j < n; ++j) {
            const T e = std::exp(x.at(i, j) - mx);
            y.at(i, j) = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (int64_t j = 0; j < n; ++j) y.at(i, j) *= inv;
    }
    return y;
}

// Softmax over the causal prefix of each row of an L x L score matrix;
// entries with column > row are zero.
template <class T>
TensorT<T> causal_softmax_rows(const TensorT<T>& x) {
    if (x.ndim() != 2 || x.rows() != x.cols()) throw ShapeError("causal softmax expects square");
    const int64_t n = x.rows();
    TensorT<T> y({n, n});
    for (int64_t i = 0; i < n; ++i) {
        T mx = x.at(i, 0);
        for (int64_t j = 1; j <= i; ++j) mx = std::max(mx, x.at(i, j));
        T sum = T(0);
        for (int64_t j = 0; j <= i; ++j) {
            const T e = std::exp(x.at(i, j) - mx);
            y.at(i, j) = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (int64_t j = 0; j <= i; ++j) y.at(i, j) *= inv;
    }
    return y;
}

// y = x / sqrt(mean(x^2) + eps) * gain, per row.
template <class T>
TensorT<T> rms_norm(const TensorT<T>& x, const TensorT<T>& gain, T eps) {
    if (x.ndim() != 2 || gain.ndim() != 1 || gain.dims[0] != x.cols())
        throw ShapeError("rms_norm expects [m x d] and gain [d]");
    const int64_t m = x.rows(), d = x.cols();
    TensorT<T> y({m, d});
    for (int64_t i = 0; i < m; ++i) {
        T ss = T(0);
        for (int64_t j = 0; j < d; ++j) ss += x.at(i, j) * x.at(i, j);
        const T inv = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
        for (int64_t j = 0; j < d; ++j) y.at(i, j) = x.at(i, j) * inv * gain[j];
    }
    return y;
}

template <class T>
T sigmoid(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <class T>
TensorT<T> silu(const TensorT<T>& x) {
    TensorT<T> y = x;
    for (auto& v : y.data) v = v * sigmoid(v);
    return y;
}

template <class T>
TensorT<T> gelu(const TensorT<T>& x) {
    TensorT<T> y = x;
    for (auto& v : y.data) v = T(0.5) * v * (T(1) + std::erf(v * T(0.7071067811865476)));
    return y;
}

// Mean negative log-likelihood over rows, log-sum-exp stabilized.
template <class T>
T cross_entropy_mean(const TensorT<T>& logits, const std::vector<int>& targets) {
    if (logits.ndim() != 2) throw ShapeError("cross_entropy expects 2-d logits");
    const int64_t n = logits.rows(), v = logits.cols();
    if (static_cast<int64_t>(targets.size()) != n)
        throw ShapeError("target count does not match logit rows");
    T total = T(0);
    for (int64_t i = 0; i < n; ++i) {
        const int t = targets[static_cast<size_t>(i)];
        if (t < 0 || t >= v) throw IndexError("target id out of range");
        T mx = logits.at(i, 0);
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, logits.at(i, j));
        T sum = T(0);
        for (int64_t j = 0; j < v; ++j) sum += std::exp(logits.at(i, j) - mx);
        total += std::log(sum) + mx - logits.at(i, t);
    }
    return total / static_cast<T>(n);
}

template <class T>
T sum(const TensorT<T>& a) {
    T s = T(0);
    for (T v : a.data) s += v;
    return s;
}

template <class T>
T sumsq(const TensorT<T>& a) {
    T s = T(0);
    for (T v : a.data) s += v * v;
    return s;
}

// Per-column sum of squares of a 2-d tensor.
template <class T>
TensorT<T> col_sumsq(const TensorT<T>& a) {
    if (a.ndim() != 2) throw ShapeError("col_sumsq expects 2-d");
    const int64_t m = a.rows(), n = a.cols();
    TensorT<T> out({n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[j] += a.at(i, j) * a.at(i, j);
    return out;
}

// Population standard deviation of a flat tensor.
template <class T>
T std_pop(const TensorT<T>& a) {
    const int64_t n = a.numel();
    if (n == 0) throw ShapeError("std of empty tensor");
    T mean = T(0);
    for (T v : a.data) mean += v;
    mean /= static_cast<T>(n);
    T ss = T(0);
    for (T v : a.data) ss += (v - mean) * (v - mean);
    return std::sqrt(ss / static_cast<T>(n));
}

template <class T>
bool bitwise_equal(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.dims != b.dims) return false;
    return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(T)) == 0;
}

}  // namespace apex
