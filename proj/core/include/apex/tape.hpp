#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "apex/tensor.hpp"

namespace apex {

// Reverse-mode tape at tensor granularity. Every op appends a node holding
// the forward value plus, when any input requires gradients, a backward
// record. backward() replays the records in exact reverse execution order.
// A tape is single-use: one forward build, one backward.
template <class T>
class Tape {
public:
    using Id = int32_t;

    Id leaf(TensorT<T> v, bool requires_grad) {
        return push(std::move(v), requires_grad);
    }

    Id constant(TensorT<T> v) { return push(std::move(v), false); }

    const TensorT<T>& value(Id id) const { return nodes_[static_cast<size_t>(id)].value; }

    bool requires_grad(Id id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    // Valid after backward(); zero tensor if no gradient flowed.
    const TensorT<T>& grad(Id id) {
        ensure_grad(id);
        return nodes_[static_cast<size_t>(id)].grad;
    }

    size_t num_nodes() const { return nodes_.size(); }

    void backward(Id root) {
        if (backward_done_) throw StateError("backward called twice on one tape");
        if (value(root).numel() != 1) throw ShapeError("backward root must be scalar");
        backward_done_ = true;
        if (!nodes_[static_cast<size_t>(root)].requires_grad) return;
        ensure_grad(root);
        nodes_[static_cast<size_t>(root)].grad.data[0] = T(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    }

    // ---- elementwise / linear algebra ----

    Id add(Id a, Id b) {
        Id out = push(apex::add(value(a), value(b)), requires_grad(a) || requires_grad(b));
        if (requires_grad(out)) record([this, a, b, out] {
            if (!has_grad(out)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(out)].grad;
            accumulate(a, g);
            accumulate(b, g);
        });
        return out;
    }

    Id mul(Id a, Id b) {
        Id out = push(apex::mul(value(a), value(b)), requires_grad(a) || requires_grad(b));
        if (requires_grad(out)) record([this, a, b, out] {
            if (!has_grad(out)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(out)].grad;
            accumulate(a, apex::mul(g, value(b)));
            accumulate(b, apex::mul(g, value(a)));
        });
        return out;
    }

    Id scale(Id a, T s) {
        Id out = push(apex::scale(value(a), s), requires_grad(a));
        if (requires_grad(out)) record([this, a, s, out] {
            if (!has_grad(out)) return;
            accumulate(a, apex::scale(nodes_[static_cast<size_t>(out)].grad, s));
        });
        return out;
    }

    Id matmul(Id a, Id b) {
        Id out = push(apex::matmul(value(a), value(b)), requires_grad(a) || requires_grad(b));
        if (requires_grad(out)) record([this, a, b, out] {
            if (!has_grad(out)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(out)].grad;
            if (requires_grad(a)) accumulate(a, apex::matmul_nt(g, value(b)));
            if (requires_grad(b)) accumulate(b, apex::matmul_tn(value(a), g));
        });
        return out;
    }

    // c = a * b^T
    Id matmul_nt(Id a, Id b) {
        Id out = push(apex::matmul_nt(value(a), value(b)), requires_grad(a) || requires_grad(b));
        if (requires_grad(out)) record([this, a, b, out] {
            if (!has_grad(out)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(out)].grad;
            if (requires_grad(a)) accumulate(a, apex::matmul(g, value(b)));
            if (requires_grad(b)) accumulate(b, apex::matmul_tn(g, value(a)));
        });
        return out;
    }

    // ---- slicing / indexing ----

    Id slice_rows(Id a, int64_t r0, int64_t r1) {
        const TensorT<T>& v = value(a);
        if (v.ndim() != 2 || r0 < 0 || r1 > v.rows() || r0 >= r1)
            throw ShapeError("slice_rows range");
        const int64_t n = v.cols();
        TensorT<T> out({r1 - r0, n});
        std::copy(v.data.begin() + r0 * n, v.data.begin() + r1 * n, out.data.begin());
        Id id = push(std::move(out), requires_grad(a));
        if (requires_grad(id)) record([this, a, r0, id] {
            if (!has_grad(id)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(id)].grad;
            ensure_grad(a);
            TensorT<T>& ga = nodes_[static_cast<size_t>(a)].grad;
            const int64_t n = ga.cols();
            for (int64_t i = 0; i < g.rows(); ++i)
                for (int64_t j = 0; j < n; ++j) ga.at(r0 + i, j) += g.at(i, j);
        });
        return id;
    }

    Id slice_cols(Id a, int64_t c0, int64_t c1) {
        const TensorT<T>& v = value(a);
        if (v.ndim() != 2 || c0 < 0 || c1 > v.cols() || c0 >= c1)
            throw ShapeError("slice_cols range");
        TensorT<T> out({v.rows(), c1 - c0});
        for (int64_t i = 0; i < v.rows(); ++i)
            for (int64_t j = c0; j < c1; ++j) out.at(i, j - c0) = v.at(i, j);
        Id id = push(std::move(out), requires_grad(a));
        if (requires_grad(id)) record([this, a, c0, id] {
            if (!has_grad(id)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(id)].grad;
            ensure_grad(a);
            TensorT<T>& ga = nodes_[static_cast<size_t>(a)].grad;
            for (int64_t i = 0; i < g.rows(); ++i)
                for (int64_t j = 0; j < g.cols(); ++j) ga.at(i, c0 + j) += g.at(i, j);
        });
        return id;
    }

    Id concat_cols(const std::vector<Id>& parts) {
        if (parts.empty()) throw ShapeError("concat_cols of nothing");
        const int64_t m = value(parts[0]).rows();
        int64_t n = 0;
        bool rg = false;
        for (Id p : parts) {
            if (value(p).ndim() != 2 || value(p).rows() != m) throw ShapeError("concat_cols rows");
            n += value(p).cols();
            rg = rg || requires_grad(p);
        }
        TensorT<T> out({m, n});
        int64_t off = 0;
        for (Id p : parts) {
            const TensorT<T>& v = value(p);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < v.cols(); ++j) out.at(i, off + j) = v.at(i, j);
            off += v.cols();
        }
        Id id = push(std::move(out), rg);
        if (rg) record([this, parts, id] {
            if (!has_grad(id)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(id)].grad;
            int64_t off = 0;
            for (Id p : parts) {
                const int64_t w = value(p).cols();
                if (requires_grad(p)) {
                    ensure_grad(p);
                    TensorT<T>& gp = nodes_[static_cast<size_t>(p)].grad;
                    for (int64_t i = 0; i < g.rows(); ++i)
                        for (int64_t j = 0; j < w; ++j) gp.at(i, j) += g.at(i, off + j);
                }
                off += w;
            }
        });
        return id;
    }

    // Row lookup (embedding): out[i, :] = a[idx[i], :].
    Id rows_gather(Id a, std::vector<int> idx) {
        const TensorT<T>& v = value(a);
        if (v.ndim() != 2) throw ShapeError("rows_gather expects 2-d table");
        TensorT<T> out({static_cast<int64_t>(idx.size()), v.cols()});
        for (size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] < 0 || idx[i] >= v.rows()) throw IndexError("rows_gather id out of range");
            for (int64_t j = 0; j < v.cols(); ++j)
                out.at(static_cast<int64_t>(i), j) = v.at(idx[i], j);
        }
        Id id = push(std::move(out), requires_grad(a));
        if (requires_grad(id)) record([this, a, idx = std::move(idx), id] {
            if (!has_grad(id)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(id)].grad;
            ensure_grad(a);
            TensorT<T>& ga = nodes_[static_cast<size_t>(a)].grad;
            for (size_t i = 0; i < idx.size(); ++i)
                for (int64_t j = 0; j < g.cols(); ++j)
                    ga.at(idx[i], j) += g.at(static_cast<int64_t>(i), j);
        });
        return id;
    }

    Id gather_cols(Id a, std::vector<int> idx) {
        const TensorT<T>& v = value(a);
        check_indices(idx, v.cols(), "gather_cols");
        TensorT<T> out({v.rows(), static_cast<int64_t>(idx.size())});
        for (int64_t i = 0; i < v.rows(); ++i)
            for (size_t j = 0; j < idx.size(); ++j)
                out.at(i, static_cast<int64_t>(j)) = v.at(i, idx[j]);
        Id id = push(std::move(out), requires_grad(a));
        if (requires_grad(id)) record([this, a, idx = std::move(idx), id] {
            if (!has_grad(id)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(id)].grad;
            ensure_grad(a);
            TensorT<T>& ga = nodes_[static_cast<size_t>(a)].grad;
            for (int64_t i = 0; i < g.rows(); ++i)
                for (size_t j = 0; j < idx.size(); ++j)
                    ga.at(i, idx[j]) += g.at(i, static_cast<int64_t>(j));
        });
        return id;
    }

    Id gather_rows(Id a, std::vector<int> idx) {
        const TensorT<T>& v = value(a);
        check_indices(idx, v.rows(), "gather_rows");
        TensorT<T> out({static_cast<int64_t>(idx.size()), v.cols()});
        for (size_t i = 0; i < idx.size(); ++i)
            for (int64_t j = 0; j < v.cols(); ++j)
                out.at(static_cast<int64_t>(i), j) = v.at(idx[i], j);
        Id id = push(std::move(out), requires_grad(a));
        if (requires_grad(id)) record([this, a, idx = std::move(idx), id] {
            if (!has_grad(id)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(id)].grad;
            ensure_grad(a);
            TensorT<T>& ga = nodes_[static_cast<size_t>(a)].grad;
            for (size_t i = 0; i < idx.size(); ++i)
                for (int64_t j = 0; j < g.cols(); ++j)
                    ga.at(idx[i], j) += g.at(static_cast<int64_t>(i), j);
        });
        return id;
    }

    // Copy of `a` with columns idx replaced by the columns of `b`.
    // Untouched entries are bit-identical to `a`.
    Id replace_cols(Id a, std::vector<int> idx, Id b) {
        const TensorT<T>& va = value(a);
        const TensorT<T>& vb = value(b);
        check_indices(idx, va.cols(), "replace_cols");
        if (vb.rows() != va.rows() || vb.cols() != static_cast<int64_t>(idx.size()))
            throw ShapeError("replace_cols block shape");
        TensorT<T> out = va;
        for (int64_t i = 0; i < va.rows(); ++i)
            for (size_t j = 0; j < idx.size(); ++j)
                out.at(i, idx[j]) = vb.at(i, static_cast<int64_t>(j));
        Id id = push(std::move(out), requires_grad(a) || requires_grad(b));
        if (requires_grad(id)) record([this, a, b, idx = std::move(idx), id] {
            if (!has_grad(id)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(id)].grad;
            if (requires_grad(b)) {
                ensure_grad(b);
                TensorT<T>& gb = nodes_[static_cast<size_t>(b)].grad;
                for (int64_t i = 0; i < g.rows(); ++i)
                    for (size_t j = 0; j < idx.size(); ++j)
                        gb.at(i, static_cast<int64_t>(j)) += g.at(i, idx[j]);
            }
            if (requires_grad(a)) {
                ensure_grad(a);
                TensorT<T>& ga = nodes_[static_cast<size_t>(a)].grad;
                std::vector<char> replaced(static_cast<size_t>(g.cols()), 0);
                for (int c : idx) replaced[static_cast<size_t>(c)] = 1;
                for (int64_t i = 0; i < g.rows(); ++i)
                    for (int64_t j = 0; j < g.cols(); ++j)
                        if (!replaced[static_cast<size_t>(j)]) ga.at(i, j) += g.at(i, j);
            }
        });
        return id;
    }

    Id replace_rows(Id a, std::vector<int> idx, Id b) {
        const TensorT<T>& va = value(a);
        const TensorT<T>& vb = value(b);
        check_indices(idx, va.rows(), "replace_rows");
        if (vb.cols() != va.cols() || vb.rows() != static_cast<int64_t>(idx.size()))
            throw ShapeError("replace_rows block shape");
        TensorT<T> out = va;
        for (size_t i = 0; i < idx.size(); ++i)
            for (int64_t j = 0; j < va.cols(); ++j)
                out.at(idx[i], j) = vb.at(static_cast<int64_t>(i), j);
        Id id = push(std::move(out), requires_grad(a) || requires_grad(b));
        if (requires_grad(id)) record([this, a, b, idx = std::move(idx), id] {
            if (!has_grad(id)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(id)].grad;
            if (requires_grad(b)) {
                ensure_grad(b);
                TensorT<T>& gb = nodes_[static_cast<size_t>(b)].grad;
                for (size_t i = 0; i < idx.size(); ++i)
                    for (int64_t j = 0; j < g.cols(); ++j)
                        gb.at(static_cast<int64_t>(i), j) += g.at(idx[i], j);
            }
            if (requires_grad(a)) {
                ensure_grad(a);
                TensorT<T>& ga = nodes_[static_cast<size_t>(a)].grad;
                std::vector<char> replaced(static_cast<size_t>(g.rows()), 0);
                for (int r : idx) replaced[static_cast<size_t>(r)] = 1;
                for (int64_t i = 0; i < g.rows(); ++i)
                    if (!replaced[static_cast<size_t>(i)])
                        for (int64_t j = 0; j < g.cols(); ++j) ga.at(i, j) += g.at(i, j);
            }
        });
        return id;
    }

    // ---- nonlinearities ----

    Id softmax_rows(Id a) {
        Id out = push(apex::softmax_rows(value(a)), requires_grad(a));
        if (requires_grad(out)) record([this, a, out] { softmax_backward(a, out); });
        return out;
    }

    Id causal_softmax(Id a) {
        Id out = push(apex::causal_softmax_rows(value(a)), requires_grad(a));
        if (requires_grad(out)) record([this, a, out] { softmax_backward(a, out); });
        return out;
    }

    Id rms_norm(Id x, Id gain, T eps) {
        Id out = push(apex::rms_norm(value(x), value(gain), eps),
                      requires_grad(x) || requires_grad(gain));
        if (requires_grad(out)) record([this, x, gain, eps, out] {
            if (!has_grad(out)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(out)].grad;
            const TensorT<T>& xv = value(x);
            const TensorT<T>& gv = value(gain);
            const int64_t m = xv.rows(), d = xv.cols();
            for (int64_t i = 0; i < m; ++i) {
                T ss = T(0);
                for (int64_t j = 0; j < d; ++j) ss += xv.at(i, j) * xv.at(i, j);
                const T r2 = ss / static_cast<T>(d) + eps;
                const T inv = T(1) / std::sqrt(r2);
                if (requires_grad(gain)) {
                    ensure_grad(gain);
                    TensorT<T>& gg = nodes_[static_cast<size_t>(gain)].grad;
                    for (int64_t j = 0; j < d; ++j) gg[j] += g.at(i, j) * xv.at(i, j) * inv;
                }
                if (requires_grad(x)) {
                    ensure_grad(x);
                    TensorT<T>& gx = nodes_[static_cast<size_t>(x)].grad;
                    T dot = T(0);
                    for (int64_t j = 0; j < d; ++j) dot += g.at(i, j) * gv[j] * xv.at(i, j);
                    const T c = dot * inv / (r2 * static_cast<T>(d));
                    for (int64_t j = 0; j < d; ++j)
                        gx.at(i, j) += g.at(i, j) * gv[j] * inv - xv.at(i, j) * c;
                }
            }
        });
        return out;
    }

    Id silu(Id a) {
        Id out = push(apex::silu(value(a)), requires_grad(a));
        if (requires_grad(out)) record([this, a, out] {
            if (!has_grad(out)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(out)].grad;
            const TensorT<T>& xv = value(a);
            ensure_grad(a);
            TensorT<T>& ga = nodes_[static_cast<size_t>(a)].grad;
            for (size_t i = 0; i < xv.data.size(); ++i) {
                const T s = sigmoid(xv.data[i]);
                ga.data[i] += g.data[i] * s * (T(1) + xv.data[i] * (T(1) - s));
            }
        });
        return out;
    }

    Id gelu(Id a) {
        Id out = push(apex::gelu(value(a)), requires_grad(a));
        if (requires_grad(out)) record([this, a, out] {
            if (!has_grad(out)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(out)].grad;
            const TensorT<T>& xv = value(a);
            ensure_grad(a);
            TensorT<T>& ga = nodes_[static_cast<size_t>(a)].grad;
            constexpr T kInvSqrt2 = T(0.7071067811865476);
            constexpr T kInvSqrt2Pi = T(0.3989422804014327);
            for (size_t i = 0; i < xv.data.size(); ++i) {
                const T x = xv.data[i];
                const T cdf = T(0.5) * (T(1) + std::erf(x * kInvSqrt2));
                const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * x * x);
                ga.data[i] += g.data[i] * (cdf + x * pdf);
            }
        });
        return out;
    }

    // ---- reductions / losses ----

    Id sum(Id a) {
        TensorT<T> out({1});
        out[0] = apex::sum(value(a));
        Id id = push(std::move(out), requires_grad(a));
        if (requires_grad(id)) record([this, a, id] {
            if (!has_grad(id)) return;
            const T g = nodes_[static_cast<size_t>(id)].grad[0];
            ensure_grad(a);
            for (auto& v : nodes_[static_cast<size_t>(a)].grad.data) v += g;
        });
        return id;
    }

    Id sumsq(Id a) {
        TensorT<T> out({1});
        out[0] = apex::sumsq(value(a));
        Id id = push(std::move(out), requires_grad(a));
        if (requires_grad(id)) record([this, a, id] {
            if (!has_grad(id)) return;
            const T g = nodes_[static_cast<size_t>(id)].grad[0];
            const TensorT<T>& xv = value(a);
            ensure_grad(a);
            TensorT<T>& ga = nodes_[static_cast<size_t>(a)].grad;
            for (size_t i = 0; i < xv.data.size(); ++i) ga.data[i] += T(2) * g * xv.data[i];
        });
        return id;
    }

    Id col_sumsq(Id a) {
        Id id = push(apex::col_sumsq(value(a)), requires_grad(a));
        if (requires_grad(id)) record([this, a, id] {
            if (!has_grad(id)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(id)].grad;
            const TensorT<T>& xv = value(a);
            ensure_grad(a);
            TensorT<T>& ga = nodes_[static_cast<size_t>(a)].grad;
            for (int64_t i = 0; i < xv.rows(); ++i)
                for (int64_t j = 0; j < xv.cols(); ++j)
                    ga.at(i, j) += T(2) * g[j] * xv.at(i, j);
        });
        return id;
    }

    Id pack_scalars(const std::vector<Id>& parts) {
        TensorT<T> out({static_cast<int64_t>(parts.size())});
        bool rg = false;
        for (size_t i = 0; i < parts.size(); ++i) {
            if (value(parts[i]).numel() != 1) throw ShapeError("pack_scalars expects scalars");
            out[static_cast<int64_t>(i)] = value(parts[i])[0];
            rg = rg || requires_grad(parts[i]);
        }
        Id id = push(std::move(out), rg);
        if (rg) record([this, parts, id] {
            if (!has_grad(id)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(id)].grad;
            for (size_t i = 0; i < parts.size(); ++i) {
                if (!requires_grad(parts[i])) continue;
                ensure_grad(parts[i]);
                nodes_[static_cast<size_t>(parts[i])].grad[0] += g[static_cast<int64_t>(i)];
            }
        });
        return id;
    }

    Id vec_mean(Id a) {
        const int64_t n = value(a).numel();
        TensorT<T> out({1});
        out[0] = apex::sum(value(a)) / static_cast<T>(n);
        Id id = push(std::move(out), requires_grad(a));
        if (requires_grad(id)) record([this, a, n, id] {
            if (!has_grad(id)) return;
            const T g = nodes_[static_cast<size_t>(id)].grad[0] / static_cast<T>(n);
            ensure_grad(a);
            for (auto& v : nodes_[static_cast<size_t>(a)].grad.data) v += g;
        });
        return id;
    }

    // Population standard deviation of a flat tensor. Gradient is defined
    // as zero at std == 0 (constant input).
    Id vec_std_pop(Id a) {
        TensorT<T> out({1});
        out[0] = apex::std_pop(value(a));
        Id id = push(std::move(out), requires_grad(a));
        if (requires_grad(id)) record([this, a, id] {
            if (!has_grad(id)) return;
            const T g = nodes_[static_cast<size_t>(id)].grad[0];
            const TensorT<T>& xv = value(a);
            const T s = nodes_[static_cast<size_t>(id)].value[0];
            if (s <= T(0)) return;
            const int64_t n = xv.numel();
            T mean = apex::sum(xv) / static_cast<T>(n);
            ensure_grad(a);
            TensorT<T>& ga = nodes_[static_cast<size_t>(a)].grad;
            for (int64_t i = 0; i < n; ++i)
                ga[i] += g * (xv[i] - mean) / (static_cast<T>(n) * s);
        });
        return id;
    }

    Id cross_entropy_mean(Id logits, std::vector<int> targets) {
        const TensorT<T>& lv = value(logits);
        TensorT<T> probs = apex::softmax_rows(lv);
        const int64_t n = lv.rows(), v = lv.cols();
        if (static_cast<int64_t>(targets.size()) != n)
            throw ShapeError("target count does not match logit rows");
        T total = T(0);
        for (int64_t i = 0; i < n; ++i) {
            const int t = targets[static_cast<size_t>(i)];
            if (t < 0 || t >= v) throw IndexError("target id out of range");
            // log prob via log-sum-exp, recomputed from logits for stability
            T mx = lv.at(i, 0);
            for (int64_t j = 1; j < v; ++j) mx = std::max(mx, lv.at(i, j));
            T sum = T(0);
            for (int64_t j = 0; j < v; ++j) sum += std::exp(lv.at(i, j) - mx);
            total += std::log(sum) + mx - lv.at(i, t);
        }
        TensorT<T> out({1});
        out[0] = total / static_cast<T>(n);
        Id id = push(std::move(out), requires_grad(logits));
        if (requires_grad(id))
            record([this, logits, targets = std::move(targets), probs = std::move(probs), id] {
                if (!has_grad(id)) return;
                const T g = nodes_[static_cast<size_t>(id)].grad[0];
                ensure_grad(logits);
                TensorT<T>& gl = nodes_[static_cast<size_t>(logits)].grad;
                const int64_t n = probs.rows(), v = probs.cols();
                const T inv_n = g / static_cast<T>(n);
                for (int64_t i = 0; i < n; ++i) {
                    for (int64_t j = 0; j < v; ++j) gl.at(i, j) += probs.at(i, j) * inv_n;
                    gl.at(i, targets[static_cast<size_t>(i)]) -= inv_n;
                }
            });
        return id;
    }

    // Dense equivalent of the two-factor block product: block (i,j) of the
    // output is diag(D[i,j,:] * R[j,:]). With R == 0 the value is exactly
    // the zero matrix.
    Id monarch_materialize(Id dfac, Id rfac) {
        const TensorT<T>& dv = value(dfac);
        const TensorT<T>& rv = value(rfac);
        if (dv.ndim() != 3 || rv.ndim() != 2) throw ShapeError("monarch factors");
        const int64_t d = rv.dims[0];
        if (dv.dims[0] != d || dv.dims[1] != d || dv.dims[2] != d || rv.dims[1] != d)
            throw ShapeError("monarch factor extents");
        const int64_t n = d * d;
        TensorT<T> out({n, n});
        for (int64_t i = 0; i < d; ++i)
            for (int64_t j = 0; j < d; ++j)
                for (int64_t a = 0; a < d; ++a)
                    out.at(i * d + a, j * d + a) =
                        dv[(i * d + j) * d + a] * rv[j * d + a];
        Id id = push(std::move(out), requires_grad(dfac) || requires_grad(rfac));
        if (requires_grad(id)) record([this, dfac, rfac, d, id] {
            if (!has_grad(id)) return;
            const TensorT<T>& g = nodes_[static_cast<size_t>(id)].grad;
            const TensorT<T>& dv = value(dfac);
            const TensorT<T>& rv = value(rfac);
            if (requires_grad(dfac)) {
                ensure_grad(dfac);
                TensorT<T>& gd = nodes_[static_cast<size_t>(dfac)].grad;
                for (int64_t i = 0; i < d; ++i)
                    for (int64_t j = 0; j < d; ++j)
                        for (int64_t a = 0; a < d; ++a)
                            gd[(i * d + j) * d + a] += g.at(i * d + a, j * d + a) * rv[j * d + a];
            }
            if (requires_grad(rfac)) {
                ensure_grad(rfac);
                TensorT<T>& gr = nodes_[static_cast<size_t>(rfac)].grad;
                for (int64_t j = 0; j < d; ++j)
                    for (int64_t a = 0; a < d; ++a) {
                        T acc = T(0);
                        for (int64_t i = 0; i < d; ++i)
                            acc += g.at(i * d + a, j * d + a) * dv[(i * d + j) * d + a];
                        gr[j * d + a] += acc;
                    }
            }
        });
        return id;
    }

private:
    struct Node {
        TensorT<T> value;
        TensorT<T> grad;
        bool requires_grad = false;
        bool grad_alloc = false;
    };

    Id push(TensorT<T> v, bool requires_grad) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size() - 1);
    }

    void record(std::function<void()> fn) { records_.push_back(std::move(fn)); }

    bool has_grad(Id id) const { return nodes_[static_cast<size_t>(id)].grad_alloc; }

    void ensure_grad(Id id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.grad_alloc) {
            n.grad = TensorT<T>::zeros(n.value.dims);
            n.grad_alloc = true;
        }
    }

    void accumulate(Id id, const TensorT<T>& g) {
        if (!nodes_[static_cast<size_t>(id)].requires_grad) return;
        ensure_grad(id);
        TensorT<T>& dst = nodes_[static_cast<size_t>(id)].grad;
        for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g.data[i];
    }

    void softmax_backward(Id a, Id out) {
        if (!has_grad(out)) return;
        const TensorT<T>& g = nodes_[static_cast<size_t>(out)].grad;
        const TensorT<T>& y = nodes_[static_cast<size_t>(out)].value;
        ensure_grad(a);
        TensorT<T>& ga = nodes_[static_cast<size_t>(a)].grad;
        for (int64_t i = 0; i < y.rows(); ++i) {
            T dot = T(0);
            for (int64_t j = 0; j < y.cols(); ++j) dot += g.at(i, j) * y.at(i, j);
            for (int64_t j = 0; j < y.cols(); ++j)
                ga.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
        }
    }

    static void check_indices(const std::vector<int>& idx, int64_t bound, const char* what) {
        for (int c : idx)
            if (c < 0 || c >= bound) throw IndexError(std::string(what) + " index out of range");
    }

    std::vector<Node> nodes_;
    std::vector<std::function<void()>> records_;
    bool backward_done_ = false;
};

}  // namespace apex
