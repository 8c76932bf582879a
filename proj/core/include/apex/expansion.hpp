#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "apex/assessment.hpp"
#include "apex/model.hpp"
#include "apex/tape.hpp"

namespace apex {

// Two-factor structured matrix: a d x d grid of diagonal d x d blocks times
// a block-diagonal of diagonal d x d blocks, n = d^2. Entry (i*d+a, j*d+b)
// of the materialization is D[i,j,a] * R[j,a] when a == b, else 0. With all
// R vectors zero the materialization is exactly the zero matrix. When n is
// not a perfect square a dense n x n matrix stands in.
template <class T>
struct MonarchT {
    int64_t n = 0;
    int64_t d = 0;
    bool exact = true;         // false: dense fallback
    TensorT<T> dfactor;        // [d, d, d]: grid (i, j) holds diagonal vector a
    TensorT<T> rfactor;        // [d, d]: block j holds diagonal vector a
    TensorT<T> dense;          // [n, n] in fallback mode

    int64_t param_count() const { return exact ? d * d * d + d * d : n * n; }
};

using MonarchMatrix = MonarchT<float>;

inline int64_t exact_block_count(int64_t n) {
    const int64_t d = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(n))));
    return d * d == n ? d : 0;
}

// D entries seeded Gaussian std 0.02, R entries zero, so the materialized
// operator starts as the exact zero matrix in either mode.
template <class T>
MonarchT<T> init_monarch_zero(int64_t n, uint64_t seed) {
    if (n < 1) throw ConfigError("monarch side length must be >= 1");
    MonarchT<T> m;
    m.n = n;
    m.d = exact_block_count(n);
    m.exact = m.d != 0;
    Rng rng(seed_stream(seed, 0x30a));
    if (m.exact) {
        m.dfactor = TensorT<T>::randn({m.d, m.d, m.d}, T(0), T(0.02), rng);
        m.rfactor = TensorT<T>::zeros({m.d, m.d});
    } else {
        m.dense = TensorT<T>::zeros({n, n});
    }
    return m;
}

template <class T>
TensorT<T> monarch_materialize(const MonarchT<T>& m) {
    if (!m.exact) return m.dense;
    const int64_t d = m.d;
    TensorT<T> out({m.n, m.n});
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = 0; j < d; ++j)
            for (int64_t a = 0; a < d; ++a)
                out.at(i * d + a, j * d + a) = m.dfactor[(i * d + j) * d + a] * m.rfactor[j * d + a];
    return out;
}

// Structured right-multiplication y = x * M without materializing M:
// y[r, j*d+a] = sum_i x[r, i*d+a] * D[i,j,a] * R[j,a]. O(n*d) per row
// instead of O(n^2).
template <class T>
TensorT<T> monarch_apply(const TensorT<T>& x, const MonarchT<T>& m) {
    if (x.ndim() != 2 || x.cols() != m.n) throw ShapeError("monarch_apply operand width");
    if (!m.exact) return matmul(x, m.dense);
    const int64_t d = m.d;
    TensorT<T> y({x.rows(), m.n});
    for (int64_t r = 0; r < x.rows(); ++r)
        for (int64_t j = 0; j < d; ++j)
            for (int64_t a = 0; a < d; ++a) {
                T acc = T(0);
                for (int64_t i = 0; i < d; ++i)
                    acc += x.at(r, i * d + a) * m.dfactor[(i * d + j) * d + a];
                y.at(r, j * d + a) = acc * m.rfactor[j * d + a];
            }
    return y;
}

enum class TargetMatrix { V, O, U, G, D };
enum class Orientation { Column, Row };

inline const char* target_matrix_name(TargetMatrix t) {
    switch (t) {
        case TargetMatrix::V: return "V";
        case TargetMatrix::O: return "O";
        case TargetMatrix::U: return "U";
        case TargetMatrix::G: return "G";
        case TargetMatrix::D: return "D";
    }
    return "?";
}

inline TargetMatrix target_matrix_from_name(const std::string& s) {
    if (s == "V") return TargetMatrix::V;
    if (s == "O") return TargetMatrix::O;
    if (s == "U") return TargetMatrix::U;
    if (s == "G") return TargetMatrix::G;
    if (s == "D") return TargetMatrix::D;
    throw KeyError("unknown target matrix '" + s + "'");
}

// One trainable transformation bound to one weight matrix and orientation.
// Column: W[:, n_idx] <- W[:, p_idx] * M + W[:, n_idx].
// Row:    W[n_idx, :] <- M * W[p_idx, :] + W[n_idx, :].
template <class T>
struct ExpansionOperatorT {
    int layer = 0;
    TargetMatrix target = TargetMatrix::V;
    Orientation orient = Orientation::Column;
    std::vector<int> p_idx;  // flat indices, sorted ascending
    std::vector<int> n_idx;
    MonarchT<T> m;
    bool trainable = true;
    bool fused = false;

    std::string name() const {
        return "layer" + std::to_string(layer) + ".op." + target_matrix_name(target);
    }
};

using ExpansionOperator = ExpansionOperatorT<float>;

template <class T>
struct OperatorBundleT {
    std::vector<ExpansionOperatorT<T>> ops;
    bool empty() const { return ops.empty(); }
    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& op : ops) n += op.m.param_count();
        return n;
    }
};

using OperatorBundle = OperatorBundleT<float>;

template <class T>
TensorT<T>& target_tensor(ModelParamsT<T>& params, const ExpansionOperatorT<T>& op) {
    if (op.layer < 0 || op.layer >= static_cast<int>(params.layers.size()))
        throw IndexError("operator layer out of range");
    auto& l = params.layers[static_cast<size_t>(op.layer)];
    switch (op.target) {
        case TargetMatrix::V: return l.wv;
        case TargetMatrix::O: return l.wo;
        case TargetMatrix::U: return l.wu;
        case TargetMatrix::G: return l.wg;
        case TargetMatrix::D: return l.wd;
    }
    throw KeyError("bad target matrix");
}

template <class T>
const TensorT<T>& target_tensor(const ModelParamsT<T>& params, const ExpansionOperatorT<T>& op) {
    return target_tensor(const_cast<ModelParamsT<T>&>(params), op);
}

inline std::vector<int> head_flat_indices(const std::vector<int>& heads, int d_head) {
    std::vector<int> flat;
    flat.reserve(heads.size() * static_cast<size_t>(d_head));
    for (int h : heads)
        for (int i = 0; i < d_head; ++i) flat.push_back(h * d_head + i);
    return flat;
}

namespace detail {

template <class T>
TensorT<T> gather_cols_of(const TensorT<T>& w, const std::vector<int>& idx) {
    TensorT<T> out({w.rows(), static_cast<int64_t>(idx.size())});
    for (int64_t i = 0; i < w.rows(); ++i)
        for (size_t j = 0; j < idx.size(); ++j)
            out.at(i, static_cast<int64_t>(j)) = w.at(i, idx[j]);
    return out;
}

template <class T>
TensorT<T> gather_rows_of(const TensorT<T>& w, const std::vector<int>& idx) {
    TensorT<T> out({static_cast<int64_t>(idx.size()), w.cols()});
    for (size_t i = 0; i < idx.size(); ++i)
        for (int64_t j = 0; j < w.cols(); ++j)
            out.at(static_cast<int64_t>(i), j) = w.at(idx[i], j);
    return out;
}

template <class T>
void validate_operator(const TensorT<T>& w, const ExpansionOperatorT<T>& op) {
    if (op.p_idx.size() != op.n_idx.size())
        throw ShapeError("operator P and N spans must have equal size");
    if (static_cast<int64_t>(op.p_idx.size()) != op.m.n)
        throw ShapeError("operator span size does not match its matrix side");
    const int64_t bound = op.orient == Orientation::Column ? w.cols() : w.rows();
    for (int i : op.p_idx)
        if (i < 0 || i >= bound) throw IndexError("operator P index out of weight bounds");
    for (int i : op.n_idx)
        if (i < 0 || i >= bound) throw IndexError("operator N index out of weight bounds");
}

}  // namespace detail

// Effective weight with the operator live: a copy of `base` whose N slice is
// replaced by the expanded value. Entries outside the N slice are bit-equal
// to layers of `base`; with M == 0 the whole result is bit-equal.
template <class T>
TensorT<T> expanded_weight(const TensorT<T>& base, const ExpansionOperatorT<T>& op) {
    detail::validate_operator(base, op);
    const TensorT<T> m = monarch_materialize(op.m);
    TensorT<T> out = base;
    if (op.orient == Orientation::Column) {
        const TensorT<T> expanded =
            apex::add(apex::matmul(detail::gather_cols_of(base, op.p_idx), m),
                      detail::gather_cols_of(base, op.n_idx));
        for (int64_t i = 0; i < base.rows(); ++i)
            for (size_t j = 0; j < op.n_idx.size(); ++j)
                out.at(i, op.n_idx[j]) = expanded.at(i, static_cast<int64_t>(j));
    } else {
        const TensorT<T> expanded =
            apex::add(apex::matmul(m, detail::gather_rows_of(base, op.p_idx)),
                      detail::gather_rows_of(base, op.n_idx));
        for (size_t i = 0; i < op.n_idx.size(); ++i)
            for (int64_t j = 0; j < base.cols(); ++j)
                out.at(op.n_idx[i], j) = expanded.at(static_cast<int64_t>(i), j);
    }
    return out;
}

// Builds the five per-layer operators (V and O over head spans, U/G columns,
// D rows over channel sets), each with its own zero-initialized matrix.
template <class T>
OperatorBundleT<T> attach_operators(const ModelParamsT<T>& params, const AdvantageSets& sets,
                                    uint64_t seed) {
    if (sets.mha.size() != params.layers.size() || sets.ffn.size() != params.layers.size())
        throw ShapeError("advantage sets layer count does not match model");
    OperatorBundleT<T> bundle;
    const int dh = params.cfg.d_head();
    uint64_t op_tag = 0;
    for (size_t li = 0; li < params.layers.size(); ++li) {
        const auto& mha = sets.mha[li];
        const auto& ffn = sets.ffn[li];
        for (int h : mha.p)
            for (int h2 : mha.n)
                if (h == h2) throw StateError("P and N head sets overlap");
        for (int c : ffn.p)
            for (int c2 : ffn.n)
                if (c == c2) throw StateError("P and N channel sets overlap");

        const std::vector<int> head_p = head_flat_indices(mha.p, dh);
        const std::vector<int> head_n = head_flat_indices(mha.n, dh);
        auto make = [&](TargetMatrix t, Orientation o, const std::vector<int>& p,
                        const std::vector<int>& n) {
            ExpansionOperatorT<T> op;
            op.layer = static_cast<int>(li);
            op.target = t;
            op.orient = o;
            op.p_idx = p;
            op.n_idx = n;
            op.m = init_monarch_zero<T>(static_cast<int64_t>(p.size()),
                                        seed_stream(seed, 0xa77ac4 + op_tag++));
            detail::validate_operator(target_tensor(params, op), op);
            bundle.ops.push_back(std::move(op));
        };
        make(TargetMatrix::V, Orientation::Column, head_p, head_n);
        make(TargetMatrix::O, Orientation::Row, head_p, head_n);
        make(TargetMatrix::U, Orientation::Column, ffn.p, ffn.n);
        make(TargetMatrix::G, Orientation::Column, ffn.p, ffn.n);
        make(TargetMatrix::D, Orientation::Row, ffn.p, ffn.n);
    }
    return bundle;
}

// Folds the operator into its target weight (N slice overwritten with the
// expanded value) and consumes it. Parameter count is unchanged.
template <class T>
void fuse_operator(ModelParamsT<T>& params, ExpansionOperatorT<T>& op) {
    if (op.fused) throw StateError("operator " + op.name() + " already fused");
    TensorT<T>& w = target_tensor(params, op);
    w = expanded_weight(w, op);
    op.fused = true;
}

template <class T>
void fuse_all(ModelParamsT<T>& params, OperatorBundleT<T>& bundle) {
    for (auto& op : bundle.ops) fuse_operator(params, op);
    bundle.ops.clear();
}

// ---- tape integration ----

template <class T>
struct OperatorNodeIds {
    typename Tape<T>::Id dfactor = -1;
    typename Tape<T>::Id rfactor = -1;
    typename Tape<T>::Id dense = -1;
};

template <class T>
OperatorNodeIds<T> bind_operator(Tape<T>& tape, const ExpansionOperatorT<T>& op,
                                 bool allow_grad = true) {
    OperatorNodeIds<T> ids;
    const bool rg = op.trainable && allow_grad;
    if (op.m.exact) {
        ids.dfactor = tape.leaf(op.m.dfactor, rg);
        ids.rfactor = tape.leaf(op.m.rfactor, rg);
    } else {
        ids.dense = tape.leaf(op.m.dense, rg);
    }
    return ids;
}

template <class T>
typename Tape<T>::Id expanded_weight_node(Tape<T>& tape, typename Tape<T>::Id base,
                                          const ExpansionOperatorT<T>& op,
                                          const OperatorNodeIds<T>& ids) {
    detail::validate_operator(tape.value(base), op);
    const auto m_node = op.m.exact ? tape.monarch_materialize(ids.dfactor, ids.rfactor)
                                   : ids.dense;
    if (op.orient == Orientation::Column) {
        const auto expanded =
            tape.add(tape.matmul(tape.gather_cols(base, op.p_idx), m_node),
                     tape.gather_cols(base, op.n_idx));
        return tape.replace_cols(base, op.n_idx, expanded);
    }
    const auto expanded = tape.add(tape.matmul(m_node, tape.gather_rows(base, op.p_idx)),
                                   tape.gather_rows(base, op.n_idx));
    return tape.replace_rows(base, op.n_idx, expanded);
}

// Rewires the binding's expandable weight ids through operator subgraphs.
// Returns the operator leaf ids in bundle order (for optimizer access).
template <class T>
std::vector<OperatorNodeIds<T>> apply_operators(Tape<T>& tape, ModelBinding<T>& binding,
                                                const OperatorBundleT<T>& bundle,
                                                bool allow_grad = true) {
    std::vector<OperatorNodeIds<T>> all_ids;
    all_ids.reserve(bundle.ops.size());
    for (const auto& op : bundle.ops) {
        if (op.fused) throw StateError("cannot apply fused operator " + op.name());
        auto& layer = binding.layers.at(static_cast<size_t>(op.layer));
        typename Tape<T>::Id* slot = nullptr;
        switch (op.target) {
            case TargetMatrix::V: slot = &layer.wv; break;
            case TargetMatrix::O: slot = &layer.wo; break;
            case TargetMatrix::U: slot = &layer.wu; break;
            case TargetMatrix::G: slot = &layer.wg; break;
            case TargetMatrix::D: slot = &layer.wd; break;
        }
        const OperatorNodeIds<T> ids = bind_operator(tape, op, allow_grad);
        *slot = expanded_weight_node(tape, *slot, op, ids);
        all_ids.push_back(ids);
    }
    return all_ids;
}

}  // namespace apex
