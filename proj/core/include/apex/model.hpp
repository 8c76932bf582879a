#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "apex/tape.hpp"
#include "apex/tensor.hpp"

namespace apex {

enum class Activation { Silu, Gelu };

struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 4;
    int d_ffn = 128;
    int vocab_size = 260;
    int max_seq_len = 64;
    uint64_t seed = 0;
    Activation activation = Activation::Silu;
    float rms_eps = 1e-5f;

    int d_head() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ffn < 1 || vocab_size < 1 ||
            max_seq_len < 1)
            throw ConfigError("all model extents must be >= 1");
        if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    }
};

// Total parameter count from the config alone.
inline int64_t model_param_count(const ModelConfig& cfg) {
    const int64_t d = cfg.d_model, f = cfg.d_ffn, v = cfg.vocab_size;
    const int64_t per_layer = 4 * d * d + 3 * d * f + 2 * d;
    return v * d + static_cast<int64_t>(cfg.max_seq_len) * d + cfg.n_layers * per_layer + d +
           d * v;
}

template <class T>
struct LayerParamsT {
    TensorT<T> wq, wk, wv, wo;    // [d_model x d_model]; Q/K/V in head-blocks of width d_head
    TensorT<T> wu, wg;            // [d_model x d_ffn]
    TensorT<T> wd;                // [d_ffn x d_model]
    TensorT<T> norm1, norm2;      // [d_model]
};

template <class T>
struct ModelParamsT {
    ModelConfig cfg;
    TensorT<T> tok_embed;         // [vocab x d_model]
    TensorT<T> pos_embed;         // [max_seq_len x d_model]
    std::vector<LayerParamsT<T>> layers;
    TensorT<T> final_norm;        // [d_model]
    TensorT<T> head;              // [d_model x vocab]

    template <class U>
    ModelParamsT<U> cast() const {
        ModelParamsT<U> out;
        out.cfg = cfg;
        out.tok_embed = tok_embed.template cast<U>();
        out.pos_embed = pos_embed.template cast<U>();
        out.layers.resize(layers.size());
        for (size_t i = 0; i < layers.size(); ++i) {
            out.layers[i].wq = layers[i].wq.template cast<U>();
            out.layers[i].wk = layers[i].wk.template cast<U>();
            out.layers[i].wv = layers[i].wv.template cast<U>();
            out.layers[i].wo = layers[i].wo.template cast<U>();
            out.layers[i].wu = layers[i].wu.template cast<U>();
            out.layers[i].wg = layers[i].wg.template cast<U>();
            out.layers[i].wd = layers[i].wd.template cast<U>();
            out.layers[i].norm1 = layers[i].norm1.template cast<U>();
            out.layers[i].norm2 = layers[i].norm2.template cast<U>();
        }
        out.final_norm = final_norm.template cast<U>();
        out.head = head.template cast<U>();
        return out;
    }
};

using ModelParams = ModelParamsT<float>;

// Visits every parameter tensor with its stable name (the checkpoint key).
template <class T, class Fn>
void for_each_param(ModelParamsT<T>& p, Fn&& fn) {
    fn("tok_embed", p.tok_embed);
    fn("pos_embed", p.pos_embed);
    for (size_t i = 0; i < p.layers.size(); ++i) {
        const std::string pre = "layers." + std::to_string(i) + ".";
        fn(pre + "wq", p.layers[i].wq);
        fn(pre + "wk", p.layers[i].wk);
        fn(pre + "wv", p.layers[i].wv);
        fn(pre + "wo", p.layers[i].wo);
        fn(pre + "wu", p.layers[i].wu);
        fn(pre + "wg", p.layers[i].wg);
        fn(pre + "wd", p.layers[i].wd);
        fn(pre + "norm1", p.layers[i].norm1);
        fn(pre + "norm2", p.layers[i].norm2);
    }
    fn("final_norm", p.final_norm);
    fn("head", p.head);
}

template <class T, class Fn>
void for_each_param(const ModelParamsT<T>& p, Fn&& fn) {
    for_each_param(const_cast<ModelParamsT<T>&>(p),
                   [&fn](const std::string& name, TensorT<T>& t) {
                       fn(name, static_cast<const TensorT<T>&>(t));
                   });
}

// Seeded Gaussian init, std 0.02; norm gains 1.
template <class T = float>
ModelParamsT<T> init_params(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(seed_stream(cfg.seed, 0x1217));
    const int64_t d = cfg.d_model, f = cfg.d_ffn, v = cfg.vocab_size;
    const T std02 = T(0.02);
    ModelParamsT<T> p;
    p.cfg = cfg;
    p.tok_embed = TensorT<T>::randn({v, d}, T(0), std02, rng);
    p.pos_embed = TensorT<T>::randn({cfg.max_seq_len, d}, T(0), std02, rng);
    p.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& l : p.layers) {
        l.wq = TensorT<T>::randn({d, d}, T(0), std02, rng);
        l.wk = TensorT<T>::randn({d, d}, T(0), std02, rng);
        l.wv = TensorT<T>::randn({d, d}, T(0), std02, rng);
        l.wo = TensorT<T>::randn({d, d}, T(0), std02, rng);
        l.wu = TensorT<T>::randn({d, f}, T(0), std02, rng);
        l.wg = TensorT<T>::randn({d, f}, T(0), std02, rng);
        l.wd = TensorT<T>::randn({f, d}, T(0), std02, rng);
        l.norm1 = TensorT<T>::full({d}, T(1));
        l.norm2 = TensorT<T>::full({d}, T(1));
    }
    p.final_norm = TensorT<T>::full({d}, T(1));
    p.head = TensorT<T>::randn({d, v}, T(0), std02, rng);
    return p;
}

// Per-sample activation record: squared Frobenius norms summed over the
// sequence positions of one sample.
struct ForwardTrace {
    std::vector<std::vector<float>> mha_head_norms;    // [layer][head]
    std::vector<std::vector<float>> ffn_channel_norms; // [layer][channel]
};

// Tape node ids for one bound parameter set. Expansion rewires the five
// expandable weight ids (wv, wo, wu, wg, wd) to point at operator subgraphs.
template <class T>
struct ModelBinding {
    using Id = typename Tape<T>::Id;
    struct Layer {
        Id wq, wk, wv, wo, wu, wg, wd, norm1, norm2;
    };
    Id tok_embed = -1, pos_embed = -1, final_norm = -1, head = -1;
    std::vector<Layer> layers;
};

// Probe node ids for one forward pass; values back the ForwardTrace and the
// activation-regularization penalty.
template <class T>
struct ProbeNodes {
    using Id = typename Tape<T>::Id;
    std::vector<std::vector<Id>> mha_head_norms;  // [layer][head] scalar nodes
    std::vector<Id> ffn_channel_norms;            // [layer] vector nodes
};

// Binds every parameter as a tape leaf. `needs_grad(name)` decides
// requires_grad per tensor; pass {} for a no-grad binding.
template <class T>
ModelBinding<T> bind_params(Tape<T>& tape, const ModelParamsT<T>& p,
                            const std::function<bool(const std::string&)>& needs_grad = {}) {
    auto rg = [&](const std::string& name) { return needs_grad ? needs_grad(name) : false; };
    ModelBinding<T> b;
    b.tok_embed = tape.leaf(p.tok_embed, rg("tok_embed"));
    b.pos_embed = tape.leaf(p.pos_embed, rg("pos_embed"));
    b.layers.resize(p.layers.size());
    for (size_t i = 0; i < p.layers.size(); ++i) {
        const std::string pre = "layers." + std::to_string(i) + ".";
        b.layers[i].wq = tape.leaf(p.layers[i].wq, rg(pre + "wq"));
        b.layers[i].wk = tape.leaf(p.layers[i].wk, rg(pre + "wk"));
        b.layers[i].wv = tape.leaf(p.layers[i].wv, rg(pre + "wv"));
        b.layers[i].wo = tape.leaf(p.layers[i].wo, rg(pre + "wo"));
        b.layers[i].wu = tape.leaf(p.layers[i].wu, rg(pre + "wu"));
        b.layers[i].wg = tape.leaf(p.layers[i].wg, rg(pre + "wg"));
        b.layers[i].wd = tape.leaf(p.layers[i].wd, rg(pre + "wd"));
        b.layers[i].norm1 = tape.leaf(p.layers[i].norm1, rg(pre + "norm1"));
        b.layers[i].norm2 = tape.leaf(p.layers[i].norm2, rg(pre + "norm2"));
    }
    b.final_norm = tape.leaf(p.final_norm, rg("final_norm"));
    b.head = tape.leaf(p.head, rg("head"));
    return b;
}

// Leaf ids of a binding in for_each_param order.
template <class T>
std::vector<typename Tape<T>::Id> binding_ids_in_param_order(const ModelBinding<T>& b) {
    std::vector<typename Tape<T>::Id> ids;
    ids.push_back(b.tok_embed);
    ids.push_back(b.pos_embed);
    for (const auto& l : b.layers) {
        ids.push_back(l.wq);
        ids.push_back(l.wk);
        ids.push_back(l.wv);
        ids.push_back(l.wo);
        ids.push_back(l.wu);
        ids.push_back(l.wg);
        ids.push_back(l.wd);
        ids.push_back(l.norm1);
        ids.push_back(l.norm2);
    }
    ids.push_back(b.final_norm);
    ids.push_back(b.head);
    return ids;
}

// Causal multi-head attention on the tape. Returns the block output id and,
// when probing, appends one squared-Frobenius-norm scalar node per head.
template <class T>
typename Tape<T>::Id mha_forward(Tape<T>& tape, typename Tape<T>::Id x,
                                 const typename ModelBinding<T>::Layer& l,
                                 const ModelConfig& cfg,
                                 std::vector<typename Tape<T>::Id>* head_norms) {
    using Id = typename Tape<T>::Id;
    const int dh = cfg.d_head();
    const Id q = tape.matmul(x, l.wq);
    const Id k = tape.matmul(x, l.wk);
    const Id v = tape.matmul(x, l.wv);
    const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Id> heads;
    heads.reserve(static_cast<size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
        const int64_t c0 = static_cast<int64_t>(h) * dh, c1 = c0 + dh;
        const Id qh = tape.slice_cols(q, c0, c1);
        const Id kh = tape.slice_cols(k, c0, c1);
        const Id vh = tape.slice_cols(v, c0, c1);
        const Id scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt_dh);
        const Id probs = tape.causal_softmax(scores);
        const Id head = tape.matmul(probs, vh);
        if (head_norms) head_norms->push_back(tape.sumsq(head));
        heads.push_back(head);
    }
    const Id cat = cfg.n_heads == 1 ? heads[0] : tape.concat_cols(heads);
    return tape.matmul(cat, l.wo);
}

// Gated FFN on the tape: (x Wu) * f(x Wg) Wd. When probing, also emits the
// per-channel squared norms of the gate activation f(x Wg).
template <class T>
typename Tape<T>::Id ffn_forward(Tape<T>& tape, typename Tape<T>::Id x,
                                 const typename ModelBinding<T>::Layer& l,
                                 const ModelConfig& cfg,
                                 typename Tape<T>::Id* channel_norms) {
    using Id = typename Tape<T>::Id;
    const Id up = tape.matmul(x, l.wu);
    const Id gate_pre = tape.matmul(x, l.wg);
    const Id gate =
        cfg.activation == Activation::Silu ? tape.silu(gate_pre) : tape.gelu(gate_pre);
    if (channel_norms) *channel_norms = tape.col_sumsq(gate);
    return tape.matmul(tape.mul(up, gate), l.wd);
}

// Pre-norm residual stack over one token sequence. Probe nodes are appended
// per layer when `probe` is non-null; probing never alters the main path.
template <class T>
typename Tape<T>::Id forward_logits(Tape<T>& tape, const ModelBinding<T>& b,
                                    const ModelConfig& cfg, const std::vector<int>& tokens,
                                    ProbeNodes<T>* probe = nullptr) {
    using Id = typename Tape<T>::Id;
    const int64_t L = static_cast<int64_t>(tokens.size());
    if (L < 1) throw DataError("empty token sequence");
    if (L > cfg.max_seq_len) throw DataError("sequence longer than max_seq_len");
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size) throw IndexError("token id out of range");

    Id x = tape.add(tape.rows_gather(b.tok_embed, tokens), tape.slice_rows(b.pos_embed, 0, L));
    for (size_t li = 0; li < b.layers.size(); ++li) {
        const auto& l = b.layers[li];
        std::vector<Id>* hn = nullptr;
        Id* cn = nullptr;
        if (probe) {
            probe->mha_head_norms.emplace_back();
            hn = &probe->mha_head_norms.back();
            probe->ffn_channel_norms.emplace_back(-1);
            cn = &probe->ffn_channel_norms.back();
        }
        const Id h1 = tape.rms_norm(x, l.norm1, T(cfg.rms_eps));
        x = tape.add(x, mha_forward(tape, h1, l, cfg, hn));
        const Id h2 = tape.rms_norm(x, l.norm2, T(cfg.rms_eps));
        x = tape.add(x, ffn_forward(tape, h2, l, cfg, cn));
    }
    x = tape.rms_norm(x, b.final_norm, T(cfg.rms_eps));
    return tape.matmul(x, b.head);
}

// Extracts the per-sample trace values from probe nodes after a forward.
template <class T>
ForwardTrace extract_trace(Tape<T>& tape, const ProbeNodes<T>& probe) {
    ForwardTrace tr;
    tr.mha_head_norms.resize(probe.mha_head_norms.size());
    for (size_t li = 0; li < probe.mha_head_norms.size(); ++li)
        for (auto id : probe.mha_head_norms[li])
            tr.mha_head_norms[li].push_back(static_cast<float>(tape.value(id)[0]));
    tr.ffn_channel_norms.resize(probe.ffn_channel_norms.size());
    for (size_t li = 0; li < probe.ffn_channel_norms.size(); ++li) {
        const auto& v = tape.value(probe.ffn_channel_norms[li]);
        tr.ffn_channel_norms[li].reserve(v.data.size());
        for (auto x : v.data) tr.ffn_channel_norms[li].push_back(static_cast<float>(x));
    }
    return tr;
}

// Convenience single-shot forward on a private tape.
template <class T>
TensorT<T> forward_logits_once(const ModelParamsT<T>& p, const std::vector<int>& tokens,
                               ForwardTrace* trace = nullptr) {
    Tape<T> tape;
    ModelBinding<T> b = bind_params(tape, p);
    ProbeNodes<T> probe;
    const auto logits = forward_logits(tape, b, p.cfg, tokens, trace ? &probe : nullptr);
    if (trace) *trace = extract_trace(tape, probe);
    return tape.value(logits);
}

// exp(mean next-token NLL) over non-overlapping stride-L windows of the
// stream (window w covers inputs [w*L, w*L+L), targets shifted by one).
inline double perplexity(const ModelParams& p, const std::vector<int>& stream, int seq_len) {
    if (seq_len < 1) throw ConfigError("seq_len must be >= 1");
    if (static_cast<int>(stream.size()) <= seq_len) throw DataError("stream too short");
    const int64_t n_windows = (static_cast<int64_t>(stream.size()) - 1) / seq_len;
    double total = 0.0;
    for (int64_t w = 0; w < n_windows; ++w) {
        const int64_t off = w * seq_len;
        std::vector<int> inputs(stream.begin() + off, stream.begin() + off + seq_len);
        std::vector<int> targets(stream.begin() + off + 1, stream.begin() + off + seq_len + 1);
        const Tensor logits = forward_logits_once(p, inputs);
        total += static_cast<double>(cross_entropy_mean(logits, targets));
    }
    return std::exp(total / static_cast<double>(n_windows));
}

}  // namespace apex
