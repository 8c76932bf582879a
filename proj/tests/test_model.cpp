#include <doctest.h>

#include <cmath>

#include "apex/gradcheck.hpp"
#include "apex/model.hpp"

using namespace apex;

namespace {

// Fully independent 64-bit re-implementation of the forward pass: straight
// loops, no tape, no shared kernels.
struct OracleForward {
    TensorD logits;
    std::vector<std::vector<double>> head_norms;     // [layer][H]
    std::vector<std::vector<double>> channel_norms;  // [layer][d_ffn]
};

std::vector<std::vector<double>> to_grid(const TensorD& t) {
    std::vector<std::vector<double>> g(static_cast<size_t>(t.rows()),
                                       std::vector<double>(static_cast<size_t>(t.cols())));
    for (int64_t i = 0; i < t.rows(); ++i)
        for (int64_t j = 0; j < t.cols(); ++j)
            g[static_cast<size_t>(i)][static_cast<size_t>(j)] = t.at(i, j);
    return g;
}

std::vector<std::vector<double>> grid_mul(const std::vector<std::vector<double>>& a,
                                          const std::vector<std::vector<double>>& b) {
    const size_t m = a.size(), k = b.size(), n = b[0].size();
    std::vector<std::vector<double>> c(m, std::vector<double>(n, 0.0));
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (size_t p = 0; p < k; ++p) acc += a[i][p] * b[p][j];
            c[i][j] = acc;
        }
    return c;
}

std::vector<std::vector<double>> oracle_rms(const std::vector<std::vector<double>>& x,
                                            const std::vector<double>& gain, double eps) {
    auto y = x;
    for (size_t i = 0; i < x.size(); ++i) {
        double ss = 0.0;
        for (double v : x[i]) ss += v * v;
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x[i].size()) + eps);
        for (size_t j = 0; j < x[i].size(); ++j) y[i][j] = x[i][j] * inv * gain[j];
    }
    return y;
}

OracleForward oracle_forward(const ModelParamsT<double>& p, const std::vector<int>& toks) {
    const ModelConfig& cfg = p.cfg;
    const size_t L = toks.size();
    const size_t d = static_cast<size_t>(cfg.d_model);
    const size_t dh = static_cast<size_t>(cfg.d_head());
    OracleForward out;

    std::vector<std::vector<double>> x(L, std::vector<double>(d));
    for (size_t i = 0; i < L; ++i)
        for (size_t j = 0; j < d; ++j)
            x[i][j] = p.tok_embed.at(toks[i], static_cast<int64_t>(j)) +
                      p.pos_embed.at(static_cast<int64_t>(i), static_cast<int64_t>(j));

    for (size_t li = 0; li < p.layers.size(); ++li) {
        const auto& l = p.layers[li];
        std::vector<double> g1(d), g2(d);
        for (size_t j = 0; j < d; ++j) {
            g1[j] = l.norm1[static_cast<int64_t>(j)];
            g2[j] = l.norm2[static_cast<int64_t>(j)];
        }
        const auto h1 = oracle_rms(x, g1, cfg.rms_eps);
        const auto q = grid_mul(h1, to_grid(l.wq));
        const auto k = grid_mul(h1, to_grid(l.wk));
        const auto v = grid_mul(h1, to_grid(l.wv));

        std::vector<std::vector<double>> cat(L, std::vector<double>(d, 0.0));
        std::vector<double> norms;
        for (int h = 0; h < cfg.n_heads; ++h) {
            const size_t c0 = static_cast<size_t>(h) * dh;
            double head_sumsq = 0.0;
            for (size_t i = 0; i < L; ++i) {
                std::vector<double> scores(i + 1);
                double mx = -1e300;
                for (size_t j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (size_t a = 0; a < dh; ++a) s += q[i][c0 + a] * k[j][c0 + a];
                    scores[j] = s / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, scores[j]);
                }
                double z = 0.0;
                for (size_t j = 0; j <= i; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    z += scores[j];
                }
                for (size_t a = 0; a < dh; ++a) {
                    double acc = 0.0;
                    for (size_t j = 0; j <= i; ++j) acc += scores[j] / z * v[j][c0 + a];
                    cat[i][c0 + a] = acc;
                    head_sumsq += acc * acc;
                }
            }
            norms.push_back(head_sumsq);
        }
        out.head_norms.push_back(norms);
        const auto attn = grid_mul(cat, to_grid(l.wo));
        for (size_t i = 0; i < L; ++i)
            for (size_t j = 0; j < d; ++j) x[i][j] += attn[i][j];

        const auto h2 = oracle_rms(x, g2, cfg.rms_eps);
        const auto up = grid_mul(h2, to_grid(l.wu));
        const auto gate_pre = grid_mul(h2, to_grid(l.wg));
        const size_t f = static_cast<size_t>(cfg.d_ffn);
        std::vector<std::vector<double>> gated(L, std::vector<double>(f));
        std::vector<double> cnorms(f, 0.0);
        for (size_t i = 0; i < L; ++i)
            for (size_t j = 0; j < f; ++j) {
                const double gp = gate_pre[i][j];
                const double act = gp / (1.0 + std::exp(-gp));
                cnorms[j] += act * act;
                gated[i][j] = up[i][j] * act;
            }
        out.channel_norms.push_back(cnorms);
        const auto down = grid_mul(gated, to_grid(l.wd));
        for (size_t i = 0; i < L; ++i)
            for (size_t j = 0; j < d; ++j) x[i][j] += down[i][j];
    }

    std::vector<double> gf(d);
    for (size_t j = 0; j < d; ++j) gf[j] = p.final_norm[static_cast<int64_t>(j)];
    const auto xe = oracle_rms(x, gf, cfg.rms_eps);
    const auto logits = grid_mul(xe, to_grid(p.head));
    out.logits = TensorD({static_cast<int64_t>(L), static_cast<int64_t>(cfg.vocab_size)});
    for (size_t i = 0; i < L; ++i)
        for (size_t j = 0; j < static_cast<size_t>(cfg.vocab_size); ++j)
            out.logits.at(static_cast<int64_t>(i), static_cast<int64_t>(j)) = logits[i][j];
    return out;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ffn = 24;
    cfg.vocab_size = 31;
    cfg.max_seq_len = 12;
    cfg.seed = 5;
    return cfg;
}

std::vector<int> tokens_mod(int n, int vocab, int offset = 0) {
    std::vector<int> t(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) t[static_cast<size_t>(i)] = (offset + 3 * i + 1) % vocab;
    return t;
}

ModelBinding<double> binding_from_leaves(const ModelParamsT<double>& p,
                                         const std::vector<Tape<double>::Id>& leaves) {
    ModelBinding<double> b;
    size_t i = 0;
    b.tok_embed = leaves[i++];
    b.pos_embed = leaves[i++];
    b.layers.resize(p.layers.size());
    for (auto& l : b.layers) {
        l.wq = leaves[i++];
        l.wk = leaves[i++];
        l.wv = leaves[i++];
        l.wo = leaves[i++];
        l.wu = leaves[i++];
        l.wg = leaves[i++];
        l.wd = leaves[i++];
        l.norm1 = leaves[i++];
        l.norm2 = leaves[i++];
    }
    b.final_norm = leaves[i++];
    b.head = leaves[i++];
    return b;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("init is deterministic and shaped") {
    const ModelConfig cfg = tiny_config();
    const ModelParams a = init_params(cfg);
    const ModelParams b = init_params(cfg);
    bool all_equal = true;
    std::vector<const Tensor*> bs;
    for_each_param(b, [&](const std::string&, const Tensor& t) { bs.push_back(&t); });
    size_t i = 0;
    for_each_param(a, [&](const std::string&, const Tensor& t) {
        all_equal = all_equal && bitwise_equal(t, *bs[i++]);
    });
    CHECK(all_equal);

    ModelConfig c8;
    c8.d_model = 8;
    c8.n_heads = 2;
    c8.vocab_size = 10;
    c8.max_seq_len = 4;
    c8.n_layers = 1;
    c8.d_ffn = 16;
    const ModelParams p8 = init_params(c8);
    CHECK(p8.layers[0].wv.rows() == 8);
    CHECK(p8.layers[0].wv.cols() == 8);  // 2 head blocks of width 4
    CHECK(c8.d_head() == 4);
}

TEST_CASE("parameter count matches the closed form") {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ffn = 32;
    cfg.vocab_size = 256;
    cfg.max_seq_len = 64;
    const ModelParams p = init_params(cfg);
    int64_t actual = 0;
    for_each_param(p, [&](const std::string&, const Tensor& t) { actual += t.numel(); });
    CHECK(actual == model_param_count(cfg));
}

TEST_CASE("parameter count property over random configs") {
    Rng rng(1234);
    for (int trial = 0; trial < 25; ++trial) {
        ModelConfig cfg;
        cfg.n_heads = 1 + static_cast<int>(rng.below(4));
        cfg.d_model = cfg.n_heads * (1 + static_cast<int>(rng.below(6)));
        cfg.n_layers = 1 + static_cast<int>(rng.below(3));
        cfg.d_ffn = 1 + static_cast<int>(rng.below(40));
        cfg.vocab_size = 2 + static_cast<int>(rng.below(100));
        cfg.max_seq_len = 1 + static_cast<int>(rng.below(32));
        cfg.seed = rng.next_u64();
        const ModelParams p = init_params(cfg);
        int64_t actual = 0;
        for_each_param(p, [&](const std::string&, const Tensor& t) { actual += t.numel(); });
        CHECK(actual == model_param_count(cfg));
    }
}

TEST_CASE("invalid config throws") {
    ModelConfig cfg = tiny_config();
    cfg.d_model = 10;
    cfg.n_heads = 4;  // not divisible
    CHECK_THROWS_AS(init_params(cfg), ConfigError);
}

TEST_CASE("single-head attention equals the standalone oracle") {
    ModelConfig cfg = tiny_config();
    cfg.n_heads = 1;
    cfg.n_layers = 1;
    const auto p = init_params<double>(cfg);
    const auto toks = tokens_mod(7, cfg.vocab_size);
    const OracleForward ref = oracle_forward(p, toks);
    const TensorD logits = forward_logits_once(p, toks);
    for (int64_t i = 0; i < logits.numel(); ++i)
        CHECK(logits[i] == doctest::Approx(ref.logits[i]).epsilon(1e-6));
}

TEST_CASE("zero W_V kills head outputs and norms") {
    ModelConfig cfg = tiny_config();
    cfg.n_layers = 1;
    ModelParams p = init_params(cfg);
    p.layers[0].wv = Tensor::zeros({cfg.d_model, cfg.d_model});

    Tape<float> tape;
    auto binding = bind_params(tape, p);
    Rng rng(77);
    auto x = tape.leaf(Tensor::randn({6, cfg.d_model}, 0.0f, 1.0f, rng), false);
    std::vector<Tape<float>::Id> head_norms;
    auto out = mha_forward(tape, x, binding.layers[0], cfg, &head_norms);
    for (int64_t i = 0; i < tape.value(out).numel(); ++i) CHECK(tape.value(out)[i] == 0.0f);
    for (auto id : head_norms) CHECK(tape.value(id)[0] == 0.0f);
}

TEST_CASE("head norms match the elementwise-sum oracle") {
    const ModelConfig cfg = tiny_config();
    const auto p = init_params<double>(cfg);
    const auto toks = tokens_mod(9, cfg.vocab_size, 4);
    const OracleForward ref = oracle_forward(p, toks);

    Tape<double> tape;
    auto binding = bind_params(tape, p);
    ProbeNodes<double> probe;
    forward_logits(tape, binding, cfg, toks, &probe);
    for (size_t li = 0; li < probe.mha_head_norms.size(); ++li)
        for (size_t h = 0; h < probe.mha_head_norms[li].size(); ++h)
            CHECK(tape.value(probe.mha_head_norms[li][h])[0] ==
                  doctest::Approx(ref.head_norms[li][h]).epsilon(1e-5));
}

TEST_CASE("zero W_G gates the FFN shut") {
    ModelConfig cfg = tiny_config();
    cfg.n_layers = 1;
    ModelParams p = init_params(cfg);
    p.layers[0].wg = Tensor::zeros({cfg.d_model, cfg.d_ffn});

    Tape<float> tape;
    auto binding = bind_params(tape, p);
    Rng rng(78);
    auto x = tape.leaf(Tensor::randn({5, cfg.d_model}, 0.0f, 1.0f, rng), false);
    Tape<float>::Id channel_norms = -1;
    auto out = ffn_forward(tape, x, binding.layers[0], cfg, &channel_norms);
    for (int64_t i = 0; i < tape.value(out).numel(); ++i) CHECK(tape.value(out)[i] == 0.0f);
    for (int64_t c = 0; c < tape.value(channel_norms).numel(); ++c)
        CHECK(tape.value(channel_norms)[c] == 0.0f);
}

TEST_CASE("identity-like FFN reduces to the gate activation") {
    // x column 0 all ones and W_U row 0 all ones (rest zero) make X W_U == 1
    // everywhere; with W_D = I the block output is silu(x W_G).
    ModelConfig cfg = tiny_config();
    cfg.n_layers = 1;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ffn = 8;
    ModelParams p = init_params(cfg);
    p.layers[0].wu = Tensor::zeros({8, 8});
    for (int64_t j = 0; j < 8; ++j) p.layers[0].wu.at(0, j) = 1.0f;
    p.layers[0].wd = Tensor::identity(8);

    Rng rng(79);
    Tensor x = Tensor::randn({5, 8}, 0.0f, 1.0f, rng);
    for (int64_t i = 0; i < 5; ++i) x.at(i, 0) = 1.0f;

    Tape<float> tape;
    auto binding = bind_params(tape, p);
    auto xid = tape.leaf(x, false);
    auto out = ffn_forward(tape, xid, binding.layers[0], cfg, nullptr);
    const Tensor expect = silu(matmul(x, p.layers[0].wg));
    for (int64_t i = 0; i < expect.numel(); ++i)
        CHECK(tape.value(out)[i] == doctest::Approx(expect[i]).epsilon(1e-6));
}

TEST_CASE("channel norms match the brute-force oracle") {
    const ModelConfig cfg = tiny_config();
    const auto p = init_params<double>(cfg);
    const auto toks = tokens_mod(8, cfg.vocab_size, 2);
    const OracleForward ref = oracle_forward(p, toks);

    Tape<double> tape;
    auto binding = bind_params(tape, p);
    ProbeNodes<double> probe;
    forward_logits(tape, binding, cfg, toks, &probe);
    for (size_t li = 0; li < probe.ffn_channel_norms.size(); ++li) {
        const auto& v = tape.value(probe.ffn_channel_norms[li]);
        for (int64_t c = 0; c < v.numel(); ++c)
            CHECK(v[c] == doctest::Approx(ref.channel_norms[li][c]).epsilon(1e-5));
    }
}

TEST_CASE("forward matches the independent 64-bit oracle") {
    const ModelConfig cfg = tiny_config();
    const auto p64 = init_params<double>(cfg);
    const auto toks = tokens_mod(11, cfg.vocab_size, 7);
    const OracleForward ref = oracle_forward(p64, toks);
    const TensorD logits = forward_logits_once(p64, toks);
    CHECK(logits.dims == ref.logits.dims);
    for (int64_t i = 0; i < logits.numel(); ++i)
        CHECK(logits[i] == doctest::Approx(ref.logits[i]).epsilon(1e-4));
}

TEST_CASE("forward shape, determinism and error paths") {
    const ModelConfig cfg = tiny_config();
    const ModelParams p = init_params(cfg);
    const Tensor one = forward_logits_once(p, {3});
    CHECK(one.rows() == 1);
    CHECK(one.cols() == cfg.vocab_size);

    const auto toks = tokens_mod(10, cfg.vocab_size);
    CHECK(bitwise_equal(forward_logits_once(p, toks), forward_logits_once(p, toks)));

    CHECK_THROWS_AS(forward_logits_once(p, {cfg.vocab_size}), IndexError);
    CHECK_THROWS_AS(forward_logits_once(p, tokens_mod(cfg.max_seq_len + 1, cfg.vocab_size)),
                    DataError);
}

TEST_CASE("probing never changes logits") {
    const ModelConfig cfg = tiny_config();
    const ModelParams p = init_params(cfg);
    const auto toks = tokens_mod(9, cfg.vocab_size, 1);
    ForwardTrace trace;
    const Tensor with_probe = forward_logits_once(p, toks, &trace);
    const Tensor without = forward_logits_once(p, toks);
    CHECK(bitwise_equal(with_probe, without));
    CHECK(trace.mha_head_norms.size() == static_cast<size_t>(cfg.n_layers));
    for (const auto& layer : trace.mha_head_norms)
        for (float n : layer) CHECK(n >= 0.0f);
}

TEST_CASE("uniform model perplexity is the vocab size") {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg);
    p.head = Tensor::zeros({cfg.d_model, cfg.vocab_size});  // constant logit rows
    std::vector<int> stream = tokens_mod(40, cfg.vocab_size);
    CHECK(perplexity(p, stream, 8) == doctest::Approx(cfg.vocab_size).epsilon(1e-4));
}

TEST_CASE("perplexity equals exp of the mean cross entropy") {
    const ModelConfig cfg = tiny_config();
    const ModelParams p = init_params(cfg);
    const std::vector<int> stream = tokens_mod(33, cfg.vocab_size, 3);
    const int L = 8;
    const int64_t n_windows = (static_cast<int64_t>(stream.size()) - 1) / L;
    double total = 0.0;
    for (int64_t w = 0; w < n_windows; ++w) {
        std::vector<int> in(stream.begin() + w * L, stream.begin() + w * L + L);
        std::vector<int> tg(stream.begin() + w * L + 1, stream.begin() + w * L + L + 1);
        total += static_cast<double>(cross_entropy_mean(forward_logits_once(p, in), tg));
    }
    CHECK(perplexity(p, stream, L) ==
          doctest::Approx(std::exp(total / static_cast<double>(n_windows))).epsilon(1e-4));

    CHECK_THROWS_AS(perplexity(p, tokens_mod(8, cfg.vocab_size), 8), DataError);
}

TEST_CASE("full model gradients pass the finite-difference check") {
    ModelConfig cfg = tiny_config();
    cfg.n_layers = 1;  // keeps the FD loop quick
    auto p = init_params<double>(cfg);
    const auto toks = tokens_mod(6, cfg.vocab_size);
    const std::vector<int> targets = tokens_mod(6, cfg.vocab_size, 1);

    std::vector<TensorD*> params;
    for_each_param(p, [&](const std::string&, TensorD& t) { params.push_back(&t); });

    auto build = [&](Tape<double>& tape, const std::vector<Tape<double>::Id>& leaves) {
        ModelBinding<double> b = binding_from_leaves(p, leaves);
        auto logits = forward_logits(tape, b, cfg, toks);
        return tape.cross_entropy_mean(logits, targets);
    };
    const double err = grad_check(params, build, 1e-5, 64, 2024);
    CHECK(err < 1e-3);
}

}  // TEST_SUITE
