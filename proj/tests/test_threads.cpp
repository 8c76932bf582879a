// Verifies that the APEX_THREADS row-parallel path is bitwise identical to
// serial execution. Runs as its own binary: the thread cap latches on first
// use, so the environment is set before any kernel call.

#include <cstdio>
#include <cstdlib>

#include "apex/model.hpp"
#include "apex/tensor.hpp"

using namespace apex;

namespace {

// Straight serial i-k-j kernel, the reference bit pattern.
Tensor serial_matmul(const Tensor& a, const Tensor& b) {
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t kk = 0; kk < k; ++kk) {
            const float av = a.at(i, kk);
            for (int64_t j = 0; j < n; ++j) c.at(i, j) += av * b.at(kk, j);
        }
    return c;
}

}  // namespace

int main() {
#ifdef _WIN32
    _putenv("APEX_THREADS=3");
#else
    setenv("APEX_THREADS", "3", 1);
#endif
    if (numerics_threads() != 3) {
        std::fprintf(stderr, "FAIL: thread cap not honored\n");
        return 1;
    }

    Rng rng(4242);
    int failures = 0;
    // Big enough to cross the parallel threshold, odd sizes included.
    for (const auto [m, k, n] : {std::tuple<int64_t, int64_t, int64_t>{128, 96, 130},
                                 {257, 64, 64},
                                 {64, 300, 41}}) {
        const Tensor a = Tensor::randn({m, k}, 0.0f, 1.0f, rng);
        const Tensor b = Tensor::randn({k, n}, 0.0f, 1.0f, rng);
        const Tensor parallel = matmul(a, b);
        const Tensor reference = serial_matmul(a, b);
        if (!bitwise_equal(parallel, reference)) {
            std::fprintf(stderr, "FAIL: %lldx%lldx%lld differs from serial bits\n",
                         static_cast<long long>(m), static_cast<long long>(k),
                         static_cast<long long>(n));
            ++failures;
        }
    }

    // A forward pass under the thread cap stays deterministic call to call.
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 64;
    cfg.n_heads = 4;
    cfg.d_ffn = 128;
    cfg.vocab_size = 260;
    cfg.max_seq_len = 32;
    const ModelParams p = init_params(cfg);
    std::vector<int> toks;
    for (int i = 0; i < 32; ++i) toks.push_back((i * 11 + 3) % cfg.vocab_size);
    if (!bitwise_equal(forward_logits_once(p, toks), forward_logits_once(p, toks))) {
        std::fprintf(stderr, "FAIL: threaded forward is not reproducible\n");
        ++failures;
    }

    if (failures == 0) std::printf("threaded kernels bitwise match serial: OK\n");
    return failures == 0 ? 0 : 1;
}
