#include <benchmark/benchmark.h>

#include "apex/analysis.hpp"
#include "apex/corpus.hpp"
#include "apex/staging.hpp"

using namespace apex;

namespace {

static void BM_Matmul(benchmark::State& state) {
    const int64_t n = state.range(0);
    Rng rng(1);
    const Tensor a = Tensor::randn({n, n}, 0.0f, 1.0f, rng);
    const Tensor b = Tensor::randn({n, n}, 0.0f, 1.0f, rng);
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
    state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

static void BM_MonarchMaterialize(benchmark::State& state) {
    const int64_t n = state.range(0);
    MonarchT<float> m = init_monarch_zero<float>(n, 2);
    Rng rng(3);
    for (auto& v : m.rfactor.data) v = static_cast<float>(rng.gauss());
    for (auto _ : state) benchmark::DoNotOptimize(monarch_materialize(m));
}
BENCHMARK(BM_MonarchMaterialize)->Arg(16)->Arg(64)->Arg(144);

static void BM_MonarchApply(benchmark::State& state) {
    const int64_t n = state.range(0);
    MonarchT<float> m = init_monarch_zero<float>(n, 2);
    Rng rng(3);
    for (auto& v : m.rfactor.data) v = static_cast<float>(rng.gauss());
    const Tensor x = Tensor::randn({8, n}, 0.0f, 1.0f, rng);
    for (auto _ : state) benchmark::DoNotOptimize(monarch_apply(x, m));
}
BENCHMARK(BM_MonarchApply)->Arg(16)->Arg(64)->Arg(144);

struct StepFixture {
    ModelConfig cfg;
    ModelParams params;
    OperatorBundle ops;
    std::vector<std::vector<int>> inputs, targets;

    explicit StepFixture(bool with_ops) {
        cfg.n_layers = 2;
        cfg.d_model = 64;
        cfg.n_heads = 4;
        cfg.d_ffn = 128;
        cfg.vocab_size = 260;
        cfg.max_seq_len = 64;
        cfg.seed = 4;
        params = init_params(cfg);
        const Corpus corpus = tokenize_bytes(make_synthetic_text(40000, 5));
        BatchIter iter(corpus.tokens, 64, 8, 6, true);
        const auto batch = iter.next();
        inputs = batch.inputs;
        targets = batch.targets;
        if (with_ops) {
            ActivationLedger empty = ActivationLedger::make(cfg);
            const AdvantageSets sets = select_sets(empty, 0.125, 0.125, Strategy::Random, 7);
            ops = attach_operators(params, sets, 8);
        }
    }

    double step() {
        Tape<float> tape;
        ModelBinding<float> binding =
            bind_params(tape, params, [](const std::string&) { return true; });
        if (!ops.empty()) apply_operators(tape, binding, ops);
        std::vector<Tape<float>::Id> ces;
        for (size_t b = 0; b < inputs.size(); ++b) {
            const auto logits = forward_logits(tape, binding, cfg, inputs[b]);
            ces.push_back(tape.cross_entropy_mean(logits, targets[b]));
        }
        const auto loss = tape.vec_mean(tape.pack_scalars(ces));
        tape.backward(loss);
        return tape.value(loss)[0];
    }
};

static void BM_TrainStepVanilla(benchmark::State& state) {
    StepFixture fix(false);
    for (auto _ : state) benchmark::DoNotOptimize(fix.step());
}
BENCHMARK(BM_TrainStepVanilla)->Unit(benchmark::kMillisecond);

static void BM_TrainStepLiveOperators(benchmark::State& state) {
    StepFixture fix(true);
    for (auto _ : state) benchmark::DoNotOptimize(fix.step());
}
BENCHMARK(BM_TrainStepLiveOperators)->Unit(benchmark::kMillisecond);

static void BM_JacobiSvd(benchmark::State& state) {
    const int64_t n = state.range(0);
    Rng rng(9);
    const TensorD w = TensorD::randn({n, n}, 0.0, 1.0, rng);
    for (auto _ : state) benchmark::DoNotOptimize(svd_singular_values(w));
}
BENCHMARK(BM_JacobiSvd)->Arg(32)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
