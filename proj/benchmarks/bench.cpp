#include "convscm/matrix.hpp"
#include "convscm/model.hpp"
#include "convscm/training.hpp"

#include <benchmark/benchmark.h>

using namespace convscm;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    SplitMix64 rng(seed);
    Matrix m(r, c);
    for (double& v : m.data()) v = rng.normal();
    return m;
}

Matrix random_lower(std::size_t n, std::uint64_t seed) {
    SplitMix64 rng(seed);
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < i; ++j) a(i, j) = rng.uniform(-0.3, 0.3);
    return a;
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(8, 256)->Complexity();

void BM_UnitLowerInverse(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix a = random_lower(n, 3);
    for (auto _ : state) benchmark::DoNotOptimize(unit_lower_inverse(a));
}
BENCHMARK(BM_UnitLowerInverse)->DenseRange(4, 16, 4)->Arg(64);

Dialogue bench_dialogue(std::size_t n, std::size_t d) {
    Dialogue dl;
    dl.id = "bench";
    for (std::size_t i = 0; i < n; ++i) dl.utterances.push_back(Utterance{static_cast<int>(i % 2) + 1, i % 3 == 0, std::nullopt});
    dl.embeddings = random_matrix(n, d, 4);
    for (std::size_t i = 3; i < n; i += 3) dl.cause_pairs.emplace_back(i, i - 1);
    return dl;
}

// One dialogue through forward and backward at the default model size.
void BM_ForwardBackward(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    TrainConfig cfg;
    const VgaeModel model(cfg.model, 5);
    const Dialogue d = bench_dialogue(n, cfg.model.input_dim);
    const BatchNormalizers norm = batch_normalizers({&d}, cfg);
    SplitMix64 rng(6);
    for (auto _ : state) {
        LossParts lp = dialogue_loss(model, d, cfg, norm, ForwardOptions{true, true, &rng});
        ad::backward(lp.total);
        benchmark::DoNotOptimize(lp.mse);
    }
}
BENCHMARK(BM_ForwardBackward)->Arg(4)->Arg(8)->Arg(12)->Unit(benchmark::kMicrosecond);

void BM_Predict(benchmark::State& state) {
    TrainConfig cfg;
    const VgaeModel model(cfg.model, 5);
    const Dialogue d = bench_dialogue(8, cfg.model.input_dim);
    for (auto _ : state) benchmark::DoNotOptimize(model.forward(d.embeddings, {}, ForwardOptions{}).pair_logits.value());
}
BENCHMARK(BM_Predict)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
