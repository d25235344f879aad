#include <benchmark/benchmark.h>

#include "ltwin/rng.hpp"
#include "ltwin/tensor.hpp"

using namespace ltwin;

namespace {

TensorF32 random_tensor(std::vector<int64_t> shape, uint64_t seed) {
    TensorF32 t(std::move(shape));
    Rng rng(seed);
    for (float & v : t.data) v = static_cast<float>(rng.normal());
    return t;
}

void bm_matmul(benchmark::State & state) {
    const int64_t m = state.range(0), k = state.range(1), n = state.range(2);
    const TensorF32 a = random_tensor({m, k}, 1);
    const TensorF32 b = random_tensor({k, n}, 2);
    TensorF32 c({m, n});
    for (auto _ : state) {
        matmul_f32(a.data.data(), b.data.data(), c.data.data(), m, k, n);
        benchmark::DoNotOptimize(c.data.data());
    }
    state.counters["GFLOP/s"] =
        benchmark::Counter(2.0 * m * k * n * state.iterations() / 1e9, benchmark::Counter::kIsRate);
}

void bm_matmul_bt(benchmark::State & state) {
    const int64_t m = state.range(0), k = state.range(1), n = state.range(2);
    const TensorF32 a = random_tensor({m, k}, 1);
    const TensorF32 b = random_tensor({n, k}, 2);
    TensorF32 c({m, n});
    for (auto _ : state) {
        matmul_bt_f32(a.data.data(), b.data.data(), c.data.data(), m, k, n);
        benchmark::DoNotOptimize(c.data.data());
    }
    state.counters["GFLOP/s"] =
        benchmark::Counter(2.0 * m * k * n * state.iterations() / 1e9, benchmark::Counter::kIsRate);
}

void bm_gram_eigenvalues(benchmark::State & state) {
    const int64_t n = state.range(0);
    const TensorF32 w = random_tensor({n, n}, 3);
    for (auto _ : state) {
        EigenSpectrum s = gram_eigenvalues(w);
        benchmark::DoNotOptimize(s.values.data());
    }
}

} // namespace

BENCHMARK(bm_matmul)->Args({2048, 256, 256})->Args({2048, 256, 1024})->Args({2048, 1024, 256})->Unit(benchmark::kMillisecond);
BENCHMARK(bm_matmul_bt)->Args({2048, 256, 256})->Args({2048, 256, 1024})->Args({2048, 1024, 256})->Unit(benchmark::kMillisecond);
BENCHMARK(bm_gram_eigenvalues)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);
