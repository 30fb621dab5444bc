// Serial reference loops vs the OpenMP kernels, plus per-batch gradient
// computation with and without the parallel instance loop.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "edlab/kernels.hpp"
#include "edlab/train.hpp"

using namespace edlab;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
    std::vector<float> v(n);
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> d;
    for (float& x : v) x = d(rng);
    return v;
}

template <void (*Gemm)(const float*, const float*, float*, std::size_t, std::size_t, std::size_t)>
void BM_gemm(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
    std::vector<float> c(n * n);
    for (auto _ : state) {
        Gemm(a.data(), b.data(), c.data(), n, n, n);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * std::int64_t(n * n * n));
}

template <void (*Gemm)(const float*, const float*, float*, std::size_t, std::size_t, std::size_t)>
void BM_gemm_tn(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_vec(n * n, 1), d = random_vec(n * n, 2);
    std::vector<float> c(n * n);
    for (auto _ : state) {
        Gemm(a.data(), d.data(), c.data(), n, n, n);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * std::int64_t(n * n * n));
}

void BM_batch_gradients(benchmark::State& state) {
    const Execution exec = state.range(0) ? Execution::parallel : Execution::serial;
    const Processor proc = init_processor(ModelConfig::processor_default(), 0);
    const Dataset data = gen_dataset(kAllTasks, 32, 0);
    std::vector<const Instance*> batch;
    for (const auto& i : data.train) batch.push_back(&i);
    for (auto _ : state) benchmark::DoNotOptimize(baseline_batch_gradients(proc, batch, Regime::ablated, exec));
    state.SetLabel(exec == Execution::parallel ? "parallel" : "serial");
}

}  // namespace

BENCHMARK(BM_gemm<kernels::reference::gemm>)->Name("gemm/reference")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_gemm<kernels::parallel::gemm>)->Name("gemm/parallel")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_gemm_tn<kernels::reference::gemm_tn_acc>)->Name("gemm_tn_acc/reference")->Arg(64)->Arg(256);
BENCHMARK(BM_gemm_tn<kernels::parallel::gemm_tn_acc>)->Name("gemm_tn_acc/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_batch_gradients)->Name("batch_gradients")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
