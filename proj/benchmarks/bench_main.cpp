#include <benchmark/benchmark.h>

#include "avsdiff/autodiff.hpp"
#include "avsdiff/rng.hpp"

using namespace avsdiff;

static void BM_MatmulKernel(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  RngStream rng(1, 1);
  Tensor a = rng.gauss_tensor({m, 144});
  Tensor b = rng.gauss_tensor({144, 32});
  Tensor c({m, 32});
  for (auto _ : state) {
    std::fill(c.vec().begin(), c.vec().end(), 0.0);
    kernels::mm_acc(a.data(), b.data(), c.data(), m, 144, 32);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * m * 144 * 32);
}
BENCHMARK(BM_MatmulKernel)->Arg(256)->Arg(1024)->Arg(4096);

BENCHMARK_MAIN();
