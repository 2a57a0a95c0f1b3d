#include <benchmark/benchmark.h>

#include "frboost/autograd.hpp"
#include "frboost/rng.hpp"
#include "frboost/tensor.hpp"

using namespace frboost;
using namespace frboost::ag;

static void BM_Gemm(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(1);
  Tensor a = Tensor::randn({n, n}, rng);
  Tensor b = Tensor::randn({n, n}, rng);
  Tensor c({n, n});
  for (auto _ : state) {
    gemm(false, false, n, n, n, 1.0, a.data(), b.data(), 0.0, c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}
BENCHMARK(BM_Gemm)->Arg(64)->Arg(256);

static void BM_ConvForward(benchmark::State& state) {
  const int res = static_cast<int>(state.range(0));
  Rng rng(2);
  Var x = Var::constant(Tensor::randn({4, 16, res, res}, rng));
  Var w = Var::constant(Tensor::randn({16, 16, 3, 3}, rng));
  for (auto _ : state) {
    NoGradGuard ng;
    Var y = conv2d(x, w, 1, 1);
    benchmark::DoNotOptimize(y.value().data());
  }
}
BENCHMARK(BM_ConvForward)->Arg(16)->Arg(32);

static void BM_ConvBackward(benchmark::State& state) {
  const int res = static_cast<int>(state.range(0));
  Rng rng(3);
  Var x = Var::param(Tensor::randn({4, 16, res, res}, rng));
  Var w = Var::param(Tensor::randn({16, 16, 3, 3}, rng));
  for (auto _ : state) {
    x.zero_grad();
    w.zero_grad();
    Var y = sum_all(square(conv2d(x, w, 1, 1)));
    backward(y);
    benchmark::DoNotOptimize(w.grad().data());
  }
}
BENCHMARK(BM_ConvBackward)->Arg(16)->Arg(32);

BENCHMARK_MAIN();
