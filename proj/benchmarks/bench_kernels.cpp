#include <benchmark/benchmark.h>

#include <map>

#include "nfk/fisher.hpp"
#include "nfk/linalg.hpp"
#include "nfk/lowrank.hpp"
#include "nfk/nn/model.hpp"

namespace {

using namespace nfk;

struct Setup {
    fisher::ContextPtr ctx;
    nn::Batch data;
};

// Untrained 64-32-10 relu classifier on Gaussian inputs; the timing of the
// kernel products does not depend on training.
const Setup& setup(std::size_t n) {
    static std::map<std::size_t, Setup> cache;
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    nn::Model m;
    m.spec = nn::ModelSpec::mlp(nn::Family::classifier, {64, 32, 10});
    m.params = nn::init_params(m.spec, RngStream(1));
    Setup s;
    RngStream rng(2);
    s.data.inputs = seeded_gaussian(n, 64, rng);
    fisher::FisherConfig fc;
    fc.seed = 3;
    s.ctx = fisher::FisherContext::build(m, s.data, fc);
    return cache.emplace(n, std::move(s)).first->second;
}

void BM_Jvp(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Setup& s = setup(n);
    fisher::FisherOperator op(s.ctx, s.data);
    RngStream rng(4);
    const Matrix m = seeded_gaussian(op.cols(), 42, rng);
    for (auto _ : state) benchmark::DoNotOptimize(op.apply_jvp(m));
    state.SetItemsProcessed(state.iterations() * static_cast<long>(n));
}
BENCHMARK(BM_Jvp)->RangeMultiplier(2)->Range(512, 4096)->Unit(benchmark::kMillisecond);

void BM_Vjp(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Setup& s = setup(n);
    fisher::FisherOperator op(s.ctx, s.data);
    RngStream rng(5);
    const Matrix w = seeded_gaussian(n, 42, rng);
    for (auto _ : state) benchmark::DoNotOptimize(op.apply_vjp(w));
    state.SetItemsProcessed(state.iterations() * static_cast<long>(n));
}
BENCHMARK(BM_Vjp)->RangeMultiplier(2)->Range(512, 4096)->Unit(benchmark::kMillisecond);

void BM_QrThin(benchmark::State& state) {
    RngStream rng(6);
    const Matrix a = seeded_gaussian(static_cast<std::size_t>(state.range(0)), 42, rng);
    for (auto _ : state) benchmark::DoNotOptimize(qr_thin(a));
}
BENCHMARK(BM_QrThin)->RangeMultiplier(4)->Range(1024, 65536)->Unit(benchmark::kMicrosecond);

void BM_TruncatedSvd(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Setup& s = setup(n);
    fisher::FisherOperator op(s.ctx, s.data);
    lowrank::SvdOptions o;
    o.k = 32;
    o.seed = 7;
    for (auto _ : state) benchmark::DoNotOptimize(lowrank::truncated_svd(op, o));
    state.SetComplexityN(static_cast<long>(n));
}
BENCHMARK(BM_TruncatedSvd)->RangeMultiplier(2)->Range(512, 4096)->Unit(benchmark::kMillisecond)->Complexity();

}  // namespace

BENCHMARK_MAIN();
