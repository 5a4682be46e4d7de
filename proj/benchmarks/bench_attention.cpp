#include <benchmark/benchmark.h>

#include <random>

#include "ssa/attention.hpp"
#include "ssa/sinkhorn.hpp"

namespace {

ssa::Tensor randn(ssa::Shape shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d;
    std::vector<double> v(ssa::numel(shape));
    for (auto& x : v) x = d(rng);
    return ssa::Tensor(std::move(shape), std::move(v));
}

void BM_Sinkhorn(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    ssa::SinkhornConfig cfg;
    cfg.gumbel = false;
    cfg.n_iters = static_cast<int>(state.range(1));
    const ssa::Tensor r = randn({n, n}, 1);
    ssa::NoGradGuard no_grad;
    for (auto _ : state) benchmark::DoNotOptimize(ssa::sinkhorn_normalize(r, cfg).logits.data().data());
}
BENCHMARK(BM_Sinkhorn)->Args({16, 5})->Args({16, 20})->Args({64, 5});

// Forward pass of one attention layer, batch 4, d = 32 (2 heads), b = 16.
void BM_Multihead(benchmark::State& state) {
    ssa::AttentionConfig cfg;
    cfg.variant = static_cast<ssa::AttentionVariant>(state.range(0));
    cfg.block_size = 16;
    cfg.n_heads = 2;
    cfg.head_dim = 16;
    cfg.sinkhorn.gumbel = false;
    const auto len = static_cast<std::size_t>(state.range(1));
    std::mt19937_64 rng(2);
    const ssa::AttentionParams p = ssa::AttentionParams::init(cfg, len / cfg.block_size, rng);
    const ssa::Tensor x = randn({4, len, 32}, 3);
    ssa::NoGradGuard no_grad;
    for (auto _ : state) benchmark::DoNotOptimize(ssa::multihead(x, cfg, p, {}).y.data().data());
    state.SetLabel(std::string(ssa::to_string(cfg.variant)));
}
BENCHMARK(BM_Multihead)
    ->ArgsProduct({{static_cast<long>(ssa::AttentionVariant::dense), static_cast<long>(ssa::AttentionVariant::local),
                    static_cast<long>(ssa::AttentionVariant::sinkhorn), static_cast<long>(ssa::AttentionVariant::sortcut),
                    static_cast<long>(ssa::AttentionVariant::mixture)},
                   {256, 1024}})
    ->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
