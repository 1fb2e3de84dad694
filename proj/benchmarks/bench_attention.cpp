// Microbenchmarks for the temporal-window encoder: runtime and retained
// memory as the video grows, windowed vs full self-attention.
#include <benchmark/benchmark.h>

#include "vitkit/eval.hpp"

using namespace vita;

namespace {

ModelConfig bench_model(i64 window) {
    ModelConfig m;
    m.frame_queries = 20;
    m.encoder_layers = 3;
    m.window = window;
    return m;
}

ObjectTokenSet<float> make_tokens(const ModelConfig& cfg, i64 frames, std::uint64_t seed) {
    ParameterStore<float> ps;
    Rng rng(seed);
    ObjectEncoder<float> enc(cfg, ps, rng);
    FrameQuerySet<float> q;
    q.queries = Tensor<float>::zeros({frames, cfg.frame_queries, cfg.channels});
    std::normal_distribution<double> d(0.0, 1.0);
    for (auto& v : q.queries.data()) v = static_cast<float>(d(rng));
    return enc.tokenize(q);
}

// encoder forward over T frames with the given temporal window; window >= T
// degenerates to full self-attention over all T*N_f tokens
void run_encoder(benchmark::State& state, i64 window_of(i64)) {
    const i64 frames = state.range(0);
    const i64 window = window_of(frames);
    ModelConfig cfg = bench_model(window);
    ParameterStore<float> ps;
    Rng rng(1);
    ObjectEncoder<float> enc(cfg, ps, rng);
    NoGradGuard<float> guard(ps);
    ObjectTokenSet<float> tokens = make_tokens(cfg, frames, 2);
    for (auto _ : state) {
        auto out = enc.forward(tokens);
        benchmark::DoNotOptimize(out.tokens.data().data());
    }
    state.SetComplexityN(frames);
    state.counters["tokens"] = static_cast<double>(tokens.tokens.shape()[0]);
}

void BM_WindowedAttention(benchmark::State& state) {
    run_encoder(state, [](i64) -> i64 { return 6; });
}

void BM_FullAttention(benchmark::State& state) {
    run_encoder(state, [](i64 frames) -> i64 { return frames; });
}

// peak float count of one encoder forward, reported instead of wall time
void BM_EncoderPeakFloats(benchmark::State& state) {
    const i64 frames = state.range(0);
    ModelConfig cfg = bench_model(state.range(1) == 0 ? 6 : frames);
    ParameterStore<float> ps;
    Rng rng(1);
    ObjectEncoder<float> enc(cfg, ps, rng);
    NoGradGuard<float> guard(ps);
    ObjectTokenSet<float> tokens = make_tokens(cfg, frames, 2);
    auto& meter = MemoryMeter::instance();
    for (auto _ : state) {
        meter.reset_peak();
        auto out = enc.forward(tokens);
        benchmark::DoNotOptimize(out.tokens.data().data());
        state.counters["peak_floats"] = static_cast<double>(meter.peak());
    }
}

// closed-form retained memory per the report, across video length
void BM_MemoryReport(benchmark::State& state) {
    const ModelConfig cfg;
    const i64 frames = state.range(0);
    i64 keys = 0, dense = 0;
    for (auto _ : state) {
        MemoryReport r = memory_report(cfg, frames, 64, 64, 1.0);
        keys = r.decoder_keys;
        dense = r.dense_counterfactual_keys;
        benchmark::DoNotOptimize(keys);
        benchmark::DoNotOptimize(dense);
    }
    state.counters["decoder_keys"] = static_cast<double>(keys);
    state.counters["dense_keys"] = static_cast<double>(dense);
}

}  // namespace

BENCHMARK(BM_WindowedAttention)->Arg(6)->Arg(12)->Arg(24)->Arg(48)->Arg(96)->Complexity(benchmark::oN);
BENCHMARK(BM_FullAttention)->Arg(6)->Arg(12)->Arg(24)->Arg(48)->Arg(96)->Complexity(benchmark::oNSquared);
BENCHMARK(BM_EncoderPeakFloats)->Args({24, 0})->Args({96, 0})->Args({24, 1})->Args({96, 1});
BENCHMARK(BM_MemoryReport)->Arg(36)->Arg(360)->Arg(3600);

BENCHMARK_MAIN();
