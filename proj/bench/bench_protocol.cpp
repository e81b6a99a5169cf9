// Serial vs OpenMP execution of a full scripted session, plus the tau sweep.

#include <benchmark/benchmark.h>

#include "forge/metrics.hpp"
#include "forge/protocol.hpp"

using namespace forge;

namespace {

protocol::ProtocolConfig session(int instances) {
    protocol::ProtocolConfig c;
    c.instances = instances;
    c.base_seed = 3;
    return c;
}

void BM_Protocol(benchmark::State& state, protocol::Execution execution) {
    auto c = session(int(state.range(0)));
    c.execution = execution;
    for (auto _ : state) {
        auto r = protocol::run_protocol(c);
        benchmark::DoNotOptimize(r.report.mean_return);
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_Sweep(benchmark::State& state) {
    const auto c = session(10);
    const bool parallel = state.range(0) != 0;
    for (auto _ : state) {
        auto e = metrics::sweep_tau(c, {-1.1, -2.0, -3.0, -11.0}, {std::nullopt, parallel});
        benchmark::DoNotOptimize(e.data());
    }
}

}  // namespace

BENCHMARK_CAPTURE(BM_Protocol, serial, protocol::Execution::Serial)->Arg(4)->Arg(10)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Protocol, openmp, protocol::Execution::OpenMP)->Arg(4)->Arg(10)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Sweep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
