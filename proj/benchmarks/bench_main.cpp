#include <benchmark/benchmark.h>

#include <vector>

#include "pivotmerge/log.hpp"
#include "pivotmerge/pivot.hpp"
#include "pivotmerge/random.hpp"
#include "pivotmerge/synth.hpp"

using namespace pivotmerge;

namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t stream) {
    const CounterStream rng(17, stream);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(static_cast<std::uint64_t>(i));
    return m;
}

void BM_ThinSvd(benchmark::State& state) {
    const Matrix m = gaussian(state.range(0), state.range(0) / 2, 0);
    for (auto _ : state) benchmark::DoNotOptimize(thin_svd(m));
}
BENCHMARK(BM_ThinSvd)->Arg(32)->Arg(128)->Arg(512);

void BM_Ties(benchmark::State& state) {
    std::vector<Matrix> mats;
    for (std::uint64_t i = 0; i < 5; ++i) mats.push_back(gaussian(state.range(0), state.range(0), i));
    const std::vector<double> w(5, 1.0);
    for (auto _ : state) benchmark::DoNotOptimize(ties(mats, w, 0.2));
}
BENCHMARK(BM_Ties)->Arg(64)->Arg(256);

void BM_PivotMerge(benchmark::State& state) {
    set_warning_sink({});
    SynthSpec spec;
    const auto d = static_cast<std::size_t>(state.range(0));
    spec.dims = {{d, d}, {d, d}};
    spec.core_rank = 4;
    spec.residual_scale = 0.5;
    const SynthResult g = generate(spec);
    ScoreTable scores;
    for (const auto& e : g.experts) scores.expert_ids.push_back(e.id);
    scores.scores = Matrix::Zero(static_cast<Eigen::Index>(g.experts.size()), 2);
    PivotConfig config;
    config.rank = 4;
    for (auto _ : state) benchmark::DoNotOptimize(pivot_merge(g.experts, g.base, scores, config));
}
BENCHMARK(BM_PivotMerge)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
