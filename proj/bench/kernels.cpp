// Serial reference kernels against their OpenMP counterparts.

#include <set>

#include <benchmark/benchmark.h>
#include <omp.h>
#include <spdlog/spdlog.h>

#include "triage/kg.hpp"
#include "triage/pipeline.hpp"

using namespace triage;

namespace {

const kg::KnowledgeGraph& big_graph() {
    static const auto g = kg::synthetic_graph(200000, 5000, 1001000, 77);
    return g;
}

kg::SparseVector frontier(std::size_t concepts, std::size_t nnz, std::uint64_t seed) {
    Rng rng(seed);
    std::set<std::uint32_t> picked;
    while (picked.size() < nnz) picked.insert(static_cast<std::uint32_t>(uniform_index(rng, concepts)));
    return {kg::NodeType::symptom, {picked.begin(), picked.end()}, std::vector<double>(nnz, 1.0)};
}

const pipeline::Resources& shipped() {
    static const auto r = pipeline::Resources::load(TRIAGE_DATA_DIR);
    return r;
}

const pipeline::Built& world() {
    static const auto b = [] {
        const auto profile = corpus::load_profile(std::string(TRIAGE_DATA_DIR) + "/profile.json");
        return pipeline::run(corpus::generate_corpus(profile, 10000, 2024), shipped());
    }();
    return b;
}

// One step of sparse frontier times adjacency. Arg 0: frontier size.
void BM_MultiplySerial(benchmark::State& state) {
    const auto& rel = big_graph().relation(kg::concept_relation(kg::NodeType::symptom, Polarity::present));
    const auto x = frontier(5000, static_cast<std::size_t>(state.range(0)), 1);
    for (auto _ : state) benchmark::DoNotOptimize(kg::multiply_serial(rel.forward, x, kg::NodeType::case_record));
}

void BM_MultiplyParallel(benchmark::State& state) {
    const auto& rel = big_graph().relation(kg::concept_relation(kg::NodeType::symptom, Polarity::present));
    const auto x = frontier(5000, static_cast<std::size_t>(state.range(0)), 1);
    for (auto _ : state)
        benchmark::DoNotOptimize(kg::multiply_parallel(rel.forward, rel.backward, x, kg::NodeType::case_record));
}

void traverse_with(benchmark::State& state, kg::Kernel kernel) {
    const std::string rel = kg::concept_relation(kg::NodeType::symptom, Polarity::present);
    const auto x = frontier(5000, 5, 2);
    for (auto _ : state)
        benchmark::DoNotOptimize(
            kg::traverse(big_graph(), {{rel, kg::Direction::forward}, {rel, kg::Direction::reverse}}, x, kernel));
}
void BM_TraverseSerial(benchmark::State& state) { traverse_with(state, kg::Kernel::serial); }
void BM_TraverseParallel(benchmark::State& state) { traverse_with(state, kg::Kernel::parallel); }

void similar_with(benchmark::State& state, kg::Kernel kernel) {
    const auto& b = world();
    kg::PatientProfile p;
    for (const auto& m : b.records.front().mentions)
        if (m.polarity == Polarity::present) p.affirmed.push_back(m.concept_id);
    p.age_group = 2;
    p.gender = Gender::female;
    for (auto _ : state) benchmark::DoNotOptimize(kg::similar_cases(b.graph, p, {}, kernel));
}
void BM_SimilarCasesSerial(benchmark::State& state) { similar_with(state, kg::Kernel::serial); }
void BM_SimilarCasesParallel(benchmark::State& state) { similar_with(state, kg::Kernel::parallel); }

// Record annotation loop. Arg 0: OpenMP threads (1 is the serial reference).
void BM_Ingest(benchmark::State& state) {
    const auto profile = corpus::load_profile(std::string(TRIAGE_DATA_DIR) + "/profile.json");
    const auto records = corpus::generate_corpus(profile, 2000, 5);
    const int saved = omp_get_max_threads();
    omp_set_num_threads(static_cast<int>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(ingest::ingest(records, shipped().text));
    omp_set_num_threads(saved);
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(records.size()));
}

}  // namespace

BENCHMARK(BM_MultiplySerial)->Arg(5)->Arg(500)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_MultiplyParallel)->Arg(5)->Arg(500)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_TraverseSerial)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_TraverseParallel)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_SimilarCasesSerial)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_SimilarCasesParallel)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Ingest)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);

int main(int argc, char** argv) {
    spdlog::set_level(spdlog::level::warn);
    benchmark::Initialize(&argc, argv);
    if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
    benchmark::RunSpecifiedBenchmarks();
    benchmark::Shutdown();
    return 0;
}
