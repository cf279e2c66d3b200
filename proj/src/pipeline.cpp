#include "triage/pipeline.hpp"

#include <chrono>
#include <filesystem>

#include <spdlog/spdlog.h>

namespace triage::pipeline {

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

Resources Resources::load(const std::string& data_dir) {
    Resources r;
    r.text = text::TextResources::load(data_dir);
    r.lexicon = ontology::SimpleLexicon::load(data_dir + "/lexicon.tsv");
    for (const auto* name : {"/seed_anatomy.tsv", "/seed_symptom.tsv"}) {
        const auto seeds = ontology::load_seed(data_dir + name, r.lexicon);
        r.seeds.insert(r.seeds.end(), seeds.begin(), seeds.end());
    }
    if (std::filesystem::exists(data_dir + "/merge_map.tsv"))
        r.merge_map = ontology::load_merge_map(data_dir + "/merge_map.tsv");
    return r;
}

ontology::Ontology build_ontology(const ontology::AnnotationSet& annotations, const Resources& resources,
                                  bool apply_merge_map) {
    ontology::OntologyInputs in;
    in.dictionary = &resources.text.dictionary;
    in.lexicon = resources.lexicon;
    in.seeds = resources.seeds;
    auto o = ontology::build_ontology(annotations, in);
    if (apply_merge_map && !resources.merge_map.empty()) o = ontology::coarsen(o, resources.merge_map);
    return o;
}

std::vector<corpus::CaseRecord> annotate(const std::vector<corpus::CaseRecord>& records, const Resources& resources,
                                         const ontology::Ontology& ontology, const ingest::RelationModel& model) {
    return ingest::resolve_to_ontology(ingest::ingest(records, resources.text, model).records, ontology);
}

Built run(const std::vector<corpus::CaseRecord>& corpus, const Resources& resources, const ingest::RelationModel& model) {
    Built b;
    auto start = std::chrono::steady_clock::now();
    auto ingested = ingest::ingest(corpus, resources.text, model);
    b.report = ingested.report;
    b.annotations = std::move(ingested.annotations);
    b.timings.ingest_seconds = seconds_since(start);

    start = std::chrono::steady_clock::now();
    b.ontology = build_ontology(b.annotations, resources);
    b.timings.ontology_seconds = seconds_since(start);

    start = std::chrono::steady_clock::now();
    b.records = ingest::resolve_to_ontology(ingested.records, b.ontology);
    b.graph = kg::build_graph(b.records, b.ontology);
    b.timings.graph_seconds = seconds_since(start);
    spdlog::info("pipeline: {} records in, {} out, {} concepts, {} edges, {:.2f}s", b.report.records_in,
                 b.report.records_out, b.ontology.size(), b.graph.edge_count(), b.timings.total());
    return b;
}

}  // namespace triage::pipeline
