#pragma once

// Glue from a raw corpus to a knowledge graph: load shipped resources, run
// the NLP pass, build (and coarsen) the ontology, resolve records, build the graph.

#include <map>
#include <string>
#include <vector>

#include "triage/corpus.hpp"
#include "triage/ingest.hpp"
#include "triage/kg.hpp"
#include "triage/ontology.hpp"
#include "triage/textproc.hpp"

namespace triage::pipeline {

struct Resources {
    text::TextResources text;
    ontology::SimpleLexicon lexicon;
    std::vector<ontology::SeedEdge> seeds;
    std::map<std::string, std::string> merge_map;  // empty when merge_map.tsv is absent

    static Resources load(const std::string& data_dir);
};

ontology::Ontology build_ontology(const ontology::AnnotationSet& annotations, const Resources& resources,
                                  bool apply_merge_map = true);

struct Timings {
    double ingest_seconds = 0.0;
    double ontology_seconds = 0.0;
    double graph_seconds = 0.0;
    double total() const { return ingest_seconds + ontology_seconds + graph_seconds; }
};

struct Built {
    ingest::IngestReport report;
    ontology::AnnotationSet annotations;
    ontology::Ontology ontology;
    std::vector<corpus::CaseRecord> records;  // mentions carry ontology ids
    kg::KnowledgeGraph graph;
    Timings timings;
};

/// NLP pass plus ontology resolution of records outside the build corpus
/// (held-out splits, ground-truth suites). Records without mentions are dropped.
std::vector<corpus::CaseRecord> annotate(const std::vector<corpus::CaseRecord>& records, const Resources& resources,
                                         const ontology::Ontology& ontology, const ingest::RelationModel& model = {});

Built run(const std::vector<corpus::CaseRecord>& corpus, const Resources& resources,
          const ingest::RelationModel& model = {});

}  // namespace triage::pipeline
