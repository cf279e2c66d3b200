#pragma once

// NLP pass over a corpus: every record's free text is annotated and its
// mention list replaced by what the pipeline extracted. Also collects the
// surface/relation annotation counts the ontology build consumes.

#include <cstddef>
#include <vector>

#include "triage/corpus.hpp"
#include "triage/ontology.hpp"
#include "triage/relext.hpp"
#include "triage/textproc.hpp"

namespace triage::ingest {

struct RelationModel {
    const relext::CnnParams* params = nullptr;
    const relext::Vocab* vocab = nullptr;
};

struct IngestReport {
    std::size_t records_in = 0;
    std::size_t records_out = 0;
    std::size_t dropped_empty = 0;  // no mention found in the text
    std::size_t mentions = 0;
    std::size_t rule_relations = 0;
    std::size_t model_relations = 0;
    std::size_t ambiguous_abbreviations = 0;
};

struct IngestResult {
    std::vector<corpus::CaseRecord> records;
    ontology::AnnotationSet annotations;
    IngestReport report;
};

/// Mentions of one record's text, deduplicated by concept (first occurrence
/// keeps its position; present beats historical beats negated). An anatomy
/// mention that is the location of a relation becomes that head's
/// body_location; other anatomy mentions are kept as mentions of their own.
struct RecordAnnotation {
    std::vector<corpus::ConceptMention> mentions;
    std::vector<ontology::Annotation> surfaces;
    std::vector<ontology::RelationAnnotation> relations;
    std::size_t rule_relations = 0;
    std::size_t model_relations = 0;
    std::size_t ambiguous = 0;
};
RecordAnnotation annotate_record(const std::string& text, const text::TextResources& resources,
                                 const RelationModel& model = {});

/// Records are annotated in parallel and merged in input order.
IngestResult ingest(const std::vector<corpus::CaseRecord>& records, const text::TextResources& resources,
                    const RelationModel& model = {});

/// Rewrites mention concept ids (and locations) to ontology ids. Throws
/// IngestionError naming the record id when an id does not resolve.
std::vector<corpus::CaseRecord> resolve_to_ontology(const std::vector<corpus::CaseRecord>& records,
                                                    const ontology::Ontology& ontology);

}  // namespace triage::ingest
