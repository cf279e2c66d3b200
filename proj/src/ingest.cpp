#include "triage/ingest.hpp"

#include <map>
#include <set>

namespace triage::ingest {

namespace {

int polarity_rank(Polarity p) {
    switch (p) {
        case Polarity::present: return 0;
        case Polarity::historical: return 1;
        case Polarity::negated: return 2;
    }
    return 3;
}

}  // namespace

RecordAnnotation annotate_record(const std::string& text_in, const text::TextResources& resources,
                                 const RelationModel& model) {
    RecordAnnotation out;
    std::map<std::string, std::size_t> slot;  // concept -> index in out.mentions
    std::map<std::pair<std::string, std::string>, std::uint64_t> surfaces, relations;

    for (const auto& s : text::annotate(text_in, resources)) {
        out.ambiguous += s.ambiguous_abbreviations.size();
        auto rels = s.relations;
        out.rule_relations += rels.size();
        if (model.params && model.vocab) {
            const auto extra = relext::extract_relations_model(s.tokens, s.mentions, rels, *model.params, *model.vocab);
            out.model_relations += extra.size();
            rels.insert(rels.end(), extra.begin(), extra.end());
        }
        std::map<int, std::string> location_of;  // head start -> anatomy concept
        std::set<int> attached;                  // anatomy starts used as a location
        for (const auto& r : rels) {
            if (r.relation != text::RelationKind::located_in) continue;
            location_of.emplace(r.e1.start, r.e2.concept_id);
            attached.insert(r.e2.start);
            ++relations[{r.e1.concept_id, r.e2.concept_id}];
        }
        for (const auto& m : s.mentions) {
            ++surfaces[{text::mention_surface(s.tokens, m), m.concept_id}];
            if (m.type == SemanticType::anatomy && attached.contains(m.start)) continue;
            std::optional<std::string> loc;
            if (const auto it = location_of.find(m.start); it != location_of.end()) loc = it->second;
            const auto [it, fresh] = slot.emplace(m.concept_id, out.mentions.size());
            if (fresh) {
                out.mentions.push_back({m.concept_id, m.polarity, loc});
                continue;
            }
            auto& existing = out.mentions[it->second];
            if (polarity_rank(m.polarity) < polarity_rank(existing.polarity)) {
                existing.polarity = m.polarity;
                if (loc) existing.body_location = loc;
            } else if (!existing.body_location && loc && m.polarity == existing.polarity) {
                existing.body_location = loc;
            }
        }
    }
    for (const auto& [k, c] : surfaces) out.surfaces.push_back({k.first, k.second, c});
    for (const auto& [k, c] : relations) out.relations.push_back({k.first, k.second, c});
    return out;
}

IngestResult ingest(const std::vector<corpus::CaseRecord>& records, const text::TextResources& resources,
                    const RelationModel& model) {
    std::vector<RecordAnnotation> per(records.size());
    const auto n = static_cast<std::ptrdiff_t>(records.size());
#pragma omp parallel for schedule(dynamic, 64)
    for (std::ptrdiff_t i = 0; i < n; ++i)
        per[static_cast<std::size_t>(i)] = annotate_record(records[static_cast<std::size_t>(i)].free_text, resources, model);

    IngestResult result;
    result.report.records_in = records.size();
    for (std::size_t i = 0; i < records.size(); ++i) {
        auto& a = per[i];
        result.annotations.surfaces.insert(result.annotations.surfaces.end(), a.surfaces.begin(), a.surfaces.end());
        result.annotations.relations.insert(result.annotations.relations.end(), a.relations.begin(),
                                            a.relations.end());
        result.report.rule_relations += a.rule_relations;
        result.report.model_relations += a.model_relations;
        result.report.ambiguous_abbreviations += a.ambiguous;
        if (a.mentions.empty()) {
            ++result.report.dropped_empty;
            continue;
        }
        auto r = records[i];
        r.mentions = std::move(a.mentions);
        result.report.mentions += r.mentions.size();
        result.records.push_back(std::move(r));
    }
    result.annotations.normalize();
    result.report.records_out = result.records.size();
    return result;
}

std::vector<corpus::CaseRecord> resolve_to_ontology(const std::vector<corpus::CaseRecord>& records,
                                                    const ontology::Ontology& ontology) {
    std::vector<corpus::CaseRecord> out;
    out.reserve(records.size());
    for (const auto& rec : records) {
        auto r = rec;
        std::vector<corpus::ConceptMention> merged;
        std::map<std::string, std::size_t> slot;
        for (const auto& m : rec.mentions) {
            const auto id = ontology.resolve(m.concept_id);
            if (!id) throw IngestionError("record " + rec.id + ": concept " + m.concept_id + " not in the ontology");
            std::optional<std::string> loc;
            if (m.body_location) {
                loc = ontology.resolve(*m.body_location);
                if (!loc)
                    throw IngestionError("record " + rec.id + ": location " + *m.body_location + " not in the ontology");
            }
            // Two dictionary ids can fold into one concept.
            const auto [it, fresh] = slot.emplace(*id, merged.size());
            if (fresh) {
                merged.push_back({*id, m.polarity, loc});
            } else if (polarity_rank(m.polarity) < polarity_rank(merged[it->second].polarity)) {
                merged[it->second].polarity = m.polarity;
                if (loc) merged[it->second].body_location = loc;
            }
        }
        r.mentions = std::move(merged);
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace triage::ingest
