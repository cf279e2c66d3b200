#pragma once

// Concept ontology learned from corpus annotations: compound splitting into
// simple entities, two-stage clustering, taxonomy from seed edge lists,
// granularity coarsening and a diff-able text export.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "triage/textproc.hpp"
#include "triage/types.hpp"

namespace triage::ontology {

inline constexpr std::uint32_t kOntologySchemaVersion = 1;

/// Simple entities: surface -> representative entity id(s). A representative
/// field may hold several space-separated ids (cephalgie -> kopf schmerz).
class SimpleLexicon {
public:
    SimpleLexicon() = default;
    explicit SimpleLexicon(std::map<std::string, std::vector<std::string>> entries, std::size_t min_length = 3);

    /// TSV: surface, representative(s). Surfaces are normalized.
    static SimpleLexicon load(const std::string& path, std::size_t min_length = 3);

    const std::vector<std::string>* find(const std::string& surface) const;
    std::size_t min_length() const { return min_length_; }
    std::size_t max_length() const { return max_length_; }
    const std::map<std::string, std::vector<std::string>>& entries() const { return entries_; }

private:
    std::map<std::string, std::vector<std::string>> entries_;
    std::size_t min_length_ = 3;
    std::size_t max_length_ = 0;
};

struct SplitConfig {
    std::string linking_chars = "sne";
};

/// Longest-first left-to-right decomposition of one normalized word into
/// lexicon surfaces, optionally separated by one linking character; returns the
/// representative ids in order, or {} when the word cannot be fully covered.
std::vector<std::string> split_compound(const std::string& term, const SimpleLexicon& lexicon,
                                        const SplitConfig& config = {});

/// Sorted, deduplicated block set of a normalized expression: every word is
/// split; uncovered words are kept as atomic blocks; connectives are skipped.
std::vector<std::string> semantic_blocks(const std::string& expression, const SimpleLexicon& lexicon,
                                         const text::WordSet& connectives = {"in", "im", "am", "an"},
                                         const SplitConfig& config = {});

/// "K" + 16 hex digits of the FNV-1a hash of the sorted blocks joined by '+'.
std::string concept_id_for(const std::vector<std::string>& sorted_blocks);

// ---------------------------------------------------------------------------

enum class EdgeKind : std::uint8_t { child_of, located_in, negation_of, characterization_of, specification_of };
std::string_view to_string(EdgeKind k);
EdgeKind parse_edge_kind(std::string_view s);

struct Edge {
    std::string from;  // child for child_of
    EdgeKind kind = EdgeKind::child_of;
    std::string to;
    auto operator<=>(const Edge&) const = default;
};

struct Concept {
    std::string id;
    std::string canonical;                // lexicographically smallest surface
    std::set<std::string> synonyms;       // normalized surfaces
    SemanticType type = SemanticType::other;
    std::vector<std::string> blocks;      // sorted simple-entity ids
    ConceptFlags flags;
    std::set<std::string> members;        // dictionary concept ids merged here
    std::uint64_t support = 0;            // annotation occurrences

    bool operator==(const Concept&) const = default;
};

class Ontology {
public:
    Ontology() = default;
    /// Validates every invariant; throws ValidationError / TaxonomyError.
    Ontology(std::vector<Concept> concepts, std::vector<Edge> edges);

    const std::vector<Concept>& concepts() const { return concepts_; }  // sorted by id
    const std::vector<Edge>& edges() const { return edges_; }           // sorted, unique
    std::size_t size() const { return concepts_.size(); }

    const Concept* find(const std::string& id) const;
    const Concept& at(const std::string& id) const;  // LookupError
    /// Ontology id for an ontology id or a member dictionary id.
    std::optional<std::string> resolve(const std::string& id) const;
    /// Ontology id whose synonym set holds this normalized surface.
    std::optional<std::string> by_surface(const std::string& surface) const;

    const std::vector<std::string>& parents(const std::string& id) const;
    const std::vector<std::string>& children(const std::string& id) const;
    std::vector<Edge> edges_of(EdgeKind kind) const;

    /// All transitive children, excluding `id`. LookupError for unknown ids.
    std::set<std::string> descendants(const std::string& id) const;
    std::set<std::string> ancestors(const std::string& id) const;

    bool operator==(const Ontology& o) const { return concepts_ == o.concepts_ && edges_ == o.edges_; }

private:
    std::vector<Concept> concepts_;
    std::vector<Edge> edges_;
    std::unordered_map<std::string, std::size_t> index_;
    std::unordered_map<std::string, std::string> alias_;
    std::unordered_map<std::string, std::string> surface_;
    std::unordered_map<std::string, std::vector<std::string>> parents_, children_;
};

/// Topological order of the child_of graph (parents first); throws
/// TaxonomyError naming a cycle path when there is none.
std::vector<std::string> topological_order(const std::set<std::string>& nodes, const std::vector<Edge>& child_of);

/// Removes every child_of edge implied by a longer path.
std::vector<Edge> transitive_reduction(const std::vector<Edge>& child_of);

// ---------------------------------------------------------------------------
// Construction

/// One distinct annotated surface with the dictionary entry it matched.
struct Annotation {
    std::string surface;        // normalized, space-joined
    std::string dictionary_id;
    std::uint64_t count = 1;
    bool operator==(const Annotation&) const = default;
};

/// located_in pair observed in the corpus (dictionary ids).
struct RelationAnnotation {
    std::string head_id;
    std::string location_id;
    std::uint64_t count = 1;
    bool operator==(const RelationAnnotation&) const = default;
};

struct AnnotationSet {
    std::vector<Annotation> surfaces;
    std::vector<RelationAnnotation> relations;

    /// TSV rows "surface <s> <dict id> <count>" and "located_in <e1> <e2> <count>".
    static AnnotationSet load(const std::string& path);
    void save(const std::string& path) const;
    /// Adds every dictionary synonym with count 0 so unseen entries still get a concept.
    void add_dictionary(const text::Dictionary& dictionary);
    /// Merges duplicate rows (summing counts) and sorts.
    void normalize();
};

struct SeedEdge {
    std::string child;
    std::string parent;
    EdgeKind kind = EdgeKind::child_of;
};

/// Seed file: child, parent, relation (child_of | negation_of). Terms must
/// reduce to a single simple entity under `lexicon`, else ConfigError.
std::vector<SeedEdge> load_seed(const std::string& path, const SimpleLexicon& lexicon);

struct ClusterConfig {
    SplitConfig split;
    text::WordSet connectives{"in", "im", "am", "an"};
};

/// Stage 1 groups surfaces of one dictionary entry, stage 2 groups surfaces
/// with equal block sets. Each group becomes a Concept; its blocks are those of
/// the member with the fewest atomic blocks, then fewest blocks, then smallest key.
/// ClusteringConflict when a group mixes semantic types.
std::vector<Concept> cluster_concepts(const std::vector<Annotation>& annotations, const text::Dictionary& dictionary,
                                      const SimpleLexicon& lexicon, const ClusterConfig& config = {});

/// child_of edges: A is a child of B when B's blocks map injectively onto A's
/// blocks, each onto itself or a seed descendant, and the block sets differ.
/// Transitively reduced; TaxonomyError on cycles.
std::vector<Edge> build_taxonomy(const std::vector<Concept>& concepts, const std::vector<SeedEdge>& seeds);

/// negation_of edges: A's blocks equal B's with one block replaced by a seed
/// negation partner.
std::vector<Edge> build_negations(const std::vector<Concept>& concepts, const std::vector<SeedEdge>& seeds);

struct OntologyInputs {
    const text::Dictionary* dictionary = nullptr;
    SimpleLexicon lexicon;
    std::vector<SeedEdge> seeds;
    ClusterConfig cluster;
};

/// Full build: cluster, taxonomy, negation and observed located_in edges.
Ontology build_ontology(const AnnotationSet& annotations, const OntologyInputs& inputs);

/// Folds fine concepts into coarse ones. Ids may be ontology or dictionary ids.
/// LookupError on unknown ids, MappingError when a target is itself merged,
/// TaxonomyError with the cycle path when the result would be cyclic.
Ontology coarsen(const Ontology& ontology, const std::map<std::string, std::string>& merge_map);

/// TSV: fine, coarse.
std::map<std::string, std::string> load_merge_map(const std::string& path);

// ---------------------------------------------------------------------------
// Export / import: "schema_version", then a [concepts] and an [edges] section,
// tab-separated and sorted by id.

std::string export_text(const Ontology& ontology);
Ontology import_text(const std::string& content);
void save_ontology(const std::string& path, const Ontology& ontology);
Ontology load_ontology(const std::string& path);

struct OntologyStats {
    std::size_t concepts = 0;
    std::size_t surfaces = 0;
    std::uint64_t annotations = 0;
    std::size_t dictionary_entries = 0;
    std::map<std::string, std::size_t> edges_by_kind;
    double surfaces_per_concept = 0.0;
    double annotations_per_concept = 0.0;
};
OntologyStats stats(const Ontology& ontology);

}  // namespace triage::ontology
