#pragma once

// Knowledge graph: typed node tables and one CSR adjacency (plus its
// transpose) per relation; sparse multi-hop traversal; weighted similar-case
// retrieval; concept weights (IDF or learned); external code mapping.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "triage/corpus.hpp"
#include "triage/ontology.hpp"
#include "triage/types.hpp"

namespace triage::kg {

inline constexpr std::uint32_t kSnapshotSchemaVersion = 1;

enum class NodeType : std::uint8_t { case_record, age_group, gender, symptom, disease, red_flag, recommendation };
inline constexpr std::size_t kNodeTypeCount = 7;
inline constexpr std::array kConceptNodeTypes{NodeType::symptom, NodeType::disease, NodeType::red_flag};
std::string_view to_string(NodeType t);

/// Node type for an ontology concept; nullopt for anatomy/other.
std::optional<NodeType> node_type_for(const ontology::Concept& c);

/// Internal numeric code: node type in the top byte, a per-type value below.
std::uint64_t internal_code(NodeType type, std::uint64_t value);

struct NodeTable {
    std::vector<std::uint64_t> codes;
    std::vector<std::string> keys;  // case id, concept id, age group, gender or label
    std::unordered_map<std::string, std::uint32_t> index;

    std::size_t size() const { return keys.size(); }
    std::optional<std::uint32_t> find(const std::string& key) const;
};

/// Compressed sparse rows with 64-bit weights.
struct Csr {
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::vector<std::uint64_t> row_ptr{0};
    std::vector<std::uint32_t> col;
    std::vector<double> weight;

    std::size_t nnz() const { return col.size(); }
    /// Column indices sorted and unique per row, weights > 0, shapes consistent.
    void validate(const std::string& name) const;
    Csr transpose() const;
    /// From (row, col, weight) triples; duplicates have their weights summed.
    static Csr from_triples(std::uint32_t rows, std::uint32_t cols,
                            std::vector<std::tuple<std::uint32_t, std::uint32_t, double>> triples);
};

struct Relation {
    std::string name;
    NodeType source = NodeType::case_record;
    NodeType target = NodeType::case_record;
    Csr forward;   // source x target
    Csr backward;  // target x source
};

/// Relation names used by build_graph.
std::string concept_relation(NodeType concept_type, Polarity polarity);  // e.g. "negated_symptom_to_patient"
inline constexpr const char* kAgeGroupToPatient = "age_group_to_patient";
inline constexpr const char* kGenderToPatient = "gender_to_patient";
inline constexpr const char* kPatientToRecommendation = "patient_to_recommendation";

/// Per-concept-node weights, indexed like the concept node tables.
struct EdgeWeights {
    std::string source = "idf";  // idf | learned | custom
    std::map<NodeType, std::vector<double>> by_type;

    double mean() const;
    /// Finite and non-negative; ValidationError otherwise.
    void validate() const;
};

struct SparseVector {
    NodeType type = NodeType::case_record;
    std::vector<std::uint32_t> index;  // strictly increasing
    std::vector<double> value;

    std::size_t nnz() const { return index.size(); }
    bool operator==(const SparseVector&) const = default;
};

enum class Direction : std::uint8_t { forward, reverse };
struct PathStep {
    std::string relation;
    Direction direction = Direction::forward;
};

enum class Kernel : std::uint8_t { serial, parallel, automatic };

class KnowledgeGraph {
public:
    const NodeTable& nodes(NodeType t) const { return nodes_[static_cast<std::size_t>(t)]; }
    const std::vector<Relation>& relations() const { return relations_; }
    const Relation& relation(const std::string& name) const;  // PathError when unknown
    bool has_relation(const std::string& name) const { return relation_index_.contains(name); }

    const EdgeWeights& weights() const { return weights_; }
    /// Returns a copy carrying different weights; the adjacency is shared by value.
    KnowledgeGraph with_weights(EdgeWeights weights) const;

    /// Concept node of an ontology id, if it is one.
    std::optional<std::pair<NodeType, std::uint32_t>> concept_node(const std::string& concept_id) const;
    double concept_weight(NodeType t, std::uint32_t i) const;

    /// Risk label of every case node.
    const std::vector<RecommendationLabel>& case_labels() const { return case_labels_; }
    const std::vector<int>& case_age_groups() const { return case_age_group_; }
    const std::vector<Gender>& case_genders() const { return case_gender_; }
    std::size_t case_count() const { return nodes(NodeType::case_record).size(); }
    std::size_t edge_count() const;
    std::uint64_t corpus_hash() const { return corpus_hash_; }

    bool operator==(const KnowledgeGraph& o) const;

private:
    friend KnowledgeGraph build_graph(const std::vector<corpus::CaseRecord>&, const ontology::Ontology&);
    friend KnowledgeGraph load_snapshot(const std::string&);
    friend KnowledgeGraph synthetic_graph(std::size_t, std::size_t, std::size_t, std::uint64_t);
    friend std::pair<KnowledgeGraph, struct CodeCoverage> map_to_codes(const KnowledgeGraph&,
                                                                      const std::map<std::string, std::uint64_t>&);
    void index_relations();
    void derive_case_attributes();

    std::array<NodeTable, kNodeTypeCount> nodes_;
    std::vector<Relation> relations_;
    std::unordered_map<std::string, std::size_t> relation_index_;
    EdgeWeights weights_;
    std::vector<RecommendationLabel> case_labels_;
    std::vector<int> case_age_group_;
    std::vector<Gender> case_gender_;
    std::uint64_t corpus_hash_ = 0;
};

/// Records must already carry ontology ids (ingest::resolve_to_ontology);
/// IngestionError names a record whose concept is unknown. Weights default to IDF.
KnowledgeGraph build_graph(const std::vector<corpus::CaseRecord>& records, const ontology::Ontology& ontology);

/// Frontier multiplied through each step's adjacency (transpose for reverse).
/// PathError naming the step when types do not line up.
SparseVector traverse(const KnowledgeGraph& kg, const std::vector<PathStep>& path, const SparseVector& frontier,
                      Kernel kernel = Kernel::automatic);

/// Single sparse-matrix/sparse-vector products. `serial` pushes each frontier
/// entry along its out-row; `parallel` pulls each target's in-row with OpenMP.
/// Both add contributions in ascending source order, so results are bitwise equal.
SparseVector multiply_serial(const Csr& matrix, const SparseVector& x, NodeType result_type);
SparseVector multiply_parallel(const Csr& matrix, const Csr& transposed, const SparseVector& x, NodeType result_type);

SparseVector add(const SparseVector& a, const SparseVector& b);

// ---------------------------------------------------------------------------
// Similar cases

struct PatientProfile {
    std::vector<std::string> affirmed;  // ontology ids
    std::vector<std::string> denied;
    std::optional<int> age_group;
    std::optional<Gender> gender;
};

struct SimilarityConfig {
    std::size_t k = 50;
    double lambda_negative = 0.5;
    double demographic_factor = 0.25;  // times the mean concept weight
};

struct ScoredCase {
    std::uint32_t node = 0;
    std::string case_id;
    double score = 0.0;
    bool operator==(const ScoredCase&) const = default;
};

/// Candidates are the cases holding at least one affirmed concept as present;
/// ranked by score descending then case id ascending; at most k returned.
/// QueryError when no affirmed concept is given or k = 0.
std::vector<ScoredCase> similar_cases(const KnowledgeGraph& kg, const PatientProfile& profile,
                                      const SimilarityConfig& config = {}, Kernel kernel = Kernel::automatic);

// ---------------------------------------------------------------------------
// Weights

/// ln(N / df) per concept node over present mentions; 0 for unseen concepts.
EdgeWeights idf_weights(const KnowledgeGraph& kg);

struct WeightLearningConfig {
    double learning_rate = 0.5;
    int iterations = 300;
    double l2 = 1e-3;
};

/// Multinomial logistic regression of risk class on present-concept
/// indicators, full-batch gradient descent from zero. A concept's weight is
/// the spread (max - min) of its class coefficients. TrainingError when the
/// labeled cases cover fewer than two risk classes.
EdgeWeights learn_weights(const KnowledgeGraph& kg, const std::vector<std::string>& training_case_ids,
                          const WeightLearningConfig& config = {});

// ---------------------------------------------------------------------------
// External codes

struct CodeCoverage {
    std::size_t concept_nodes = 0;
    std::size_t mapped = 0;
    double fraction() const { return concept_nodes ? static_cast<double>(mapped) / static_cast<double>(concept_nodes) : 0.0; }
};

/// Table keyed by ontology concept id. MappingError on a duplicate external code.
std::pair<KnowledgeGraph, CodeCoverage> map_to_codes(const KnowledgeGraph& kg,
                                                     const std::map<std::string, std::uint64_t>& table);

/// TSV: id, code. Ids may be dictionary or ontology ids; resolved through the
/// ontology. Ids that do not resolve are skipped and counted.
std::map<std::string, std::uint64_t> load_code_table(const std::string& path, const ontology::Ontology& ontology,
                                                     std::size_t* unresolved = nullptr);

// ---------------------------------------------------------------------------
// Snapshot: "TKGS", u32 schema_version, u32 node counts per type, node tables,
// weights, then per relation the forward CSR arrays (little-endian).

void save_snapshot(const std::string& path, const KnowledgeGraph& kg);
KnowledgeGraph load_snapshot(const std::string& path);

/// Text table of node counts per type and edge counts per relation.
std::string stats_text(const KnowledgeGraph& kg);

/// Random bipartite graph for latency tests: `cases` case nodes, `concepts`
/// symptom nodes and about `edges` symptom_to_patient edges.
KnowledgeGraph synthetic_graph(std::size_t cases, std::size_t concepts, std::size_t edges, std::uint64_t seed);

}  // namespace triage::kg
