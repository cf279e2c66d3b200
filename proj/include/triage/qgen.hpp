#pragma once

// Question generation: pseudo-relevance-feedback rankers over the case base,
// a masked-concept neural predictor, the inverse-frequency masking protocol,
// Acc@k evaluation and ontology-pruned next-question selection.

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "triage/kg.hpp"
#include "triage/ontology.hpp"

namespace triage::qgen {

inline constexpr double kSmoothing = 1e-6;

enum class Method : std::uint8_t { frequency, bim, chi, kld, rsv, neural };
inline constexpr std::array kAllMethods{Method::frequency, Method::bim, Method::chi,
                                        Method::kld,       Method::rsv, Method::neural};
std::string_view to_string(Method m);
Method parse_method(std::string_view s);  // ConfigError on unknown names

/// Concept nodes of a graph, ordered by concept id (the tie-break order).
struct ConceptVocab {
    std::vector<std::string> ids;
    std::vector<std::pair<kg::NodeType, std::uint32_t>> nodes;
    std::unordered_map<std::string, std::uint32_t> index;

    static ConceptVocab from_graph(const kg::KnowledgeGraph& graph);
    std::size_t size() const { return ids.size(); }
    std::optional<std::uint32_t> find(const std::string& id) const;
};

// ---------------------------------------------------------------------------
// Rankers

/// (count + eps) / (size + 2 eps): stays inside (0, 1) at both ends.
double smoothed(double count, double size, double eps = kSmoothing);

double bim_score(double p_relevant, double p_all);
double chi_score(double p_relevant, double p_all);
double kld_score(double p_relevant, double p_all);
/// weight_sum is the sum over relevant records of w(s, r).
double rsv_score(double weight_sum, double p_relevant, double p_all);

/// Occurrence counts of every vocabulary concept in the relevant cases and in
/// the whole case base (present mentions), plus each concept's term weight.
struct RelevantSet {
    std::vector<std::uint32_t> cases;  // case nodes
    std::size_t total_cases = 0;
    std::vector<double> relevant_count;
    std::vector<double> total_count;
    std::vector<double> term_weight;
};
RelevantSet relevant_set(const kg::KnowledgeGraph& graph, const ConceptVocab& vocab,
                         const std::vector<std::uint32_t>& case_nodes);

/// Score of every vocabulary concept. Not defined for Method::neural.
std::vector<double> rank_scores(Method method, const RelevantSet& relevant);

/// Indices sorted by score descending then index ascending, skipping `exclude`.
std::vector<std::uint32_t> top_k(const std::vector<double>& scores, std::size_t k,
                                 const std::vector<char>& exclude = {});

// ---------------------------------------------------------------------------
// Masked predictor

struct PredictorConfig {
    int hidden = 64;
    int epochs = 12;
    int batch_size = 32;
    double learning_rate = 5e-3;
    double init_scale = 0.05;
    std::uint64_t seed = 7;
};

/// Multi-hot concepts -> relu hidden layer -> softmax over the vocabulary.
struct MaskedPredictor {
    std::vector<std::string> vocab;
    Eigen::MatrixXd input_weights;   // hidden x vocab
    Eigen::VectorXd hidden_bias;
    Eigen::MatrixXd output_weights;  // vocab x hidden
    Eigen::VectorXd output_bias;

    /// Random initial parameters (the untrained predictor).
    static MaskedPredictor init(std::vector<std::string> vocab, const PredictorConfig& config);
    /// Probabilities over the vocabulary given input concept indices.
    Eigen::VectorXd predict(const std::vector<std::uint32_t>& input) const;
    bool operator==(const MaskedPredictor& o) const;
};

struct MaskedExample {
    std::string case_id;
    int age = 0;
    Gender gender = Gender::other;
    std::vector<std::uint32_t> input;  // vocab indices, sorted
    std::uint32_t target = 0;
};

/// A case as the evaluation sees it: present concepts mapped into the vocabulary.
struct CaseConcepts {
    std::string case_id;
    int age = 0;
    Gender gender = Gender::other;
    std::vector<std::uint32_t> concepts;  // sorted, unique
};

/// Anatomy and other non-node concepts are skipped. DataError when a present
/// clinical concept is missing from the vocabulary (a split built on another graph).
std::vector<CaseConcepts> case_concepts(const std::vector<corpus::CaseRecord>& records, const ConceptVocab& vocab,
                                        const ontology::Ontology& ontology);

/// Every leave-one-out example of cases with at least two concepts.
std::vector<MaskedExample> leave_one_out(const std::vector<CaseConcepts>& cases);

struct TrainingHistory {
    std::vector<double> train_loss;
    std::vector<double> validation_loss;
};

/// Adam on cross-entropy, minibatches shuffled per epoch under the seed.
/// DataError when an example index falls outside the vocabulary.
MaskedPredictor train_masked_predictor(const std::vector<MaskedExample>& train,
                                       const std::vector<MaskedExample>& validation, std::vector<std::string> vocab,
                                       const PredictorConfig& config, TrainingHistory* history = nullptr);

double mean_cross_entropy(const MaskedPredictor& predictor, const std::vector<MaskedExample>& examples);

/// Binary layout: "TQNN", u32 version, vocab, then the four tensors (f64).
void save_predictor(const std::string& path, const MaskedPredictor& predictor);
MaskedPredictor load_predictor(const std::string& path);

// ---------------------------------------------------------------------------
// Masking protocol and Acc@k

/// Present-concept frequencies over a split, indexed by vocab.
std::vector<std::size_t> concept_frequencies(const std::vector<CaseConcepts>& cases, std::size_t vocab_size);

struct MaskedEvalSet {
    std::vector<MaskedExample> examples;
    std::size_t skipped_single = 0;
};

/// One concept masked per case with probability proportional to 1/freq
/// (frequency floored at 1 for concepts unseen in training).
MaskedEvalSet build_masked_eval(const std::vector<CaseConcepts>& cases, const std::vector<std::size_t>& frequencies,
                                std::uint64_t seed);

/// Inverse-frequency masking probabilities of one case's concepts.
std::vector<double> masking_probabilities(const std::vector<std::uint32_t>& concepts,
                                          const std::vector<std::size_t>& frequencies);

struct EvalContext {
    const kg::KnowledgeGraph* graph = nullptr;  // retrieval base for the rankers
    const ConceptVocab* vocab = nullptr;
    const MaskedPredictor* predictor = nullptr;  // required for Method::neural
    kg::SimilarityConfig similarity{};           // k = size of the relevant set
};

/// Ranked vocabulary for one example; input concepts are never proposed.
std::vector<std::uint32_t> ranked_candidates(Method method, const MaskedExample& example, const EvalContext& context,
                                             std::size_t k);

/// Acc@k per requested k. ConfigError when a k is < 1; DataError when the set
/// is empty or the predictor vocabulary differs from the context vocabulary.
std::map<std::size_t, double> eval_acc_at_k(Method method, const std::vector<MaskedExample>& examples,
                                            const std::vector<std::size_t>& ks, const EvalContext& context);

struct EvalReport {
    std::uint64_t seed = 0;
    std::uint64_t corpus_hash = 0;
    std::size_t vocab_size = 0;
    std::size_t examples = 0;
    std::size_t skipped_single = 0;
    std::map<std::string, std::map<std::size_t, double>> accuracy;  // method -> k -> Acc@k
};
std::string report_json(const EvalReport& report);
std::string report_table(const EvalReport& report);

// ---------------------------------------------------------------------------
// Question selection

struct QuestionState {
    int age = 0;
    Gender gender = Gender::other;
    std::vector<std::string> affirmed;
    std::vector<std::string> denied;
    std::vector<std::string> asked;
};

struct QuestionConfig {
    Method method = Method::neural;
    std::size_t budget = 10;
    double score_floor = -std::numeric_limits<double>::infinity();
    kg::SimilarityConfig similarity{};
};

struct QuestionContext {
    const kg::KnowledgeGraph* graph = nullptr;
    const ontology::Ontology* ontology = nullptr;
    const ConceptVocab* vocab = nullptr;
    const MaskedPredictor* predictor = nullptr;
};

/// Concepts that may still be asked: the vocabulary minus asked, affirmed,
/// denied, descendants of denied and demographically gated concepts.
std::vector<char> excluded_candidates(const QuestionState& state, const QuestionContext& context);

/// Highest-scoring allowed concept (ties by ascending id), or nullopt when the
/// budget is spent or nothing scores above the floor. SessionError when
/// nothing is affirmed.
std::optional<std::string> next_question(const QuestionState& state, const QuestionContext& context,
                                         const QuestionConfig& config = {});

}  // namespace triage::qgen
