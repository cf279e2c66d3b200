#pragma once

// Triage session state machine and recommendation engine: a session collects
// yes/no answers to generated questions, escalates on red flags and concludes
// on budget or stable confidence; the recommendation aggregates the risk
// labels of similar cases. Also the scripted-replay evaluation harness.

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "triage/corpus.hpp"
#include "triage/kg.hpp"
#include "triage/metrics.hpp"
#include "triage/ontology.hpp"
#include "triage/qgen.hpp"

namespace triage::engine {

enum class Status : std::uint8_t { collecting, escalated, concluded };
enum class Response : std::uint8_t { yes, no };

std::string_view to_string(Status s);
std::string_view to_string(Response r);
Response parse_response(std::string_view s);  // InputError

struct Session {
    std::string id;
    int age = 0;
    Gender gender = Gender::other;
    std::vector<std::string> affirmed;  // ontology ids, in order of affirmation
    std::vector<std::string> denied;
    std::vector<std::string> asked;     // every question put to the patient, in order
    std::optional<std::string> pending; // asked but not yet answered
    Status status = Status::collecting;
    std::size_t budget_remaining = 0;
    int confident_streak = 0;           // consecutive answers with confidence over the threshold
    std::vector<std::string> red_flags; // affirmed red-flag concepts

    bool operator==(const Session&) const = default;
};

/// ValidationError when affirmed and denied overlap, the log repeats a
/// concept or the pending question is not the last one asked.
void check_invariants(const Session& session);

struct EngineConfig {
    qgen::QuestionConfig question{};       // method, budget, floor, retrieval for rankers
    kg::SimilarityConfig evidence{};       // retrieval for the recommendation, k = 50
    double confidence_threshold = 0.6;
    int stable_answers = 2;                // confident answers in a row that conclude
};

struct Recommendation {
    RecommendationLabel label;
    double confidence = 0.0;
    std::vector<kg::ScoredCase> evidence;
    std::array<double, 3> mass{};  // indexed by Risk
    std::string rationale;
    Risk argmax = Risk::low;       // class with the largest mass, before any raise
    bool raised = false;
    bool escalated = false;

    bool operator==(const Recommendation& o) const;
};

class Engine {
public:
    /// `predictor` may be null unless the question method is neural.
    Engine(const kg::KnowledgeGraph& graph, const ontology::Ontology& ontology, const qgen::ConceptVocab& vocab,
           const qgen::MaskedPredictor* predictor, EngineConfig config = {});

    const kg::KnowledgeGraph& graph() const { return *graph_; }
    const ontology::Ontology& ontology() const { return *ontology_; }
    const EngineConfig& config() const { return config_; }

    /// Initial concepts may be ontology or dictionary ids; duplicates collapse.
    /// InputError on no concepts, an unknown id, an age outside 0..130 or
    /// concepts no case in the graph mentions. The first question is already
    /// pending when the session stays collecting.
    Session start(std::string id, int age, Gender gender, const std::vector<std::string>& concepts) const;

    /// ProtocolError unless `concept_id` is the pending question of a collecting session.
    void answer(Session& session, const std::string& concept_id, Response response) const;

    /// ProtocolError while collecting; InferenceError on an empty graph.
    Recommendation recommend(const Session& session) const;

    /// Retrieval-based assessment of the current answers (no escalation rule).
    Recommendation assess(const Session& session) const;

private:
    void ask_next(Session& session) const;
    bool is_red_flag(const std::string& id) const;

    const kg::KnowledgeGraph* graph_;
    const ontology::Ontology* ontology_;
    const qgen::ConceptVocab* vocab_;
    const qgen::MaskedPredictor* predictor_;
    EngineConfig config_;
};

// ---------------------------------------------------------------------------
// Evaluation

struct ReplayConfig {
    std::size_t initial_concepts = 2;  // first present mentions the patient volunteers
};

struct Transcript {
    int age = 0;
    Gender gender = Gender::other;
    std::vector<std::string> initial;
    std::vector<std::pair<std::string, Response>> answers;
    bool operator==(const Transcript&) const = default;
};

/// yes iff the concept or one of its descendants is a present mention of the case.
Response oracle_answer(const corpus::CaseRecord& record, const std::string& concept_id,
                       const ontology::Ontology& ontology);

/// Concepts the scripted patient starts with. DataError when the case has no
/// present mention the graph knows.
std::vector<std::string> initial_concepts(const corpus::CaseRecord& record, const Engine& engine,
                                          const ReplayConfig& config = {});

struct Replay {
    Session session;
    Transcript transcript;
    Recommendation recommendation;
};

/// Scripted session for one case (mentions must carry ontology ids).
Replay replay_case(const Engine& engine, const corpus::CaseRecord& record, const ReplayConfig& config = {});

/// Re-runs a recorded transcript. ProtocolError when the engine asks a
/// different question than the transcript answers.
Replay replay_transcript(const Engine& engine, const Transcript& transcript, const std::string& session_id = "replay");

struct TriageMetrics {
    std::vector<ClassMetrics> per_class;  // high, medium, low
    double emergency_recall = 0.0;
    double accuracy = 0.0;
    double label_accuracy = 0.0;          // risk, point of care and time frame all equal
    std::size_t cases = 0;
    std::size_t escalated = 0;
    double mean_questions = 0.0;
};

/// DataError on empty input or mismatched lengths.
TriageMetrics score_labels(const std::vector<RecommendationLabel>& truth,
                           const std::vector<RecommendationLabel>& predicted);

struct Evaluation {
    TriageMetrics metrics;
    std::vector<Replay> replays;
};

/// Replays every ground-truth case (expected label, else the record label).
/// DataError on an empty set.
Evaluation evaluate_recommendations(const Engine& engine, const std::vector<corpus::CaseRecord>& ground_truth,
                                    const ReplayConfig& config = {});

/// Per-class table preceded by an "emergency_recall <value>" headline.
std::string metrics_text(const TriageMetrics& metrics);

}  // namespace triage::engine
