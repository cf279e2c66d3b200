#include "triage/engine.hpp"

#include <algorithm>
#include <exception>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "triage/common.hpp"

namespace triage::engine {

namespace {

constexpr std::size_t slot(Risk r) { return static_cast<std::size_t>(r); }

template <typename T>
void push_unique(std::vector<T>& v, const T& x) {
    if (std::find(v.begin(), v.end(), x) == v.end()) v.push_back(x);
}

// Most frequent value; ties go to the smaller enum value, the more urgent one.
template <typename E, std::size_t N>
E modal(const std::array<std::size_t, N>& counts) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < N; ++i)
        if (counts[i] > counts[best]) best = i;
    return static_cast<E>(best);
}

RecommendationLabel fallback_label(Risk r) {
    switch (r) {
        case Risk::high: return {Risk::high, PointOfCare::emergency_call, TimeFrame::immediate};
        case Risk::medium: return {Risk::medium, PointOfCare::physical_visit, TimeFrame::within_24h};
        case Risk::low: return {Risk::low, PointOfCare::self_care, TimeFrame::unscheduled};
    }
    return {};
}

bool present_in_graph(const kg::KnowledgeGraph& graph, const std::string& id) {
    const auto node = graph.concept_node(id);
    if (!node) return false;
    const auto name = kg::concept_relation(node->first, Polarity::present);
    if (!graph.has_relation(name)) return false;
    const auto& m = graph.relation(name).forward;
    return m.row_ptr[node->second + 1] > m.row_ptr[node->second];
}

}  // namespace

std::string_view to_string(Status s) {
    switch (s) {
        case Status::collecting: return "collecting";
        case Status::escalated: return "escalated";
        case Status::concluded: return "concluded";
    }
    return "?";
}

std::string_view to_string(Response r) { return r == Response::yes ? "yes" : "no"; }

Response parse_response(std::string_view s) {
    if (s == "yes") return Response::yes;
    if (s == "no") return Response::no;
    throw InputError("response must be yes or no, got '" + std::string(s) + "'");
}

void check_invariants(const Session& s) {
    const std::set<std::string> affirmed(s.affirmed.begin(), s.affirmed.end());
    for (const auto& d : s.denied)
        if (affirmed.contains(d)) throw ValidationError("session " + s.id + ": " + d + " is affirmed and denied");
    std::set<std::string> seen;
    for (const auto& q : s.asked)
        if (!seen.insert(q).second) throw ValidationError("session " + s.id + ": " + q + " asked twice");
    if (s.pending && (s.asked.empty() || s.asked.back() != *s.pending))
        throw ValidationError("session " + s.id + ": pending question is not the last one asked");
    if (s.pending && s.status != Status::collecting)
        throw ValidationError("session " + s.id + ": question pending on a finished session");
}

bool Recommendation::operator==(const Recommendation& o) const {
    return label == o.label && confidence == o.confidence && evidence == o.evidence && mass == o.mass &&
           rationale == o.rationale && argmax == o.argmax && raised == o.raised && escalated == o.escalated;
}

Engine::Engine(const kg::KnowledgeGraph& graph, const ontology::Ontology& ontology, const qgen::ConceptVocab& vocab,
               const qgen::MaskedPredictor* predictor, EngineConfig config)
    : graph_(&graph), ontology_(&ontology), vocab_(&vocab), predictor_(predictor), config_(std::move(config)) {
    if (config_.question.method == qgen::Method::neural && !predictor_)
        throw ConfigError("the neural question method needs a trained predictor");
    if (!(config_.confidence_threshold >= 0.0 && config_.confidence_threshold <= 1.0))
        throw ConfigError("confidence threshold must lie in [0, 1]");
    if (config_.stable_answers < 1) throw ConfigError("stable_answers must be at least 1");
}

bool Engine::is_red_flag(const std::string& id) const {
    const auto* c = ontology_->find(id);
    return c && c->flags.red_flag;
}

Session Engine::start(std::string id, int age, Gender gender, const std::vector<std::string>& concepts) const {
    if (concepts.empty()) throw InputError("at least one initial concept is required");
    if (age < 0 || age > 130) throw InputError(fmt::format("age {} outside 0..130", age));
    Session s;
    s.id = std::move(id);
    s.age = age;
    s.gender = gender;
    s.budget_remaining = config_.question.budget;
    for (const auto& raw : concepts) {
        const auto resolved = ontology_->resolve(raw);
        if (!resolved) throw InputError("unknown concept '" + raw + "'");
        push_unique(s.affirmed, *resolved);
    }
    for (const auto& c : s.affirmed)
        if (is_red_flag(c)) s.red_flags.push_back(c);
    if (!s.red_flags.empty()) {
        s.status = Status::escalated;
        return s;
    }
    if (std::none_of(s.affirmed.begin(), s.affirmed.end(), [&](const auto& c) { return present_in_graph(*graph_, c); }))
        throw InputError("no case in the knowledge graph mentions " + join(s.affirmed, ", "));
    ask_next(s);
    return s;
}

void Engine::ask_next(Session& s) const {
    if (s.budget_remaining == 0) {
        s.status = Status::concluded;
        return;
    }
    qgen::QuestionState state{s.age, s.gender, s.affirmed, s.denied, s.asked};
    qgen::QuestionContext ctx{graph_, ontology_, vocab_, predictor_};
    const auto q = qgen::next_question(state, ctx, config_.question);
    if (!q) {
        s.status = Status::concluded;
        return;
    }
    s.asked.push_back(*q);
    s.pending = *q;
}

void Engine::answer(Session& s, const std::string& concept_id, Response response) const {
    if (s.status != Status::collecting)
        throw ProtocolError(fmt::format("session {} is {}", s.id, to_string(s.status)));
    if (!s.pending || *s.pending != concept_id)
        throw ProtocolError(fmt::format("session {}: '{}' is not the pending question{}", s.id, concept_id,
                                        s.pending ? " (" + *s.pending + ")" : ""));
    s.pending.reset();
    (response == Response::yes ? s.affirmed : s.denied).push_back(concept_id);
    --s.budget_remaining;
    if (response == Response::yes && is_red_flag(concept_id)) {
        s.red_flags.push_back(concept_id);
        s.status = Status::escalated;
        return;
    }
    if (s.budget_remaining == 0) {
        s.status = Status::concluded;
        return;
    }
    s.confident_streak = assess(s).confidence >= config_.confidence_threshold ? s.confident_streak + 1 : 0;
    if (s.confident_streak >= config_.stable_answers) {
        s.status = Status::concluded;
        return;
    }
    ask_next(s);
}

Recommendation Engine::assess(const Session& s) const {
    if (graph_->case_count() == 0) throw InferenceError("knowledge graph has no cases");
    kg::PatientProfile profile{s.affirmed, s.denied, corpus::age_group(s.age), s.gender};
    Recommendation r;
    r.evidence = kg::similar_cases(*graph_, profile, config_.evidence);
    if (r.evidence.empty()) throw InferenceError("session " + s.id + " shares no concept with any case");

    const auto& labels = graph_->case_labels();
    for (const auto& e : r.evidence) r.mass[slot(labels[e.node].risk)] += std::max(e.score, 0.0);
    double total = r.mass[0] + r.mass[1] + r.mass[2];
    if (total <= 0.0) {
        // Every retrieved score was cancelled by denials: fall back to counting cases.
        r.mass = {};
        for (const auto& e : r.evidence) r.mass[slot(labels[e.node].risk)] += 1.0;
        total = static_cast<double>(r.evidence.size());
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < r.mass.size(); ++c)
        if (r.mass[c] > r.mass[best]) best = c;
    r.argmax = static_cast<Risk>(best);
    r.confidence = r.mass[best] / total;
    Risk risk = r.argmax;
    if (r.confidence < config_.confidence_threshold && risk != Risk::high) {
        risk = raise(risk);
        r.raised = true;
    }

    std::array<std::size_t, 4> poc{};
    std::array<std::size_t, 4> tf{};
    std::size_t support = 0;
    for (const auto& e : r.evidence) {
        const auto& l = labels[e.node];
        if (l.risk != risk) continue;
        ++support;
        ++poc[static_cast<std::size_t>(l.point_of_care)];
        ++tf[static_cast<std::size_t>(l.time_frame)];
    }
    r.label = {risk, modal<PointOfCare>(poc), modal<TimeFrame>(tf)};
    if (support == 0 || !r.label.valid()) r.label = fallback_label(risk);
    r.rationale = fmt::format("high={:.6f} medium={:.6f} low={:.6f}", r.mass[0], r.mass[1], r.mass[2]);
    return r;
}

Recommendation Engine::recommend(const Session& s) const {
    if (s.status == Status::collecting) throw ProtocolError("session " + s.id + " is still collecting answers");
    if (s.status == Status::escalated) {
        Recommendation r;
        r.label = fallback_label(Risk::high);
        r.confidence = 1.0;
        r.rationale = "red flag";
        r.argmax = Risk::high;
        r.escalated = true;
        return r;
    }
    return assess(s);
}

// ---------------------------------------------------------------------------
// Evaluation

Response oracle_answer(const corpus::CaseRecord& record, const std::string& concept_id,
                       const ontology::Ontology& ontology) {
    std::set<std::string> present;
    for (const auto& m : record.mentions)
        if (m.polarity == Polarity::present) present.insert(m.concept_id);
    if (present.contains(concept_id)) return Response::yes;
    for (const auto& d : ontology.descendants(concept_id))
        if (present.contains(d)) return Response::yes;
    return Response::no;
}

std::vector<std::string> initial_concepts(const corpus::CaseRecord& record, const Engine& engine,
                                          const ReplayConfig& config) {
    std::vector<std::string> out;
    for (const auto& m : record.mentions) {
        if (out.size() >= config.initial_concepts) break;
        if (m.polarity == Polarity::present && present_in_graph(engine.graph(), m.concept_id))
            push_unique(out, m.concept_id);
    }
    if (out.empty()) throw DataError("case " + record.id + " has no present concept known to the graph");
    return out;
}

Replay replay_case(const Engine& engine, const corpus::CaseRecord& record, const ReplayConfig& config) {
    Replay r;
    r.transcript.age = record.age;
    r.transcript.gender = record.gender;
    r.transcript.initial = initial_concepts(record, engine, config);
    r.session = engine.start(record.id, record.age, record.gender, r.transcript.initial);
    while (r.session.status == Status::collecting) {
        const auto q = *r.session.pending;
        const auto a = oracle_answer(record, q, engine.ontology());
        r.transcript.answers.emplace_back(q, a);
        engine.answer(r.session, q, a);
    }
    r.recommendation = engine.recommend(r.session);
    return r;
}

Replay replay_transcript(const Engine& engine, const Transcript& transcript, const std::string& session_id) {
    Replay r;
    r.transcript = transcript;
    r.session = engine.start(session_id, transcript.age, transcript.gender, transcript.initial);
    for (const auto& [q, a] : transcript.answers) {
        if (r.session.status != Status::collecting)
            throw ProtocolError("transcript continues after the session ended");
        if (*r.session.pending != q)
            throw ProtocolError("engine asked " + *r.session.pending + " but the transcript answers " + q);
        engine.answer(r.session, q, a);
    }
    if (r.session.status == Status::collecting) throw ProtocolError("transcript ends before the session does");
    r.recommendation = engine.recommend(r.session);
    return r;
}

TriageMetrics score_labels(const std::vector<RecommendationLabel>& truth,
                           const std::vector<RecommendationLabel>& predicted) {
    if (truth.empty()) throw DataError("no ground-truth cases");
    if (truth.size() != predicted.size())
        throw DataError(fmt::format("{} truths but {} predictions", truth.size(), predicted.size()));
    Confusion confusion({"high", "medium", "low"});
    std::size_t exact = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        confusion.add(slot(truth[i].risk), slot(predicted[i].risk));
        exact += truth[i] == predicted[i];
    }
    TriageMetrics m;
    m.per_class = confusion.per_class();
    m.emergency_recall = m.per_class[slot(Risk::high)].recall;
    m.accuracy = confusion.accuracy();
    m.label_accuracy = static_cast<double>(exact) / static_cast<double>(truth.size());
    m.cases = truth.size();
    return m;
}

Evaluation evaluate_recommendations(const Engine& engine, const std::vector<corpus::CaseRecord>& ground_truth,
                                    const ReplayConfig& config) {
    if (ground_truth.empty()) throw DataError("ground-truth set is empty");
    Evaluation ev;
    ev.replays.resize(ground_truth.size());
    std::exception_ptr failure;
    const auto n = static_cast<std::ptrdiff_t>(ground_truth.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        try {
            ev.replays[static_cast<std::size_t>(i)] = replay_case(engine, ground_truth[static_cast<std::size_t>(i)], config);
        } catch (...) {
#pragma omp critical(triage_eval_failure)
            if (!failure) failure = std::current_exception();
        }
    }
    if (failure) std::rethrow_exception(failure);

    std::vector<RecommendationLabel> truth, predicted;
    std::size_t escalated = 0, questions = 0;
    for (std::size_t i = 0; i < ground_truth.size(); ++i) {
        truth.push_back(ground_truth[i].expected.value_or(ground_truth[i].label));
        predicted.push_back(ev.replays[i].recommendation.label);
        escalated += ev.replays[i].recommendation.escalated;
        questions += ev.replays[i].transcript.answers.size();
    }
    ev.metrics = score_labels(truth, predicted);
    ev.metrics.escalated = escalated;
    ev.metrics.mean_questions = static_cast<double>(questions) / static_cast<double>(ground_truth.size());
    return ev;
}

std::string metrics_text(const TriageMetrics& m) {
    std::ostringstream out;
    out << fmt::format("emergency_recall {:.6f}\n", m.emergency_recall);
    out << fmt::format("cases {}\naccuracy {:.6f}\nlabel_accuracy {:.6f}\nescalated {}\nmean_questions {:.3f}\n",
                       m.cases, m.accuracy, m.label_accuracy, m.escalated, m.mean_questions);
    out << "class\tprecision\trecall\tf1\tsupport\tpredicted\n";
    for (const auto& c : m.per_class)
        out << fmt::format("{}\t{:.6f}\t{:.6f}\t{:.6f}\t{}\t{}\n", c.name, c.precision, c.recall, c.f1, c.support,
                           c.predicted);
    return out.str();
}

}  // namespace triage::engine
