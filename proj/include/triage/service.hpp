#pragma once

// HTTP service over the triage engine: symptom search, session lifecycle and
// recommendations. Also the in-memory session store and the load generator
// used by the bench subcommand.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <deque>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "triage/engine.hpp"
#include "triage/kg.hpp"
#include "triage/ontology.hpp"
#include "triage/qgen.hpp"

namespace triage::service {

// ---------------------------------------------------------------------------
// Symptom search

enum class MatchKind : std::uint8_t { exact, prefix, edit };
std::string_view to_string(MatchKind k);

struct SymptomMatch {
    std::string concept_id;
    std::string canonical;
    std::string surface;  // the synonym that matched
    MatchKind kind = MatchKind::exact;
    int distance = 0;     // edit distance for MatchKind::edit
    double score = 0.0;
};

/// Restricted Damerau-Levenshtein distance (adjacent transpositions cost 1).
int edit_distance(std::string_view a, std::string_view b);

struct SearchConfig {
    std::size_t limit = 10;
    int max_distance = 2;
    std::size_t min_edit_length = 5;  // shorter queries get no edit-distance matches
};

/// Normalized synonyms of every symptom, disease and operation concept.
class SymptomIndex {
public:
    explicit SymptomIndex(const ontology::Ontology& ontology, SearchConfig config = {});

    /// Best match per concept; exact > prefix > edit, then score, then concept id.
    /// InputError on an empty query.
    std::vector<SymptomMatch> search(std::string_view query) const;

private:
    struct Entry {
        std::string surface;
        std::string concept_id;
        std::string canonical;
    };
    std::vector<Entry> entries_;  // sorted by surface
    SearchConfig config_;
};

// ---------------------------------------------------------------------------
// Sessions

using Clock = std::function<std::chrono::steady_clock::time_point()>;

/// 32 lowercase hex digits from the system entropy source.
std::string random_session_id();

/// Sessions keyed by id with idle expiry. Access to one session is
/// serialized; different sessions proceed in parallel.
class SessionStore {
public:
    explicit SessionStore(std::chrono::seconds idle_timeout = std::chrono::minutes(30), Clock clock = {});

    /// Stores the session built for a fresh id and returns the id.
    std::string create(const std::function<engine::Session(const std::string& id)>& make);

    /// Runs `fn` on the session under its lock. LookupError (unknown id) or
    /// ExpiredError (idle past the timeout).
    void with_session(const std::string& id, const std::function<void(engine::Session&)>& fn);

    /// Drops every expired session; returns how many.
    std::size_t purge();
    std::size_t size() const;

private:
    struct Slot {
        std::mutex mutex;
        engine::Session session;
        std::chrono::steady_clock::time_point last_access;
    };
    void remember_expired(const std::string& id);

    std::chrono::seconds idle_timeout_;
    Clock clock_;
    mutable std::shared_mutex mutex_;
    std::unordered_map<std::string, std::shared_ptr<Slot>> slots_;
    std::unordered_set<std::string> expired_;
    std::deque<std::string> expired_order_;
};

// ---------------------------------------------------------------------------
// Wire format

nlohmann::json to_json(const engine::Recommendation& r);
engine::Recommendation recommendation_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Server

struct ArtifactPaths {
    std::string ontology;
    std::string graph;
    std::string predictor;  // may be empty unless the question method is neural
};

struct Artifacts {
    ontology::Ontology ontology;
    kg::KnowledgeGraph graph;
    qgen::ConceptVocab vocab;
    std::optional<qgen::MaskedPredictor> predictor;

    /// ConfigError listing every missing path before anything is read.
    static Artifacts load(const ArtifactPaths& paths, bool need_predictor);
};

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    std::size_t workers = 4;
    std::chrono::seconds idle_timeout = std::chrono::minutes(30);
    engine::EngineConfig engine{};
    SearchConfig search{};
    std::string build_hash = "unknown";
    // Honour an X-Triage-Delay-Ms header by sleeping inside the session lock.
    // Only the interleaved-latency test turns this on.
    bool allow_delay_header = false;
};

class Server {
public:
    Server(const Artifacts& artifacts, ServiceConfig config, Clock clock = {});
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    /// Binds and serves on a background thread; returns the bound port.
    int start();
    /// Stops accepting, finishes in-flight requests and joins the workers.
    void stop();
    int port() const { return port_; }

    const engine::Engine& engine() const { return engine_; }
    SessionStore& sessions() { return sessions_; }

private:
    struct Impl;
    const Artifacts* artifacts_;
    ServiceConfig config_;
    engine::Engine engine_;
    SymptomIndex index_;
    SessionStore sessions_;
    std::unique_ptr<Impl> impl_;
    int port_ = 0;
};

// ---------------------------------------------------------------------------
// Load generation

/// A scripted patient: yes to concepts in `yes`, no to everything else.
struct Script {
    int age = 0;
    Gender gender = Gender::other;
    std::vector<std::string> initial;
    std::unordered_set<std::string> yes;
};

/// Scripts from ground-truth cases (mentions carrying ontology ids).
std::vector<Script> scripts_from_cases(const std::vector<corpus::CaseRecord>& cases, const engine::Engine& engine,
                                       const engine::ReplayConfig& config = {});

/// Drives one full session over HTTP; returns the final recommendation.
/// Appends each request's latency in seconds to `latencies` when given.
engine::Recommendation run_script(const std::string& host, int port, const Script& script,
                                  std::vector<double>* latencies = nullptr);

struct LoadConfig {
    std::size_t concurrency = 30;
    double duration_seconds = 5.0;
    std::uint64_t seed = 1;  // script order per client
};

struct BenchReport {
    std::size_t workers = 0;
    std::size_t concurrency = 0;
    std::size_t requests = 0;
    std::size_t sessions = 0;
    double p50 = 0.0, p95 = 0.0, p99 = 0.0, mean = 0.0;  // seconds per request
    double max = 0.0;
    double throughput = 0.0;  // requests per second
    double efficiency = 0.0;  // throughput ratio over the previous worker count, per doubling; 0 for the first
};

/// Nearest-rank percentile of an unsorted sample; q in [0, 1].
double percentile(std::vector<double> sample, double q);

/// BenchError when the service does not answer its health check.
BenchReport run_load(const std::string& host, int port, const std::vector<Script>& scripts, const LoadConfig& config);

/// Starts a server per worker count and measures each with the same scripts.
std::vector<BenchReport> bench(const Artifacts& artifacts, const ServiceConfig& base,
                               const std::vector<std::size_t>& workers, const std::vector<Script>& scripts,
                               const LoadConfig& load);

nlohmann::json to_json(const BenchReport& r);

}  // namespace triage::service
