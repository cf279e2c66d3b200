#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <map>
#include <set>
#include <thread>

#include "triage/pipeline.hpp"
#include "triage/service.hpp"

// After the Eigen-based headers: <resolv.h> defines an _res macro.
#include <httplib.h>

using namespace triage;
using namespace triage::service;
using nlohmann::json;

namespace {

const pipeline::Resources& shipped() {
    static const auto r = pipeline::Resources::load(TRIAGE_DATA_DIR);
    return r;
}

const Artifacts& artifacts() {
    static const auto a = [] {
        const auto profile = corpus::load_profile(std::string(TRIAGE_DATA_DIR) + "/profile.json");
        auto built = pipeline::run(corpus::generate_corpus(profile, 800, 41), shipped());
        Artifacts out;
        out.vocab = qgen::ConceptVocab::from_graph(built.graph);
        const auto cases = qgen::case_concepts(built.records, out.vocab, built.ontology);
        qgen::PredictorConfig config;
        config.epochs = 3;
        out.predictor = qgen::train_masked_predictor(qgen::leave_one_out(cases), {}, out.vocab.ids, config);
        out.ontology = std::move(built.ontology);
        out.graph = std::move(built.graph);
        return out;
    }();
    return a;
}

const std::vector<corpus::CaseRecord>& suite() {
    static const auto s = [] {
        const auto profile = corpus::load_profile(std::string(TRIAGE_DATA_DIR) + "/profile.json");
        return pipeline::annotate(corpus::generate_corpus(profile, 40, 2024), shipped(), artifacts().ontology);
    }();
    return s;
}

std::string id(const std::string& dictionary_id) { return *artifacts().ontology.resolve(dictionary_id); }

// Plain Levenshtein, no transpositions.
int levenshtein(const std::string& a, const std::string& b) {
    std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = static_cast<int>(i);
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

// Every string one insertion, deletion, substitution or adjacent swap away.
std::set<std::string> neighbours(const std::string& s, const std::string& alphabet) {
    std::set<std::string> out;
    for (std::size_t i = 0; i <= s.size(); ++i)
        for (const char c : alphabet) out.insert(s.substr(0, i) + c + s.substr(i));
    for (std::size_t i = 0; i < s.size(); ++i) {
        out.insert(s.substr(0, i) + s.substr(i + 1));
        for (const char c : alphabet) out.insert(s.substr(0, i) + c + s.substr(i + 1));
        if (i + 1 < s.size()) {
            auto t = s;
            std::swap(t[i], t[i + 1]);
            out.insert(t);
        }
    }
    return out;
}

std::string random_word(Rng& rng, std::size_t max_len) {
    std::string s;
    const auto n = uniform_index(rng, max_len + 1);
    for (std::size_t i = 0; i < n; ++i) s += static_cast<char>('a' + uniform_index(rng, 3));
    return s;
}

struct FakeClock {
    std::shared_ptr<std::atomic<std::int64_t>> seconds = std::make_shared<std::atomic<std::int64_t>>(0);
    Clock clock() const {
        return [s = seconds] { return std::chrono::steady_clock::time_point(std::chrono::seconds(s->load())); };
    }
    void advance(std::int64_t s) const { *seconds += s; }
};

engine::Session dummy_session(const std::string& id) {
    engine::Session s;
    s.id = id;
    return s;
}

engine::Recommendation in_process(const engine::Engine& e, const Script& script) {
    auto s = e.start("local", script.age, script.gender, script.initial);
    while (s.status == engine::Status::collecting) {
        const auto q = *s.pending;
        e.answer(s, q, script.yes.contains(q) ? engine::Response::yes : engine::Response::no);
    }
    return e.recommend(s);
}

struct Http {
    httplib::Client client;
    explicit Http(int port) : client("127.0.0.1", port) {}
    std::pair<int, json> post(const std::string& path, const std::string& body) {
        auto r = client.Post(path, body, "application/json");
        REQUIRE(r);
        return {r->status, json::parse(r->body, nullptr, false)};
    }
    std::pair<int, json> get(const std::string& path) {
        auto r = client.Get(path);
        REQUIRE(r);
        return {r->status, json::parse(r->body, nullptr, false)};
    }
};

}  // namespace

TEST_CASE("edit distance lies between the true Damerau distance and Levenshtein") {
    CHECK(edit_distance("bauchweh", "bauchwhe") == 1);
    CHECK(edit_distance("", "abc") == 3);
    CHECK(edit_distance("kitten", "sitting") == 3);
    Rng rng(5);
    for (int trial = 0; trial < 300; ++trial) {
        const auto a = random_word(rng, 5);
        const auto b = random_word(rng, 5);
        const int d = edit_distance(a, b);
        CHECK(d == edit_distance(b, a));
        CHECK(d <= levenshtein(a, b));
        // Breadth-first ball of radius 1 and 2 around a.
        const auto one = neighbours(a, "abc");
        const bool within_one = a == b || one.contains(b);
        CHECK((d <= 1) == within_one);
        if (d <= 2) {
            bool within_two = within_one;
            for (const auto& n : one) within_two = within_two || neighbours(n, "abc").contains(b);
            CHECK(within_two);
        }
    }
}

TEST_CASE("symptom search ranks exact over prefix over edit matches") {
    const SymptomIndex index(artifacts().ontology);
    const auto abdominal = id("C_abdominal_pain");

    const auto exact = index.search("bauchweh");
    REQUIRE_FALSE(exact.empty());
    CHECK(exact[0].concept_id == abdominal);
    CHECK(exact[0].kind == MatchKind::exact);
    CHECK(index.search("  BAUCHWEH ")[0].concept_id == abdominal);

    const auto typo = index.search("bauchwhe");
    REQUIRE_FALSE(typo.empty());
    CHECK(typo[0].concept_id == abdominal);
    CHECK(typo[0].kind == MatchKind::edit);
    CHECK(typo[0].distance == 1);

    CHECK(index.search("zzzz").empty());
    CHECK_THROWS_AS(index.search("   "), InputError);

    // Exact synonym outranks the longer surfaces it prefixes.
    const auto mixed = index.search("bauchschmerzen");
    REQUIRE(mixed.size() >= 2);
    CHECK(mixed[0].concept_id == abdominal);
    CHECK(mixed[0].kind == MatchKind::exact);
    for (std::size_t i = 1; i < mixed.size(); ++i) CHECK(mixed[i].kind != MatchKind::exact);

    // Short queries never fall back to edit distance.
    for (const auto& m : index.search("kopx")) CHECK(m.kind != MatchKind::edit);

    const auto many = index.search("s");
    CHECK(many.size() == 10);
    for (std::size_t i = 1; i < many.size(); ++i) {
        CHECK(many[i - 1].score >= many[i].score);
        CHECK(static_cast<int>(many[i - 1].kind) <= static_cast<int>(many[i].kind));
    }
    std::set<std::string> ids;
    for (const auto& m : many) ids.insert(m.concept_id);
    CHECK(ids.size() == many.size());
}

TEST_CASE("session store ids, expiry and lookups") {
    std::set<std::string> ids;
    for (int i = 0; i < 1000; ++i) {
        const auto s = random_session_id();
        CHECK(s.size() == 32);
        CHECK(s.find_first_not_of("0123456789abcdef") == std::string::npos);
        ids.insert(s);
    }
    CHECK(ids.size() == 1000);

    FakeClock clock;
    SessionStore store(std::chrono::minutes(30), clock.clock());
    const auto a = store.create(dummy_session);
    const auto b = store.create(dummy_session);
    store.with_session(a, [&](engine::Session& s) { CHECK(s.id == a); });
    clock.advance(29 * 60);
    store.with_session(a, [](engine::Session&) {});  // refreshes a
    clock.advance(2 * 60);
    store.with_session(a, [](engine::Session&) {});
    CHECK_THROWS_AS(store.with_session(b, [](engine::Session&) {}), ExpiredError);
    CHECK_THROWS_AS(store.with_session(b, [](engine::Session&) {}), ExpiredError);
    CHECK_THROWS_AS(store.with_session("feedbeef", [](engine::Session&) {}), LookupError);
    CHECK(store.size() == 1);
    clock.advance(31 * 60);
    CHECK(store.purge() == 1);
    CHECK(store.size() == 0);
    CHECK_THROWS_AS(store.with_session(a, [](engine::Session&) {}), ExpiredError);
}

TEST_CASE("a busy session does not block another session") {
    SessionStore store;
    const auto slow = store.create(dummy_session);
    const auto fast = store.create(dummy_session);
    std::atomic<bool> holding{false};
    std::thread t([&] {
        store.with_session(slow, [&](engine::Session&) {
            holding = true;
            std::this_thread::sleep_for(std::chrono::milliseconds(300));
        });
    });
    while (!holding) std::this_thread::yield();
    const auto start = std::chrono::steady_clock::now();
    store.with_session(fast, [](engine::Session&) {});
    store.create(dummy_session);
    const auto waited = std::chrono::steady_clock::now() - start;
    t.join();
    CHECK(waited < std::chrono::milliseconds(100));
}

TEST_CASE("artifact loading lists every missing path") {
    try {
        Artifacts::load({"/nonexistent/ontology.txt", "/nonexistent/graph.bin", ""}, true);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("/nonexistent/ontology.txt") != std::string::npos);
        CHECK(msg.find("/nonexistent/graph.bin") != std::string::npos);
        CHECK(msg.find("predictor=<unset>") != std::string::npos);
    }
}

TEST_CASE("HTTP endpoints, status codes and transport transparency") {
    FakeClock clock;
    ServiceConfig config;
    config.port = 0;
    config.workers = 2;
    config.build_hash = "test-build";
    Server server(artifacts(), config, clock.clock());
    const int port = server.start();
    Http http(port);

    SUBCASE("health") {
        const auto [status, body] = http.get("/v1/health");
        CHECK(status == 200);
        CHECK(body["status"] == "ok");
        CHECK(body["build_hash"] == "test-build");
        CHECK(body["corpus_hash"] == hex64(artifacts().graph.corpus_hash()));
    }

    SUBCASE("search") {
        const auto [status, body] = http.get("/v1/concepts/search?q=bauchweh");
        CHECK(status == 200);
        CHECK(body["candidates"][0]["concept_id"] == id("C_abdominal_pain"));
        CHECK(body["candidates"][0]["match"] == "exact");
        CHECK(http.get("/v1/concepts/search?q=zzzz").second["candidates"].empty());
        CHECK(http.get("/v1/concepts/search").first == 400);
        CHECK(http.get("/v1/concepts/search?q=").first == 400);
    }

    SUBCASE("input errors are 400") {
        CHECK(http.post("/v1/sessions", "not json").first == 400);
        CHECK(http.post("/v1/sessions", R"({"age": 30, "gender": "female"})").first == 400);
        CHECK(http.post("/v1/sessions", R"({"age": 30, "gender": "female", "concepts": []})").first == 400);
        CHECK(http.post("/v1/sessions", R"({"age": 30, "gender": "robot", "concepts": ["C_cough"]})").first == 400);
        CHECK(http.post("/v1/sessions", R"({"age": "old", "gender": "male", "concepts": ["C_cough"]})").first == 400);
        const auto [status, body] = http.post("/v1/sessions", R"({"age": 30, "gender": "male", "concepts": ["C_nope"]})");
        CHECK(status == 400);
        CHECK(body["error"] == "input");
    }

    SUBCASE("session lifecycle errors: 404, 409, 410") {
        CHECK(http.get("/v1/sessions/0123/recommendation").first == 404);
        CHECK(http.post("/v1/sessions/0123/answer", R"({"concept_id": "x", "response": "no"})").first == 404);

        const auto [status, created] = http.post("/v1/sessions", R"({"age": 30, "gender": "female", "concepts": ["C_cough"]})");
        REQUIRE(status == 200);
        const auto sid = created["session_id"].get<std::string>();
        CHECK(sid.size() == 32);
        REQUIRE(created.contains("next_question"));
        CHECK(http.get("/v1/sessions/" + sid + "/recommendation").first == 409);
        CHECK(http.post("/v1/sessions/" + sid + "/answer", R"({"concept_id": "C_wrong", "response": "no"})").first == 409);
        const json bad_response{{"concept_id", created["next_question"]["concept_id"]}, {"response", "maybe"}};
        CHECK(http.post("/v1/sessions/" + sid + "/answer", bad_response.dump()).first == 400);

        clock.advance(31 * 60);
        const auto [expired, body] = http.get("/v1/sessions/" + sid + "/recommendation");
        CHECK(expired == 410);
        CHECK(body["error"] == "expired");
    }

    SUBCASE("red flag at intake returns an escalated recommendation") {
        const auto [status, body] =
            http.post("/v1/sessions", R"({"age": 70, "gender": "male", "concepts": ["C_melena", "C_nausea"]})");
        CHECK(status == 200);
        CHECK(body["status"] == "escalated");
        CHECK_FALSE(body.contains("next_question"));
        CHECK(body["recommendation"]["risk"] == "high");
        CHECK(body["recommendation"]["point_of_care"] == "emergency_call");
        CHECK(body["recommendation"]["rationale"] == "red flag");
    }

    SUBCASE("scripted sessions over HTTP equal the in-process engine") {
        const auto scripts = scripts_from_cases(suite(), server.engine());
        REQUIRE(scripts.size() >= 30);
        for (const auto& script : scripts) {
            std::vector<double> latencies;
            const auto remote = run_script("127.0.0.1", port, script, &latencies);
            CHECK(remote == in_process(server.engine(), script));
            CHECK(latencies.size() >= 2);
        }
    }

    server.stop();
}

TEST_CASE("non-session responses are identical across restarts") {
    ServiceConfig config;
    config.port = 0;
    std::vector<std::string> bodies[2];
    for (auto& out : bodies) {
        Server server(artifacts(), config);
        httplib::Client client("127.0.0.1", server.start());
        for (const auto* q : {"bauchweh", "bauchwhe", "kopf", "fieber", "zzzz"})
            out.push_back(client.Get(std::string("/v1/concepts/search?q=") + q)->body);
        out.push_back(client.Get("/v1/health")->body);
        server.stop();
    }
    CHECK(bodies[0] == bodies[1]);
}

TEST_CASE("load generation reports and unreachable services") {
    ServiceConfig config;
    config.port = 0;
    config.workers = 2;
    Server server(artifacts(), config);
    const int port = server.start();
    const auto scripts = scripts_from_cases(suite(), server.engine());
    const auto r = run_load("127.0.0.1", port, scripts, {4, 0.5, 3});
    server.stop();
    CHECK(r.requests > 0);
    CHECK(r.sessions > 0);
    CHECK(r.p50 <= r.p95);
    CHECK(r.p95 <= r.p99);
    CHECK(r.p99 <= r.max);
    CHECK(r.throughput > 0.0);
    CHECK_THROWS_AS(run_load("127.0.0.1", port, scripts, {1, 0.1, 1}), BenchError);
    CHECK(percentile({3, 1, 2, 4}, 0.5) == 2);
    CHECK(percentile({3, 1, 2, 4}, 0.99) == 4);
    CHECK(percentile({5}, 0.0) == 5);
}

TEST_CASE("a slow session does not raise the median latency of other sessions") {
    ServiceConfig config;
    config.port = 0;
    config.workers = 4;
    config.allow_delay_header = true;
    Server server(artifacts(), config);
    const int port = server.start();
    const auto scripts = scripts_from_cases(suite(), server.engine());

    const auto fast_round = [&] {
        std::vector<double> latencies;
        for (std::size_t i = 0; i < 2 * scripts.size(); ++i)
            run_script("127.0.0.1", port, scripts[i % scripts.size()], &latencies);
        return percentile(latencies, 0.5);
    };
    const auto with_slow_session = [&] {
        std::atomic<bool> done{false};
        std::thread slow([&] {
            httplib::Client client("127.0.0.1", port);
            const auto created = json::parse(
                client.Post("/v1/sessions", R"({"age": 70, "gender": "male", "concepts": ["C_melena"]})", "application/json")
                    ->body);
            const auto path = "/v1/sessions/" + created["session_id"].get<std::string>() + "/recommendation";
            while (!done) client.Get(path, {{"X-Triage-Delay-Ms", "100"}});
        });
        const double p50 = fast_round();
        done = true;
        slow.join();
        return p50;
    };

    fast_round();  // warm-up
    // Pairs alternate which side runs first so slow machine drift cancels out.
    std::vector<double> alone, interleaved;
    for (int round = 0; round < 7; ++round) {
        if (round % 2 == 0) {
            alone.push_back(fast_round());
            interleaved.push_back(with_slow_session());
        } else {
            interleaved.push_back(with_slow_session());
            alone.push_back(fast_round());
        }
    }
    server.stop();
    const double base = percentile(alone, 0.5);
    const double busy = percentile(interleaved, 0.5);
    MESSAGE("median p50 alone " << base << " s, with slow session " << busy << " s");
    CHECK(busy <= 1.10 * base);
}
