#include "triage/service.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <random>
#include <thread>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "triage/common.hpp"
#include "triage/textproc.hpp"

namespace triage::service {

using nlohmann::json;

std::string_view to_string(MatchKind k) {
    switch (k) {
        case MatchKind::exact: return "exact";
        case MatchKind::prefix: return "prefix";
        case MatchKind::edit: return "edit";
    }
    return "?";
}

int edit_distance(std::string_view a, std::string_view b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<std::vector<int>> d(n + 1, std::vector<int>(m + 1, 0));
    for (std::size_t i = 0; i <= n; ++i) d[i][0] = static_cast<int>(i);
    for (std::size_t j = 0; j <= m; ++j) d[0][j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j) {
            const int cost = a[i - 1] == b[j - 1] ? 0 : 1;
            d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + cost});
            if (i > 1 && j > 1 && a[i - 1] == b[j - 2] && a[i - 2] == b[j - 1])
                d[i][j] = std::min(d[i][j], d[i - 2][j - 2] + 1);
        }
    }
    return d[n][m];
}

// ---------------------------------------------------------------------------

SymptomIndex::SymptomIndex(const ontology::Ontology& ontology, SearchConfig config) : config_(config) {
    for (const auto& c : ontology.concepts()) {
        if (c.type == SemanticType::anatomy || c.type == SemanticType::other) continue;
        for (const auto& s : c.synonyms) entries_.push_back({s, c.id, c.canonical});
    }
    std::sort(entries_.begin(), entries_.end(), [](const Entry& a, const Entry& b) {
        return std::tie(a.surface, a.concept_id) < std::tie(b.surface, b.concept_id);
    });
}

std::vector<SymptomMatch> SymptomIndex::search(std::string_view query) const {
    const auto q = text::normalize_phrase(trim(query));
    if (q.empty()) throw InputError("empty search query");
    std::unordered_map<std::string, SymptomMatch> best;
    const bool allow_edit = q.size() >= config_.min_edit_length;
    for (const auto& e : entries_) {
        SymptomMatch m{e.concept_id, e.canonical, e.surface, MatchKind::exact, 0, 0.0};
        if (e.surface == q) {
            m.score = 1.0;
        } else if (e.surface.starts_with(q)) {
            m.kind = MatchKind::prefix;
            m.score = 0.5 + 0.5 * static_cast<double>(q.size()) / static_cast<double>(e.surface.size());
        } else if (allow_edit && std::abs(static_cast<long>(e.surface.size()) - static_cast<long>(q.size())) <=
                                     config_.max_distance) {
            const int d = edit_distance(q, e.surface);
            if (d > config_.max_distance) continue;
            m.kind = MatchKind::edit;
            m.distance = d;
            m.score = 0.5 * (1.0 - static_cast<double>(d) / static_cast<double>(config_.max_distance + 1));
        } else {
            continue;
        }
        auto [it, fresh] = best.emplace(e.concept_id, m);
        if (!fresh && m.score > it->second.score) it->second = m;
    }
    std::vector<SymptomMatch> out;
    for (auto& [_, m] : best) out.push_back(std::move(m));
    std::sort(out.begin(), out.end(), [](const SymptomMatch& a, const SymptomMatch& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.concept_id < b.concept_id;
    });
    if (out.size() > config_.limit) out.resize(config_.limit);
    return out;
}

// ---------------------------------------------------------------------------

std::string random_session_id() {
    static thread_local std::random_device device;
    std::string id;
    for (int i = 0; i < 4; ++i) id += fmt::format("{:08x}", static_cast<std::uint32_t>(device()));
    return id;
}

SessionStore::SessionStore(std::chrono::seconds idle_timeout, Clock clock)
    : idle_timeout_(idle_timeout), clock_(clock ? std::move(clock) : Clock(std::chrono::steady_clock::now)) {}

std::string SessionStore::create(const std::function<engine::Session(const std::string&)>& make) {
    auto id = random_session_id();
    auto slot = std::make_shared<Slot>();
    slot->session = make(id);
    slot->last_access = clock_();
    std::unique_lock lock(mutex_);
    if (expired_.contains(id) || !slots_.emplace(id, std::move(slot)).second)
        throw SessionError("session id collision on " + id);
    return id;
}

void SessionStore::remember_expired(const std::string& id) {
    constexpr std::size_t kRemembered = 100000;
    if (!expired_.insert(id).second) return;
    expired_order_.push_back(id);
    if (expired_order_.size() > kRemembered) {
        expired_.erase(expired_order_.front());
        expired_order_.pop_front();
    }
}

void SessionStore::with_session(const std::string& id, const std::function<void(engine::Session&)>& fn) {
    std::shared_ptr<Slot> slot;
    {
        std::shared_lock lock(mutex_);
        const auto it = slots_.find(id);
        if (it == slots_.end()) {
            if (expired_.contains(id)) throw ExpiredError("session " + id + " expired");
            throw LookupError("unknown session " + id);
        }
        slot = it->second;
    }
    std::unique_lock session_lock(slot->mutex);
    if (clock_() - slot->last_access > idle_timeout_) {
        session_lock.unlock();
        std::unique_lock lock(mutex_);
        const auto it = slots_.find(id);
        if (it != slots_.end() && it->second == slot) slots_.erase(it);
        remember_expired(id);
        throw ExpiredError("session " + id + " expired");
    }
    fn(slot->session);
    slot->last_access = clock_();
}

std::size_t SessionStore::purge() {
    std::unique_lock lock(mutex_);
    const auto now = clock_();
    std::size_t removed = 0;
    for (auto it = slots_.begin(); it != slots_.end();) {
        std::unique_lock session_lock(it->second->mutex, std::try_to_lock);
        if (session_lock.owns_lock() && now - it->second->last_access > idle_timeout_) {
            remember_expired(it->first);
            session_lock.unlock();
            it = slots_.erase(it);
            ++removed;
        } else {
            ++it;
        }
    }
    return removed;
}

std::size_t SessionStore::size() const {
    std::shared_lock lock(mutex_);
    return slots_.size();
}

// ---------------------------------------------------------------------------

json to_json(const engine::Recommendation& r) {
    json evidence = json::array();
    for (const auto& e : r.evidence) evidence.push_back({{"case_id", e.case_id}, {"node", e.node}, {"score", e.score}});
    return {{"risk", to_string(r.label.risk)},
            {"point_of_care", to_string(r.label.point_of_care)},
            {"time_frame", to_string(r.label.time_frame)},
            {"confidence", r.confidence},
            {"escalated", r.escalated},
            {"raised", r.raised},
            {"argmax", to_string(r.argmax)},
            {"rationale", r.rationale},
            {"mass", {{"high", r.mass[0]}, {"medium", r.mass[1]}, {"low", r.mass[2]}}},
            {"evidence", evidence}};
}

engine::Recommendation recommendation_from_json(const json& j) {
    engine::Recommendation r;
    r.label = {parse_risk(j.at("risk").get<std::string>()), parse_point_of_care(j.at("point_of_care").get<std::string>()),
               parse_time_frame(j.at("time_frame").get<std::string>())};
    r.confidence = j.at("confidence").get<double>();
    r.escalated = j.at("escalated").get<bool>();
    r.raised = j.at("raised").get<bool>();
    r.argmax = parse_risk(j.at("argmax").get<std::string>());
    r.rationale = j.at("rationale").get<std::string>();
    r.mass = {j.at("mass").at("high").get<double>(), j.at("mass").at("medium").get<double>(),
              j.at("mass").at("low").get<double>()};
    for (const auto& e : j.at("evidence"))
        r.evidence.push_back({e.at("node").get<std::uint32_t>(), e.at("case_id").get<std::string>(),
                              e.at("score").get<double>()});
    return r;
}

// ---------------------------------------------------------------------------

Artifacts Artifacts::load(const ArtifactPaths& paths, bool need_predictor) {
    std::vector<std::string> missing;
    const auto check = [&](const std::string& label, const std::string& p) {
        if (p.empty() || !std::filesystem::exists(p)) missing.push_back(label + "=" + (p.empty() ? "<unset>" : p));
    };
    check("ontology", paths.ontology);
    check("graph", paths.graph);
    if (need_predictor || !paths.predictor.empty()) check("predictor", paths.predictor);
    if (!missing.empty()) throw ConfigError("missing artifacts: " + join(missing, ", "));

    Artifacts a;
    a.ontology = ontology::load_ontology(paths.ontology);
    a.graph = kg::load_snapshot(paths.graph);
    a.vocab = qgen::ConceptVocab::from_graph(a.graph);
    if (!paths.predictor.empty()) {
        a.predictor = qgen::load_predictor(paths.predictor);
        if (a.predictor->vocab != a.vocab.ids)
            throw ConfigError("predictor " + paths.predictor + " was trained on a different graph vocabulary");
    }
    return a;
}

namespace {

int status_for(const std::string& kind) {
    if (kind == "input" || kind == "parse" || kind == "validation" || kind == "query") return 400;
    if (kind == "lookup") return 404;
    if (kind == "protocol") return 409;
    if (kind == "expired") return 410;
    return 500;
}

void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

template <typename F>
void guarded(httplib::Response& res, F&& body) {
    try {
        body();
    } catch (const Error& e) {
        reply(res, status_for(e.kind()), {{"error", e.kind()}, {"message", e.what()}});
    } catch (const json::exception& e) {
        reply(res, 400, {{"error", "input"}, {"message", e.what()}});
    } catch (const std::exception& e) {
        reply(res, 500, {{"error", "internal"}, {"message", e.what()}});
    }
}

json parse_body(const httplib::Request& req) {
    auto j = json::parse(req.body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw InputError("request body must be a JSON object");
    return j;
}

}  // namespace

struct Server::Impl {
    httplib::Server http;
    std::thread thread;
};

Server::Server(const Artifacts& artifacts, ServiceConfig config, Clock clock)
    : artifacts_(&artifacts),
      config_(std::move(config)),
      engine_(artifacts.graph, artifacts.ontology, artifacts.vocab,
              artifacts.predictor ? &*artifacts.predictor : nullptr, config_.engine),
      index_(artifacts.ontology, config_.search),
      sessions_(config_.idle_timeout, std::move(clock)),
      impl_(std::make_unique<Impl>()) {
    if (config_.workers == 0) throw ConfigError("workers must be at least 1");
    auto& http = impl_->http;
    const auto workers = config_.workers;
    http.new_task_queue = [workers] { return new httplib::ThreadPool(workers); };
    // One request per connection: a kept-alive idle client would otherwise pin a worker.
    http.set_keep_alive_max_count(1);

    const auto view = [this](const engine::Session& s) {
        json j{{"session_id", s.id},
               {"status", engine::to_string(s.status)},
               {"budget_remaining", s.budget_remaining},
               {"questions_asked", s.asked.size()}};
        if (s.status == engine::Status::collecting) {
            const auto& c = artifacts_->ontology.at(*s.pending);
            j["next_question"] = {{"concept_id", c.id}, {"text", c.canonical}};
        } else {
            j["recommendation"] = to_json(engine_.recommend(s));
        }
        return j;
    };
    const auto maybe_delay = [this](const httplib::Request& req) {
        if (config_.allow_delay_header && req.has_header("X-Triage-Delay-Ms"))
            std::this_thread::sleep_for(std::chrono::milliseconds(std::stoi(req.get_header_value("X-Triage-Delay-Ms"))));
    };

    http.Post("/v1/sessions", [this, view](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto body = parse_body(req);
            const int age = body.at("age").get<int>();
            const Gender gender = parse_gender(body.at("gender").get<std::string>());
            const auto concepts = body.at("concepts").get<std::vector<std::string>>();
            json out;
            sessions_.create([&](const std::string& id) {
                auto s = engine_.start(id, age, gender, concepts);
                out = view(s);
                return s;
            });
            reply(res, 200, out);
        });
    });
    http.Post(R"(/v1/sessions/([^/]+)/answer)", [this, view, maybe_delay](const httplib::Request& req,
                                                                         httplib::Response& res) {
        guarded(res, [&] {
            const auto body = parse_body(req);
            const auto concept_id = body.at("concept_id").get<std::string>();
            const auto response = engine::parse_response(body.at("response").get<std::string>());
            json out;
            sessions_.with_session(req.matches[1], [&](engine::Session& s) {
                maybe_delay(req);
                engine_.answer(s, concept_id, response);
                out = view(s);
            });
            reply(res, 200, out);
        });
    });
    http.Get(R"(/v1/sessions/([^/]+)/recommendation)", [this, maybe_delay](const httplib::Request& req,
                                                                           httplib::Response& res) {
        guarded(res, [&] {
            json out;
            sessions_.with_session(req.matches[1], [&](engine::Session& s) {
                maybe_delay(req);
                out = {{"session_id", s.id},
                       {"status", engine::to_string(s.status)},
                       {"recommendation", to_json(engine_.recommend(s))}};
            });
            reply(res, 200, out);
        });
    });
    http.Get("/v1/concepts/search", [this](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            if (!req.has_param("q")) throw InputError("missing query parameter q");
            const auto q = req.get_param_value("q");
            json candidates = json::array();
            for (const auto& m : index_.search(q))
                candidates.push_back({{"concept_id", m.concept_id},
                                      {"canonical", m.canonical},
                                      {"surface", m.surface},
                                      {"match", to_string(m.kind)},
                                      {"distance", m.distance},
                                      {"score", m.score}});
            reply(res, 200, {{"query", q}, {"candidates", candidates}});
        });
    });
    http.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
        reply(res, 200,
              {{"status", "ok"},
               {"build_hash", config_.build_hash},
               {"corpus_hash", hex64(artifacts_->graph.corpus_hash())},
               {"sessions", sessions_.size()},
               {"workers", config_.workers}});
    });
}

Server::~Server() { stop(); }

int Server::start() {
    auto& http = impl_->http;
    if (config_.port == 0) {
        port_ = http.bind_to_any_port(config_.host);
    } else {
        port_ = http.bind_to_port(config_.host, config_.port) ? config_.port : -1;
    }
    if (port_ < 0) throw ConfigError(fmt::format("cannot bind {}:{}", config_.host, config_.port));
    impl_->thread = std::thread([&http] { http.listen_after_bind(); });
    http.wait_until_ready();
    spdlog::info("serving on {}:{} with {} workers", config_.host, port_, config_.workers);
    return port_;
}

void Server::stop() {
    if (!impl_ || !impl_->thread.joinable()) return;
    impl_->http.stop();
    impl_->thread.join();
}

// ---------------------------------------------------------------------------
// Load generation

std::vector<Script> scripts_from_cases(const std::vector<corpus::CaseRecord>& cases, const engine::Engine& engine,
                                       const engine::ReplayConfig& config) {
    std::vector<Script> out;
    for (const auto& c : cases) {
        Script s;
        s.age = c.age;
        s.gender = c.gender;
        try {
            s.initial = engine::initial_concepts(c, engine, config);
        } catch (const DataError&) {
            continue;
        }
        for (const auto& m : c.mentions) {
            if (m.polarity != Polarity::present) continue;
            s.yes.insert(m.concept_id);
            if (engine.ontology().find(m.concept_id))
                for (const auto& a : engine.ontology().ancestors(m.concept_id)) s.yes.insert(a);
        }
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

json call(httplib::Client& client, const std::string& method, const std::string& path, const json* body,
          std::vector<double>* latencies) {
    const auto start = std::chrono::steady_clock::now();
    auto res = method == "GET" ? client.Get(path) : client.Post(path, body->dump(), "application/json");
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!res) throw BenchError(fmt::format("{} {} failed: {}", method, path, httplib::to_string(res.error())));
    if (latencies) latencies->push_back(elapsed);
    auto j = json::parse(res->body, nullptr, false);
    if (res->status != 200)
        throw BenchError(fmt::format("{} {} returned {}: {}", method, path, res->status, res->body));
    if (j.is_discarded()) throw BenchError(fmt::format("{} {} returned invalid JSON", method, path));
    return j;
}

}  // namespace

engine::Recommendation run_script(const std::string& host, int port, const Script& script,
                                  std::vector<double>* latencies) {
    httplib::Client client(host, port);
    client.set_connection_timeout(std::chrono::seconds(10));
    client.set_read_timeout(std::chrono::seconds(60));
    const json start{{"age", script.age}, {"gender", to_string(script.gender)}, {"concepts", script.initial}};
    auto state = call(client, "POST", "/v1/sessions", &start, latencies);
    const auto id = state.at("session_id").get<std::string>();
    while (state.contains("next_question")) {
        const auto q = state["next_question"]["concept_id"].get<std::string>();
        const json answer{{"concept_id", q}, {"response", script.yes.contains(q) ? "yes" : "no"}};
        state = call(client, "POST", "/v1/sessions/" + id + "/answer", &answer, latencies);
    }
    const auto rec = call(client, "GET", "/v1/sessions/" + id + "/recommendation", nullptr, latencies);
    return recommendation_from_json(rec.at("recommendation"));
}

double percentile(std::vector<double> sample, double q) {
    if (sample.empty()) return 0.0;
    std::sort(sample.begin(), sample.end());
    const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sample.size())));
    return sample[std::clamp<std::size_t>(rank, 1, sample.size()) - 1];
}

BenchReport run_load(const std::string& host, int port, const std::vector<Script>& scripts, const LoadConfig& config) {
    if (scripts.empty()) throw BenchError("no scripts to run");
    if (config.concurrency == 0) throw BenchError("concurrency must be at least 1");
    std::size_t workers = 0;
    {
        httplib::Client probe(host, port);
        probe.set_connection_timeout(std::chrono::seconds(2));
        const auto res = probe.Get("/v1/health");
        if (!res || res->status != 200) throw BenchError(fmt::format("service at {}:{} is unreachable", host, port));
        const auto health = nlohmann::json::parse(res->body, nullptr, false);
        if (health.is_object() && health.contains("workers")) workers = health["workers"].get<std::size_t>();
    }

    std::vector<std::vector<double>> latencies(config.concurrency);
    std::vector<std::size_t> sessions(config.concurrency, 0);
    std::atomic<bool> failed{false};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    const auto start = std::chrono::steady_clock::now();
    const auto deadline = start + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                      std::chrono::duration<double>(config.duration_seconds));
    std::vector<std::thread> clients;
    for (std::size_t c = 0; c < config.concurrency; ++c) {
        clients.emplace_back([&, c] {
            Rng rng(config.seed * 1000003ULL + c);
            try {
                while (!failed && std::chrono::steady_clock::now() < deadline) {
                    run_script(host, port, scripts[uniform_index(rng, scripts.size())], &latencies[c]);
                    ++sessions[c];
                }
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                failed = true;
            }
        });
    }
    for (auto& t : clients) t.join();
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (failure) std::rethrow_exception(failure);

    std::vector<double> all;
    BenchReport r;
    for (std::size_t c = 0; c < config.concurrency; ++c) {
        all.insert(all.end(), latencies[c].begin(), latencies[c].end());
        r.sessions += sessions[c];
    }
    r.workers = workers;
    r.concurrency = config.concurrency;
    r.requests = all.size();
    r.p50 = percentile(all, 0.50);
    r.p95 = percentile(all, 0.95);
    r.p99 = percentile(all, 0.99);
    r.max = all.empty() ? 0.0 : *std::max_element(all.begin(), all.end());
    double sum = 0.0;
    for (const double x : all) sum += x;
    r.mean = all.empty() ? 0.0 : sum / static_cast<double>(all.size());
    r.throughput = static_cast<double>(all.size()) / elapsed;
    return r;
}

std::vector<BenchReport> bench(const Artifacts& artifacts, const ServiceConfig& base,
                               const std::vector<std::size_t>& workers, const std::vector<Script>& scripts,
                               const LoadConfig& load) {
    std::vector<BenchReport> out;
    for (const auto w : workers) {
        auto config = base;
        config.workers = w;
        config.port = 0;
        Server server(artifacts, config);
        const int port = server.start();
        auto report = run_load(config.host, port, scripts, load);
        server.stop();
        report.workers = w;
        if (!out.empty() && out.back().throughput > 0.0)
            report.efficiency = (report.throughput / out.back().throughput) /
                                (static_cast<double>(w) / static_cast<double>(out.back().workers));
        spdlog::info("bench workers={} concurrency={} requests={} p50={:.4f}s p99={:.4f}s mean={:.4f}s {:.1f} req/s", w,
                     report.concurrency, report.requests, report.p50, report.p99, report.mean, report.throughput);
        out.push_back(report);
    }
    return out;
}

json to_json(const BenchReport& r) {
    return {{"workers", r.workers},       {"concurrency", r.concurrency}, {"requests", r.requests},
            {"sessions", r.sessions},     {"p50", r.p50},                 {"p95", r.p95},
            {"p99", r.p99},               {"mean", r.mean},               {"max", r.max},
            {"throughput", r.throughput}, {"efficiency", r.efficiency}};
}

}  // namespace triage::service
