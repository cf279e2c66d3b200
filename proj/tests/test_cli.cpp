#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <thread>

#include <json.hpp>
#include <pthread.h>
#include <signal.h>
#include <unistd.h>

#include "triage/cli.hpp"
#include "triage/common.hpp"
#include "triage/corpus.hpp"
#include <httplib.h>

namespace fs = std::filesystem;
using nlohmann::json;
using triage::cli::run;

namespace {

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome invoke(std::vector<std::string> args) {
    args.insert(args.begin(), {"--data-dir", TRIAGE_DATA_DIR, "--log-level", "warn"});
    std::ostringstream out, err;
    const int code = run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("triage_cli_" + std::to_string(::getpid())) / name;
    fs::create_directories(dir);
    return dir;
}

std::string p(const fs::path& path) { return path.string(); }

json error_line(const std::string& err) {
    const auto first = err.substr(0, err.find('\n'));
    return json::parse(first);
}

// Runs the artifact-building subcommands into `dir`.
void build_artifacts(const fs::path& dir, std::size_t n) {
    REQUIRE(invoke({"generate", "--n", std::to_string(n), "--seed", "11", "--out", p(dir / "c.jsonl")}).code == 0);
    REQUIRE(invoke({"ingest", "--in", p(dir / "c.jsonl"), "--out", p(dir / "a.jsonl"), "--annotations",
                    p(dir / "ann.tsv")})
                .code == 0);
    REQUIRE(invoke({"build-ontology", "--annotations", p(dir / "ann.tsv"), "--out", p(dir / "o.json")}).code == 0);
    REQUIRE(invoke({"build-kg", "--corpus", p(dir / "a.jsonl"), "--ontology", p(dir / "o.json"), "--out",
                    p(dir / "g.bin")})
                .code == 0);
}

}  // namespace

TEST_CASE("usage errors exit 2 with a JSON error line") {
    for (const auto& args : std::vector<std::vector<std::string>>{
             {"generate", "--nope"}, {}, {"frobnicate"}, {"generate"}, {"stats"}, {"generate", "--n", "many", "--out", "x"}}) {
        const auto r = invoke(args);
        CHECK(r.code == triage::cli::kExitUsage);
        const auto e = error_line(r.err);
        CHECK(e["error"] == "usage");
        CHECK(!e["message"].get<std::string>().empty());
    }
    const auto help = invoke({"--help"});
    CHECK(help.code == 0);
    CHECK(help.out.find("eval-triage") != std::string::npos);
}

TEST_CASE("domain failures exit 1 with the error kind") {
    const auto dir = scratch("fail");
    auto r = invoke({"eval-triage", "--graph", p(dir / "absent.bin")});
    CHECK(r.code == triage::cli::kExitFailure);
    auto e = error_line(r.err);
    CHECK(e["error"] == "config");
    const auto message = e["message"].get<std::string>();
    CHECK(message.find("ontology=<unset>") != std::string::npos);
    CHECK(message.find("absent.bin") != std::string::npos);
    CHECK(message.find("predictor=<unset>") != std::string::npos);

    triage::write_file(p(dir / "bad.jsonl"), "{not json\n");
    r = invoke({"stats", "--corpus", p(dir / "bad.jsonl")});
    CHECK(r.code == triage::cli::kExitFailure);
    CHECK(error_line(r.err)["error"] == "parse");
}

TEST_CASE("generate is deterministic and honours --ground-truth") {
    const auto dir = scratch("generate");
    REQUIRE(invoke({"generate", "--n", "50", "--seed", "3", "--out", p(dir / "a.jsonl")}).code == 0);
    REQUIRE(invoke({"generate", "--n", "50", "--seed", "3", "--out", p(dir / "b.jsonl")}).code == 0);
    REQUIRE(invoke({"generate", "--n", "50", "--seed", "4", "--out", p(dir / "c.jsonl")}).code == 0);
    const auto a = triage::read_file(p(dir / "a.jsonl"));
    CHECK(a == triage::read_file(p(dir / "b.jsonl")));
    CHECK(a != triage::read_file(p(dir / "c.jsonl")));

    REQUIRE(invoke({"generate", "--n", "20", "--seed", "3", "--ground-truth", "--out", p(dir / "g.jsonl")}).code == 0);
    const auto records = triage::corpus::load_corpus(p(dir / "g.jsonl"));
    REQUIRE(records.size() == 20);
    for (const auto& r : records) {
        REQUIRE(r.expected.has_value());
        CHECK(*r.expected == r.label);
    }
}

TEST_CASE("option precedence: flag over environment over config over default") {
    const auto dir = scratch("precedence");
    const auto out = p(dir / "c.jsonl");
    const auto count = [&] { return triage::corpus::load_corpus(out).size(); };
    const auto config = p(dir / "config.json");
    triage::write_file(config, json{{"seed", 5}, {"generate", {{"n", 13}, {"out", out}}}}.dump());

    REQUIRE(invoke({"generate", "--out", out}).code == 0);
    CHECK(count() == 1000);

    REQUIRE(invoke({"--config", config, "generate"}).code == 0);
    CHECK(count() == 13);
    const auto from_config = triage::read_file(out);
    REQUIRE(invoke({"generate", "--n", "13", "--seed", "5", "--out", out}).code == 0);
    CHECK(triage::read_file(out) == from_config);

    ::setenv("TRIAGE_N", "17", 1);
    const auto env_over_config = invoke({"--config", config, "generate"});
    const auto env_result = count();
    const auto flag_over_env = invoke({"--config", config, "generate", "--n", "19"});
    const auto flag_result = count();
    ::unsetenv("TRIAGE_N");
    REQUIRE(env_over_config.code == 0);
    REQUIRE(flag_over_env.code == 0);
    CHECK(env_result == 17);
    CHECK(flag_result == 19);
    REQUIRE(invoke({"--config", config, "generate"}).code == 0);
    CHECK(count() == 13);

    triage::write_file(config, json{{"generate", {{"bogus", 1}}}}.dump());
    const auto r = invoke({"--config", config, "generate"});
    CHECK(r.code == triage::cli::kExitFailure);
    CHECK(error_line(r.err)["error"] == "config");
}

TEST_CASE("artifact pipeline and eval-triage metrics file") {
    const auto dir = scratch("pipeline");
    build_artifacts(dir, 600);
    const auto suite = p(dir / "suite.jsonl");
    REQUIRE(invoke({"generate", "--n", "60", "--seed", "99", "--ground-truth", "--out", suite}).code == 0);

    const auto stats = invoke({"stats", "--graph", p(dir / "g.bin")});
    REQUIRE(stats.code == 0);
    CHECK(stats.out.find("case_record\t600") != std::string::npos);

    const auto metrics = p(dir / "metrics.txt");
    const auto r = invoke({"eval-triage", "--ontology", p(dir / "o.json"), "--graph", p(dir / "g.bin"), "--method",
                           "kld", "--suite", suite, "--out", metrics});
    REQUIRE(r.code == 0);
    const auto text = triage::read_file(metrics);
    CHECK(text == r.out);
    CHECK(text.rfind("emergency_recall 1.000000\n", 0) == 0);
    CHECK(text.find("cases 60\n") != std::string::npos);
    CHECK(text.find("\nhigh\t") != std::string::npos);

    const auto neural = invoke({"eval-triage", "--ontology", p(dir / "o.json"), "--graph", p(dir / "g.bin"),
                                "--suite", suite});
    CHECK(neural.code == triage::cli::kExitFailure);
    CHECK(error_line(neural.err)["message"].get<std::string>().find("predictor=<unset>") != std::string::npos);

    const auto coded = invoke({"build-kg", "--corpus", p(dir / "a.jsonl"), "--ontology", p(dir / "o.json"), "--out",
                               p(dir / "g2.bin"), "--codes", std::string(TRIAGE_DATA_DIR) + "/codes.tsv"});
    REQUIRE(coded.code == 0);
    CHECK(coded.out.rfind("code coverage ", 0) == 0);
}

TEST_CASE("qgen train and eval write a parsable report") {
    const auto dir = scratch("qgen");
    build_artifacts(dir, 600);
    const auto corpus = p(dir / "a.jsonl");
    const auto onto = p(dir / "o.json");
    REQUIRE(invoke({"train-qgen", "--corpus", corpus, "--ontology", onto, "--out", p(dir / "p.bin"), "--epochs", "2",
                    "--hidden", "16"})
                .code == 0);
    REQUIRE(invoke({"eval-qgen", "--corpus", corpus, "--ontology", onto, "--predictor", p(dir / "p.bin"), "--out",
                    p(dir / "q.json"), "--ks", "1,10"})
                .code == 0);
    const auto report = json::parse(triage::read_file(p(dir / "q.json")));
    CHECK(report["accuracy"].size() == 6);
    for (const auto& [method, acc] : report["accuracy"].items()) {
        CHECK(acc.contains("acc@1"));
        CHECK(acc["acc@1"].get<double>() <= acc["acc@10"].get<double>());
    }
}

TEST_CASE("relext train and eval on a small planted corpus") {
    const auto dir = scratch("relext");
    const auto model = p(dir / "m.bin");
    auto r = invoke({"train-relext", "--n", "400", "--epochs", "1", "--filters", "8", "--dense", "16", "--out", model,
                     "--metrics", p(dir / "train.json")});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("epoch 1 ") != std::string::npos);
    r = invoke({"eval-relext", "--model", model, "--n", "200", "--out", p(dir / "eval.json")});
    REQUIRE(r.code == 0);
    const auto m = json::parse(triage::read_file(p(dir / "eval.json")));
    CHECK(m["n"] == 200);
    CHECK(m["classes"].size() >= 2);
}

TEST_CASE("serve answers health and stops on SIGTERM") {
    const auto dir = scratch("serve");
    build_artifacts(dir, 300);
    const int port = 20000 + static_cast<int>(::getpid() % 20000);
    Outcome served{};
    std::thread server([&] {
        served = invoke({"serve", "--ontology", p(dir / "o.json"), "--graph", p(dir / "g.bin"), "--method", "kld",
                         "--port", std::to_string(port), "--workers", "2"});
    });
    httplib::Client client("127.0.0.1", port);
    httplib::Result health;
    for (int attempt = 0; attempt < 100 && !health; ++attempt) {
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
        health = client.Get("/v1/health");
    }
    REQUIRE(health);
    CHECK(health->status == 200);
    CHECK(json::parse(health->body)["workers"] == 2);
    ::pthread_kill(server.native_handle(), SIGTERM);
    server.join();
    CHECK(served.code == 0);
    CHECK(served.out.find("listening on 127.0.0.1:" + std::to_string(port)) != std::string::npos);
}

TEST_CASE("bench writes a report with one entry per worker count") {
    const auto dir = scratch("bench");
    build_artifacts(dir, 300);
    const auto suite = p(dir / "suite.jsonl");
    REQUIRE(invoke({"generate", "--n", "30", "--seed", "5", "--ground-truth", "--out", suite}).code == 0);
    const auto r = invoke({"bench", "--ontology", p(dir / "o.json"), "--graph", p(dir / "g.bin"), "--method", "kld",
                           "--suite", suite, "--workers", "1,2", "--concurrency", "4", "--duration", "0.3", "--out",
                           p(dir / "bench.json")});
    REQUIRE(r.code == 0);
    const auto report = json::parse(triage::read_file(p(dir / "bench.json")));
    REQUIRE(report["reports"].size() == 2);
    CHECK(report["reports"][0]["workers"] == 1);
    CHECK(report["reports"][1]["workers"] == 2);
    CHECK(report["environment"].contains("hardware_concurrency"));
    CHECK(report["reports"][1]["requests"].get<std::size_t>() > 0);
}
