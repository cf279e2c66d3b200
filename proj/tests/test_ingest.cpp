#include <doctest.h>

#include <omp.h>

#include <set>

#include "triage/ingest.hpp"
#include "triage/pipeline.hpp"

using namespace triage;
using namespace triage::ingest;

namespace {

const pipeline::Resources& shipped() {
    static const auto r = pipeline::Resources::load(TRIAGE_DATA_DIR);
    return r;
}

corpus::CaseRecord record(std::string id, std::string text) {
    corpus::CaseRecord r;
    r.id = std::move(id);
    r.age = 30;
    r.gender = Gender::female;
    r.free_text = std::move(text);
    return r;
}

}  // namespace

TEST_CASE("located anatomy becomes the body location") {
    const auto a = annotate_record("Schmerzen am Bein", shipped().text);
    REQUIRE(a.mentions.size() == 1);
    CHECK(a.mentions[0].concept_id == "C_pain");
    CHECK(a.mentions[0].polarity == Polarity::present);
    CHECK(a.mentions[0].body_location == std::optional<std::string>("C_leg"));
    CHECK(a.rule_relations == 1);
    REQUIRE(a.relations.size() == 1);
    CHECK(a.relations[0].head_id == "C_pain");
    CHECK(a.relations[0].location_id == "C_leg");
}

TEST_CASE("present beats negated when a concept repeats") {
    const auto a = annotate_record("Kein Fieber. Seit gestern Fieber.", shipped().text);
    REQUIRE(a.mentions.size() == 1);
    CHECK(a.mentions[0].concept_id == "C_fever");
    CHECK(a.mentions[0].polarity == Polarity::present);

    const auto b = annotate_record("Kein Fieber.", shipped().text);
    REQUIRE(b.mentions.size() == 1);
    CHECK(b.mentions[0].polarity == Polarity::negated);
}

TEST_CASE("records without mentions are dropped and counted") {
    const std::vector<corpus::CaseRecord> in{record("a", "Fieber"), record("b", "xyz qwe"), record("c", "")};
    const auto out = ingest::ingest(in, shipped().text);
    CHECK(out.report.records_in == 3);
    CHECK(out.report.records_out == 1);
    CHECK(out.report.dropped_empty == 2);
    REQUIRE(out.records.size() == 1);
    CHECK(out.records[0].id == "a");
}

TEST_CASE("ingest recovers generated ground truth") {
    const auto profile = corpus::load_profile(std::string(TRIAGE_DATA_DIR) + "/profile.json");
    const auto records = corpus::generate_corpus(profile, 300, 11);
    const auto out = ingest::ingest(records, shipped().text);
    REQUIRE(out.records.size() == records.size());
    std::size_t truth = 0, found = 0, polarity_ok = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        std::map<std::string, Polarity> got;
        for (const auto& m : out.records[i].mentions) got[m.concept_id] = m.polarity;
        for (const auto& m : records[i].mentions) {
            ++truth;
            const auto it = got.find(m.concept_id);
            if (it == got.end()) continue;
            ++found;
            if (it->second == m.polarity) ++polarity_ok;
        }
    }
    const double recall = static_cast<double>(found) / static_cast<double>(truth);
    const double polarity = static_cast<double>(polarity_ok) / static_cast<double>(found);
    MESSAGE("concept recall " << recall << ", polarity agreement " << polarity);
    CHECK(recall >= 0.9);
    CHECK(polarity >= 0.9);
}

TEST_CASE("ingest output does not depend on the thread count") {
    const auto profile = corpus::load_profile(std::string(TRIAGE_DATA_DIR) + "/profile.json");
    const auto records = corpus::generate_corpus(profile, 200, 5);
    const int threads = omp_get_max_threads();
    omp_set_num_threads(1);
    const auto serial = ingest::ingest(records, shipped().text);
    omp_set_num_threads(4);
    const auto parallel = ingest::ingest(records, shipped().text);
    omp_set_num_threads(threads);
    REQUIRE(serial.records.size() == parallel.records.size());
    for (std::size_t i = 0; i < serial.records.size(); ++i) CHECK(serial.records[i] == parallel.records[i]);
    CHECK(serial.annotations.surfaces == parallel.annotations.surfaces);
}

TEST_CASE("resolve_to_ontology maps ids and names the failing record") {
    const auto o = pipeline::build_ontology({}, shipped());
    auto rec = record("r-17", "");
    rec.mentions = {{"C_abdominal_pain", Polarity::negated, std::nullopt},
                    {"C_bellyache", Polarity::present, std::string("C_finger_distal")}};
    const auto resolved = resolve_to_ontology({rec}, o);
    REQUIRE(resolved[0].mentions.size() == 1);
    CHECK(resolved[0].mentions[0].concept_id == *o.resolve("C_abdominal_pain"));
    CHECK(resolved[0].mentions[0].polarity == Polarity::present);
    CHECK(resolved[0].mentions[0].body_location == o.resolve("C_finger"));

    rec.mentions = {{"C_nonexistent", Polarity::present, std::nullopt}};
    try {
        (void)resolve_to_ontology({rec}, o);
        FAIL("expected IngestionError");
    } catch (const IngestionError& e) {
        CHECK(std::string(e.what()).find("r-17") != std::string::npos);
    }
}
