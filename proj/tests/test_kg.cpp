#include <doctest.h>

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "triage/kg.hpp"
#include "triage/pipeline.hpp"

using namespace triage;
using namespace triage::kg;

namespace {

const pipeline::Resources& shipped() {
    static const auto r = pipeline::Resources::load(TRIAGE_DATA_DIR);
    return r;
}

const ontology::Ontology& shipped_ontology() {
    static const auto o = pipeline::build_ontology({}, shipped());
    return o;
}

std::string id_of(const std::string& dictionary_id) { return *shipped_ontology().resolve(dictionary_id); }

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("triage_test_kg_" + name)).string();
}

corpus::CaseRecord make_case(std::string id, int age, Gender g, std::vector<corpus::ConceptMention> mentions,
                             Risk risk = Risk::low) {
    corpus::CaseRecord r;
    r.id = std::move(id);
    r.age = age;
    r.gender = g;
    r.mentions = std::move(mentions);
    r.label.risk = risk;
    if (risk == Risk::high) {
        r.label.point_of_care = PointOfCare::emergency_call;
        r.label.time_frame = TimeFrame::immediate;
    } else if (risk == Risk::medium) {
        r.label.point_of_care = PointOfCare::physical_visit;
        r.label.time_frame = TimeFrame::within_24h;
    }
    return r;
}

corpus::ConceptMention present(const std::string& dictionary_id) {
    return {id_of(dictionary_id), Polarity::present, std::nullopt};
}
corpus::ConceptMention negated(const std::string& dictionary_id) {
    return {id_of(dictionary_id), Polarity::negated, std::nullopt};
}

const pipeline::Built& generated() {
    static const auto b = [] {
        const auto profile = corpus::load_profile(std::string(TRIAGE_DATA_DIR) + "/profile.json");
        return pipeline::run(corpus::generate_corpus(profile, 600, 31), shipped());
    }();
    return b;
}

// Dense oracle for one relation step.
std::vector<double> dense_multiply(const Csr& m, const std::vector<double>& x) {
    std::vector<std::vector<double>> a(m.rows, std::vector<double>(m.cols, 0.0));
    for (std::uint32_t r = 0; r < m.rows; ++r)
        for (auto p = m.row_ptr[r]; p < m.row_ptr[r + 1]; ++p) a[r][m.col[p]] = m.weight[p];
    std::vector<double> y(m.cols, 0.0);
    for (std::uint32_t r = 0; r < m.rows; ++r)
        for (std::uint32_t c = 0; c < m.cols; ++c) y[c] += x[r] * a[r][c];
    return y;
}

SparseVector random_frontier(Rng& rng, NodeType type, std::size_t n, double density) {
    SparseVector v{type, {}, {}};
    for (std::uint32_t i = 0; i < n; ++i)
        if (bernoulli(rng, density)) {
            v.index.push_back(i);
            v.value.push_back(uniform_range(rng, -2.0, 2.0));
        }
    return v;
}

std::vector<double> densify(const SparseVector& v, std::size_t n) {
    std::vector<double> d(n, 0.0);
    for (std::size_t k = 0; k < v.nnz(); ++k) d[v.index[k]] = v.value[k];
    return d;
}

// Brute force over the records themselves: IDF, candidate set and score.
struct OracleCase {
    std::string id;
    double score;
};
std::vector<OracleCase> oracle_similar(const std::vector<corpus::CaseRecord>& records, const ontology::Ontology& o,
                                       const PatientProfile& profile, const SimilarityConfig& cfg) {
    std::map<std::string, std::size_t> df;
    for (const auto& r : records) {
        std::set<std::string> seen;
        for (const auto& m : r.mentions)
            if (m.polarity == Polarity::present) seen.insert(m.concept_id);
        for (const auto& c : seen) ++df[c];
    }
    const auto idf = [&](const std::string& c) {
        const auto it = df.find(c);
        return it == df.end() ? 0.0 : std::log(static_cast<double>(records.size()) / static_cast<double>(it->second));
    };
    double sum = 0.0;
    std::size_t nodes = 0;
    for (const auto& c : o.concepts()) {
        if (!node_type_for(c)) continue;
        sum += idf(c.id);
        ++nodes;
    }
    const double demo = cfg.demographic_factor * (nodes ? sum / static_cast<double>(nodes) : 0.0);
    std::vector<OracleCase> out;
    for (const auto& r : records) {
        std::set<std::string> has;
        for (const auto& m : r.mentions)
            if (m.polarity == Polarity::present) has.insert(m.concept_id);
        bool candidate = false;
        double s = 0.0;
        for (const auto& a : std::set<std::string>(profile.affirmed.begin(), profile.affirmed.end()))
            if (has.contains(a) && o.find(a) && node_type_for(*o.find(a))) {
                candidate = true;
                s += idf(a);
            }
        for (const auto& d : std::set<std::string>(profile.denied.begin(), profile.denied.end()))
            if (has.contains(d)) s -= cfg.lambda_negative * idf(d);
        if (profile.age_group && corpus::age_group(r.age) == *profile.age_group) s += demo;
        if (profile.gender && r.gender == *profile.gender) s += demo;
        if (candidate) out.push_back({r.id, s});
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    });
    return out;
}

}  // namespace

TEST_CASE("csr from triples, transpose and validation") {
    Rng rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        const auto rows = static_cast<std::uint32_t>(1 + uniform_index(rng, 12));
        const auto cols = static_cast<std::uint32_t>(1 + uniform_index(rng, 12));
        std::vector<std::tuple<std::uint32_t, std::uint32_t, double>> triples;
        std::map<std::pair<std::uint32_t, std::uint32_t>, double> expect;
        for (int e = 0; e < 40; ++e) {
            const auto r = static_cast<std::uint32_t>(uniform_index(rng, rows));
            const auto c = static_cast<std::uint32_t>(uniform_index(rng, cols));
            const double w = uniform_range(rng, 0.1, 1.0);
            triples.emplace_back(r, c, w);
            expect[{r, c}] += w;
        }
        const auto m = Csr::from_triples(rows, cols, triples);
        m.validate("m");
        CHECK(m.nnz() == expect.size());
        for (std::uint32_t r = 0; r < rows; ++r)
            for (auto p = m.row_ptr[r]; p < m.row_ptr[r + 1]; ++p)
                CHECK(m.weight[p] == doctest::Approx(expect.at({r, m.col[p]})));
        const auto t = m.transpose();
        t.validate("t");
        const auto back = t.transpose();
        CHECK(back.row_ptr == m.row_ptr);
        CHECK(back.col == m.col);
        CHECK(back.weight == m.weight);
    }
    Csr bad = Csr::from_triples(2, 2, {{0, 1, 1.0}});
    bad.weight[0] = 0.0;
    CHECK_THROWS_AS(bad.validate("bad"), ValidationError);
    CHECK_THROWS_AS(Csr::from_triples(2, 2, {{2, 0, 1.0}}), ValidationError);
}

TEST_CASE("build_graph node tables and relations") {
    const std::vector<corpus::CaseRecord> records{
        make_case("c2", 30, Gender::male, {present("C_fever"), negated("C_headache")}),
        make_case("c1", 70, Gender::female, {present("C_fever"), present("C_headache"), present("C_leg")}, Risk::medium),
    };
    const auto kg = build_graph(records, shipped_ontology());
    const auto& cases = kg.nodes(NodeType::case_record);
    REQUIRE(cases.size() == 2);
    CHECK(cases.keys[0] == "c1");
    CHECK(cases.keys[1] == "c2");
    CHECK(kg.nodes(NodeType::age_group).size() == static_cast<std::size_t>(corpus::kAgeGroupCount));
    CHECK(kg.nodes(NodeType::gender).size() == 3);
    CHECK(kg.nodes(NodeType::recommendation).size() == 2);
    for (std::size_t t = 0; t < kNodeTypeCount; ++t) {
        const auto& codes = kg.nodes(NodeType(t)).codes;
        CHECK(std::is_sorted(codes.begin(), codes.end()));
        for (const auto c : codes) CHECK((c >> 56) == t + 1);
    }
    // Every clinical ontology concept has a node; anatomy has none.
    std::size_t clinical = 0;
    for (const auto& c : shipped_ontology().concepts()) clinical += node_type_for(c).has_value();
    const auto concept_nodes = kg.nodes(NodeType::symptom).size() + kg.nodes(NodeType::disease).size() +
                               kg.nodes(NodeType::red_flag).size();
    CHECK(concept_nodes == clinical);
    CHECK_FALSE(kg.concept_node(id_of("C_leg")).has_value());

    const auto fever = *kg.concept_node(id_of("C_fever"));
    const auto headache = *kg.concept_node(id_of("C_headache"));
    const auto& pos = kg.relation(concept_relation(NodeType::symptom, Polarity::present)).forward;
    const auto& neg = kg.relation(concept_relation(NodeType::symptom, Polarity::negated)).forward;
    CHECK(pos.row_ptr[fever.second + 1] - pos.row_ptr[fever.second] == 2);
    CHECK(pos.row_ptr[headache.second + 1] - pos.row_ptr[headache.second] == 1);
    CHECK(neg.nnz() == 1);
    CHECK(kg.relation(kAgeGroupToPatient).forward.nnz() == 2);
    CHECK(kg.relation(kPatientToRecommendation).forward.nnz() == 2);
    CHECK(kg.case_labels()[0].risk == Risk::medium);
    CHECK(kg.case_genders()[1] == Gender::male);
    CHECK(kg.case_age_groups()[0] == corpus::age_group(70));
    CHECK(build_graph(records, shipped_ontology()) == kg);

    auto broken = records;
    broken[1].mentions.push_back({"C_not_a_concept", Polarity::present, std::nullopt});
    try {
        (void)build_graph(broken, shipped_ontology());
        FAIL("expected IngestionError");
    } catch (const IngestionError& e) {
        CHECK(std::string(e.what()).find("c1") != std::string::npos);
    }
    broken = records;
    broken[1].id = "c2";
    CHECK_THROWS_AS((void)build_graph(broken, shipped_ontology()), IngestionError);
}

TEST_CASE("idf weights: ln(N/df)") {
    std::vector<corpus::CaseRecord> records;
    for (int i = 0; i < 1000; ++i) {
        std::vector<corpus::ConceptMention> m{present("C_fever")};
        if (i == 0) m.push_back(present("C_headache"));
        records.push_back(make_case("case" + std::to_string(1000 + i), 30, Gender::female, m));
    }
    const auto kg = build_graph(records, shipped_ontology());
    const auto headache = *kg.concept_node(id_of("C_headache"));
    const auto fever = *kg.concept_node(id_of("C_fever"));
    CHECK(kg.concept_weight(headache.first, headache.second) == doctest::Approx(6.9078).epsilon(1e-4));
    CHECK(kg.concept_weight(fever.first, fever.second) == 0.0);
    const auto unseen = *kg.concept_node(id_of("C_cough"));
    CHECK(kg.concept_weight(unseen.first, unseen.second) == 0.0);
}

TEST_CASE("traverse matches a dense oracle and both kernels agree bitwise") {
    const auto kg = synthetic_graph(300, 80, 4000, 17);
    const auto& rel = kg.relation(concept_relation(NodeType::symptom, Polarity::present));
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const auto x = random_frontier(rng, NodeType::symptom, 80, 0.1 + 0.04 * trial);
        const auto serial = traverse(kg, {{rel.name}}, x, Kernel::serial);
        const auto parallel = traverse(kg, {{rel.name}}, x, Kernel::parallel);
        CHECK(serial == parallel);
        const auto expect = dense_multiply(rel.forward, densify(x, 80));
        const auto got = densify(serial, 300);
        for (std::size_t j = 0; j < got.size(); ++j) CHECK(got[j] == doctest::Approx(expect[j]).epsilon(1e-12));

        // Two hops back to symptoms.
        const std::vector<PathStep> path{{rel.name, Direction::forward}, {rel.name, Direction::reverse}};
        const auto s2 = traverse(kg, path, x, Kernel::serial);
        const auto p2 = traverse(kg, path, x, Kernel::parallel);
        CHECK(s2 == p2);
        CHECK(s2.type == NodeType::symptom);
        const auto expect2 = dense_multiply(rel.backward, expect);
        const auto got2 = densify(s2, 80);
        for (std::size_t j = 0; j < got2.size(); ++j) CHECK(got2[j] == doctest::Approx(expect2[j]).epsilon(1e-10));
    }
}

TEST_CASE("traverse is linear in the frontier") {
    const auto kg = synthetic_graph(500, 120, 6000, 23);
    const std::vector<PathStep> path{{"symptom_to_patient", Direction::forward},
                                     {"symptom_to_patient", Direction::reverse},
                                     {"symptom_to_patient", Direction::forward}};
    Rng rng(8);
    for (int trial = 0; trial < 25; ++trial) {
        const auto x = random_frontier(rng, NodeType::symptom, 120, 0.2);
        const auto y = random_frontier(rng, NodeType::symptom, 120, 0.2);
        const double a = uniform_range(rng, -3.0, 3.0), b = uniform_range(rng, -3.0, 3.0);
        auto ax = x, by = y;
        for (auto& v : ax.value) v *= a;
        for (auto& v : by.value) v *= b;
        const auto lhs = densify(traverse(kg, path, add(ax, by)), 500);
        const auto tx = densify(traverse(kg, path, x), 500);
        const auto ty = densify(traverse(kg, path, y), 500);
        double scale = 1.0;
        for (std::size_t j = 0; j < lhs.size(); ++j) scale = std::max(scale, std::abs(lhs[j]));
        for (std::size_t j = 0; j < lhs.size(); ++j) CHECK(std::abs(lhs[j] - (a * tx[j] + b * ty[j])) <= 1e-9 * scale);
    }
}

TEST_CASE("traverse rejects type-incompatible paths naming the step") {
    const auto kg = synthetic_graph(10, 5, 20, 1);
    const SparseVector x{NodeType::symptom, {0}, {1.0}};
    try {
        (void)traverse(kg, {{"symptom_to_patient", Direction::forward}, {"symptom_to_patient", Direction::forward}}, x);
        FAIL("expected PathError");
    } catch (const PathError& e) {
        CHECK(std::string(e.what()).find("step 1") != std::string::npos);
    }
    CHECK_THROWS_AS((void)traverse(kg, {{"no_such_relation"}}, x), PathError);
    CHECK_THROWS_AS((void)traverse(kg, {{"symptom_to_patient", Direction::reverse}}, x), PathError);
    CHECK(traverse(kg, {}, x) == x);
    const SparseVector unsorted{NodeType::symptom, {2, 1}, {1.0, 1.0}};
    CHECK_THROWS_AS((void)traverse(kg, {{"symptom_to_patient"}}, unsorted), ValidationError);
}

TEST_CASE("similar_cases equals the brute-force oracle") {
    const auto& b = generated();
    Rng rng(77);
    std::vector<std::string> concept_ids;
    for (const auto& r : b.records)
        for (const auto& m : r.mentions) concept_ids.push_back(m.concept_id);
    std::sort(concept_ids.begin(), concept_ids.end());
    concept_ids.erase(std::unique(concept_ids.begin(), concept_ids.end()), concept_ids.end());
    REQUIRE(concept_ids.size() > 10);

    for (int trial = 0; trial < 60; ++trial) {
        PatientProfile p;
        const auto n_aff = 1 + uniform_index(rng, 4);
        const auto n_den = uniform_index(rng, 3);
        std::set<std::string> used;
        while (used.size() < n_aff) used.insert(concept_ids[uniform_index(rng, concept_ids.size())]);
        p.affirmed.assign(used.begin(), used.end());
        for (std::size_t i = 0; i < n_den; ++i) {
            const auto& c = concept_ids[uniform_index(rng, concept_ids.size())];
            if (!used.contains(c)) p.denied.push_back(c);
        }
        if (bernoulli(rng, 0.7)) p.age_group = static_cast<int>(uniform_index(rng, corpus::kAgeGroupCount));
        if (bernoulli(rng, 0.7)) p.gender = Gender(uniform_index(rng, 3));
        SimilarityConfig cfg;
        cfg.k = 1 + uniform_index(rng, 60);
        const auto got = similar_cases(b.graph, p, cfg, trial % 2 ? Kernel::parallel : Kernel::serial);
        const auto all = oracle_similar(b.records, b.ontology, p, cfg);
        REQUIRE(got.size() == std::min(cfg.k, all.size()));
        std::map<std::string, double> oracle_score;
        for (const auto& o : all) oracle_score[o.id] = o.score;
        std::set<std::string> ids;
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(std::abs(got[i].score - all[i].score) < 1e-9);
            REQUIRE(oracle_score.contains(got[i].case_id));
            CHECK(std::abs(got[i].score - oracle_score[got[i].case_id]) < 1e-9);
            ids.insert(got[i].case_id);
        }
        CHECK(ids.size() == got.size());
    }
}

TEST_CASE("similar_cases ties, k and errors") {
    const std::vector<corpus::CaseRecord> records{
        make_case("b", 30, Gender::female, {present("C_fever")}),
        make_case("a", 30, Gender::female, {present("C_fever")}),
        make_case("c", 30, Gender::female, {present("C_fever"), present("C_headache")}),
        make_case("d", 30, Gender::female, {present("C_cough")}),
    };
    const auto kg = build_graph(records, shipped_ontology());
    PatientProfile p;
    p.affirmed = {id_of("C_fever")};
    SimilarityConfig cfg;
    cfg.k = 100;
    auto got = similar_cases(kg, p, cfg);
    REQUIRE(got.size() == 3);  // "d" shares nothing
    CHECK(got[0].case_id == "a");
    CHECK(got[1].case_id == "b");
    CHECK(got[2].case_id == "c");

    p.denied = {id_of("C_headache")};
    got = similar_cases(kg, p, cfg);
    const auto h = *kg.concept_node(id_of("C_headache"));
    CHECK(got.back().case_id == "c");
    CHECK(got.back().score == doctest::Approx(got[0].score - 0.5 * kg.concept_weight(h.first, h.second)));

    cfg.k = 1;
    CHECK(similar_cases(kg, p, cfg).size() == 1);
    cfg.k = 0;
    CHECK_THROWS_AS((void)similar_cases(kg, p, cfg), QueryError);
    CHECK_THROWS_AS((void)similar_cases(kg, PatientProfile{}), QueryError);
    PatientProfile both;
    both.affirmed = {id_of("C_fever")};
    both.denied = {id_of("C_fever")};
    CHECK_THROWS_AS((void)similar_cases(kg, both), QueryError);
}

TEST_CASE("learned weights favour a planted discriminative concept") {
    std::vector<corpus::CaseRecord> records;
    Rng rng(4);
    for (int i = 0; i < 400; ++i) {
        const bool high = i % 2 == 0;
        std::vector<corpus::ConceptMention> m{present("C_fever")};
        if (high) m.push_back(present("C_headache"));
        if (bernoulli(rng, 0.5)) m.push_back(present("C_cough"));
        records.push_back(make_case("p" + std::to_string(1000 + i), 40, Gender::male, m, high ? Risk::medium : Risk::low));
    }
    const auto kg = build_graph(records, shipped_ontology());
    std::vector<std::string> ids(kg.nodes(NodeType::case_record).keys);
    const auto w = learn_weights(kg, ids);
    CHECK(w.source == "learned");
    const auto weight = [&](const std::string& d) {
        const auto n = *kg.concept_node(id_of(d));
        return w.by_type.at(n.first)[n.second];
    };
    CHECK(weight("C_headache") > 4.0 * weight("C_cough"));
    for (const auto& [t, v] : w.by_type)
        for (const double x : v) CHECK(x >= 0.0);
    const auto reweighted = kg.with_weights(w);
    CHECK(reweighted.weights().source == "learned");

    std::vector<std::string> single_class;
    for (std::size_t i = 0; i < ids.size(); i += 2) single_class.push_back(ids[i]);
    CHECK_THROWS_AS((void)learn_weights(kg, single_class), TrainingError);
    CHECK_THROWS_AS((void)learn_weights(kg, {"missing"}), LookupError);
}

TEST_CASE("map_to_codes reports coverage and rejects duplicate codes") {
    const auto& kg = generated().graph;
    const auto fever = id_of("C_fever"), cough = id_of("C_cough");
    const auto [mapped, coverage] = map_to_codes(kg, {{fever, 1001}, {cough, 1002}, {"not_a_node", 1003}});
    CHECK(coverage.mapped == 2);
    const auto concept_nodes = kg.nodes(NodeType::symptom).size() + kg.nodes(NodeType::disease).size() +
                               kg.nodes(NodeType::red_flag).size();
    CHECK(coverage.concept_nodes == concept_nodes);
    const auto n = *mapped.concept_node(fever);
    CHECK(mapped.nodes(n.first).codes[n.second] == 1001);
    CHECK(mapped.edge_count() == kg.edge_count());
    CHECK(mapped.nodes(NodeType::case_record).codes == kg.nodes(NodeType::case_record).codes);
    CHECK_THROWS_AS((void)map_to_codes(kg, {{fever, 7}, {cough, 7}}), MappingError);
    // An external code may not collide with an internal one either.
    const auto internal = kg.nodes(NodeType::case_record).codes.front();
    CHECK_THROWS_AS((void)map_to_codes(kg, {{fever, internal}}), MappingError);

    const auto path = temp_path("codes.tsv");
    write_file(path, "# id\tcode\nC_fever\t11\nC_unknown_thing\t12\nC_cough\t13\n");
    std::size_t unresolved = 0;
    const auto table = load_code_table(path, shipped_ontology(), &unresolved);
    CHECK(unresolved == 1);
    CHECK(table.at(fever) == 11);
    write_file(path, "C_abdominal_pain\t1\nC_bellyache\t2\n");
    CHECK_THROWS_AS((void)load_code_table(path, shipped_ontology()), MappingError);
    write_file(path, "C_fever\tx1\n");
    CHECK_THROWS_AS((void)load_code_table(path, shipped_ontology()), ParseError);
}

TEST_CASE("snapshot round-trip and corruption") {
    const auto& kg = generated().graph;
    const auto path = temp_path("graph.tkgs");
    save_snapshot(path, kg);
    const auto back = load_snapshot(path);
    CHECK(back == kg);
    PatientProfile p;
    p.affirmed = {kg.nodes(NodeType::symptom).keys.front(), id_of("C_fever")};
    CHECK(similar_cases(back, p) == similar_cases(kg, p));

    const auto bytes = read_file(path);
    write_file(path, bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS((void)load_snapshot(path), ParseError);
    write_file(path, "XKGS" + bytes.substr(4));
    CHECK_THROWS_AS((void)load_snapshot(path), ParseError);
    write_file(path, bytes + "x");
    CHECK_THROWS_AS((void)load_snapshot(path), ParseError);
}

TEST_CASE("stats lists node and edge counts") {
    const auto& kg = generated().graph;
    const auto text = stats_text(kg);
    CHECK(text.find("case_record\t" + std::to_string(kg.case_count())) != std::string::npos);
    CHECK(text.find("symptom_to_patient\t") != std::string::npos);
    CHECK(text.find("total\t" + std::to_string(kg.edge_count())) != std::string::npos);
}
