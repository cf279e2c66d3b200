#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "triage/common.hpp"
#include "triage/ontology.hpp"

using namespace triage;
using namespace triage::ontology;

namespace {

const std::string kData = TRIAGE_DATA_DIR;

SimpleLexicon small_lexicon() {
    return SimpleLexicon({{"auge", {"auge"}},
                          {"augen", {"auge"}},
                          {"augenlid", {"augenlid"}},
                          {"druck", {"druck"}},
                          {"schmerz", {"schmerz"}},
                          {"schmerzen", {"schmerz"}},
                          {"bauch", {"bauch"}},
                          {"abdominal", {"bauch"}},
                          {"kopf", {"kopf"}},
                          {"arbeit", {"arbeit"}},
                          {"zeit", {"zeit"}},
                          {"finger", {"finger"}}});
}

text::DictEntry entry(std::string id, SemanticType type, std::vector<std::string> surfaces, ConceptFlags flags = {}) {
    text::DictEntry e;
    e.concept_id = std::move(id);
    e.canonical = surfaces.front();
    e.type = type;
    e.flags = flags;
    e.synonyms = surfaces;
    e.normalized_synonyms = surfaces;
    return e;
}

text::Dictionary small_dictionary() {
    return text::Dictionary({entry("D_bauchschmerz", SemanticType::symptom, {"bauchschmerz"}),
                             entry("D_schmerz_bauch", SemanticType::symptom, {"schmerz im bauch"}),
                             entry("D_abdominal", SemanticType::symptom, {"abdominalschmerz"}),
                             entry("D_kopfschmerz", SemanticType::symptom, {"kopfschmerz"}),
                             entry("D_schmerz", SemanticType::symptom, {"schmerz"}),
                             entry("D_druckschmerz", SemanticType::symptom, {"druckschmerz"}),
                             entry("D_augendruck", SemanticType::symptom, {"augendruckschmerz"}),
                             entry("D_druck_auge", SemanticType::symptom, {"druckschmerz am auge"}),
                             entry("D_augenschmerz", SemanticType::symptom, {"augenschmerz"}),
                             entry("D_lidschmerz", SemanticType::symptom, {"augenlidschmerz"}),
                             entry("D_bauch", SemanticType::anatomy, {"bauch"}),
                             entry("D_auge", SemanticType::anatomy, {"auge"}),
                             entry("D_augenlid", SemanticType::anatomy, {"augenlid"})});
}

std::vector<Annotation> annotations_of(const text::Dictionary& d) {
    AnnotationSet s;
    s.add_dictionary(d);
    s.normalize();
    return s.surfaces;
}

const Concept& concept_of(const std::vector<Concept>& cs, const std::string& surface) {
    for (const auto& c : cs)
        if (c.synonyms.contains(surface)) return c;
    FAIL("no concept holds " << surface);
    throw std::logic_error("unreachable");
}

std::vector<SeedEdge> small_seed() { return {{"augenlid", "auge", EdgeKind::child_of}}; }

Ontology small_ontology() {
    OntologyInputs in;
    static const auto dict = small_dictionary();
    in.dictionary = &dict;
    in.lexicon = small_lexicon();
    in.seeds = small_seed();
    AnnotationSet a;
    a.relations.push_back({"D_schmerz", "D_bauch", 3});
    return build_ontology(a, in);
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("triage_test_" + name)).string();
}

// Reachability oracle over an explicit edge list (Floyd-Warshall on ids).
std::set<std::pair<std::string, std::string>> closure(const std::vector<Edge>& edges) {
    std::set<std::string> nodes;
    for (const auto& e : edges) {
        nodes.insert(e.from);
        nodes.insert(e.to);
    }
    std::set<std::pair<std::string, std::string>> reach;
    for (const auto& e : edges) reach.insert({e.from, e.to});
    for (const auto& k : nodes)
        for (const auto& i : nodes)
            for (const auto& j : nodes)
                if (reach.contains({i, k}) && reach.contains({k, j})) reach.insert({i, j});
    return reach;
}

}  // namespace

TEST_CASE("split_compound decomposes by longest match") {
    const auto lex = small_lexicon();
    CHECK(split_compound("augendruckschmerz", lex) == std::vector<std::string>{"auge", "druck", "schmerz"});
    CHECK(split_compound("auge", lex) == std::vector<std::string>{"auge"});
    CHECK(split_compound("xyzzy", lex).empty());
    CHECK(split_compound("", lex).empty());
    CHECK(split_compound("augenlidschmerzen", lex) == std::vector<std::string>{"augenlid", "schmerz"});
}

TEST_CASE("split_compound allows one linking character between segments") {
    const auto lex = small_lexicon();
    CHECK(split_compound("arbeitszeit", lex) == std::vector<std::string>{"arbeit", "zeit"});
    CHECK(split_compound("arbeitxzeit", lex).empty());
    // A trailing linking character does not complete a split.
    CHECK(split_compound("arbeits", lex).empty());
    SplitConfig none;
    none.linking_chars = "";
    CHECK(split_compound("arbeitszeit", lex, none).empty());
}

TEST_CASE("split_compound backtracks when the longest prefix leaves no cover") {
    const SimpleLexicon lex({{"abc", {"x"}}, {"abcd", {"y"}}, {"def", {"z"}}});
    CHECK(split_compound("abcdef", lex) == std::vector<std::string>{"x", "z"});
}

TEST_CASE("property: split_compound reassembles the term") {
    const auto lex = small_lexicon();
    std::vector<std::string> surfaces;
    std::set<std::string> representatives;
    for (const auto& [s, r] : lex.entries()) {
        surfaces.push_back(s);
        representatives.insert(r.begin(), r.end());
    }
    Rng rng(3);
    for (int trial = 0; trial < 300; ++trial) {
        std::string term;
        const auto parts = 1 + uniform_index(rng, 4);
        for (std::uint64_t p = 0; p < parts; ++p) {
            if (p > 0 && bernoulli(rng, 0.3)) term += "sne"[uniform_index(rng, 3)];
            term += surfaces[uniform_index(rng, surfaces.size())];
        }
        const auto split = split_compound(term, lex);
        // Every generated term is coverable, so a split must exist.
        CHECK_MESSAGE(!split.empty(), term);
        for (const auto& s : split) CHECK(representatives.contains(s));
    }
}

TEST_CASE("semantic blocks ignore order, connectives and synonyms") {
    const auto lex = small_lexicon();
    CHECK(semantic_blocks("schmerz im bauch", lex) == semantic_blocks("bauchschmerz", lex));
    CHECK(semantic_blocks("abdominalschmerz", lex) == semantic_blocks("bauchschmerz", lex));
    CHECK(semantic_blocks("druckschmerz am auge", lex) == semantic_blocks("augendruckschmerz", lex));
    CHECK(semantic_blocks("xyzzy", lex) == std::vector<std::string>{"xyzzy"});
    CHECK(concept_id_for({"bauch", "schmerz"}) == concept_id_for(semantic_blocks("schmerz im bauch", lex)));
    CHECK(concept_id_for({"bauch", "schmerz"}).size() == 17);
}

TEST_CASE("cluster_concepts merges layman, technical and relational surfaces") {
    const auto dict = small_dictionary();
    const auto cs = cluster_concepts(annotations_of(dict), dict, small_lexicon());
    const auto& abd = concept_of(cs, "bauchschmerz");
    CHECK(abd.synonyms == std::set<std::string>{"abdominalschmerz", "bauchschmerz", "schmerz im bauch"});
    CHECK(abd.members.size() == 3);
    CHECK(abd.canonical == "abdominalschmerz");
    CHECK(concept_of(cs, "kopfschmerz").id != abd.id);
    CHECK(concept_of(cs, "druckschmerz am auge").id == concept_of(cs, "augendruckschmerz").id);
}

TEST_CASE("clustering a forced merge across semantic types is a conflict") {
    const text::Dictionary dict({entry("D_bauch", SemanticType::anatomy, {"bauch"}),
                                 entry("D_abdominal", SemanticType::symptom, {"abdominal"})});
    try {
        cluster_concepts(annotations_of(dict), dict, small_lexicon());
        FAIL("expected a conflict");
    } catch (const ClusteringConflict& e) {
        const std::string msg = e.what();
        CHECK(msg.find("D_bauch") != std::string::npos);
        CHECK(msg.find("D_abdominal") != std::string::npos);
    }
}

TEST_CASE("property: clustering is an order-independent partition") {
    const auto dict = small_dictionary();
    auto ann = annotations_of(dict);
    const auto reference = cluster_concepts(ann, dict, small_lexicon());
    Rng rng(8);
    for (int trial = 0; trial < 30; ++trial) {
        shuffle(ann, rng);
        const auto cs = cluster_concepts(ann, dict, small_lexicon());
        CHECK(cs == reference);
        for (const auto& a : ann) {
            int holders = 0;
            for (const auto& c : cs) holders += c.synonyms.contains(a.surface);
            CHECK(holders == 1);
        }
    }
}

TEST_CASE("taxonomy from block supersets and seed edges") {
    const auto o = small_ontology();
    const auto id = [&](const std::string& s) { return *o.by_surface(s); };
    auto parents = [&](const std::string& s) {
        const auto& p = o.parents(id(s));
        return std::set<std::string>(p.begin(), p.end());
    };
    CHECK(parents("druckschmerz").contains(id("schmerz")));
    CHECK(parents("augenlidschmerz").contains(id("augenschmerz")));
    CHECK(parents("augenlid").contains(id("auge")));
    CHECK(o.descendants(id("schmerz")).contains(id("druckschmerz")));
    CHECK(o.descendants(id("schmerz")).contains(id("augendruckschmerz")));
    // Reduced: augendruckschmerz reaches schmerz only through intermediate concepts.
    CHECK(!parents("augendruckschmerz").contains(id("schmerz")));
    CHECK(o.edges_of(EdgeKind::located_in) ==
          std::vector<Edge>{{id("schmerz"), EdgeKind::located_in, id("bauch")}});
}

TEST_CASE("identical block sets produce no taxonomy edge") {
    Concept a, b;
    a.id = "A";
    b.id = "B";
    a.blocks = b.blocks = {"druck", "schmerz"};
    CHECK(build_taxonomy({a, b}, {}).empty());
}

TEST_CASE("seed cycles are taxonomy errors with the path") {
    Concept a;
    a.id = "A";
    a.blocks = {"x"};
    try {
        build_taxonomy({a}, {{"x", "y", EdgeKind::child_of}, {"y", "x", EdgeKind::child_of}});
        FAIL("expected a taxonomy error");
    } catch (const TaxonomyError& e) {
        CHECK(std::string(e.what()).find(" -> ") != std::string::npos);
    }
}

TEST_CASE("property: taxonomy is acyclic and every edge is a covering") {
    Rng rng(12);
    const std::vector<std::string> entities{"a", "b", "c", "d", "e", "f"};
    const std::vector<SeedEdge> seeds{{"b", "a", EdgeKind::child_of}, {"c", "b", EdgeKind::child_of},
                                      {"e", "d", EdgeKind::child_of}};
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<Concept> cs;
        std::set<std::string> keys;
        for (int i = 0; i < 15; ++i) {
            std::set<std::string> blocks;
            const auto k = 1 + uniform_index(rng, 3);
            for (std::uint64_t j = 0; j < k; ++j) blocks.insert(entities[uniform_index(rng, entities.size())]);
            Concept c;
            c.blocks.assign(blocks.begin(), blocks.end());
            c.id = concept_id_for(c.blocks);
            if (keys.insert(c.id).second) cs.push_back(c);
        }
        const auto edges = build_taxonomy(cs, seeds);
        std::set<std::string> ids;
        for (const auto& c : cs) ids.insert(c.id);
        CHECK_NOTHROW(topological_order(ids, edges));
        for (const auto& e : edges) {
            const auto& child = *std::find_if(cs.begin(), cs.end(), [&](const auto& c) { return c.id == e.from; });
            const auto& parent = *std::find_if(cs.begin(), cs.end(), [&](const auto& c) { return c.id == e.to; });
            CHECK(child.blocks.size() >= parent.blocks.size());
        }
    }
}

TEST_CASE("property: transitive reduction keeps reachability and drops implied edges") {
    Rng rng(21);
    for (int trial = 0; trial < 40; ++trial) {
        const int n = 2 + static_cast<int>(uniform_index(rng, 9));
        std::vector<Edge> edges;
        // Random DAG: edges only from higher to lower index.
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < i; ++j)
                if (bernoulli(rng, 0.35)) edges.push_back({"n" + std::to_string(i), EdgeKind::child_of, "n" + std::to_string(j)});
        const auto reduced = transitive_reduction(edges);
        CHECK(closure(reduced) == closure(edges));
        for (const auto& e : reduced) {
            std::vector<Edge> without;
            for (const auto& f : reduced)
                if (!(f == e)) without.push_back(f);
            CHECK(!closure(without).contains({e.from, e.to}));
        }
    }
}

TEST_CASE("descendants of a leaf are empty and unknown ids are lookup errors") {
    const auto o = small_ontology();
    CHECK(o.descendants(*o.by_surface("augenlidschmerz")).empty());
    CHECK_THROWS_AS(o.descendants("K-none"), LookupError);
}

TEST_CASE("coarsen merges fine concepts into a coarse one") {
    const auto o = small_ontology();
    const auto lid = *o.by_surface("augenlid");
    const auto eye = *o.by_surface("auge");
    CHECK(coarsen(o, {}) == o);

    const auto before = o.descendants(lid);
    const auto merged = coarsen(o, {{"D_augenlid", "D_auge"}});
    CHECK(merged.find(lid) == nullptr);
    const auto& target = merged.at(eye);
    CHECK(target.synonyms.contains("augenlid"));
    CHECK(target.members.contains("D_augenlid"));
    CHECK(merged.resolve("D_augenlid") == eye);
    for (const auto& d : before) CHECK(merged.descendants(eye).contains(d));

    CHECK_THROWS_AS(coarsen(o, {{"D_augenlid", "D_nowhere"}}), LookupError);
    CHECK_THROWS_AS(coarsen(o, {{"D_augenlid", "D_schmerz"}}), MappingError);
}

TEST_CASE("coarsen rejects merges that create a child_of cycle") {
    // c child_of a child_of b; merging b into c closes a loop c -> a -> c.
    Concept a, b, c;
    a.id = "A";
    b.id = "B";
    c.id = "C";
    for (auto* x : {&a, &b, &c}) {
        x->blocks = {x->id};
        x->synonyms = {x->id};
        x->members = {"D_" + x->id};
    }
    const Ontology o({a, b, c}, {{"A", EdgeKind::child_of, "B"}, {"C", EdgeKind::child_of, "A"}});
    try {
        coarsen(o, {{"B", "C"}});
        FAIL("expected a taxonomy error");
    } catch (const TaxonomyError& e) {
        CHECK(std::string(e.what()).find("A") != std::string::npos);
    }
}

TEST_CASE("negation_of edges come from seed negation pairs") {
    const SimpleLexicon lex({{"appetit", {"appetit"}}, {"appetitlosigkeit", {"appetitlosigkeit"}}});
    Concept a, b;
    a.blocks = {"appetitlosigkeit"};
    b.blocks = {"appetit"};
    a.id = concept_id_for(a.blocks);
    b.id = concept_id_for(b.blocks);
    const auto edges = build_negations({a, b}, {{"appetitlosigkeit", "appetit", EdgeKind::negation_of}});
    CHECK(edges == std::vector<Edge>{{a.id, EdgeKind::negation_of, b.id}});
}

TEST_CASE("ontology validation rejects overlapping synonyms and bad red flags") {
    Concept a, b;
    a.id = "A";
    b.id = "B";
    a.blocks = {"x"};
    b.blocks = {"y"};
    a.synonyms = {"same"};
    b.synonyms = {"same"};
    CHECK_THROWS_AS(Ontology({a, b}, {}), ValidationError);
    b.synonyms = {"other"};
    b.type = SemanticType::anatomy;
    b.flags.red_flag = true;
    CHECK_THROWS_AS(Ontology({a, b}, {}), ValidationError);
    b.flags.red_flag = false;
    CHECK_THROWS_AS(Ontology({a, b}, {{"A", EdgeKind::child_of, "Z"}}), ValidationError);
}

TEST_CASE("export and import round-trip with stable ordering") {
    const auto o = small_ontology();
    const auto text = export_text(o);
    const auto back = import_text(text);
    CHECK(back == o);
    CHECK(export_text(back) == text);
    const auto path = temp_path("ontology.tsv");
    save_ontology(path, o);
    CHECK(load_ontology(path) == o);
    CHECK_THROWS_AS(import_text("schema_version\t7\n[concepts]\n"), ParseError);
    CHECK_THROWS_AS(import_text("[concepts]\n"), ParseError);
}

TEST_CASE("shipped resources build a valid ontology") {
    const auto res = text::TextResources::load(kData);
    OntologyInputs in;
    in.dictionary = &res.dictionary;
    in.lexicon = SimpleLexicon::load(kData + "/lexicon.tsv");
    in.seeds = load_seed(kData + "/seed_anatomy.tsv", in.lexicon);
    const auto symptom_seed = load_seed(kData + "/seed_symptom.tsv", in.lexicon);
    in.seeds.insert(in.seeds.end(), symptom_seed.begin(), symptom_seed.end());
    const auto o = build_ontology({}, in);
    CHECK(o.size() < res.dictionary.entries().size());
    CHECK(o.resolve("C_abdominal_pain") == o.resolve("C_bellyache"));
    CHECK(o.resolve("C_eye_pressure_pain") == o.resolve("C_eye_pressure_pain_2"));
    CHECK(o.resolve("C_abdominal_pain") != o.resolve("C_headache"));
    const auto eye_pain = *o.resolve("C_eye_pain");
    CHECK(o.descendants(eye_pain).contains(*o.resolve("C_eyelid_pain")));
    CHECK(o.descendants(*o.resolve("C_abdominal_pain")).contains(*o.resolve("C_upper_abdominal_pain")));
    CHECK(o.descendants(*o.resolve("C_pain")).contains(*o.resolve("C_pressure_pain")));
    CHECK(o.descendants(*o.resolve("C_finger")).contains(*o.resolve("C_finger_distal")));

    const auto merged = coarsen(o, load_merge_map(kData + "/merge_map.tsv"));
    const auto finger = *merged.resolve("C_finger");
    CHECK(merged.resolve("C_finger_proximal") == finger);
    CHECK(merged.at(finger).synonyms.contains("grundglied"));
    CHECK(merged.size() + 3 == o.size());
}
