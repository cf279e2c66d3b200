#include <doctest.h>

#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>

#include "triage/pipeline.hpp"
#include "triage/qgen.hpp"

using namespace triage;
using namespace triage::qgen;

namespace {

const pipeline::Resources& shipped() {
    static const auto r = pipeline::Resources::load(TRIAGE_DATA_DIR);
    return r;
}

const pipeline::Built& generated() {
    static const auto b = [] {
        const auto profile = corpus::load_profile(std::string(TRIAGE_DATA_DIR) + "/profile.json");
        return pipeline::run(corpus::generate_corpus(profile, 800, 41), shipped());
    }();
    return b;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("triage_test_qgen_" + name)).string();
}

// Independent ranker arithmetic straight from counts.
struct OracleCounts {
    double in_relevant = 0, in_all = 0, relevant_size = 0, all_size = 0, weight_sum = 0;
};
double oracle_score(Method m, const OracleCounts& c) {
    const double eps = 1e-6;
    const double pr = (c.in_relevant + eps) / (c.relevant_size + 2 * eps);
    const double pn = (c.in_all + eps) / (c.all_size + 2 * eps);
    switch (m) {
        case Method::frequency: return c.in_relevant;
        case Method::bim: return std::log(pr / (1 - pr)) - std::log(pn / (1 - pn));
        case Method::chi: return std::log((pr - pn) * (pr - pn) + eps * eps) - std::log(pn);
        case Method::kld: return pr * (std::log(pr) - std::log(pn));
        case Method::rsv: return c.weight_sum * (pr - pn);
        case Method::neural: break;
    }
    return 0;
}

}  // namespace

TEST_CASE("ranker formulas on worked values") {
    CHECK(bim_score(0.8, 0.2) == doctest::Approx(2.7726).epsilon(1e-4));
    CHECK(bim_score(0.8, 0.2) == doctest::Approx(std::log(16.0)));
    CHECK(bim_score(0.2, 0.8) == doctest::Approx(-2.7726).epsilon(1e-4));
    CHECK(bim_score(0.3, 0.3) == doctest::Approx(0.0));
    CHECK(chi_score(0.4, 0.1) == doctest::Approx(-0.1054).epsilon(1e-3));
    CHECK(chi_score(0.1, 0.4) == doctest::Approx(-1.4917).epsilon(1e-4));
    CHECK(std::isfinite(chi_score(0.3, 0.3)));
    CHECK(chi_score(0.3, 0.3) < chi_score(0.31, 0.3));
    CHECK(kld_score(0.5, 0.25) == doctest::Approx(0.3466).epsilon(1e-3));
    CHECK(kld_score(0.25, 0.5) == doctest::Approx(-0.1733).epsilon(1e-3));
    CHECK(kld_score(0.4, 0.4) == 0.0);
    CHECK(rsv_score(1.0, 1.0, 0.1) == doctest::Approx(0.9));
    CHECK(rsv_score(0.0, 0.7, 0.1) == 0.0);
    CHECK(rsv_score(2.4, 0.7, 0.1) == doctest::Approx(2.0 * rsv_score(1.2, 0.7, 0.1)));
    CHECK(smoothed(0, 10) > 0.0);
    CHECK(smoothed(10, 10) < 1.0);
}

TEST_CASE("frequency counts relevant records containing a concept") {
    const auto& b = generated();
    const auto vocab = ConceptVocab::from_graph(b.graph);
    const auto cases = case_concepts(b.records, vocab, b.ontology);
    const auto& keys = b.graph.nodes(kg::NodeType::case_record).keys;
    // First five case nodes as R, recounted from the per-case concept lists.
    std::vector<std::uint32_t> r{0, 1, 2, 3, 4};
    const auto rs = relevant_set(b.graph, vocab, r);
    const auto freq = rank_scores(Method::frequency, rs);
    std::map<std::string, const CaseConcepts*> by_id;
    for (const auto& c : cases) by_id[c.case_id] = &c;
    std::vector<double> recount(vocab.size(), 0.0);
    for (const auto node : r)
        for (const auto v : by_id.at(keys[node])->concepts) recount[v] += 1.0;
    CHECK(freq == recount);
    const auto total = std::accumulate(freq.begin(), freq.end(), 0.0);
    CHECK(total > 0.0);
}

TEST_CASE("all rankers equal a brute-force recount from raw cases") {
    const auto& b = generated();
    const auto vocab = ConceptVocab::from_graph(b.graph);
    Rng rng(12);
    std::map<std::string, std::set<std::string>> present;
    for (const auto& r : b.records)
        for (const auto& m : r.mentions)
            if (m.polarity == Polarity::present) present[r.id].insert(m.concept_id);
    const auto& keys = b.graph.nodes(kg::NodeType::case_record).keys;
    for (int trial = 0; trial < 10; ++trial) {
        std::set<std::uint32_t> r;
        const auto size = 1 + uniform_index(rng, 200);
        while (r.size() < size) r.insert(static_cast<std::uint32_t>(uniform_index(rng, keys.size())));
        const auto rs = relevant_set(b.graph, vocab, std::vector<std::uint32_t>(r.begin(), r.end()));
        for (const auto m : {Method::frequency, Method::bim, Method::chi, Method::kld, Method::rsv}) {
            const auto got = rank_scores(m, rs);
            for (std::uint32_t v = 0; v < vocab.size(); ++v) {
                OracleCounts c;
                c.relevant_size = static_cast<double>(r.size());
                c.all_size = static_cast<double>(b.records.size());
                for (const auto& rec : b.records) c.in_all += present[rec.id].contains(vocab.ids[v]);
                const auto [t, i] = vocab.nodes[v];
                for (const auto node : r)
                    if (present[keys[node]].contains(vocab.ids[v])) {
                        c.in_relevant += 1;
                        c.weight_sum += b.graph.concept_weight(t, i);
                    }
                CHECK(std::abs(got[v] - oracle_score(m, c)) < 1e-9);
            }
        }
    }
}

TEST_CASE("selection depends only on score order") {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> s(20);
        for (auto& x : s) x = std::floor(uniform_range(rng, -5, 5));  // many ties
        std::vector<char> exclude(20, 0);
        exclude[uniform_index(rng, 20)] = 1;
        const auto base = top_k(s, 1, exclude);
        auto shifted = s, scaled = s;
        const double c = uniform_range(rng, -100, 100), f = uniform_range(rng, 0.01, 50);
        for (auto& x : shifted) x += c;
        for (auto& x : scaled) x *= f;
        CHECK(top_k(shifted, 1, exclude) == base);
        CHECK(top_k(scaled, 1, exclude) == base);
    }
    CHECK(top_k({1.0, 3.0, 3.0, 2.0}, 3) == std::vector<std::uint32_t>{1, 2, 3});
    CHECK(top_k({1.0, 3.0, 3.0, 2.0}, 10, {0, 1, 0, 0}) == std::vector<std::uint32_t>{2, 3, 0});
}

TEST_CASE("inverse-frequency masking probabilities") {
    const auto p = masking_probabilities({0, 1}, {100, 1});
    CHECK(p[1] == doctest::Approx(100.0 / 101.0));
    CHECK(p[0] == doctest::Approx(1.0 / 101.0));
    const auto u = masking_probabilities({0, 1, 2}, {5, 5, 5});
    for (const double x : u) CHECK(x == doctest::Approx(1.0 / 3.0));
    CHECK(masking_probabilities({0, 1}, {0, 1})[0] == doctest::Approx(0.5));
}

TEST_CASE("masking draws follow the inverse-frequency law") {
    const std::vector<std::size_t> freq{100, 10, 3, 1};
    const std::vector<std::uint32_t> concepts{0, 1, 2, 3};
    std::vector<CaseConcepts> cases(10000);
    for (std::size_t i = 0; i < cases.size(); ++i) cases[i] = {"c" + std::to_string(i), 30, Gender::female, concepts};
    const auto set = build_masked_eval(cases, freq, 99);
    REQUIRE(set.examples.size() == 10000);
    std::vector<double> observed(4, 0.0);
    for (const auto& ex : set.examples) {
        observed[ex.target] += 1;
        CHECK(std::find(ex.input.begin(), ex.input.end(), ex.target) == ex.input.end());
        CHECK(ex.input.size() == 3);
    }
    const double inv_total = 1.0 / 100 + 1.0 / 10 + 1.0 / 3 + 1.0;
    double chi2 = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        const double e = (1.0 / static_cast<double>(freq[i])) / inv_total * 10000.0;
        chi2 += (observed[i] - e) * (observed[i] - e) / e;
    }
    const boost::math::chi_squared dist(3);
    const double p_value = 1.0 - boost::math::cdf(dist, chi2);
    MESSAGE("chi2 " << chi2 << " p " << p_value);
    CHECK(p_value > 0.01);
}

TEST_CASE("build_masked_eval skips single-concept cases and is deterministic") {
    const std::vector<CaseConcepts> cases{{"a", 1, Gender::male, {3}}, {"b", 1, Gender::male, {1, 2}},
                                          {"c", 1, Gender::male, {}}, {"d", 1, Gender::male, {0, 1, 2}}};
    const std::vector<std::size_t> freq{1, 1, 1, 1};
    const auto x = build_masked_eval(cases, freq, 5);
    const auto y = build_masked_eval(cases, freq, 5);
    CHECK(x.skipped_single == 2);
    REQUIRE(x.examples.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(x.examples[i].target == y.examples[i].target);
        CHECK(x.examples[i].input == y.examples[i].input);
    }
    CHECK(x.examples[0].case_id == "b");
}

TEST_CASE("predictor gradient matches finite differences") {
    PredictorConfig cfg;
    cfg.hidden = 5;
    cfg.init_scale = 0.5;
    auto p = MaskedPredictor::init({"a", "b", "c", "d", "e", "f"}, cfg);
    Rng rng(1);
    for (Eigen::Index i = 0; i < p.hidden_bias.size(); ++i) p.hidden_bias[i] = uniform_range(rng, 0.0, 0.5);
    for (Eigen::Index i = 0; i < p.output_bias.size(); ++i) p.output_bias[i] = uniform_range(rng, -0.5, 0.5);
    const std::vector<MaskedExample> ex{{"x", 0, Gender::other, {0, 2}, 4}, {"y", 0, Gender::other, {1}, 3}};
    // Output-weight partials against forward differences of the mean loss.
    const double base = mean_cross_entropy(p, ex);
    const double h = 1e-5;
    for (int probe = 0; probe < 10; ++probe) {
        auto q = p;
        const auto r = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(q.output_weights.rows())));
        const auto c = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(q.output_weights.cols())));
        q.output_weights(r, c) += h;
        const double numeric = (mean_cross_entropy(q, ex) - base) / h;
        // Analytic: mean over examples of (p_r - y_r) * hidden_c.
        double analytic = 0.0;
        for (const auto& e : ex) {
            Eigen::VectorXd hid = p.hidden_bias;
            for (const auto i : e.input) hid += p.input_weights.col(i);
            hid = hid.cwiseMax(0.0);
            const auto probs = p.predict(e.input);
            analytic += (probs[r] - (r == static_cast<Eigen::Index>(e.target) ? 1.0 : 0.0)) * hid[c];
        }
        analytic /= static_cast<double>(ex.size());
        CHECK(numeric == doctest::Approx(analytic).epsilon(1e-3));
    }
}

TEST_CASE("planted co-occurrence is learned and training is deterministic") {
    // Concept 0 always appears with 1; concepts 2..9 are noise.
    std::vector<CaseConcepts> cases;
    Rng rng(3);
    for (int i = 0; i < 400; ++i) {
        CaseConcepts c{"p" + std::to_string(i), 30, Gender::female, {0, 1}};
        for (std::uint32_t v = 2; v < 10; ++v)
            if (bernoulli(rng, 0.3)) c.concepts.push_back(v);
        cases.push_back(std::move(c));
    }
    std::vector<std::string> vocab;
    for (int v = 0; v < 10; ++v) vocab.push_back("v" + std::to_string(v));
    std::vector<MaskedExample> train;
    for (const auto& c : cases) train.push_back({c.case_id, 30, Gender::female, {0}, 1});
    for (const auto& ex : leave_one_out(cases))
        if (ex.target != 1) train.push_back(ex);
    PredictorConfig cfg;
    cfg.hidden = 16;
    cfg.epochs = 10;
    cfg.learning_rate = 1e-2;
    TrainingHistory hist;
    const auto p = train_masked_predictor(train, {}, vocab, cfg, &hist);
    CHECK(hist.train_loss.size() == 10);
    CHECK(hist.train_loss.back() < hist.train_loss.front());
    const auto probs = p.predict({0});
    Eigen::Index best = 0;
    probs.maxCoeff(&best);
    CHECK(best == 1);
    CHECK(probs[1] > 0.9);
    CHECK(train_masked_predictor(train, {}, vocab, cfg) == p);

    const auto path = temp_path("predictor.bin");
    save_predictor(path, p);
    CHECK(load_predictor(path) == p);
    write_file(path, "XXXX");
    CHECK_THROWS_AS((void)load_predictor(path), ParseError);

    std::vector<MaskedExample> bad{{"z", 0, Gender::other, {0}, 10}};
    CHECK_THROWS_AS((void)train_masked_predictor(bad, {}, vocab, cfg), DataError);
}

TEST_CASE("untrained predictor is near uniform") {
    std::vector<std::string> vocab;
    for (int v = 0; v < 50; ++v) vocab.push_back("v" + std::to_string(v));
    const auto p = MaskedPredictor::init(vocab, PredictorConfig{});
    const auto probs = p.predict({1, 7, 20});
    CHECK(probs.sum() == doctest::Approx(1.0));
    CHECK(probs.maxCoeff() < 1.5 / 50.0);
    CHECK(probs.minCoeff() > 0.5 / 50.0);
}

TEST_CASE("eval_acc_at_k with a perfect predictor and argument errors") {
    const auto& b = generated();
    const auto vocab = ConceptVocab::from_graph(b.graph);
    const auto cases = case_concepts(b.records, vocab, b.ontology);
    auto examples = build_masked_eval(cases, concept_frequencies(cases, vocab.size()), 4).examples;
    REQUIRE(!examples.empty());
    // Every example targets one concept; a predictor biased to it is perfect.
    const auto target = examples[0].target;
    std::vector<MaskedExample> same;
    for (auto ex : examples)
        if (std::find(ex.input.begin(), ex.input.end(), target) == ex.input.end()) {
            ex.target = target;
            same.push_back(ex);
        }
    auto p = MaskedPredictor::init(vocab.ids, PredictorConfig{});
    p.output_bias[target] = 50.0;
    EvalContext ctx{&b.graph, &vocab, &p, {}};
    const auto acc = eval_acc_at_k(Method::neural, same, {1, 5}, ctx);
    CHECK(acc.at(1) == 1.0);
    CHECK(acc.at(5) == 1.0);

    CHECK_THROWS_AS((void)eval_acc_at_k(Method::bim, examples, {0}, ctx), ConfigError);
    CHECK_THROWS_AS((void)eval_acc_at_k(Method::bim, {}, {1}, ctx), DataError);
    auto other = p;
    other.vocab.back() = "elsewhere";
    EvalContext mismatched{&b.graph, &vocab, &other, {}};
    CHECK_THROWS_AS((void)eval_acc_at_k(Method::neural, examples, {1}, mismatched), DataError);

    // Rankers run and produce valid fractions.
    const auto bim = eval_acc_at_k(Method::bim, examples, {1, 10}, ctx);
    CHECK(bim.at(1) <= bim.at(10));
    CHECK(bim.at(10) <= 1.0);
}

TEST_CASE("case_concepts rejects concepts outside the vocabulary") {
    const auto& b = generated();
    auto vocab = ConceptVocab::from_graph(b.graph);
    const auto dropped = vocab.ids.front();
    vocab.index.erase(dropped);
    bool uses_dropped = false;
    for (const auto& r : b.records)
        for (const auto& m : r.mentions) uses_dropped |= m.concept_id == dropped && m.polarity == Polarity::present;
    if (uses_dropped) CHECK_THROWS_AS((void)case_concepts(b.records, vocab, b.ontology), DataError);
    auto rec = b.records.front();
    rec.mentions = {{"C_made_up", Polarity::present, std::nullopt}};
    CHECK_THROWS_AS((void)case_concepts({rec}, vocab, b.ontology), DataError);
}

TEST_CASE("next_question pruning, gating and termination") {
    const auto& b = generated();
    const auto vocab = ConceptVocab::from_graph(b.graph);
    QuestionContext ctx{&b.graph, &b.ontology, &vocab, nullptr};
    const auto id = [&](const std::string& d) { return *b.ontology.resolve(d); };

    QuestionState s;
    s.age = 40;
    s.gender = Gender::male;
    CHECK_THROWS_AS((void)next_question(s, ctx, {Method::bim}), SessionError);

    s.affirmed = {id("C_fever")};
    s.denied = {id("C_abdominal_pain")};
    const auto pruned = b.ontology.descendants(id("C_abdominal_pain"));
    CHECK(pruned.contains(id("C_upper_abdominal_pain")));
    CHECK(pruned.contains(id("C_lower_abdominal_pain")));
    QuestionConfig cfg{Method::frequency, 1000};
    // Answer "no" to everything until candidates run out.
    std::set<std::string> asked;
    while (const auto q = next_question(s, ctx, cfg)) {
        CHECK_FALSE(asked.contains(*q));
        CHECK_FALSE(pruned.contains(*q));
        const auto& flags = b.ontology.at(*q).flags;
        CHECK_FALSE(flags.female_only);
        asked.insert(*q);
        s.asked.push_back(*q);
        s.denied.push_back(*q);
    }
    CHECK(!asked.empty());
    CHECK(asked.size() < vocab.size());

    QuestionState budget = s;
    budget.asked.clear();
    budget.denied = {};
    cfg.budget = 0;
    CHECK_FALSE(next_question(budget, ctx, cfg).has_value());
    cfg.budget = 10;
    cfg.score_floor = 1e18;
    CHECK_FALSE(next_question(budget, ctx, cfg).has_value());

    // A female patient may be asked female-only concepts once they rank.
    QuestionState f;
    f.age = 30;
    f.gender = Gender::female;
    f.affirmed = {id("C_fever")};
    const auto excluded = excluded_candidates(f, ctx);
    const auto menstrual = vocab.find(id("C_menstrual_pain"));
    REQUIRE(menstrual);
    CHECK_FALSE(excluded[*menstrual]);
    f.gender = Gender::male;
    CHECK(excluded_candidates(f, ctx)[*menstrual]);

    CHECK_THROWS_AS((void)next_question(f, ctx, {Method::neural}), ConfigError);
    CHECK_THROWS_AS(parse_method("tfidf"), ConfigError);
    CHECK(parse_method("kld") == Method::kld);
}
