#include "triage/cli.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <csignal>
#include <ctime>
#include <filesystem>
#include <functional>
#include <map>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>
#include <omp.h>
#include <pthread.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "triage/common.hpp"
#include "triage/corpus.hpp"
#include "triage/engine.hpp"
#include "triage/ingest.hpp"
#include "triage/kg.hpp"
#include "triage/ontology.hpp"
#include "triage/pipeline.hpp"
#include "triage/qgen.hpp"
#include "triage/relext.hpp"
#include "triage/service.hpp"

#ifndef TRIAGE_DEFAULT_DATA_DIR
#define TRIAGE_DEFAULT_DATA_DIR "data"
#endif
#ifndef TRIAGE_BUILD_HASH
#define TRIAGE_BUILD_HASH "unknown"
#endif

namespace triage::cli {

namespace {

using nlohmann::json;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string env_name(const std::string& option) {
    std::string s = "TRIAGE_";
    for (const char c : option) s += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
}

template <typename T>
CLI::Option* option(CLI::App* app, const std::string& name, T& var, const std::string& help) {
    return app->add_option("--" + name, var, help)->envname(env_name(name))->capture_default_str();
}

CLI::Option* switch_flag(CLI::App* app, const std::string& name, bool& var, const std::string& help) {
    return app->add_flag("--" + name, var, help)->envname(env_name(name));
}

void need(const std::string& value, const std::string& name) {
    if (value.empty()) throw UsageError("--" + name + " is required");
}

std::vector<std::string> comma_list(const std::string& s) {
    std::vector<std::string> out;
    for (const auto& part : split(s, ','))
        if (const auto t = trim(part); !t.empty()) out.push_back(t);
    return out;
}

template <typename T>
std::vector<T> number_list(const std::string& s, const std::string& name) {
    std::vector<T> out;
    for (const auto& part : comma_list(s)) {
        try {
            std::size_t used = 0;
            const double v = std::stod(part, &used);
            if (used != part.size() || v < 0) throw std::invalid_argument(part);
            out.push_back(static_cast<T>(v));
        } catch (const std::exception&) {
            throw UsageError("--" + name + ": '" + part + "' is not a non-negative number");
        }
    }
    if (out.empty()) throw UsageError("--" + name + " is empty");
    return out;
}

std::string config_string(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_array()) {
        std::vector<std::string> parts;
        for (const auto& x : v) parts.push_back(config_string(x));
        return join(parts, ",");
    }
    return v.dump();
}

CLI::Option* find_option(CLI::App* app, const std::string& key) {
    for (auto* o : app->get_options())
        if (o->check_lname(key)) return o;
    return nullptr;
}

void apply_default(CLI::Option* o, const std::string& value) {
    o->run_callback_for_default();
    o->default_val(value);
}

// Config values become option defaults, so environment and flags still win.
void apply_config(CLI::App& app, const std::string& path) {
    const auto text = read_file(path);
    const auto config = json::parse(text, nullptr, false);
    if (config.is_discarded() || !config.is_object()) throw ConfigError(path + " is not a JSON object");
    for (const auto& [key, value] : config.items()) {
        if (value.is_object()) {
            CLI::App* sub = nullptr;
            try {
                sub = app.get_subcommand(key);
            } catch (const CLI::OptionNotFound&) {
                throw ConfigError(fmt::format("{}: unknown subcommand section '{}'", path, key));
            }
            for (const auto& [inner, v] : value.items()) {
                auto* o = find_option(sub, inner);
                if (!o) o = find_option(&app, inner);
                if (!o) throw ConfigError(fmt::format("{}: '{}' has no option '{}'", path, key, inner));
                apply_default(o, config_string(v));
            }
            continue;
        }
        bool used = false;
        if (auto* o = find_option(&app, key)) {
            apply_default(o, config_string(value));
            used = true;
        }
        for (auto* sub : app.get_subcommands([](CLI::App*) { return true; }))
            if (auto* o = find_option(sub, key)) {
                apply_default(o, config_string(value));
                used = true;
            }
        if (!used) throw ConfigError(fmt::format("{}: unknown option '{}'", path, key));
    }
}

// --config is read before the main parse so its values can seed defaults.
std::string config_path(const std::vector<std::string>& args) {
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config") {
            if (i + 1 >= args.size()) throw UsageError("--config needs a path");
            return args[i + 1];
        }
        if (args[i].starts_with("--config=")) return args[i].substr(9);
    }
    if (const char* env = std::getenv("TRIAGE_CONFIG")) return env;
    return {};
}

void setup_logging(const std::string& level) {
    auto logger = spdlog::get("triage");
    if (!logger) {
        logger = spdlog::stderr_color_mt("triage");
        spdlog::set_default_logger(logger);
    }
    const auto l = spdlog::level::from_str(level);
    if (l == spdlog::level::off && level != "off") throw UsageError("unknown log level '" + level + "'");
    spdlog::set_level(l);
}

// ---------------------------------------------------------------------------
// Shared option groups

struct Globals {
    std::string config;
    std::string data_dir = TRIAGE_DEFAULT_DATA_DIR;
    std::string log_level = "info";
    int threads = 0;
};

struct EngineOptions {
    std::string method = "neural";
    std::size_t budget = 10;
    std::size_t evidence_k = 50;
    double threshold = 0.6;

    void add(CLI::App* app) {
        option(app, "method", method, "question method: frequency|bim|chi|kld|rsv|neural");
        option(app, "budget", budget, "question budget per session");
        option(app, "evidence-k", evidence_k, "similar cases retrieved for a recommendation");
        option(app, "threshold", threshold, "confidence threshold");
    }
    engine::EngineConfig config() const {
        engine::EngineConfig c;
        c.question.method = qgen::parse_method(method);
        c.question.budget = budget;
        c.evidence.k = evidence_k;
        c.confidence_threshold = threshold;
        return c;
    }
    bool needs_predictor() const { return qgen::parse_method(method) == qgen::Method::neural; }
};

struct ArtifactOptions {
    std::string ontology, graph, predictor;
    void add(CLI::App* app) {
        option(app, "ontology", ontology, "ontology export");
        option(app, "graph", graph, "graph snapshot");
        option(app, "predictor", predictor, "masked-concept predictor");
    }
    service::ArtifactPaths paths() const { return {ontology, graph, predictor}; }
};

std::vector<corpus::CaseRecord> resolved_corpus(const std::string& path, const ontology::Ontology& o) {
    return ingest::resolve_to_ontology(corpus::load_corpus(path), o);
}

std::vector<double> ratios(const std::string& s) {
    auto r = number_list<double>(s, "split");
    if (r.size() != 3) throw UsageError("--split needs three ratios (train, validation, test)");
    return r;
}

std::string now_iso8601() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string metrics_table(const std::vector<ClassMetrics>& classes) {
    std::string s = "class\tprecision\trecall\tf1\tsupport\n";
    for (const auto& c : classes)
        s += fmt::format("{}\t{:.6f}\t{:.6f}\t{:.6f}\t{}\n", c.name, c.precision, c.recall, c.f1, c.support);
    return s;
}

json metrics_json(const relext::RelationMetrics& m) {
    json classes = json::array();
    for (const auto& c : m.classes)
        classes.push_back({{"class", c.name}, {"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1},
                           {"support", c.support}});
    return {{"schema_version", 1}, {"n", m.n}, {"accuracy", m.accuracy}, {"classes", classes}};
}

std::pair<relext::CnnParams, relext::Vocab> load_relext(const std::string& path) {
    return relext::load_checkpoint(path);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Case-based medical triage: corpus, NLP, ontology, knowledge graph, question generation and service",
                 "triage"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config, "JSON config file")->envname("TRIAGE_CONFIG");
    option(&app, "data-dir", g.data_dir, "shipped resources (dictionary, lexicon, seeds, profile)");
    option(&app, "log-level", g.log_level, "trace|debug|info|warn|error|off");
    option(&app, "threads", g.threads, "OpenMP threads (0 keeps the runtime default)");

    std::function<void()> action;

    // generate ---------------------------------------------------------------
    auto* gen = app.add_subcommand("generate", "write a synthetic corpus");
    struct {
        std::string profile, out;
        std::size_t n = 1000;
        std::uint64_t seed = 7;
        bool ground_truth = false;
    } gen_o;
    option(gen, "profile", gen_o.profile, "generator profile (default <data-dir>/profile.json)");
    option(gen, "n", gen_o.n, "records");
    option(gen, "seed", gen_o.seed, "generator seed");
    option(gen, "out", gen_o.out, "output corpus (JSONL)");
    switch_flag(gen, "ground-truth", gen_o.ground_truth, "store each record's label as its expected recommendation");
    gen->callback([&] {
        action = [&] {
            need(gen_o.out, "out");
            const auto profile = corpus::load_profile(gen_o.profile.empty() ? g.data_dir + "/profile.json" : gen_o.profile);
            auto records = corpus::generate_corpus(profile, gen_o.n, gen_o.seed);
            if (gen_o.ground_truth)
                for (auto& r : records) r.expected = r.label;
            corpus::save_corpus(gen_o.out, records);
            out << fmt::format("wrote {} records to {} (corpus_hash {})\n", records.size(), gen_o.out,
                               hex64(corpus::corpus_hash(records)));
        };
    });

    // ingest -----------------------------------------------------------------
    auto* ing = app.add_subcommand("ingest", "annotate a corpus from its free text");
    struct {
        std::string in, out, annotations, relext_model;
    } ing_o;
    option(ing, "in", ing_o.in, "input corpus");
    option(ing, "out", ing_o.out, "annotated corpus (mentions replaced by extracted ones)");
    option(ing, "annotations", ing_o.annotations, "surface and relation counts (TSV) for build-ontology");
    option(ing, "relext-model", ing_o.relext_model, "relation model checkpoint (optional)");
    ing->callback([&] {
        action = [&] {
            need(ing_o.in, "in");
            need(ing_o.out, "out");
            need(ing_o.annotations, "annotations");
            const auto resources = pipeline::Resources::load(g.data_dir);
            std::optional<std::pair<relext::CnnParams, relext::Vocab>> model;
            if (!ing_o.relext_model.empty()) model = load_relext(ing_o.relext_model);
            const ingest::RelationModel rm{model ? &model->first : nullptr, model ? &model->second : nullptr};
            const auto result = ingest::ingest(corpus::load_corpus(ing_o.in), resources.text, rm);
            corpus::save_corpus(ing_o.out, result.records);
            result.annotations.save(ing_o.annotations);
            const auto& r = result.report;
            out << fmt::format(
                "records_in {}\nrecords_out {}\ndropped_empty {}\nmentions {}\nrule_relations {}\nmodel_relations {}\n"
                "ambiguous_abbreviations {}\n",
                r.records_in, r.records_out, r.dropped_empty, r.mentions, r.rule_relations, r.model_relations,
                r.ambiguous_abbreviations);
        };
    });

    // build-ontology -----------------------------------------------------------
    auto* bo = app.add_subcommand("build-ontology", "cluster annotations into an ontology");
    struct {
        std::string annotations, out;
        bool no_merge_map = false;
    } bo_o;
    option(bo, "annotations", bo_o.annotations, "annotation counts from ingest");
    option(bo, "out", bo_o.out, "ontology export");
    switch_flag(bo, "no-merge-map", bo_o.no_merge_map, "skip <data-dir>/merge_map.tsv coarsening");
    bo->callback([&] {
        action = [&] {
            need(bo_o.annotations, "annotations");
            need(bo_o.out, "out");
            const auto resources = pipeline::Resources::load(g.data_dir);
            const auto o = pipeline::build_ontology(ontology::AnnotationSet::load(bo_o.annotations), resources,
                                                    !bo_o.no_merge_map);
            ontology::save_ontology(bo_o.out, o);
            const auto s = ontology::stats(o);
            out << fmt::format("concepts {}\nsurfaces {}\nannotations {}\n", s.concepts, s.surfaces, s.annotations);
            for (const auto& [kind, n] : s.edges_by_kind) out << fmt::format("edges.{} {}\n", kind, n);
        };
    });

    // build-kg ---------------------------------------------------------------
    auto* bk = app.add_subcommand("build-kg", "build the knowledge graph snapshot");
    struct {
        std::string corpus, ontology, out, weights = "idf", codes;
    } bk_o;
    option(bk, "corpus", bk_o.corpus, "annotated corpus from ingest");
    option(bk, "ontology", bk_o.ontology, "ontology export");
    option(bk, "out", bk_o.out, "graph snapshot");
    option(bk, "weights", bk_o.weights, "idf|learned");
    option(bk, "codes", bk_o.codes, "external code table (TSV id, code); the snapshot then carries those codes");
    bk->callback([&] {
        action = [&] {
            need(bk_o.corpus, "corpus");
            need(bk_o.ontology, "ontology");
            need(bk_o.out, "out");
            const auto o = ontology::load_ontology(bk_o.ontology);
            const auto records = resolved_corpus(bk_o.corpus, o);
            auto graph = kg::build_graph(records, o);
            if (bk_o.weights == "learned") {
                std::vector<std::string> ids;
                for (const auto& r : records) ids.push_back(r.id);
                graph = graph.with_weights(kg::learn_weights(graph, ids));
            } else if (bk_o.weights != "idf") {
                throw UsageError("--weights must be idf or learned");
            }
            if (!bk_o.codes.empty()) {
                std::size_t unresolved = 0;
                const auto table = kg::load_code_table(bk_o.codes, o, &unresolved);
                auto [mapped, coverage] = kg::map_to_codes(graph, table);
                graph = std::move(mapped);
                out << fmt::format("code coverage {}/{} ({:.4f}), unresolved table rows {}\n", coverage.mapped,
                                   coverage.concept_nodes, coverage.fraction(), unresolved);
            }
            kg::save_snapshot(bk_o.out, graph);
            out << kg::stats_text(graph);
        };
    });

    // train-relext / eval-relext ----------------------------------------------
    auto* tr = app.add_subcommand("train-relext", "train the relation classifier on a planted corpus");
    struct {
        std::string out, metrics;
        std::size_t n = 10000;
        std::uint64_t seed = 2024;
        relext::CnnConfig cnn;
    } tr_o;
    option(tr, "out", tr_o.out, "checkpoint path");
    option(tr, "metrics", tr_o.metrics, "held-out metrics (JSON), optional");
    option(tr, "n", tr_o.n, "planted triples (split 80/10/10)");
    option(tr, "seed", tr_o.seed, "corpus and initialization seed");
    option(tr, "epochs", tr_o.cnn.epochs, "epochs");
    option(tr, "learning-rate", tr_o.cnn.learning_rate, "Adam learning rate");
    option(tr, "batch", tr_o.cnn.batch, "minibatch size");
    option(tr, "filters", tr_o.cnn.filters, "filters per window");
    option(tr, "dense", tr_o.cnn.dense, "dense units");
    option(tr, "dropout", tr_o.cnn.dropout, "dropout on the dense layer");
    option(tr, "max-len", tr_o.cnn.max_len, "tokens per example");
    tr->callback([&] {
        action = [&] {
            need(tr_o.out, "out");
            const auto resources = pipeline::Resources::load(g.data_dir);
            const auto pairs = relext::planted_relation_corpus(
                relext::planted_config_from(resources.text.dictionary, tr_o.seed), tr_o.n);
            std::vector<text::Sentence> sentences;
            for (const auto& p : pairs) sentences.push_back(p.tokens);
            const auto vocab = relext::Vocab::build(sentences);
            auto config = tr_o.cnn;
            config.seed = tr_o.seed;
            const auto examples = relext::featurize_all(pairs, vocab, config.max_len);
            const std::vector<double> split_ratios{0.8, 0.1, 0.1};
            const auto sizes = corpus::partition_sizes(examples.size(), split_ratios);
            const auto a = examples.begin() + static_cast<std::ptrdiff_t>(sizes[0]);
            const auto b = a + static_cast<std::ptrdiff_t>(sizes[1]);
            const std::vector<relext::RelationExample> train_set(examples.begin(), a), val_set(a, b),
                test_set(b, examples.end());
            const auto result = relext::train(train_set, val_set, config, vocab.size());
            relext::save_checkpoint(tr_o.out, result.params, vocab);
            for (const auto& e : result.curve)
                out << fmt::format("epoch {} train_loss {:.6f} val_loss {:.6f} train_accuracy {:.6f}\n", e.epoch,
                                   e.train_loss, e.val_loss, e.train_accuracy);
            const auto m = relext::evaluate(result.params, test_set);
            out << fmt::format("best_epoch {}\ntest_accuracy {:.6f}\n", result.best_epoch, m.accuracy)
                << metrics_table(m.classes);
            if (!tr_o.metrics.empty()) write_file(tr_o.metrics, metrics_json(m).dump(2) + "\n");
        };
    });

    auto* er = app.add_subcommand("eval-relext", "evaluate a relation checkpoint on a fresh planted corpus");
    struct {
        std::string model, out;
        std::size_t n = 2000;
        std::uint64_t seed = 99;
    } er_o;
    option(er, "model", er_o.model, "checkpoint path");
    option(er, "n", er_o.n, "planted triples");
    option(er, "seed", er_o.seed, "corpus seed");
    option(er, "out", er_o.out, "metrics (JSON), optional");
    er->callback([&] {
        action = [&] {
            need(er_o.model, "model");
            const auto resources = pipeline::Resources::load(g.data_dir);
            const auto [params, vocab] = load_relext(er_o.model);
            const auto pairs = relext::planted_relation_corpus(
                relext::planted_config_from(resources.text.dictionary, er_o.seed), er_o.n);
            const auto m = relext::evaluate(params, relext::featurize_all(pairs, vocab, params.config.max_len));
            out << fmt::format("accuracy {:.6f}\n", m.accuracy) << metrics_table(m.classes);
            if (!er_o.out.empty()) write_file(er_o.out, metrics_json(m).dump(2) + "\n");
        };
    });

    // train-qgen / eval-qgen ---------------------------------------------------
    struct {
        std::string corpus, ontology, split = "0.7,0.1,0.2";
        std::uint64_t split_seed = 2024;
    } split_o;
    const auto add_split = [&](CLI::App* sub) {
        option(sub, "corpus", split_o.corpus, "annotated corpus");
        option(sub, "ontology", split_o.ontology, "ontology export");
        option(sub, "split", split_o.split, "train,validation,test ratios");
        option(sub, "split-seed", split_o.split_seed, "split shuffle seed");
    };
    const auto load_split = [&] {
        need(split_o.corpus, "corpus");
        need(split_o.ontology, "ontology");
        auto o = ontology::load_ontology(split_o.ontology);
        const auto records = resolved_corpus(split_o.corpus, o);
        const auto r = ratios(split_o.split);
        return std::make_pair(std::move(o), corpus::split_corpus(records, r, split_o.split_seed));
    };

    auto* tq = app.add_subcommand("train-qgen", "train the masked-concept predictor on the training split");
    struct {
        std::string out;
        qgen::PredictorConfig predictor;
    } tq_o;
    add_split(tq);
    option(tq, "out", tq_o.out, "predictor path");
    option(tq, "hidden", tq_o.predictor.hidden, "hidden units");
    option(tq, "epochs", tq_o.predictor.epochs, "epochs");
    option(tq, "batch", tq_o.predictor.batch_size, "minibatch size");
    option(tq, "learning-rate", tq_o.predictor.learning_rate, "Adam learning rate");
    option(tq, "seed", tq_o.predictor.seed, "initialization and shuffle seed");
    tq->callback([&] {
        action = [&] {
            need(tq_o.out, "out");
            const auto [o, parts] = load_split();
            const auto graph = kg::build_graph(parts[0], o);
            const auto vocab = qgen::ConceptVocab::from_graph(graph);
            const auto train_cases = qgen::case_concepts(parts[0], vocab, o);
            const auto val_cases = qgen::case_concepts(parts[1], vocab, o);
            qgen::TrainingHistory history;
            const auto p = qgen::train_masked_predictor(qgen::leave_one_out(train_cases), qgen::leave_one_out(val_cases),
                                                        vocab.ids, tq_o.predictor, &history);
            qgen::save_predictor(tq_o.out, p);
            for (std::size_t e = 0; e < history.train_loss.size(); ++e)
                out << fmt::format("epoch {} train_loss {:.6f} validation_loss {:.6f}\n", e + 1, history.train_loss[e],
                                   history.validation_loss[e]);
            out << fmt::format("vocab {}\ntrain_cases {}\nvalidation_cases {}\n", vocab.size(), train_cases.size(),
                               val_cases.size());
        };
    });

    auto* eq = app.add_subcommand("eval-qgen", "Acc@k of every question method under inverse-frequency masking");
    struct {
        std::string predictor, out, ks = "1,3,10", methods = "frequency,bim,chi,kld,rsv,neural";
        std::uint64_t mask_seed = 2024;
        std::size_t retrieval_k = 50;
    } eq_o;
    add_split(eq);
    option(eq, "predictor", eq_o.predictor, "predictor path (needed for the neural method)");
    option(eq, "out", eq_o.out, "report (JSON), optional");
    option(eq, "ks", eq_o.ks, "k values");
    option(eq, "methods", eq_o.methods, "methods to evaluate");
    option(eq, "mask-seed", eq_o.mask_seed, "masking seed");
    option(eq, "retrieval-k", eq_o.retrieval_k, "relevant cases fed to the rankers");
    eq->callback([&] {
        action = [&] {
            const auto [o, parts] = load_split();
            const auto graph = kg::build_graph(parts[0], o);
            const auto vocab = qgen::ConceptVocab::from_graph(graph);
            const auto freq = qgen::concept_frequencies(qgen::case_concepts(parts[0], vocab, o), vocab.size());
            const auto eval = qgen::build_masked_eval(qgen::case_concepts(parts[2], vocab, o), freq, eq_o.mask_seed);
            std::optional<qgen::MaskedPredictor> predictor;
            if (!eq_o.predictor.empty()) predictor = qgen::load_predictor(eq_o.predictor);
            qgen::EvalContext ctx{&graph, &vocab, predictor ? &*predictor : nullptr, {}};
            ctx.similarity.k = eq_o.retrieval_k;
            qgen::EvalReport report;
            report.seed = eq_o.mask_seed;
            report.corpus_hash = graph.corpus_hash();
            report.vocab_size = vocab.size();
            report.examples = eval.examples.size();
            report.skipped_single = eval.skipped_single;
            const auto ks = number_list<std::size_t>(eq_o.ks, "ks");
            for (const auto& name : comma_list(eq_o.methods)) {
                const auto m = qgen::parse_method(name);
                if (m == qgen::Method::neural && !predictor)
                    throw ConfigError("the neural method needs --predictor");
                report.accuracy[std::string(qgen::to_string(m))] = qgen::eval_acc_at_k(m, eval.examples, ks, ctx);
            }
            out << qgen::report_table(report);
            if (!eq_o.out.empty()) write_file(eq_o.out, qgen::report_json(report));
        };
    });

    // eval-triage --------------------------------------------------------------
    auto* et = app.add_subcommand("eval-triage", "replay a ground-truth suite through scripted sessions");
    struct {
        std::string suite, out, relext_model;
        std::size_t initial = 2;
    } et_o;
    ArtifactOptions et_a;
    EngineOptions et_e;
    et_a.add(et);
    et_e.add(et);
    option(et, "suite", et_o.suite, "ground-truth suite (default <data-dir>/ground_truth.jsonl)");
    option(et, "out", et_o.out, "metrics report, optional");
    option(et, "initial-concepts", et_o.initial, "present mentions volunteered at intake");
    option(et, "relext-model", et_o.relext_model, "relation model checkpoint used to annotate the suite (optional)");
    et->callback([&] {
        action = [&] {
            const auto artifacts = service::Artifacts::load(et_a.paths(), et_e.needs_predictor());
            const engine::Engine eng(artifacts.graph, artifacts.ontology, artifacts.vocab,
                                     artifacts.predictor ? &*artifacts.predictor : nullptr, et_e.config());
            const auto resources = pipeline::Resources::load(g.data_dir);
            std::optional<std::pair<relext::CnnParams, relext::Vocab>> model;
            if (!et_o.relext_model.empty()) model = load_relext(et_o.relext_model);
            const ingest::RelationModel rm{model ? &model->first : nullptr, model ? &model->second : nullptr};
            const auto suite_path = et_o.suite.empty() ? g.data_dir + "/ground_truth.jsonl" : et_o.suite;
            const auto suite = pipeline::annotate(corpus::load_corpus(suite_path), resources, artifacts.ontology, rm);
            const auto ev = engine::evaluate_recommendations(eng, suite, {et_o.initial});
            const auto text = engine::metrics_text(ev.metrics);
            out << text;
            if (!et_o.out.empty()) write_file(et_o.out, text);
        };
    });

    // serve --------------------------------------------------------------------
    auto* sv = app.add_subcommand("serve", "run the HTTP service until SIGINT or SIGTERM");
    ArtifactOptions sv_a;
    EngineOptions sv_e;
    service::ServiceConfig sv_c;
    int idle_minutes = 30;
    sv_a.add(sv);
    sv_e.add(sv);
    option(sv, "host", sv_c.host, "bind address");
    option(sv, "port", sv_c.port, "port (0 picks a free one)");
    option(sv, "workers", sv_c.workers, "request worker threads");
    option(sv, "idle-minutes", idle_minutes, "session idle expiry");
    sv->callback([&] {
        action = [&] {
            const auto artifacts = service::Artifacts::load(sv_a.paths(), sv_e.needs_predictor());
            auto config = sv_c;
            config.engine = sv_e.config();
            config.idle_timeout = std::chrono::minutes(idle_minutes);
            config.build_hash = TRIAGE_BUILD_HASH;
            // Block the signals before any server thread exists so only sigwait sees them.
            sigset_t signals;
            sigemptyset(&signals);
            sigaddset(&signals, SIGINT);
            sigaddset(&signals, SIGTERM);
            pthread_sigmask(SIG_BLOCK, &signals, nullptr);
            service::Server server(artifacts, config);
            const int port = server.start();
            out << fmt::format("listening on {}:{}\n", config.host, port) << std::flush;
            int received = 0;
            sigwait(&signals, &received);
            spdlog::info("signal {}: finishing in-flight requests", received);
            server.stop();
            pthread_sigmask(SIG_UNBLOCK, &signals, nullptr);
        };
    });

    // bench --------------------------------------------------------------------
    auto* bn = app.add_subcommand("bench", "latency and worker scaling under scripted sessions");
    ArtifactOptions bn_a;
    EngineOptions bn_e;
    struct {
        std::string suite, workers = "1,2,4", out, url;
        service::LoadConfig load;
    } bn_o;
    bn_a.add(bn);
    bn_e.add(bn);
    option(bn, "suite", bn_o.suite, "ground-truth suite the scripts come from (default <data-dir>/ground_truth.jsonl)");
    option(bn, "workers", bn_o.workers, "worker counts, one in-process server each");
    option(bn, "concurrency", bn_o.load.concurrency, "concurrent scripted clients");
    option(bn, "duration", bn_o.load.duration_seconds, "seconds per worker count");
    option(bn, "seed", bn_o.load.seed, "script order seed");
    option(bn, "url", bn_o.url, "host:port of a running service to measure instead");
    option(bn, "out", bn_o.out, "report (JSON), optional");
    bn->callback([&] {
        action = [&] {
            const auto artifacts = service::Artifacts::load(bn_a.paths(), bn_e.needs_predictor());
            service::ServiceConfig config;
            config.engine = bn_e.config();
            config.build_hash = TRIAGE_BUILD_HASH;
            const engine::Engine eng(artifacts.graph, artifacts.ontology, artifacts.vocab,
                                     artifacts.predictor ? &*artifacts.predictor : nullptr, config.engine);
            const auto resources = pipeline::Resources::load(g.data_dir);
            const auto suite_path = bn_o.suite.empty() ? g.data_dir + "/ground_truth.jsonl" : bn_o.suite;
            const auto scripts = service::scripts_from_cases(
                pipeline::annotate(corpus::load_corpus(suite_path), resources, artifacts.ontology), eng);
            std::vector<service::BenchReport> reports;
            if (!bn_o.url.empty()) {
                const auto colon = bn_o.url.rfind(':');
                if (colon == std::string::npos) throw UsageError("--url must be host:port");
                auto r = service::run_load(bn_o.url.substr(0, colon), std::stoi(bn_o.url.substr(colon + 1)), scripts,
                                           bn_o.load);
                reports.push_back(r);
            } else {
                reports = service::bench(artifacts, config, number_list<std::size_t>(bn_o.workers, "workers"), scripts,
                                         bn_o.load);
            }
            json j{{"schema_version", 1},
                   {"environment",
                    {{"timestamp", now_iso8601()},
                     {"hardware_concurrency", std::thread::hardware_concurrency()},
                     {"build_hash", TRIAGE_BUILD_HASH},
                     {"corpus_hash", hex64(artifacts.graph.corpus_hash())},
                     {"scripts", scripts.size()},
                     {"method", bn_e.method}}},
                   {"reports", json::array()}};
            out << "workers\tconcurrency\trequests\tp50\tp95\tp99\tmean\tthroughput\tefficiency\n";
            for (const auto& r : reports) {
                j["reports"].push_back(service::to_json(r));
                out << fmt::format("{}\t{}\t{}\t{:.6f}\t{:.6f}\t{:.6f}\t{:.6f}\t{:.2f}\t{:.3f}\n", r.workers,
                                   r.concurrency, r.requests, r.p50, r.p95, r.p99, r.mean, r.throughput, r.efficiency);
            }
            if (!bn_o.out.empty()) write_file(bn_o.out, j.dump(2) + "\n");
        };
    });

    // stats --------------------------------------------------------------------
    auto* st = app.add_subcommand("stats", "print counts of a graph, ontology or corpus");
    struct {
        std::string graph, ontology, corpus;
    } st_o;
    option(st, "graph", st_o.graph, "graph snapshot");
    option(st, "ontology", st_o.ontology, "ontology export");
    option(st, "corpus", st_o.corpus, "corpus");
    st->callback([&] {
        action = [&] {
            if (st_o.graph.empty() && st_o.ontology.empty() && st_o.corpus.empty())
                throw UsageError("stats needs --graph, --ontology or --corpus");
            if (!st_o.graph.empty()) out << kg::stats_text(kg::load_snapshot(st_o.graph));
            if (!st_o.ontology.empty()) {
                const auto s = ontology::stats(ontology::load_ontology(st_o.ontology));
                out << fmt::format("concepts {}\nsurfaces {}\nannotations {}\nsurfaces_per_concept {:.4f}\n", s.concepts,
                                   s.surfaces, s.annotations, s.surfaces_per_concept);
                for (const auto& [kind, n] : s.edges_by_kind) out << fmt::format("edges.{} {}\n", kind, n);
            }
            if (!st_o.corpus.empty()) {
                const auto records = corpus::load_corpus(st_o.corpus);
                std::map<std::string, std::size_t> by_risk;
                std::size_t mentions = 0;
                for (const auto& r : records) {
                    ++by_risk[std::string(to_string(r.label.risk))];
                    mentions += r.mentions.size();
                }
                out << fmt::format("records {}\nmentions {}\ncorpus_hash {}\n", records.size(), mentions,
                                   hex64(corpus::corpus_hash(records)));
                for (const auto& [risk, n] : by_risk) out << fmt::format("risk.{} {}\n", risk, n);
            }
        };
    });

    const auto fail = [&](const std::string& kind, const std::string& message, int code) {
        err << json{{"error", kind}, {"message", message}}.dump() << "\n";
        return code;
    };

    try {
        if (const auto path = config_path(args); !path.empty()) apply_config(app, path);
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
        setup_logging(g.log_level);
        if (g.threads > 0) omp_set_num_threads(g.threads);
        if (action) action();
        return kExitOk;
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), kExitUsage);
    } catch (const UsageError& e) {
        return fail("usage", e.what(), kExitUsage);
    } catch (const Error& e) {
        return fail(e.kind(), e.what(), kExitFailure);
    } catch (const std::exception& e) {
        return fail("internal", e.what(), kExitFailure);
    }
}

}  // namespace triage::cli
