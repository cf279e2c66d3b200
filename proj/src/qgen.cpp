#include "triage/qgen.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "triage/binary_io.hpp"
#include "triage/common.hpp"

namespace triage::qgen {

namespace {

constexpr std::uint32_t kPredictorVersion = 1;

// Adam state for one dense tensor.
struct AdamSlot {
    Eigen::ArrayXXd m, v;
    void init(Eigen::Index rows, Eigen::Index cols) {
        m = Eigen::ArrayXXd::Zero(rows, cols);
        v = Eigen::ArrayXXd::Zero(rows, cols);
    }
};

template <class Tensor>
void adam_step(Tensor& param, const Tensor& grad, AdamSlot& s, double lr, int t) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const Eigen::ArrayXXd g = grad.array();
    s.m = b1 * s.m + (1 - b1) * g;
    s.v = b2 * s.v + (1 - b2) * g.square();
    const double c1 = 1 - std::pow(b1, t), c2 = 1 - std::pow(b2, t);
    param.array() -= lr * (s.m / c1) / ((s.v / c2).sqrt() + eps);
}

struct Gradients {
    Eigen::MatrixXd input_weights, output_weights;
    Eigen::VectorXd hidden_bias, output_bias;

    explicit Gradients(const MaskedPredictor& p)
        : input_weights(Eigen::MatrixXd::Zero(p.input_weights.rows(), p.input_weights.cols())),
          output_weights(Eigen::MatrixXd::Zero(p.output_weights.rows(), p.output_weights.cols())),
          hidden_bias(Eigen::VectorXd::Zero(p.hidden_bias.size())),
          output_bias(Eigen::VectorXd::Zero(p.output_bias.size())) {}
};

Eigen::VectorXd hidden_activation(const MaskedPredictor& p, const std::vector<std::uint32_t>& input) {
    Eigen::VectorXd h = p.hidden_bias;
    for (const auto i : input) h += p.input_weights.col(i);
    return h.cwiseMax(0.0);
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
    Eigen::VectorXd e = (logits.array() - logits.maxCoeff()).exp();
    return e / e.sum();
}

// Adds one example's gradient; returns its loss.
double accumulate(const MaskedPredictor& p, const MaskedExample& ex, Gradients& g) {
    const Eigen::VectorXd h = hidden_activation(p, ex.input);
    Eigen::VectorXd d_logits = softmax(p.output_weights * h + p.output_bias);
    const double loss = -std::log(std::max(d_logits[ex.target], 1e-300));
    d_logits[ex.target] -= 1.0;
    g.output_weights.noalias() += d_logits * h.transpose();
    g.output_bias += d_logits;
    Eigen::VectorXd d_hidden = p.output_weights.transpose() * d_logits;
    for (Eigen::Index j = 0; j < h.size(); ++j)
        if (h[j] <= 0.0) d_hidden[j] = 0.0;
    g.hidden_bias += d_hidden;
    for (const auto i : ex.input) g.input_weights.col(i) += d_hidden;
    return loss;
}

void check_indices(const std::vector<MaskedExample>& examples, std::size_t vocab, const char* split) {
    for (const auto& ex : examples) {
        if (ex.target >= vocab)
            throw DataError(std::string(split) + " example " + ex.case_id + ": target outside the vocabulary");
        for (const auto i : ex.input)
            if (i >= vocab) throw DataError(std::string(split) + " example " + ex.case_id + ": input outside the vocabulary");
    }
}

void write_matrix(ByteWriter& w, const Eigen::MatrixXd& m) {
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) w.f64(m(r, c));
}

Eigen::MatrixXd read_matrix(ByteReader& r, Eigen::Index rows, Eigen::Index cols, const std::string& what) {
    const auto got_rows = r.u32(), got_cols = r.u32();
    if (got_rows != rows || got_cols != cols) throw ParseError("predictor tensor " + what + " has the wrong shape");
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = r.f64();
    return m;
}

}  // namespace

std::string_view to_string(Method m) {
    switch (m) {
        case Method::frequency: return "frequency";
        case Method::bim: return "bim";
        case Method::chi: return "chi";
        case Method::kld: return "kld";
        case Method::rsv: return "rsv";
        case Method::neural: return "neural";
    }
    return "?";
}

Method parse_method(std::string_view s) {
    for (const auto m : kAllMethods)
        if (to_string(m) == s) return m;
    throw ConfigError("unknown question ranker '" + std::string(s) + "'");
}

ConceptVocab ConceptVocab::from_graph(const kg::KnowledgeGraph& graph) {
    std::vector<std::tuple<std::string, kg::NodeType, std::uint32_t>> all;
    for (const auto t : kg::kConceptNodeTypes) {
        const auto& keys = graph.nodes(t).keys;
        for (std::uint32_t i = 0; i < keys.size(); ++i) all.emplace_back(keys[i], t, i);
    }
    std::sort(all.begin(), all.end());
    ConceptVocab v;
    for (auto& [id, t, i] : all) {
        v.index.emplace(id, static_cast<std::uint32_t>(v.ids.size()));
        v.ids.push_back(id);
        v.nodes.emplace_back(t, i);
    }
    return v;
}

std::optional<std::uint32_t> ConceptVocab::find(const std::string& id) const {
    const auto it = index.find(id);
    if (it == index.end()) return std::nullopt;
    return it->second;
}

// ---------------------------------------------------------------------------
// Rankers

double smoothed(double count, double size, double eps) { return (count + eps) / (size + 2.0 * eps); }

double bim_score(double p_relevant, double p_all) {
    return std::log(p_relevant * (1.0 - p_all) / (p_all * (1.0 - p_relevant)));
}

double chi_score(double p_relevant, double p_all) {
    const double d = p_relevant - p_all;
    return std::log((d * d + kSmoothing * kSmoothing) / p_all);
}

double kld_score(double p_relevant, double p_all) { return p_relevant * std::log(p_relevant / p_all); }

double rsv_score(double weight_sum, double p_relevant, double p_all) { return weight_sum * (p_relevant - p_all); }

RelevantSet relevant_set(const kg::KnowledgeGraph& graph, const ConceptVocab& vocab,
                         const std::vector<std::uint32_t>& case_nodes) {
    RelevantSet rs;
    rs.cases = case_nodes;
    std::sort(rs.cases.begin(), rs.cases.end());
    rs.cases.erase(std::unique(rs.cases.begin(), rs.cases.end()), rs.cases.end());
    rs.total_cases = graph.case_count();
    rs.relevant_count.assign(vocab.size(), 0.0);
    rs.total_count.assign(vocab.size(), 0.0);
    rs.term_weight.assign(vocab.size(), 0.0);

    std::map<kg::NodeType, std::vector<double>> relevant;
    for (const auto t : kg::kConceptNodeTypes) {
        const auto name = kg::concept_relation(t, Polarity::present);
        auto& dense = relevant[t];
        dense.assign(graph.nodes(t).size(), 0.0);
        if (!graph.has_relation(name)) continue;
        const auto& by_case = graph.relation(name).backward;
        for (const auto c : rs.cases) {
            if (c >= by_case.rows) throw ValidationError("relevant case node outside the graph");
            for (auto p = by_case.row_ptr[c]; p < by_case.row_ptr[c + 1]; ++p) dense[by_case.col[p]] += 1.0;
        }
    }
    for (std::uint32_t v = 0; v < vocab.size(); ++v) {
        const auto [t, i] = vocab.nodes[v];
        rs.relevant_count[v] = relevant[t][i];
        const auto name = kg::concept_relation(t, Polarity::present);
        if (graph.has_relation(name)) {
            const auto& m = graph.relation(name).forward;
            rs.total_count[v] = static_cast<double>(m.row_ptr[i + 1] - m.row_ptr[i]);
        }
        rs.term_weight[v] = graph.concept_weight(t, i);
    }
    return rs;
}

std::vector<double> rank_scores(Method method, const RelevantSet& rs) {
    if (method == Method::neural) throw ConfigError("the neural method has no count-based score");
    const auto n = rs.relevant_count.size();
    const double r_size = static_cast<double>(rs.cases.size());
    const double n_size = static_cast<double>(rs.total_cases);
    std::vector<double> out(n);
    for (std::size_t v = 0; v < n; ++v) {
        const double p_rel = smoothed(rs.relevant_count[v], r_size);
        const double p_all = smoothed(rs.total_count[v], n_size);
        switch (method) {
            case Method::frequency: out[v] = rs.relevant_count[v]; break;
            case Method::bim: out[v] = bim_score(p_rel, p_all); break;
            case Method::chi: out[v] = chi_score(p_rel, p_all); break;
            case Method::kld: out[v] = kld_score(p_rel, p_all); break;
            case Method::rsv: out[v] = rsv_score(rs.relevant_count[v] * rs.term_weight[v], p_rel, p_all); break;
            case Method::neural: break;
        }
    }
    return out;
}

std::vector<std::uint32_t> top_k(const std::vector<double>& scores, std::size_t k, const std::vector<char>& exclude) {
    std::vector<std::uint32_t> idx;
    idx.reserve(scores.size());
    for (std::uint32_t i = 0; i < scores.size(); ++i)
        if (exclude.empty() || !exclude[i]) idx.push_back(i);
    const auto keep = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(),
                      [&](std::uint32_t a, std::uint32_t b) {
                          if (scores[a] != scores[b]) return scores[a] > scores[b];
                          return a < b;
                      });
    idx.resize(keep);
    return idx;
}

// ---------------------------------------------------------------------------
// Masked predictor

MaskedPredictor MaskedPredictor::init(std::vector<std::string> vocab, const PredictorConfig& config) {
    if (vocab.empty()) throw ConfigError("predictor vocabulary is empty");
    if (config.hidden < 1) throw ConfigError("predictor hidden size must be positive");
    MaskedPredictor p;
    const auto v = static_cast<Eigen::Index>(vocab.size());
    p.vocab = std::move(vocab);
    Rng rng(config.seed);
    const auto fill = [&](Eigen::MatrixXd& m, Eigen::Index rows, Eigen::Index cols) {
        m.resize(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = uniform_range(rng, -config.init_scale, config.init_scale);
    };
    fill(p.input_weights, config.hidden, v);
    fill(p.output_weights, v, config.hidden);
    p.hidden_bias = Eigen::VectorXd::Zero(config.hidden);
    p.output_bias = Eigen::VectorXd::Zero(v);
    return p;
}

Eigen::VectorXd MaskedPredictor::predict(const std::vector<std::uint32_t>& input) const {
    return softmax(output_weights * hidden_activation(*this, input) + output_bias);
}

bool MaskedPredictor::operator==(const MaskedPredictor& o) const {
    return vocab == o.vocab && input_weights == o.input_weights && hidden_bias == o.hidden_bias &&
           output_weights == o.output_weights && output_bias == o.output_bias;
}

std::vector<CaseConcepts> case_concepts(const std::vector<corpus::CaseRecord>& records, const ConceptVocab& vocab,
                                        const ontology::Ontology& ontology) {
    std::vector<CaseConcepts> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        CaseConcepts c{r.id, r.age, r.gender, {}};
        for (const auto& m : r.mentions) {
            if (m.polarity != Polarity::present) continue;
            const auto* concept_entry = ontology.find(m.concept_id);
            if (!concept_entry) throw DataError("case " + r.id + ": concept " + m.concept_id + " not in the ontology");
            if (!kg::node_type_for(*concept_entry)) continue;
            const auto v = vocab.find(m.concept_id);
            if (!v) throw DataError("case " + r.id + ": concept " + m.concept_id + " missing from the vocabulary");
            c.concepts.push_back(*v);
        }
        std::sort(c.concepts.begin(), c.concepts.end());
        c.concepts.erase(std::unique(c.concepts.begin(), c.concepts.end()), c.concepts.end());
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<MaskedExample> leave_one_out(const std::vector<CaseConcepts>& cases) {
    std::vector<MaskedExample> out;
    for (const auto& c : cases) {
        if (c.concepts.size() < 2) continue;
        for (std::size_t m = 0; m < c.concepts.size(); ++m) {
            MaskedExample ex{c.case_id, c.age, c.gender, {}, c.concepts[m]};
            for (std::size_t i = 0; i < c.concepts.size(); ++i)
                if (i != m) ex.input.push_back(c.concepts[i]);
            out.push_back(std::move(ex));
        }
    }
    return out;
}

double mean_cross_entropy(const MaskedPredictor& predictor, const std::vector<MaskedExample>& examples) {
    if (examples.empty()) return 0.0;
    std::vector<double> loss(examples.size());
    const auto n = static_cast<std::ptrdiff_t>(examples.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const auto& ex = examples[static_cast<std::size_t>(i)];
        loss[static_cast<std::size_t>(i)] = -std::log(std::max(predictor.predict(ex.input)[ex.target], 1e-300));
    }
    return std::accumulate(loss.begin(), loss.end(), 0.0) / static_cast<double>(loss.size());
}

MaskedPredictor train_masked_predictor(const std::vector<MaskedExample>& train,
                                       const std::vector<MaskedExample>& validation, std::vector<std::string> vocab,
                                       const PredictorConfig& config, TrainingHistory* history) {
    if (train.empty()) throw DataError("no masked training examples");
    if (config.epochs < 0 || config.batch_size < 1 || !(config.learning_rate >= 0.0))
        throw ConfigError("invalid predictor training configuration");
    check_indices(train, vocab.size(), "training");
    check_indices(validation, vocab.size(), "validation");

    auto p = MaskedPredictor::init(std::move(vocab), config);
    AdamSlot s_in, s_hb, s_out, s_ob;
    s_in.init(p.input_weights.rows(), p.input_weights.cols());
    s_hb.init(p.hidden_bias.size(), 1);
    s_out.init(p.output_weights.rows(), p.output_weights.cols());
    s_ob.init(p.output_bias.size(), 1);

    Rng rng(config.seed ^ 0x9E3779B97F4A7C15ULL);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    auto best = p;
    double best_loss = std::numeric_limits<double>::infinity();
    int step = 0;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        shuffle(order, rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            Gradients g(p);
            for (std::size_t k = start; k < end; ++k) epoch_loss += accumulate(p, train[order[k]], g);
            const double scale = 1.0 / static_cast<double>(end - start);
            g.input_weights *= scale;
            g.output_weights *= scale;
            g.hidden_bias *= scale;
            g.output_bias *= scale;
            ++step;
            adam_step(p.input_weights, g.input_weights, s_in, config.learning_rate, step);
            adam_step(p.hidden_bias, g.hidden_bias, s_hb, config.learning_rate, step);
            adam_step(p.output_weights, g.output_weights, s_out, config.learning_rate, step);
            adam_step(p.output_bias, g.output_bias, s_ob, config.learning_rate, step);
        }
        epoch_loss /= static_cast<double>(train.size());
        if (!std::isfinite(epoch_loss)) throw TrainingError("predictor loss diverged in epoch " + std::to_string(epoch));
        const double val_loss = validation.empty() ? epoch_loss : mean_cross_entropy(p, validation);
        spdlog::info("predictor epoch {}: train loss {:.4f}, validation loss {:.4f}", epoch, epoch_loss, val_loss);
        if (history) {
            history->train_loss.push_back(epoch_loss);
            history->validation_loss.push_back(val_loss);
        }
        if (val_loss < best_loss) {
            best_loss = val_loss;
            best = p;
        }
    }
    return config.epochs == 0 ? p : best;
}

void save_predictor(const std::string& path, const MaskedPredictor& p) {
    ByteWriter w;
    w.bytes("TQNN");
    w.u32(kPredictorVersion);
    w.u32(static_cast<std::uint32_t>(p.vocab.size()));
    for (const auto& id : p.vocab) w.str(id);
    w.u32(static_cast<std::uint32_t>(p.hidden_bias.size()));
    write_matrix(w, p.input_weights);
    write_matrix(w, p.hidden_bias);
    write_matrix(w, p.output_weights);
    write_matrix(w, p.output_bias);
    write_file(path, w.data());
}

MaskedPredictor load_predictor(const std::string& path) {
    const auto data = read_file(path);
    ByteReader r(data);
    if (r.bytes(4) != "TQNN") throw ParseError(path + ": not a predictor checkpoint (bad magic)");
    if (r.u32() != kPredictorVersion) throw ParseError(path + ": unsupported predictor version");
    MaskedPredictor p;
    const auto v = r.u32();
    for (std::uint32_t i = 0; i < v; ++i) p.vocab.push_back(r.str());
    const auto hidden = static_cast<Eigen::Index>(r.u32());
    const auto vs = static_cast<Eigen::Index>(v);
    p.input_weights = read_matrix(r, hidden, vs, "input_weights");
    p.hidden_bias = read_matrix(r, hidden, 1, "hidden_bias");
    p.output_weights = read_matrix(r, vs, hidden, "output_weights");
    p.output_bias = read_matrix(r, vs, 1, "output_bias");
    if (!r.done()) throw ParseError(path + ": trailing bytes");
    return p;
}

// ---------------------------------------------------------------------------
// Masking protocol and Acc@k

std::vector<std::size_t> concept_frequencies(const std::vector<CaseConcepts>& cases, std::size_t vocab_size) {
    std::vector<std::size_t> f(vocab_size, 0);
    for (const auto& c : cases)
        for (const auto v : c.concepts) {
            if (v >= vocab_size) throw DataError("case " + c.case_id + ": concept index outside the vocabulary");
            ++f[v];
        }
    return f;
}

std::vector<double> masking_probabilities(const std::vector<std::uint32_t>& concepts,
                                          const std::vector<std::size_t>& frequencies) {
    std::vector<double> w;
    w.reserve(concepts.size());
    for (const auto v : concepts) {
        const auto f = v < frequencies.size() ? frequencies[v] : 0;
        w.push_back(1.0 / static_cast<double>(std::max<std::size_t>(f, 1)));
    }
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (auto& x : w) x /= total;
    return w;
}

MaskedEvalSet build_masked_eval(const std::vector<CaseConcepts>& cases, const std::vector<std::size_t>& frequencies,
                                std::uint64_t seed) {
    MaskedEvalSet out;
    Rng rng(seed);
    for (const auto& c : cases) {
        if (c.concepts.size() < 2) {
            ++out.skipped_single;
            continue;
        }
        const auto probs = masking_probabilities(c.concepts, frequencies);
        const auto m = weighted_choice(rng, probs);
        MaskedExample ex{c.case_id, c.age, c.gender, {}, c.concepts[m]};
        for (std::size_t i = 0; i < c.concepts.size(); ++i)
            if (i != m) ex.input.push_back(c.concepts[i]);
        out.examples.push_back(std::move(ex));
    }
    return out;
}

std::vector<std::uint32_t> ranked_candidates(Method method, const MaskedExample& example, const EvalContext& ctx,
                                             std::size_t k) {
    if (!ctx.vocab || !ctx.graph) throw ConfigError("evaluation context needs a graph and a vocabulary");
    std::vector<char> exclude(ctx.vocab->size(), 0);
    for (const auto i : example.input) exclude.at(i) = 1;
    if (method == Method::neural) {
        if (!ctx.predictor) throw ConfigError("the neural method needs a trained predictor");
        const Eigen::VectorXd p = ctx.predictor->predict(example.input);
        return top_k(std::vector<double>(p.data(), p.data() + p.size()), k, exclude);
    }
    kg::PatientProfile profile;
    for (const auto i : example.input) profile.affirmed.push_back(ctx.vocab->ids[i]);
    profile.age_group = corpus::age_group(example.age);
    profile.gender = example.gender;
    std::vector<std::uint32_t> cases;
    for (const auto& c : kg::similar_cases(*ctx.graph, profile, ctx.similarity, kg::Kernel::serial))
        cases.push_back(c.node);
    return top_k(rank_scores(method, relevant_set(*ctx.graph, *ctx.vocab, cases)), k, exclude);
}

std::map<std::size_t, double> eval_acc_at_k(Method method, const std::vector<MaskedExample>& examples,
                                            const std::vector<std::size_t>& ks, const EvalContext& ctx) {
    if (ks.empty()) throw ConfigError("no k values requested");
    for (const auto k : ks)
        if (k < 1) throw ConfigError("k must be at least 1");
    if (examples.empty()) throw DataError("evaluation set is empty");
    if (!ctx.vocab) throw ConfigError("evaluation context needs a vocabulary");
    if (method == Method::neural && ctx.predictor && ctx.predictor->vocab != ctx.vocab->ids)
        throw DataError("predictor vocabulary does not match the evaluation vocabulary");
    check_indices(examples, ctx.vocab->size(), "evaluation");

    const auto max_k = *std::max_element(ks.begin(), ks.end());
    std::vector<std::size_t> rank(examples.size(), max_k);  // max_k = not found
    const auto n = static_cast<std::ptrdiff_t>(examples.size());
    std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 16)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        try {
            const auto& ex = examples[static_cast<std::size_t>(i)];
            const auto ranked = ranked_candidates(method, ex, ctx, max_k);
            const auto it = std::find(ranked.begin(), ranked.end(), ex.target);
            if (it != ranked.end()) rank[static_cast<std::size_t>(i)] = static_cast<std::size_t>(it - ranked.begin());
        } catch (...) {
#pragma omp critical
            if (!error) error = std::current_exception();
        }
    }
    if (error) std::rethrow_exception(error);
    std::map<std::size_t, double> acc;
    for (const auto k : ks) {
        std::size_t hits = 0;
        for (const auto r : rank) hits += r < k;
        acc[k] = static_cast<double>(hits) / static_cast<double>(examples.size());
    }
    return acc;
}

std::string report_json(const EvalReport& report) {
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["seed"] = report.seed;
    j["corpus_hash"] = hex64(report.corpus_hash);
    j["vocab_size"] = report.vocab_size;
    j["examples"] = report.examples;
    j["skipped_single"] = report.skipped_single;
    auto& acc = j["accuracy"];
    acc = nlohmann::ordered_json::object();
    for (const auto& [method, row] : report.accuracy) {
        auto& r = acc[method];
        for (const auto& [k, v] : row) r["acc@" + std::to_string(k)] = v;
    }
    return j.dump(2) + "\n";
}

std::string report_table(const EvalReport& report) {
    std::ostringstream out;
    std::set<std::size_t> ks;
    for (const auto& [m, row] : report.accuracy)
        for (const auto& [k, v] : row) ks.insert(k);
    out << std::left << std::setw(10) << "method";
    for (const auto k : ks) out << std::right << std::setw(10) << ("Acc@" + std::to_string(k));
    out << '\n';
    for (const auto& [m, row] : report.accuracy) {
        out << std::left << std::setw(10) << m;
        for (const auto k : ks) {
            const auto it = row.find(k);
            out << std::right << std::setw(10) << std::fixed << std::setprecision(4)
                << (it == row.end() ? 0.0 : it->second);
        }
        out << '\n';
    }
    out << "examples " << report.examples << ", skipped single-concept " << report.skipped_single << ", vocab "
        << report.vocab_size << ", random Acc@1 " << std::setprecision(4)
        << (report.vocab_size ? 1.0 / static_cast<double>(report.vocab_size) : 0.0) << '\n';
    return out.str();
}

// ---------------------------------------------------------------------------
// Question selection

std::vector<char> excluded_candidates(const QuestionState& state, const QuestionContext& ctx) {
    const auto& vocab = *ctx.vocab;
    std::vector<char> exclude(vocab.size(), 0);
    const auto mark = [&](const std::string& id) {
        if (const auto v = vocab.find(id)) exclude[*v] = 1;
    };
    for (const auto& id : state.asked) mark(id);
    for (const auto& id : state.affirmed) mark(id);
    for (const auto& id : state.denied) {
        mark(id);
        if (ctx.ontology && ctx.ontology->find(id))
            for (const auto& d : ctx.ontology->descendants(id)) mark(d);
    }
    if (ctx.ontology) {
        for (std::uint32_t v = 0; v < vocab.size(); ++v) {
            const auto* c = ctx.ontology->find(vocab.ids[v]);
            if (c && !demographically_allowed(c->flags, state.age, state.gender)) exclude[v] = 1;
        }
    }
    return exclude;
}

std::optional<std::string> next_question(const QuestionState& state, const QuestionContext& ctx,
                                         const QuestionConfig& config) {
    if (state.affirmed.empty()) throw SessionError("session has no affirmed concept");
    if (!ctx.graph || !ctx.vocab) throw ConfigError("question context needs a graph and a vocabulary");
    if (state.asked.size() >= config.budget) return std::nullopt;
    const auto exclude = excluded_candidates(state, ctx);

    std::vector<double> scores;
    if (config.method == Method::neural) {
        if (!ctx.predictor) throw ConfigError("the neural method needs a trained predictor");
        if (ctx.predictor->vocab != ctx.vocab->ids)
            throw DataError("predictor vocabulary does not match the graph vocabulary");
        std::vector<std::uint32_t> input;
        for (const auto& id : state.affirmed)
            if (const auto v = ctx.vocab->find(id)) input.push_back(*v);
        std::sort(input.begin(), input.end());
        input.erase(std::unique(input.begin(), input.end()), input.end());
        const Eigen::VectorXd p = ctx.predictor->predict(input);
        scores.assign(p.data(), p.data() + p.size());
    } else {
        kg::PatientProfile profile{state.affirmed, state.denied, corpus::age_group(state.age), state.gender};
        std::vector<std::uint32_t> cases;
        for (const auto& c : kg::similar_cases(*ctx.graph, profile, config.similarity)) cases.push_back(c.node);
        scores = rank_scores(config.method, relevant_set(*ctx.graph, *ctx.vocab, cases));
    }
    const auto best = top_k(scores, 1, exclude);
    if (best.empty() || !(scores[best[0]] > config.score_floor)) return std::nullopt;
    return ctx.vocab->ids[best[0]];
}

}  // namespace triage::qgen
