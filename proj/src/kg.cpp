#include "triage/kg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include <omp.h>

#include "triage/binary_io.hpp"

namespace triage::kg {

namespace {

constexpr std::uint64_t kCodeValueMask = 0x00FF'FFFF'FFFF'FFFFULL;
constexpr std::array kConceptPolarities{Polarity::present, Polarity::negated, Polarity::historical};

std::size_t slot(NodeType t) { return static_cast<std::size_t>(t); }

std::string_view polarity_prefix(Polarity p) {
    switch (p) {
        case Polarity::present: return "";
        case Polarity::negated: return "negated_";
        case Polarity::historical: return "historical_";
    }
    return "";
}

void add_node(NodeTable& table, std::uint64_t code, std::string key) {
    table.index.emplace(key, static_cast<std::uint32_t>(table.keys.size()));
    table.codes.push_back(code);
    table.keys.push_back(std::move(key));
}

Relation make_relation(std::string name, NodeType source, NodeType target, Csr forward) {
    forward.validate(name);
    Relation r{std::move(name), source, target, std::move(forward), {}};
    r.backward = r.forward.transpose();
    return r;
}

SparseVector single(NodeType type, std::uint32_t index, double value) { return {type, {index}, {value}}; }

}  // namespace

std::string_view to_string(NodeType t) {
    switch (t) {
        case NodeType::case_record: return "case_record";
        case NodeType::age_group: return "age_group";
        case NodeType::gender: return "gender";
        case NodeType::symptom: return "symptom";
        case NodeType::disease: return "disease";
        case NodeType::red_flag: return "red_flag";
        case NodeType::recommendation: return "recommendation";
    }
    return "?";
}

std::optional<NodeType> node_type_for(const ontology::Concept& c) {
    const bool clinical =
        c.type == SemanticType::symptom || c.type == SemanticType::disease || c.type == SemanticType::operation;
    if (!clinical) return std::nullopt;
    if (c.flags.red_flag) return NodeType::red_flag;
    return c.type == SemanticType::symptom ? NodeType::symptom : NodeType::disease;
}

std::uint64_t internal_code(NodeType type, std::uint64_t value) {
    return (static_cast<std::uint64_t>(type) + 1) << 56 | (value & kCodeValueMask);
}

std::optional<std::uint32_t> NodeTable::find(const std::string& key) const {
    const auto it = index.find(key);
    if (it == index.end()) return std::nullopt;
    return it->second;
}

// ---------------------------------------------------------------------------
// CSR

void Csr::validate(const std::string& name) const {
    const auto fail = [&](const std::string& what) { throw ValidationError("relation " + name + ": " + what); };
    if (row_ptr.size() != static_cast<std::size_t>(rows) + 1) fail("row_ptr length");
    if (row_ptr.front() != 0 || row_ptr.back() != col.size()) fail("row_ptr bounds");
    if (weight.size() != col.size()) fail("weight length");
    for (std::uint32_t r = 0; r < rows; ++r) {
        if (row_ptr[r] > row_ptr[r + 1]) fail("row_ptr not monotone at row " + std::to_string(r));
        for (auto p = row_ptr[r]; p < row_ptr[r + 1]; ++p) {
            if (col[p] >= cols) fail("column out of range at row " + std::to_string(r));
            if (p > row_ptr[r] && col[p] <= col[p - 1]) fail("columns not strictly increasing at row " + std::to_string(r));
            if (!(weight[p] > 0.0) || !std::isfinite(weight[p])) fail("non-positive weight at row " + std::to_string(r));
        }
    }
}

Csr Csr::transpose() const {
    Csr t;
    t.rows = cols;
    t.cols = rows;
    t.row_ptr.assign(static_cast<std::size_t>(cols) + 1, 0);
    for (const auto c : col) ++t.row_ptr[c + 1];
    std::partial_sum(t.row_ptr.begin(), t.row_ptr.end(), t.row_ptr.begin());
    t.col.resize(col.size());
    t.weight.resize(col.size());
    auto next = t.row_ptr;
    // Rows are visited in order, so each transposed row comes out sorted.
    for (std::uint32_t r = 0; r < rows; ++r) {
        for (auto p = row_ptr[r]; p < row_ptr[r + 1]; ++p) {
            const auto q = next[col[p]]++;
            t.col[q] = r;
            t.weight[q] = weight[p];
        }
    }
    return t;
}

Csr Csr::from_triples(std::uint32_t rows, std::uint32_t cols,
                      std::vector<std::tuple<std::uint32_t, std::uint32_t, double>> triples) {
    std::sort(triples.begin(), triples.end(), [](const auto& a, const auto& b) {
        return std::tie(std::get<0>(a), std::get<1>(a)) < std::tie(std::get<0>(b), std::get<1>(b));
    });
    Csr m;
    m.rows = rows;
    m.cols = cols;
    m.row_ptr.assign(static_cast<std::size_t>(rows) + 1, 0);
    std::optional<std::pair<std::uint32_t, std::uint32_t>> last;
    for (const auto& [r, c, w] : triples) {
        if (r >= rows || c >= cols) throw ValidationError("triple outside the matrix shape");
        if (last && last->first == r && last->second == c) {
            m.weight.back() += w;
            continue;
        }
        m.col.push_back(c);
        m.weight.push_back(w);
        ++m.row_ptr[r + 1];
        last = {r, c};
    }
    std::partial_sum(m.row_ptr.begin(), m.row_ptr.end(), m.row_ptr.begin());
    return m;
}

std::string concept_relation(NodeType concept_type, Polarity polarity) {
    return std::string(polarity_prefix(polarity)) + std::string(to_string(concept_type)) + "_to_patient";
}

// ---------------------------------------------------------------------------
// Weights

double EdgeWeights::mean() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& [t, v] : by_type) {
        for (const double w : v) sum += w;
        n += v.size();
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

void EdgeWeights::validate() const {
    for (const auto& [t, v] : by_type)
        for (std::size_t i = 0; i < v.size(); ++i)
            if (!std::isfinite(v[i]) || v[i] < 0.0)
                throw ValidationError("weight of " + std::string(to_string(t)) + " node " + std::to_string(i) +
                                      " is negative or not finite");
}

// ---------------------------------------------------------------------------
// Graph

const Relation& KnowledgeGraph::relation(const std::string& name) const {
    const auto it = relation_index_.find(name);
    if (it == relation_index_.end()) throw PathError("unknown relation " + name);
    return relations_[it->second];
}

KnowledgeGraph KnowledgeGraph::with_weights(EdgeWeights weights) const {
    weights.validate();
    for (const auto t : kConceptNodeTypes) {
        const auto it = weights.by_type.find(t);
        const std::size_t have = it == weights.by_type.end() ? 0 : it->second.size();
        if (have != nodes(t).size())
            throw ValidationError("weights for " + std::string(to_string(t)) + " have " + std::to_string(have) +
                                  " entries, graph has " + std::to_string(nodes(t).size()));
    }
    auto copy = *this;
    copy.weights_ = std::move(weights);
    return copy;
}

std::optional<std::pair<NodeType, std::uint32_t>> KnowledgeGraph::concept_node(const std::string& concept_id) const {
    for (const auto t : kConceptNodeTypes)
        if (const auto i = nodes(t).find(concept_id)) return std::pair{t, *i};
    return std::nullopt;
}

double KnowledgeGraph::concept_weight(NodeType t, std::uint32_t i) const {
    const auto it = weights_.by_type.find(t);
    if (it == weights_.by_type.end() || i >= it->second.size()) return 0.0;
    return it->second[i];
}

std::size_t KnowledgeGraph::edge_count() const {
    std::size_t n = 0;
    for (const auto& r : relations_) n += r.forward.nnz();
    return n;
}

bool KnowledgeGraph::operator==(const KnowledgeGraph& o) const {
    for (std::size_t t = 0; t < kNodeTypeCount; ++t)
        if (nodes_[t].codes != o.nodes_[t].codes || nodes_[t].keys != o.nodes_[t].keys) return false;
    if (relations_.size() != o.relations_.size()) return false;
    for (std::size_t i = 0; i < relations_.size(); ++i) {
        const auto &a = relations_[i], &b = o.relations_[i];
        if (a.name != b.name || a.source != b.source || a.target != b.target || a.forward.rows != b.forward.rows ||
            a.forward.cols != b.forward.cols || a.forward.row_ptr != b.forward.row_ptr || a.forward.col != b.forward.col ||
            a.forward.weight != b.forward.weight)
            return false;
    }
    return weights_.source == o.weights_.source && weights_.by_type == o.weights_.by_type &&
           case_labels_ == o.case_labels_ && case_age_group_ == o.case_age_group_ && case_gender_ == o.case_gender_ &&
           corpus_hash_ == o.corpus_hash_;
}

void KnowledgeGraph::index_relations() {
    relation_index_.clear();
    for (std::size_t i = 0; i < relations_.size(); ++i) {
        if (!relation_index_.emplace(relations_[i].name, i).second)
            throw ValidationError("duplicate relation " + relations_[i].name);
    }
}

KnowledgeGraph build_graph(const std::vector<corpus::CaseRecord>& records, const ontology::Ontology& ontology) {
    KnowledgeGraph kg;
    kg.corpus_hash_ = corpus::corpus_hash(records);

    std::vector<const corpus::CaseRecord*> sorted;
    sorted.reserve(records.size());
    for (const auto& r : records) sorted.push_back(&r);
    std::sort(sorted.begin(), sorted.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
    for (std::size_t i = 1; i < sorted.size(); ++i)
        if (sorted[i]->id == sorted[i - 1]->id) throw IngestionError("record " + sorted[i]->id + ": duplicate case id");

    auto& cases = kg.nodes_[slot(NodeType::case_record)];
    for (std::size_t i = 0; i < sorted.size(); ++i) add_node(cases, internal_code(NodeType::case_record, i), sorted[i]->id);
    for (int g = 0; g < corpus::kAgeGroupCount; ++g)
        add_node(kg.nodes_[slot(NodeType::age_group)], internal_code(NodeType::age_group, static_cast<std::uint64_t>(g)),
                 std::string(corpus::age_group_name(g)));
    for (const auto g : {Gender::female, Gender::male, Gender::other})
        add_node(kg.nodes_[slot(NodeType::gender)], internal_code(NodeType::gender, static_cast<std::uint64_t>(g)),
                 std::string(to_string(g)));

    // Concept nodes: ordered by internal code within each type.
    std::map<NodeType, std::vector<std::pair<std::uint64_t, std::string>>> concept_codes;
    for (const auto& c : ontology.concepts())
        if (const auto t = node_type_for(c)) concept_codes[*t].emplace_back(internal_code(*t, fnv1a64(c.id)), c.id);
    for (const auto t : kConceptNodeTypes) {
        auto& list = concept_codes[t];
        std::sort(list.begin(), list.end());
        for (std::size_t i = 1; i < list.size(); ++i)
            if (list[i].first == list[i - 1].first)
                throw ValidationError("internal code collision between " + list[i - 1].second + " and " + list[i].second);
        for (auto& [code, id] : list) add_node(kg.nodes_[slot(t)], code, id);
    }

    std::set<RecommendationLabel> labels;
    for (const auto* r : sorted) labels.insert(r->label);
    for (const auto& l : labels) {
        const auto value = static_cast<std::uint64_t>(l.risk) << 8 | static_cast<std::uint64_t>(l.point_of_care) << 4 |
                           static_cast<std::uint64_t>(l.time_frame);
        add_node(kg.nodes_[slot(NodeType::recommendation)], internal_code(NodeType::recommendation, value), l.str());
    }

    using Triples = std::vector<std::tuple<std::uint32_t, std::uint32_t, double>>;
    std::map<std::string, Triples> concept_triples;
    Triples age_triples, gender_triples, label_triples;
    kg.case_labels_.reserve(sorted.size());
    for (std::uint32_t ci = 0; ci < sorted.size(); ++ci) {
        const auto& rec = *sorted[ci];
        std::set<std::pair<std::string, std::uint32_t>> seen;  // relation, concept node
        for (const auto& m : rec.mentions) {
            const auto* c = ontology.find(m.concept_id);
            if (!c) throw IngestionError("record " + rec.id + ": concept " + m.concept_id + " not in the ontology");
            const auto t = node_type_for(*c);
            if (!t) continue;  // anatomy and other concepts carry no node
            const auto node = *kg.nodes(*t).find(c->id);
            auto rel = concept_relation(*t, m.polarity);
            if (seen.emplace(rel, node).second) concept_triples[rel].emplace_back(node, ci, 1.0);
        }
        const int group = corpus::age_group(rec.age);
        age_triples.emplace_back(static_cast<std::uint32_t>(group), ci, 1.0);
        gender_triples.emplace_back(static_cast<std::uint32_t>(rec.gender), ci, 1.0);
        label_triples.emplace_back(ci, *kg.nodes(NodeType::recommendation).find(rec.label.str()), 1.0);
        kg.case_labels_.push_back(rec.label);
        kg.case_age_group_.push_back(group);
        kg.case_gender_.push_back(rec.gender);
    }

    const auto count = [&](NodeType t) { return static_cast<std::uint32_t>(kg.nodes(t).size()); };
    const auto n_cases = count(NodeType::case_record);
    for (const auto t : kConceptNodeTypes)
        for (const auto p : kConceptPolarities) {
            auto name = concept_relation(t, p);
            kg.relations_.push_back(make_relation(name, t, NodeType::case_record,
                                                  Csr::from_triples(count(t), n_cases, std::move(concept_triples[name]))));
        }
    kg.relations_.push_back(make_relation(kAgeGroupToPatient, NodeType::age_group, NodeType::case_record,
                                          Csr::from_triples(count(NodeType::age_group), n_cases, std::move(age_triples))));
    kg.relations_.push_back(make_relation(kGenderToPatient, NodeType::gender, NodeType::case_record,
                                          Csr::from_triples(count(NodeType::gender), n_cases, std::move(gender_triples))));
    kg.relations_.push_back(make_relation(kPatientToRecommendation, NodeType::case_record, NodeType::recommendation,
                                          Csr::from_triples(n_cases, count(NodeType::recommendation),
                                                            std::move(label_triples))));
    kg.index_relations();
    kg.weights_ = idf_weights(kg);
    return kg;
}

// ---------------------------------------------------------------------------
// Traversal

SparseVector multiply_serial(const Csr& matrix, const SparseVector& x, NodeType result_type) {
    std::vector<double> acc(matrix.cols, 0.0);
    std::vector<char> hit(matrix.cols, 0);
    std::vector<std::uint32_t> touched;
    for (std::size_t k = 0; k < x.nnz(); ++k) {
        const auto i = x.index[k];
        if (i >= matrix.rows) throw ValidationError("frontier index " + std::to_string(i) + " outside the relation");
        const double xv = x.value[k];
        for (auto p = matrix.row_ptr[i]; p < matrix.row_ptr[i + 1]; ++p) {
            const auto j = matrix.col[p];
            if (!hit[j]) {
                hit[j] = 1;
                touched.push_back(j);
            }
            acc[j] += xv * matrix.weight[p];
        }
    }
    std::sort(touched.begin(), touched.end());
    SparseVector out{result_type, std::move(touched), {}};
    out.value.reserve(out.index.size());
    for (const auto j : out.index) out.value.push_back(acc[j]);
    return out;
}

SparseVector multiply_parallel(const Csr& matrix, const Csr& transposed, const SparseVector& x, NodeType result_type) {
    std::vector<double> dense(matrix.rows, 0.0);
    std::vector<char> active(matrix.rows, 0);
    for (std::size_t k = 0; k < x.nnz(); ++k) {
        const auto i = x.index[k];
        if (i >= matrix.rows) throw ValidationError("frontier index " + std::to_string(i) + " outside the relation");
        dense[i] = x.value[k];
        active[i] = 1;
    }
    const auto cols = static_cast<std::ptrdiff_t>(matrix.cols);
    std::vector<double> sum(matrix.cols, 0.0);
    std::vector<char> hit(matrix.cols, 0);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t jj = 0; jj < cols; ++jj) {
        const auto j = static_cast<std::size_t>(jj);
        double s = 0.0;
        char h = 0;
        for (auto p = transposed.row_ptr[j]; p < transposed.row_ptr[j + 1]; ++p) {
            const auto i = transposed.col[p];
            if (!active[i]) continue;
            h = 1;
            s += dense[i] * transposed.weight[p];
        }
        sum[j] = s;
        hit[j] = h;
    }
    SparseVector out{result_type, {}, {}};
    for (std::uint32_t j = 0; j < matrix.cols; ++j) {
        if (!hit[j]) continue;
        out.index.push_back(j);
        out.value.push_back(sum[j]);
    }
    return out;
}

SparseVector add(const SparseVector& a, const SparseVector& b) {
    if (a.type != b.type) throw ValidationError("adding vectors over different node types");
    SparseVector out{a.type, {}, {}};
    std::size_t i = 0, j = 0;
    while (i < a.nnz() || j < b.nnz()) {
        if (j == b.nnz() || (i < a.nnz() && a.index[i] < b.index[j])) {
            out.index.push_back(a.index[i]);
            out.value.push_back(a.value[i++]);
        } else if (i == a.nnz() || b.index[j] < a.index[i]) {
            out.index.push_back(b.index[j]);
            out.value.push_back(b.value[j++]);
        } else {
            out.index.push_back(a.index[i]);
            out.value.push_back(a.value[i++] + b.value[j++]);
        }
    }
    return out;
}

SparseVector traverse(const KnowledgeGraph& kg, const std::vector<PathStep>& path, const SparseVector& frontier,
                      Kernel kernel) {
    if (frontier.index.size() != frontier.value.size()) throw ValidationError("frontier index/value length mismatch");
    for (std::size_t k = 1; k < frontier.nnz(); ++k)
        if (frontier.index[k] <= frontier.index[k - 1]) throw ValidationError("frontier indices not strictly increasing");
    SparseVector x = frontier;
    for (std::size_t s = 0; s < path.size(); ++s) {
        const auto& step = path[s];
        const auto where = "step " + std::to_string(s) + " (" + step.relation +
                           (step.direction == Direction::forward ? " forward" : " reverse") + ")";
        if (!kg.has_relation(step.relation)) throw PathError(where + ": unknown relation");
        const auto& rel = kg.relation(step.relation);
        const bool fwd = step.direction == Direction::forward;
        const auto from = fwd ? rel.source : rel.target;
        const auto to = fwd ? rel.target : rel.source;
        if (x.type != from)
            throw PathError(where + ": frontier holds " + std::string(to_string(x.type)) + " nodes, step expects " +
                            std::string(to_string(from)));
        const auto& m = fwd ? rel.forward : rel.backward;
        const auto& mt = fwd ? rel.backward : rel.forward;
        bool parallel = kernel == Kernel::parallel;
        if (kernel == Kernel::automatic) {
            // Pull touches every edge; push only the frontier's rows.
            std::uint64_t push_work = 0;
            for (const auto i : x.index)
                if (i < m.rows) push_work += m.row_ptr[i + 1] - m.row_ptr[i];
            parallel = omp_get_max_threads() > 1 && push_work * 4 > m.nnz();
        }
        x = parallel ? multiply_parallel(m, mt, x, to) : multiply_serial(m, x, to);
    }
    return x;
}

// ---------------------------------------------------------------------------
// Similar cases

std::vector<ScoredCase> similar_cases(const KnowledgeGraph& kg, const PatientProfile& profile,
                                      const SimilarityConfig& config, Kernel kernel) {
    if (profile.affirmed.empty()) throw QueryError("no affirmed concepts");
    if (config.k == 0) throw QueryError("k must be at least 1");
    const std::set<std::string> affirmed(profile.affirmed.begin(), profile.affirmed.end());
    const std::set<std::string> denied(profile.denied.begin(), profile.denied.end());
    for (const auto& id : denied)
        if (affirmed.contains(id)) throw QueryError("concept " + id + " is both affirmed and denied");

    const auto frontiers = [&](const std::set<std::string>& ids, double scale) {
        std::map<NodeType, SparseVector> out;
        for (const auto& id : ids) {
            const auto node = kg.concept_node(id);
            if (!node) continue;
            auto& v = out[node->first];
            v.type = node->first;
            v.index.push_back(node->second);
        }
        for (auto& [t, v] : out) {
            std::sort(v.index.begin(), v.index.end());
            for (const auto i : v.index) v.value.push_back(scale * kg.concept_weight(t, i));
        }
        return out;
    };

    const std::size_t n = kg.case_count();
    std::vector<double> score(n, 0.0);
    std::vector<char> candidate(n, 0);
    const auto accumulate = [&](const SparseVector& v, bool mark) {
        for (std::size_t k = 0; k < v.nnz(); ++k) {
            score[v.index[k]] += v.value[k];
            if (mark) candidate[v.index[k]] = 1;
        }
    };
    for (const auto& [t, f] : frontiers(affirmed, 1.0))
        accumulate(traverse(kg, {{concept_relation(t, Polarity::present)}}, f, kernel), true);
    for (const auto& [t, f] : frontiers(denied, -config.lambda_negative))
        accumulate(traverse(kg, {{concept_relation(t, Polarity::present)}}, f, kernel), false);

    const double demo = config.demographic_factor * kg.weights().mean();
    if (profile.age_group && *profile.age_group >= 0 &&
        static_cast<std::size_t>(*profile.age_group) < kg.nodes(NodeType::age_group).size())
        accumulate(traverse(kg, {{kAgeGroupToPatient}},
                            single(NodeType::age_group, static_cast<std::uint32_t>(*profile.age_group), demo), kernel),
                   false);
    if (profile.gender)
        accumulate(traverse(kg, {{kGenderToPatient}},
                            single(NodeType::gender, static_cast<std::uint32_t>(*profile.gender), demo), kernel),
                   false);

    const auto& ids = kg.nodes(NodeType::case_record).keys;
    std::vector<ScoredCase> ranked;
    for (std::uint32_t i = 0; i < n; ++i)
        if (candidate[i]) ranked.push_back({i, ids[i], score[i]});
    const auto better = [](const ScoredCase& a, const ScoredCase& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.case_id < b.case_id;
    };
    const auto keep = std::min(config.k, ranked.size());
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(keep), ranked.end(), better);
    ranked.resize(keep);
    return ranked;
}

// ---------------------------------------------------------------------------
// Weights

EdgeWeights idf_weights(const KnowledgeGraph& kg) {
    EdgeWeights w;
    w.source = "idf";
    const double n = static_cast<double>(kg.case_count());
    for (const auto t : kConceptNodeTypes) {
        auto& v = w.by_type[t];
        v.assign(kg.nodes(t).size(), 0.0);
        if (!kg.has_relation(concept_relation(t, Polarity::present))) continue;
        const auto& m = kg.relation(concept_relation(t, Polarity::present)).forward;
        for (std::uint32_t i = 0; i < m.rows; ++i) {
            const auto df = m.row_ptr[i + 1] - m.row_ptr[i];
            if (df > 0) v[i] = std::log(n / static_cast<double>(df));
        }
    }
    return w;
}

EdgeWeights learn_weights(const KnowledgeGraph& kg, const std::vector<std::string>& training_case_ids,
                          const WeightLearningConfig& config) {
    constexpr std::size_t kClasses = kAllRisks.size();
    std::array<std::size_t, kNodeTypeCount> offset{};
    std::size_t features = 0;
    for (const auto t : kConceptNodeTypes) {
        offset[slot(t)] = features;
        features += kg.nodes(t).size();
    }

    std::vector<std::vector<std::uint32_t>> rows;  // active feature ids per training case
    std::vector<std::size_t> label;
    std::set<std::size_t> classes;
    const auto& cases = kg.nodes(NodeType::case_record);
    for (const auto& id : training_case_ids) {
        const auto ci = cases.find(id);
        if (!ci) throw LookupError("training case " + id + " not in the graph");
        std::vector<std::uint32_t> f;
        for (const auto t : kConceptNodeTypes) {
            const auto& back = kg.relation(concept_relation(t, Polarity::present)).backward;
            for (auto p = back.row_ptr[*ci]; p < back.row_ptr[*ci + 1]; ++p)
                f.push_back(static_cast<std::uint32_t>(offset[slot(t)] + back.col[p]));
        }
        rows.push_back(std::move(f));
        label.push_back(static_cast<std::size_t>(kg.case_labels()[*ci].risk));
        classes.insert(label.back());
    }
    if (classes.size() < 2)
        throw TrainingError("weight learning needs at least two risk classes, training set has " +
                            std::to_string(classes.size()));

    std::vector<double> coef(kClasses * features, 0.0), bias(kClasses, 0.0);
    std::vector<double> grad(coef.size()), grad_bias(kClasses);
    const double inv_n = 1.0 / static_cast<double>(rows.size());
    for (int it = 0; it < config.iterations; ++it) {
        std::fill(grad.begin(), grad.end(), 0.0);
        std::fill(grad_bias.begin(), grad_bias.end(), 0.0);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            std::array<double, kClasses> z{};
            for (std::size_t c = 0; c < kClasses; ++c) {
                z[c] = bias[c];
                for (const auto f : rows[r]) z[c] += coef[c * features + f];
            }
            const double mx = *std::max_element(z.begin(), z.end());
            double total = 0.0;
            for (auto& v : z) total += (v = std::exp(v - mx));
            for (std::size_t c = 0; c < kClasses; ++c) {
                const double d = (z[c] / total - (c == label[r] ? 1.0 : 0.0)) * inv_n;
                grad_bias[c] += d;
                for (const auto f : rows[r]) grad[c * features + f] += d;
            }
        }
        for (std::size_t i = 0; i < coef.size(); ++i) coef[i] -= config.learning_rate * (grad[i] + config.l2 * coef[i]);
        for (std::size_t c = 0; c < kClasses; ++c) bias[c] -= config.learning_rate * grad_bias[c];
    }
    for (const double v : coef)
        if (!std::isfinite(v)) throw TrainingError("weight learning diverged");

    EdgeWeights w;
    w.source = "learned";
    for (const auto t : kConceptNodeTypes) {
        auto& v = w.by_type[t];
        v.resize(kg.nodes(t).size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            const auto f = offset[slot(t)] + i;
            double lo = coef[f], hi = coef[f];
            for (std::size_t c = 1; c < kClasses; ++c) {
                lo = std::min(lo, coef[c * features + f]);
                hi = std::max(hi, coef[c * features + f]);
            }
            v[i] = std::max(0.0, hi - lo);
        }
    }
    return w;
}

// ---------------------------------------------------------------------------
// External codes

std::pair<KnowledgeGraph, CodeCoverage> map_to_codes(const KnowledgeGraph& kg,
                                                     const std::map<std::string, std::uint64_t>& table) {
    std::map<std::uint64_t, std::string> owner;
    for (const auto& [id, code] : table) {
        const auto [it, fresh] = owner.emplace(code, id);
        if (!fresh) throw MappingError("external code " + std::to_string(code) + " used by " + it->second + " and " + id);
    }
    KnowledgeGraph out = kg;
    CodeCoverage coverage;
    for (const auto t : kConceptNodeTypes) {
        auto& table_t = out.nodes_[slot(t)];
        coverage.concept_nodes += table_t.size();
        for (std::size_t i = 0; i < table_t.size(); ++i) {
            const auto it = table.find(table_t.keys[i]);
            if (it == table.end()) continue;
            table_t.codes[i] = it->second;
            ++coverage.mapped;
        }
    }
    std::map<std::uint64_t, std::string> all;
    for (const auto& nt : out.nodes_)
        for (std::size_t i = 0; i < nt.size(); ++i) {
            const auto [it, fresh] = all.emplace(nt.codes[i], nt.keys[i]);
            if (!fresh)
                throw MappingError("code " + std::to_string(nt.codes[i]) + " of " + nt.keys[i] + " collides with " +
                                   it->second);
        }
    return {std::move(out), coverage};
}

std::map<std::string, std::uint64_t> load_code_table(const std::string& path, const ontology::Ontology& ontology,
                                                     std::size_t* unresolved) {
    std::map<std::string, std::uint64_t> out;
    std::size_t skipped = 0;
    std::size_t line_no = 0;
    for (const auto& raw : read_lines(path)) {
        ++line_no;
        const auto line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        const auto f = split(line, '\t');
        if (f.size() != 2) throw ParseError(path + ":" + std::to_string(line_no) + ": expected id<TAB>code");
        std::uint64_t code = 0;
        try {
            std::size_t used = 0;
            code = std::stoull(f[1], &used);
            if (used != f[1].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": bad code " + f[1]);
        }
        const auto id = ontology.resolve(f[0]);
        if (!id) {
            ++skipped;
            continue;
        }
        const auto [it, fresh] = out.emplace(*id, code);
        if (!fresh && it->second != code)
            throw MappingError("concept " + *id + " receives codes " + std::to_string(it->second) + " and " +
                               std::to_string(code));
    }
    if (unresolved) *unresolved = skipped;
    return out;
}

// ---------------------------------------------------------------------------
// Snapshot

void save_snapshot(const std::string& path, const KnowledgeGraph& kg) {
    ByteWriter w;
    w.bytes("TKGS");
    w.u32(kSnapshotSchemaVersion);
    w.u64(kg.corpus_hash());
    for (std::size_t t = 0; t < kNodeTypeCount; ++t) w.u32(static_cast<std::uint32_t>(kg.nodes(NodeType(t)).size()));
    for (std::size_t t = 0; t < kNodeTypeCount; ++t) {
        const auto& nt = kg.nodes(NodeType(t));
        for (std::size_t i = 0; i < nt.size(); ++i) {
            w.u64(nt.codes[i]);
            w.str(nt.keys[i]);
        }
    }
    for (std::size_t i = 0; i < kg.case_count(); ++i) {
        const auto& l = kg.case_labels()[i];
        w.u8(static_cast<std::uint8_t>(l.risk));
        w.u8(static_cast<std::uint8_t>(l.point_of_care));
        w.u8(static_cast<std::uint8_t>(l.time_frame));
        w.u8(static_cast<std::uint8_t>(kg.case_age_groups()[i]));
        w.u8(static_cast<std::uint8_t>(kg.case_genders()[i]));
    }
    w.str(kg.weights().source);
    for (const auto t : kConceptNodeTypes) {
        const auto it = kg.weights().by_type.find(t);
        const std::size_t n = it == kg.weights().by_type.end() ? 0 : it->second.size();
        w.u32(static_cast<std::uint32_t>(n));
        for (std::size_t i = 0; i < n; ++i) w.f64(it->second[i]);
    }
    w.u32(static_cast<std::uint32_t>(kg.relations().size()));
    for (const auto& r : kg.relations()) {
        w.str(r.name);
        w.u8(static_cast<std::uint8_t>(r.source));
        w.u8(static_cast<std::uint8_t>(r.target));
        w.u32(r.forward.rows);
        w.u32(r.forward.cols);
        w.u64(r.forward.nnz());
        for (const auto p : r.forward.row_ptr) w.u64(p);
        for (const auto c : r.forward.col) w.u32(c);
        for (const auto x : r.forward.weight) w.f64(x);
    }
    write_file(path, w.data());
}

KnowledgeGraph load_snapshot(const std::string& path) {
    const auto data = read_file(path);
    ByteReader r(data);
    if (r.bytes(4) != "TKGS") throw ParseError(path + ": not a graph snapshot (bad magic)");
    if (const auto v = r.u32(); v != kSnapshotSchemaVersion)
        throw ParseError(path + ": snapshot schema " + std::to_string(v) + ", expected " +
                         std::to_string(kSnapshotSchemaVersion));
    KnowledgeGraph kg;
    kg.corpus_hash_ = r.u64();
    std::array<std::uint32_t, kNodeTypeCount> counts{};
    for (auto& c : counts) c = r.u32();
    for (std::size_t t = 0; t < kNodeTypeCount; ++t) {
        auto& nt = kg.nodes_[t];
        for (std::uint32_t i = 0; i < counts[t]; ++i) {
            const auto code = r.u64();
            auto key = r.str();
            if (nt.index.contains(key)) throw ParseError(path + ": duplicate node key " + key);
            add_node(nt, code, std::move(key));
        }
    }
    const auto enum_byte = [&](std::uint8_t limit, const char* what) {
        const auto b = r.u8();
        if (b >= limit) throw ParseError(path + ": bad " + std::string(what) + " value " + std::to_string(b));
        return b;
    };
    for (std::uint32_t i = 0; i < counts[slot(NodeType::case_record)]; ++i) {
        RecommendationLabel l;
        l.risk = Risk(enum_byte(3, "risk"));
        l.point_of_care = PointOfCare(enum_byte(4, "point_of_care"));
        l.time_frame = TimeFrame(enum_byte(4, "time_frame"));
        kg.case_labels_.push_back(l);
        kg.case_age_group_.push_back(enum_byte(corpus::kAgeGroupCount, "age group"));
        kg.case_gender_.push_back(Gender(enum_byte(3, "gender")));
    }
    kg.weights_.source = r.str();
    for (const auto t : kConceptNodeTypes) {
        const auto n = r.u32();
        if (n != counts[slot(t)]) throw ParseError(path + ": weight count does not match " + std::string(to_string(t)));
        auto& v = kg.weights_.by_type[t];
        for (std::uint32_t i = 0; i < n; ++i) v.push_back(r.f64());
    }
    const auto relations = r.u32();
    for (std::uint32_t k = 0; k < relations; ++k) {
        auto name = r.str();
        const auto source = NodeType(enum_byte(kNodeTypeCount, "node type"));
        const auto target = NodeType(enum_byte(kNodeTypeCount, "node type"));
        Csr m;
        m.rows = r.u32();
        m.cols = r.u32();
        if (m.rows != counts[slot(source)] || m.cols != counts[slot(target)])
            throw ParseError(path + ": relation " + name + " shape does not match its node tables");
        const auto nnz = r.u64();
        if (nnz > r.remaining()) throw ParseError(path + ": relation " + name + " edge count exceeds the file");
        m.row_ptr.resize(static_cast<std::size_t>(m.rows) + 1);
        for (auto& p : m.row_ptr) p = r.u64();
        m.col.resize(nnz);
        for (auto& c : m.col) c = r.u32();
        m.weight.resize(nnz);
        for (auto& x : m.weight) x = r.f64();
        try {
            kg.relations_.push_back(make_relation(std::move(name), source, target, std::move(m)));
        } catch (const ValidationError& e) {
            throw ParseError(path + ": " + e.what());
        }
    }
    if (!r.done()) throw ParseError(path + ": " + std::to_string(r.remaining()) + " trailing bytes");
    kg.index_relations();
    kg.weights_.validate();
    return kg;
}

std::string stats_text(const KnowledgeGraph& kg) {
    std::ostringstream out;
    out << "nodes\n";
    std::size_t total = 0;
    for (std::size_t t = 0; t < kNodeTypeCount; ++t) {
        const auto n = kg.nodes(NodeType(t)).size();
        total += n;
        out << "  " << to_string(NodeType(t)) << '\t' << n << '\n';
    }
    out << "  total\t" << total << '\n' << "edges\n";
    for (const auto& r : kg.relations()) out << "  " << r.name << '\t' << r.forward.nnz() << '\n';
    out << "  total\t" << kg.edge_count() << '\n';
    out << "weights\t" << kg.weights().source << '\n';
    out << "corpus_hash\t" << hex64(kg.corpus_hash()) << '\n';
    return out.str();
}

KnowledgeGraph synthetic_graph(std::size_t cases, std::size_t concepts, std::size_t edges, std::uint64_t seed) {
    KnowledgeGraph kg;
    Rng rng(seed);
    char buf[32];
    for (std::size_t i = 0; i < cases; ++i) {
        std::snprintf(buf, sizeof buf, "case-%08zu", i);
        add_node(kg.nodes_[slot(NodeType::case_record)], internal_code(NodeType::case_record, i), buf);
    }
    for (std::size_t i = 0; i < concepts; ++i) {
        std::snprintf(buf, sizeof buf, "S%08zu", i);
        add_node(kg.nodes_[slot(NodeType::symptom)], internal_code(NodeType::symptom, i), buf);
    }
    std::vector<std::tuple<std::uint32_t, std::uint32_t, double>> triples;
    triples.reserve(edges);
    for (std::size_t e = 0; e < edges; ++e)
        triples.emplace_back(static_cast<std::uint32_t>(uniform_index(rng, concepts)),
                             static_cast<std::uint32_t>(uniform_index(rng, cases)), uniform_range(rng, 0.5, 1.5));
    kg.relations_.push_back(make_relation(concept_relation(NodeType::symptom, Polarity::present), NodeType::symptom,
                                          NodeType::case_record,
                                          Csr::from_triples(static_cast<std::uint32_t>(concepts),
                                                            static_cast<std::uint32_t>(cases), std::move(triples))));
    kg.index_relations();
    kg.case_labels_.assign(cases, RecommendationLabel{});
    kg.case_age_group_.assign(cases, 0);
    kg.case_gender_.assign(cases, Gender::other);
    kg.weights_ = idf_weights(kg);
    kg.weights_.by_type[NodeType::disease];
    kg.weights_.by_type[NodeType::red_flag];
    return kg;
}

}  // namespace triage::kg
