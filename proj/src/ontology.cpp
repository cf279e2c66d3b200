#include "triage/ontology.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <queue>
#include <sstream>

#include "triage/common.hpp"

namespace triage::ontology {

SimpleLexicon::SimpleLexicon(std::map<std::string, std::vector<std::string>> entries, std::size_t min_length)
    : entries_(std::move(entries)), min_length_(min_length) {
    for (const auto& [surface, reps] : entries_) {
        if (reps.empty()) throw ConfigError("lexicon surface '" + surface + "' has no representative");
        max_length_ = std::max(max_length_, surface.size());
    }
}

SimpleLexicon SimpleLexicon::load(const std::string& path, std::size_t min_length) {
    std::map<std::string, std::vector<std::string>> entries;
    int line_no = 0;
    for (const auto& line : read_lines(path)) {
        ++line_no;
        if (trim(line).empty() || line[0] == '#') continue;
        const auto cols = split(line, '\t');
        if (cols.size() < 2)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected surface and representative");
        const auto surface = text::normalize_word(cols[0]);
        if (surface.size() < min_length)
            throw ParseError(path + ":" + std::to_string(line_no) + ": simple entity '" + surface + "' shorter than " +
                             std::to_string(min_length));
        std::vector<std::string> reps;
        for (const auto& r : split(trim(cols[1]), ' '))
            if (!r.empty()) reps.push_back(text::normalize_word(r));
        if (!entries.emplace(surface, std::move(reps)).second)
            throw ParseError(path + ":" + std::to_string(line_no) + ": duplicate surface '" + surface + "'");
    }
    return SimpleLexicon(std::move(entries), min_length);
}

const std::vector<std::string>* SimpleLexicon::find(const std::string& surface) const {
    const auto it = entries_.find(surface);
    return it == entries_.end() ? nullptr : &it->second;
}

std::vector<std::string> split_compound(const std::string& term, const SimpleLexicon& lexicon,
                                        const SplitConfig& config) {
    const std::size_t n = term.size();
    if (n == 0) return {};
    std::vector<char> failed(n + 1, 0);
    std::vector<std::string> segments;
    std::function<bool(std::size_t)> solve = [&](std::size_t pos) -> bool {
        if (pos == n) return true;
        if (failed[pos]) return false;
        const std::size_t longest = std::min(lexicon.max_length(), n - pos);
        for (std::size_t len = longest; len >= lexicon.min_length() && len > 0; --len) {
            const auto sub = term.substr(pos, len);
            if (!lexicon.find(sub)) continue;
            segments.push_back(sub);
            const std::size_t next = pos + len;
            if (solve(next)) return true;
            if (next + 1 < n && config.linking_chars.find(term[next]) != std::string::npos && solve(next + 1))
                return true;
            segments.pop_back();
        }
        failed[pos] = 1;
        return false;
    };
    if (!solve(0)) return {};
    std::vector<std::string> out;
    for (const auto& s : segments)
        for (const auto& r : *lexicon.find(s)) out.push_back(r);
    return out;
}

namespace {

struct BlockInfo {
    std::vector<std::string> blocks;
    std::size_t atomic = 0;
};

BlockInfo block_info(const std::string& expression, const SimpleLexicon& lexicon, const text::WordSet& connectives,
                     const SplitConfig& config) {
    BlockInfo info;
    std::set<std::string> blocks;
    for (const auto& word : split(expression, ' ')) {
        if (word.empty() || connectives.contains(word)) continue;
        const auto parts = split_compound(word, lexicon, config);
        if (parts.empty()) {
            blocks.insert(word);
            ++info.atomic;
        } else {
            blocks.insert(parts.begin(), parts.end());
        }
    }
    if (blocks.empty()) {
        blocks.insert(expression);
        ++info.atomic;
    }
    info.blocks.assign(blocks.begin(), blocks.end());
    return info;
}

std::string block_key(const std::vector<std::string>& blocks) { return join(blocks, "+"); }

}  // namespace

std::vector<std::string> semantic_blocks(const std::string& expression, const SimpleLexicon& lexicon,
                                         const text::WordSet& connectives, const SplitConfig& config) {
    return block_info(expression, lexicon, connectives, config).blocks;
}

std::string concept_id_for(const std::vector<std::string>& sorted_blocks) {
    return "K" + hex64(fnv1a64(block_key(sorted_blocks)));
}

std::string_view to_string(EdgeKind k) {
    switch (k) {
        case EdgeKind::child_of: return "child_of";
        case EdgeKind::located_in: return "located_in";
        case EdgeKind::negation_of: return "negation_of";
        case EdgeKind::characterization_of: return "characterization_of";
        case EdgeKind::specification_of: return "specification_of";
    }
    return "?";
}

EdgeKind parse_edge_kind(std::string_view s) {
    for (auto k : {EdgeKind::child_of, EdgeKind::located_in, EdgeKind::negation_of, EdgeKind::characterization_of,
                   EdgeKind::specification_of})
        if (to_string(k) == s) return k;
    throw ParseError("unknown relation '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------

std::vector<std::string> topological_order(const std::set<std::string>& nodes, const std::vector<Edge>& child_of) {
    std::map<std::string, std::vector<std::string>> kids;
    std::map<std::string, std::size_t> pending;  // unprocessed parents
    for (const auto& n : nodes) pending[n];
    for (const auto& e : child_of) {
        if (e.kind != EdgeKind::child_of) continue;
        kids[e.to].push_back(e.from);
        ++pending[e.from];
        pending[e.to];
    }
    std::set<std::string> ready;
    for (const auto& [n, c] : pending)
        if (c == 0) ready.insert(n);
    std::vector<std::string> order;
    while (!ready.empty()) {
        const auto n = *ready.begin();
        ready.erase(ready.begin());
        order.push_back(n);
        for (const auto& k : kids[n])
            if (--pending[k] == 0) ready.insert(k);
    }
    if (order.size() == pending.size()) return order;

    // Walk parent links among the unfinished nodes until one repeats.
    std::map<std::string, std::string> parent_in_cycle;
    for (const auto& e : child_of)
        if (e.kind == EdgeKind::child_of && pending[e.from] > 0 && pending[e.to] > 0)
            parent_in_cycle.emplace(e.from, e.to);
    std::string cur = parent_in_cycle.begin()->first;
    std::vector<std::string> path;
    std::map<std::string, std::size_t> seen;
    while (!seen.contains(cur)) {
        seen[cur] = path.size();
        path.push_back(cur);
        cur = parent_in_cycle.at(cur);
    }
    std::vector<std::string> cycle(path.begin() + static_cast<std::ptrdiff_t>(seen[cur]), path.end());
    cycle.push_back(cur);
    throw TaxonomyError("child_of cycle: " + join(cycle, " -> "));
}

std::vector<Edge> transitive_reduction(const std::vector<Edge>& child_of) {
    std::set<std::string> nodes;
    for (const auto& e : child_of) {
        nodes.insert(e.from);
        nodes.insert(e.to);
    }
    const auto order = topological_order(nodes, child_of);
    std::unordered_map<std::string, std::size_t> idx;
    for (std::size_t i = 0; i < order.size(); ++i) idx[order[i]] = i;
    const std::size_t n = order.size();
    const std::size_t words = (n + 63) / 64;
    std::vector<std::vector<std::size_t>> parents(n);
    for (const auto& e : child_of) parents[idx[e.from]].push_back(idx[e.to]);
    // Strict ancestors per node, filled parents-first.
    std::vector<std::vector<std::uint64_t>> anc(n, std::vector<std::uint64_t>(words, 0));
    for (std::size_t i = 0; i < n; ++i)
        for (auto p : parents[i]) {
            anc[i][p / 64] |= 1ULL << (p % 64);
            for (std::size_t w = 0; w < words; ++w) anc[i][w] |= anc[p][w];
        }
    std::vector<Edge> out;
    for (const auto& e : child_of) {
        const auto c = idx[e.from], p = idx[e.to];
        bool implied = false;
        for (auto q : parents[c])
            if (q != p && (anc[q][p / 64] >> (p % 64) & 1ULL)) implied = true;
        if (!implied) out.push_back(e);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

// ---------------------------------------------------------------------------

Ontology::Ontology(std::vector<Concept> concepts, std::vector<Edge> edges)
    : concepts_(std::move(concepts)), edges_(std::move(edges)) {
    std::sort(concepts_.begin(), concepts_.end(), [](const Concept& a, const Concept& b) { return a.id < b.id; });
    for (std::size_t i = 0; i < concepts_.size(); ++i) {
        const auto& c = concepts_[i];
        if (!index_.emplace(c.id, i).second) throw ValidationError("duplicate concept id " + c.id);
        if (c.blocks.empty()) throw ValidationError("concept " + c.id + " has no semantic blocks");
        if (c.flags.red_flag && c.type != SemanticType::symptom && c.type != SemanticType::disease)
            throw ValidationError("red-flag concept " + c.id + " is neither symptom nor disease");
        for (const auto& s : c.synonyms) {
            const auto [it, fresh] = surface_.emplace(s, c.id);
            if (!fresh) throw ValidationError("surface '" + s + "' belongs to both " + it->second + " and " + c.id);
        }
        for (const auto& m : c.members) {
            const auto [it, fresh] = alias_.emplace(m, c.id);
            if (!fresh) throw ValidationError("dictionary id " + m + " merged into both " + it->second + " and " + c.id);
        }
    }
    std::sort(edges_.begin(), edges_.end());
    edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());
    std::set<std::string> ids;
    for (const auto& c : concepts_) ids.insert(c.id);
    for (const auto& e : edges_) {
        if (!index_.contains(e.from) || !index_.contains(e.to))
            throw ValidationError("edge " + e.from + " " + std::string(to_string(e.kind)) + " " + e.to +
                                  " has an unknown endpoint");
        if (e.from == e.to) throw ValidationError("self edge on " + e.from);
        if (e.kind == EdgeKind::child_of) {
            parents_[e.from].push_back(e.to);
            children_[e.to].push_back(e.from);
        }
    }
    topological_order(ids, edges_);
}

const Concept* Ontology::find(const std::string& id) const {
    const auto it = index_.find(id);
    return it == index_.end() ? nullptr : &concepts_[it->second];
}

const Concept& Ontology::at(const std::string& id) const {
    const auto* c = find(id);
    if (!c) throw LookupError("unknown concept id " + id);
    return *c;
}

std::optional<std::string> Ontology::resolve(const std::string& id) const {
    if (index_.contains(id)) return id;
    const auto it = alias_.find(id);
    if (it == alias_.end()) return std::nullopt;
    return it->second;
}

std::optional<std::string> Ontology::by_surface(const std::string& surface) const {
    const auto it = surface_.find(surface);
    if (it == surface_.end()) return std::nullopt;
    return it->second;
}

namespace {
const std::vector<std::string> kNoIds;
}

const std::vector<std::string>& Ontology::parents(const std::string& id) const {
    const auto it = parents_.find(id);
    return it == parents_.end() ? kNoIds : it->second;
}

const std::vector<std::string>& Ontology::children(const std::string& id) const {
    const auto it = children_.find(id);
    return it == children_.end() ? kNoIds : it->second;
}

std::vector<Edge> Ontology::edges_of(EdgeKind kind) const {
    std::vector<Edge> out;
    for (const auto& e : edges_)
        if (e.kind == kind) out.push_back(e);
    return out;
}

std::set<std::string> Ontology::descendants(const std::string& id) const {
    at(id);
    std::set<std::string> out;
    std::vector<std::string> stack{id};
    while (!stack.empty()) {
        const auto cur = stack.back();
        stack.pop_back();
        for (const auto& k : children(cur))
            if (out.insert(k).second) stack.push_back(k);
    }
    return out;
}

std::set<std::string> Ontology::ancestors(const std::string& id) const {
    at(id);
    std::set<std::string> out;
    std::vector<std::string> stack{id};
    while (!stack.empty()) {
        const auto cur = stack.back();
        stack.pop_back();
        for (const auto& p : parents(cur))
            if (out.insert(p).second) stack.push_back(p);
    }
    return out;
}

// ---------------------------------------------------------------------------

AnnotationSet AnnotationSet::load(const std::string& path) {
    AnnotationSet out;
    int line_no = 0;
    for (const auto& line : read_lines(path)) {
        ++line_no;
        if (trim(line).empty() || line[0] == '#') continue;
        const auto cols = split(line, '\t');
        const auto where = path + ":" + std::to_string(line_no) + ": ";
        if (cols.size() != 4) throw ParseError(where + "expected 4 tab-separated columns");
        std::uint64_t count = 0;
        try {
            count = std::stoull(cols[3]);
        } catch (const std::exception&) {
            throw ParseError(where + "bad count '" + cols[3] + "'");
        }
        if (cols[0] == "surface") out.surfaces.push_back({cols[1], cols[2], count});
        else if (cols[0] == "located_in") out.relations.push_back({cols[1], cols[2], count});
        else throw ParseError(where + "unknown row kind '" + cols[0] + "'");
    }
    return out;
}

void AnnotationSet::save(const std::string& path) const {
    std::ostringstream os;
    os << "# kind\tsurface|head\tdictionary_id|location\tcount\n";
    for (const auto& a : surfaces) os << "surface\t" << a.surface << '\t' << a.dictionary_id << '\t' << a.count << '\n';
    for (const auto& r : relations)
        os << "located_in\t" << r.head_id << '\t' << r.location_id << '\t' << r.count << '\n';
    write_file(path, os.str());
}

void AnnotationSet::add_dictionary(const text::Dictionary& dictionary) {
    for (const auto& e : dictionary.entries())
        for (const auto& s : e.normalized_synonyms)
            if (!s.empty()) surfaces.push_back({s, e.concept_id, 0});
}

void AnnotationSet::normalize() {
    std::map<std::pair<std::string, std::string>, std::uint64_t> s, r;
    for (const auto& a : surfaces) s[{a.surface, a.dictionary_id}] += a.count;
    for (const auto& a : relations) r[{a.head_id, a.location_id}] += a.count;
    surfaces.clear();
    relations.clear();
    for (const auto& [k, c] : s) surfaces.push_back({k.first, k.second, c});
    for (const auto& [k, c] : r) relations.push_back({k.first, k.second, c});
}

std::vector<SeedEdge> load_seed(const std::string& path, const SimpleLexicon& lexicon) {
    auto entity = [&](const std::string& term, const std::string& where) {
        const auto norm = text::normalize_word(term);
        const auto info = block_info(norm, lexicon, {}, {});
        if (info.blocks.size() != 1)
            throw ConfigError(where + "seed term '" + term + "' splits into " + block_key(info.blocks) +
                              ", not a single simple entity");
        return info.blocks.front();
    };
    std::vector<SeedEdge> out;
    int line_no = 0;
    for (const auto& line : read_lines(path)) {
        ++line_no;
        if (trim(line).empty() || line[0] == '#') continue;
        const auto cols = split(line, '\t');
        const auto where = path + ":" + std::to_string(line_no) + ": ";
        if (cols.size() != 3) throw ParseError(where + "expected child, parent, relation");
        SeedEdge e;
        e.child = entity(cols[0], where);
        e.parent = entity(cols[1], where);
        if (e.child == e.parent) throw ConfigError(where + "seed edge reduces to a self edge on '" + e.child + "'");
        try {
            e.kind = parse_edge_kind(trim(cols[2]));
        } catch (const ParseError& err) {
            throw ParseError(where + err.what());
        }
        if (e.kind != EdgeKind::child_of && e.kind != EdgeKind::negation_of)
            throw ParseError(where + "seed relations are child_of or negation_of");
        out.push_back(std::move(e));
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

struct DisjointSets {
    std::vector<std::size_t> parent;
    explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    std::size_t find(std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
};

}  // namespace

std::vector<Concept> cluster_concepts(const std::vector<Annotation>& annotations, const text::Dictionary& dictionary,
                                      const SimpleLexicon& lexicon, const ClusterConfig& config) {
    const std::size_t n = annotations.size();
    std::vector<BlockInfo> info(n);
    std::vector<const text::DictEntry*> entry(n);
    for (std::size_t i = 0; i < n; ++i) {
        entry[i] = dictionary.find(annotations[i].dictionary_id);
        if (!entry[i])
            throw DataError("annotation '" + annotations[i].surface + "' references unknown dictionary id " +
                            annotations[i].dictionary_id);
        info[i] = block_info(annotations[i].surface, lexicon, config.connectives, config.split);
    }

    DisjointSets sets(n);
    std::unordered_map<std::string, std::size_t> by_surface, by_entry, by_key;
    for (std::size_t i = 0; i < n; ++i) {
        // A surface belongs to exactly one concept.
        if (auto [it, fresh] = by_surface.emplace(annotations[i].surface, i); !fresh) sets.unite(i, it->second);
        if (auto [it, fresh] = by_entry.emplace(annotations[i].dictionary_id, i); !fresh) sets.unite(i, it->second);
    }
    for (std::size_t i = 0; i < n; ++i)
        if (auto [it, fresh] = by_key.emplace(block_key(info[i].blocks), i); !fresh) sets.unite(i, it->second);

    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < n; ++i) groups[sets.find(i)].push_back(i);

    std::vector<Concept> out;
    out.reserve(groups.size());
    for (const auto& [root, members] : groups) {
        Concept c;
        c.type = entry[members.front()]->type;
        std::size_t best = members.front();
        for (auto i : members) {
            const auto& a = annotations[i];
            if (entry[i]->type != c.type) {
                std::vector<std::string> listed;
                for (auto j : members)
                    listed.push_back(annotations[j].surface + " (" + annotations[j].dictionary_id + ", " +
                                     std::string(to_string(entry[j]->type)) + ")");
                throw ClusteringConflict("cluster mixes semantic types: " + join(listed, "; "));
            }
            c.synonyms.insert(a.surface);
            c.members.insert(a.dictionary_id);
            c.flags |= entry[i]->flags;
            c.support += a.count;
            const auto rank = [&](std::size_t k) {
                return std::make_tuple(info[k].atomic, info[k].blocks.size(), block_key(info[k].blocks));
            };
            if (rank(i) < rank(best)) best = i;
        }
        c.blocks = info[best].blocks;
        c.id = concept_id_for(c.blocks);
        c.canonical = *c.synonyms.begin();
        out.push_back(std::move(c));
    }
    std::sort(out.begin(), out.end(), [](const Concept& a, const Concept& b) { return a.id < b.id; });
    return out;
}

namespace {

using AncestorMap = std::unordered_map<std::string, std::set<std::string>>;

AncestorMap seed_ancestors(const std::vector<SeedEdge>& seeds) {
    std::vector<Edge> edges;
    std::set<std::string> nodes;
    for (const auto& s : seeds)
        if (s.kind == EdgeKind::child_of) {
            edges.push_back({s.child, EdgeKind::child_of, s.parent});
            nodes.insert(s.child);
            nodes.insert(s.parent);
        }
    const auto order = topological_order(nodes, edges);  // throws on a seed cycle
    std::unordered_map<std::string, std::vector<std::string>> parents;
    for (const auto& e : edges) parents[e.from].push_back(e.to);
    AncestorMap anc;
    for (const auto& n : order) {
        auto& set = anc[n];
        for (const auto& p : parents[n]) {
            set.insert(p);
            const auto& pa = anc[p];
            set.insert(pa.begin(), pa.end());
        }
    }
    return anc;
}

// Whether every block of `general` can be assigned a distinct block of
// `specific` that equals it or is a seed descendant of it.
bool covers(const std::vector<std::string>& specific, const std::vector<std::string>& general, const AncestorMap& anc) {
    if (general.size() > specific.size()) return false;
    auto below = [&](const std::string& a, const std::string& b) {
        if (a == b) return true;
        const auto it = anc.find(a);
        return it != anc.end() && it->second.contains(b);
    };
    std::vector<int> owner(specific.size(), -1);
    std::function<bool(std::size_t, std::vector<char>&)> augment = [&](std::size_t g, std::vector<char>& seen) {
        for (std::size_t s = 0; s < specific.size(); ++s) {
            if (seen[s] || !below(specific[s], general[g])) continue;
            seen[s] = 1;
            if (owner[s] < 0 || augment(static_cast<std::size_t>(owner[s]), seen)) {
                owner[s] = static_cast<int>(g);
                return true;
            }
        }
        return false;
    };
    for (std::size_t g = 0; g < general.size(); ++g) {
        std::vector<char> seen(specific.size(), 0);
        if (!augment(g, seen)) return false;
    }
    return true;
}

}  // namespace

std::vector<Edge> build_taxonomy(const std::vector<Concept>& concepts, const std::vector<SeedEdge>& seeds) {
    const auto anc = seed_ancestors(seeds);
    std::vector<Edge> edges;
    for (const auto& a : concepts)
        for (const auto& b : concepts) {
            if (a.id == b.id || a.blocks == b.blocks) continue;
            if (covers(a.blocks, b.blocks, anc)) edges.push_back({a.id, EdgeKind::child_of, b.id});
        }
    std::set<std::string> ids;
    for (const auto& c : concepts) ids.insert(c.id);
    topological_order(ids, edges);
    return transitive_reduction(edges);
}

std::vector<Edge> build_negations(const std::vector<Concept>& concepts, const std::vector<SeedEdge>& seeds) {
    std::unordered_map<std::string, std::string> by_key;
    for (const auto& c : concepts) by_key[block_key(c.blocks)] = c.id;
    std::vector<Edge> out;
    for (const auto& s : seeds) {
        if (s.kind != EdgeKind::negation_of) continue;
        for (const auto& c : concepts) {
            if (!std::binary_search(c.blocks.begin(), c.blocks.end(), s.child)) continue;
            std::set<std::string> swapped(c.blocks.begin(), c.blocks.end());
            swapped.erase(s.child);
            swapped.insert(s.parent);
            const auto it = by_key.find(block_key({swapped.begin(), swapped.end()}));
            if (it != by_key.end() && it->second != c.id) out.push_back({c.id, EdgeKind::negation_of, it->second});
        }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

Ontology build_ontology(const AnnotationSet& annotations, const OntologyInputs& inputs) {
    if (!inputs.dictionary) throw ConfigError("ontology build needs a dictionary");
    AnnotationSet all = annotations;
    all.add_dictionary(*inputs.dictionary);
    all.normalize();
    auto concepts = cluster_concepts(all.surfaces, *inputs.dictionary, inputs.lexicon, inputs.cluster);
    auto edges = build_taxonomy(concepts, inputs.seeds);
    const auto negations = build_negations(concepts, inputs.seeds);
    edges.insert(edges.end(), negations.begin(), negations.end());

    std::unordered_map<std::string, const Concept*> alias;
    for (const auto& c : concepts)
        for (const auto& m : c.members) alias[m] = &c;
    for (const auto& r : all.relations) {
        const auto h = alias.find(r.head_id), l = alias.find(r.location_id);
        if (h == alias.end() || l == alias.end()) continue;
        const auto ht = h->second->type;
        if (ht != SemanticType::symptom && ht != SemanticType::disease && ht != SemanticType::operation) continue;
        if (l->second->type != SemanticType::anatomy || h->second->id == l->second->id) continue;
        edges.push_back({h->second->id, EdgeKind::located_in, l->second->id});
    }
    return Ontology(std::move(concepts), std::move(edges));
}

// ---------------------------------------------------------------------------

Ontology coarsen(const Ontology& ontology, const std::map<std::string, std::string>& merge_map) {
    std::map<std::string, std::string> target;  // ontology id -> ontology id
    for (const auto& [fine_raw, coarse_raw] : merge_map) {
        const auto fine = ontology.resolve(fine_raw);
        if (!fine) throw LookupError("merge map: unknown source id " + fine_raw);
        const auto coarse = ontology.resolve(coarse_raw);
        if (!coarse) throw LookupError("merge map: unknown target id " + coarse_raw);
        if (*fine == *coarse) continue;
        if (const auto [it, fresh] = target.emplace(*fine, *coarse); !fresh && it->second != *coarse)
            throw MappingError("merge map sends " + fine_raw + " to two targets");
    }
    for (const auto& [fine, coarse] : target)
        if (target.contains(coarse)) throw MappingError("merge target " + coarse + " is itself merged");
    if (target.empty()) return ontology;

    std::map<std::string, Concept> out;
    for (const auto& c : ontology.concepts())
        if (!target.contains(c.id)) out.emplace(c.id, c);
    for (const auto& [fine, coarse] : target) {
        const auto& src = ontology.at(fine);
        auto& dst = out.at(coarse);
        if (src.type != dst.type)
            throw MappingError("cannot merge " + std::string(to_string(src.type)) + " " + fine + " into " +
                               std::string(to_string(dst.type)) + " " + coarse);
        dst.synonyms.insert(src.synonyms.begin(), src.synonyms.end());
        dst.members.insert(src.members.begin(), src.members.end());
        dst.flags |= src.flags;
        dst.support += src.support;
    }
    auto remap = [&](const std::string& id) {
        const auto it = target.find(id);
        return it == target.end() ? id : it->second;
    };
    std::vector<Edge> taxonomy, other;
    for (const auto& e : ontology.edges()) {
        Edge m{remap(e.from), e.kind, remap(e.to)};
        if (m.from == m.to) continue;
        (m.kind == EdgeKind::child_of ? taxonomy : other).push_back(std::move(m));
    }
    std::set<std::string> ids;
    for (const auto& [id, c] : out) ids.insert(id);
    topological_order(ids, taxonomy);
    auto edges = transitive_reduction(taxonomy);
    edges.insert(edges.end(), other.begin(), other.end());
    std::vector<Concept> concepts;
    for (auto& [id, c] : out) concepts.push_back(std::move(c));
    return Ontology(std::move(concepts), std::move(edges));
}

std::map<std::string, std::string> load_merge_map(const std::string& path) {
    std::map<std::string, std::string> out;
    int line_no = 0;
    for (const auto& line : read_lines(path)) {
        ++line_no;
        if (trim(line).empty() || line[0] == '#') continue;
        const auto cols = split(line, '\t');
        if (cols.size() != 2) throw ParseError(path + ":" + std::to_string(line_no) + ": expected fine, coarse");
        if (!out.emplace(trim(cols[0]), trim(cols[1])).second)
            throw ParseError(path + ":" + std::to_string(line_no) + ": duplicate source " + cols[0]);
    }
    return out;
}

// ---------------------------------------------------------------------------

std::string export_text(const Ontology& ontology) {
    std::ostringstream os;
    os << "schema_version\t" << kOntologySchemaVersion << '\n';
    os << "[concepts]\n";
    os << "# id\ttype\tflags\tcanonical\tblocks\tmembers\tsupport\tsynonyms\n";
    for (const auto& c : ontology.concepts()) {
        const std::vector<std::string> members(c.members.begin(), c.members.end());
        const std::vector<std::string> synonyms(c.synonyms.begin(), c.synonyms.end());
        os << c.id << '\t' << to_string(c.type) << '\t' << c.flags.str() << '\t' << c.canonical << '\t'
           << join(c.blocks, "+") << '\t' << join(members, ",") << '\t' << c.support << '\t' << join(synonyms, "|")
           << '\n';
    }
    os << "[edges]\n";
    os << "# from\trelation\tto\n";
    for (const auto& e : ontology.edges()) os << e.from << '\t' << to_string(e.kind) << '\t' << e.to << '\n';
    return os.str();
}

Ontology import_text(const std::string& content) {
    std::istringstream is(content);
    std::string line;
    int line_no = 0;
    enum class Section { header, concepts, edges } section = Section::header;
    bool versioned = false;
    std::vector<Concept> concepts;
    std::vector<Edge> edges;
    auto fail = [&](const std::string& msg) { throw ParseError("ontology line " + std::to_string(line_no) + ": " + msg); };
    auto split_nonempty = [](const std::string& s, char sep) {
        std::vector<std::string> out;
        if (s.empty()) return out;
        return split(s, sep);
    };
    while (std::getline(is, line)) {
        ++line_no;
        if (trim(line).empty() || line[0] == '#') continue;
        if (line == "[concepts]") {
            if (!versioned) fail("missing schema_version");
            section = Section::concepts;
            continue;
        }
        if (line == "[edges]") {
            section = Section::edges;
            continue;
        }
        const auto cols = split(line, '\t');
        try {
            switch (section) {
                case Section::header:
                    if (cols.size() != 2 || cols[0] != "schema_version") fail("expected schema_version");
                    if (cols[1] != std::to_string(kOntologySchemaVersion)) fail("unsupported schema_version " + cols[1]);
                    versioned = true;
                    break;
                case Section::concepts: {
                    if (cols.size() != 8) fail("concept rows have 8 columns");
                    Concept c;
                    c.id = cols[0];
                    c.type = parse_semantic_type(cols[1]);
                    c.flags = parse_flags(cols[2]);
                    c.canonical = cols[3];
                    c.blocks = split_nonempty(cols[4], '+');
                    for (auto& m : split_nonempty(cols[5], ',')) c.members.insert(m);
                    c.support = std::stoull(cols[6]);
                    for (auto& s : split_nonempty(cols[7], '|')) c.synonyms.insert(s);
                    concepts.push_back(std::move(c));
                    break;
                }
                case Section::edges:
                    if (cols.size() != 3) fail("edge rows have 3 columns");
                    edges.push_back({cols[0], parse_edge_kind(cols[1]), cols[2]});
                    break;
            }
        } catch (const ParseError&) {
            throw;
        } catch (const std::invalid_argument&) {
            fail("bad number");
        } catch (const std::out_of_range&) {
            fail("number out of range");
        }
    }
    if (!versioned) throw ParseError("ontology: missing schema_version");
    return Ontology(std::move(concepts), std::move(edges));
}

void save_ontology(const std::string& path, const Ontology& ontology) { write_file(path, export_text(ontology)); }

Ontology load_ontology(const std::string& path) {
    try {
        return import_text(read_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what());
    }
}

OntologyStats stats(const Ontology& ontology) {
    OntologyStats s;
    s.concepts = ontology.size();
    for (const auto& c : ontology.concepts()) {
        s.surfaces += c.synonyms.size();
        s.annotations += c.support;
        s.dictionary_entries += c.members.size();
    }
    for (const auto& e : ontology.edges()) ++s.edges_by_kind[std::string(to_string(e.kind))];
    if (s.concepts) {
        s.surfaces_per_concept = static_cast<double>(s.surfaces) / static_cast<double>(s.concepts);
        s.annotations_per_concept = static_cast<double>(s.annotations) / static_cast<double>(s.concepts);
    }
    return s;
}

}  // namespace triage::ontology
