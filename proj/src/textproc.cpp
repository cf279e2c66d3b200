#include "triage/textproc.hpp"

#include <algorithm>
#include <cctype>

#include "triage/common.hpp"

namespace triage::text {

int tag_for(SemanticType t) {
    switch (t) {
        case SemanticType::symptom: return kTagSymptom;
        case SemanticType::disease: return kTagDisease;
        case SemanticType::anatomy: return kTagAnatomy;
        case SemanticType::operation: return kTagOperation;
        case SemanticType::other: return kTagOther;
    }
    return kTagWord;
}

namespace {

// Decodes one UTF-8 code point starting at s[i]; advances i. Invalid bytes decode to 0xFFFD.
char32_t decode_utf8(std::string_view s, std::size_t& i) {
    const auto c0 = static_cast<unsigned char>(s[i]);
    auto cont = [&](std::size_t k) -> int {
        if (i + k >= s.size()) return -1;
        const auto c = static_cast<unsigned char>(s[i + k]);
        return (c & 0xC0) == 0x80 ? (c & 0x3F) : -1;
    };
    if (c0 < 0x80) {
        i += 1;
        return c0;
    }
    if ((c0 & 0xE0) == 0xC0) {
        const int c1 = cont(1);
        if (c1 < 0) { i += 1; return 0xFFFD; }
        i += 2;
        return static_cast<char32_t>(((c0 & 0x1F) << 6) | c1);
    }
    if ((c0 & 0xF0) == 0xE0) {
        const int c1 = cont(1), c2 = cont(2);
        if (c1 < 0 || c2 < 0) { i += 1; return 0xFFFD; }
        i += 3;
        return static_cast<char32_t>(((c0 & 0x0F) << 12) | (c1 << 6) | c2);
    }
    if ((c0 & 0xF8) == 0xF0) {
        const int c1 = cont(1), c2 = cont(2), c3 = cont(3);
        if (c1 < 0 || c2 < 0 || c3 < 0) { i += 1; return 0xFFFD; }
        i += 4;
        return static_cast<char32_t>(((c0 & 0x07) << 18) | (c1 << 12) | (c2 << 6) | c3);
    }
    i += 1;
    return 0xFFFD;
}

const char* transliterate(char32_t cp) {
    switch (cp) {
        case U'ä': case U'Ä': return "ae";
        case U'ö': case U'Ö': return "oe";
        case U'ü': case U'Ü': return "ue";
        case U'ß': case U'ẞ': return "ss";
        case U'à': case U'á': case U'â': case U'À': case U'Á': case U'Â': return "a";
        case U'è': case U'é': case U'ê': case U'ë': case U'È': case U'É': case U'Ê': case U'Ë': return "e";
        case U'ì': case U'í': case U'î': case U'ï': case U'Ì': case U'Í': case U'Î': case U'Ï': return "i";
        case U'ò': case U'ó': case U'ô': case U'Ò': case U'Ó': case U'Ô': return "o";
        case U'ù': case U'ú': case U'û': case U'Ù': case U'Ú': case U'Û': return "u";
        case U'ç': case U'Ç': return "c";
        case U'ñ': case U'Ñ': return "n";
        default: return nullptr;
    }
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

bool is_number(std::string_view s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

}  // namespace

std::string normalize_word(std::string_view word) {
    std::string out;
    out.reserve(word.size());
    std::size_t i = 0;
    while (i < word.size()) {
        const char32_t cp = decode_utf8(word, i);
        if (cp < 0x80) {
            const char c = static_cast<char>(std::tolower(static_cast<int>(cp)));
            if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) out.push_back(c);
        } else if (const char* t = transliterate(cp)) {
            out += t;
        }
    }
    return out;
}

std::string normalize_phrase(std::string_view phrase) {
    std::vector<std::string> words;
    std::string cur;
    auto flush = [&] {
        if (cur.empty()) return;
        auto n = normalize_word(cur);
        if (!n.empty()) words.push_back(std::move(n));
        cur.clear();
    };
    for (char c : phrase) {
        if (is_space(c) || c == ',' || c == ';' || c == '.') flush();
        else cur.push_back(c);
    }
    flush();
    return join(words, " ");
}

WordSet load_word_list(const std::string& path) {
    WordSet out;
    for (const auto& line : read_lines(path)) {
        const auto t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto n = normalize_phrase(t);
        if (!n.empty()) out.insert(std::move(n));
    }
    return out;
}

std::vector<Sentence> preprocess(std::string_view text, const WordSet& stopwords) {
    std::vector<Sentence> out;
    Sentence sentence;
    int clause = 0;
    std::string word;

    auto flush_word = [&] {
        if (word.empty()) return;
        auto norm = normalize_word(word);
        if (!norm.empty() && !stopwords.contains(norm)) {
            Token t;
            t.surface = word;
            t.normalized = std::move(norm);
            t.index = static_cast<int>(sentence.size());
            t.clause = clause;
            sentence.push_back(std::move(t));
        }
        word.clear();
    };
    auto flush_sentence = [&] {
        flush_word();
        if (!sentence.empty()) {
            // Renumber clauses densely so the numbering depends only on the
            // non-empty clauses.
            int next = -1, last = -1;
            for (auto& t : sentence) {
                if (t.clause != last) {
                    last = t.clause;
                    ++next;
                }
                t.clause = next;
            }
            out.push_back(std::move(sentence));
            sentence.clear();
        }
        clause = 0;
    };

    for (char c : text) {
        if (is_space(c)) {
            flush_word();
        } else if (c == ',' || c == ';') {
            flush_word();
            ++clause;
        } else if (c == '.') {
            flush_sentence();
        } else {
            word.push_back(c);
        }
    }
    flush_sentence();
    return out;
}

std::string render(const std::vector<Sentence>& sentences) {
    std::string out;
    for (std::size_t s = 0; s < sentences.size(); ++s) {
        if (s) out += " . ";
        const auto& sent = sentences[s];
        for (std::size_t i = 0; i < sent.size(); ++i) {
            if (i) out += sent[i].clause != sent[i - 1].clause ? " , " : " ";
            out += sent[i].normalized;
        }
    }
    if (!sentences.empty()) out += " .";
    return out;
}

// ---------------------------------------------------------------------------

Dictionary::Dictionary(std::vector<DictEntry> entries) : entries_(std::move(entries)) {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        auto& e = entries_[i];
        if (!by_id_.emplace(e.concept_id, i).second)
            throw ValidationError("duplicate dictionary concept id " + e.concept_id);
        if (e.normalized_synonyms.empty()) {
            for (const auto& s : e.synonyms) {
                auto n = normalize_phrase(s);
                if (!n.empty()) e.normalized_synonyms.push_back(std::move(n));
            }
        }
        std::sort(e.normalized_synonyms.begin(), e.normalized_synonyms.end());
        e.normalized_synonyms.erase(std::unique(e.normalized_synonyms.begin(), e.normalized_synonyms.end()),
                                    e.normalized_synonyms.end());
        for (const auto& n : e.normalized_synonyms) {
            auto [it, inserted] = by_surface_.emplace(n, i);
            if (!inserted && it->second != i)
                throw ValidationError("surface '" + n + "' listed under both " + entries_[it->second].concept_id +
                                      " and " + e.concept_id);
            max_len_ = std::max(max_len_, split(n, ' ').size());
        }
    }
}

Dictionary Dictionary::load(const std::string& path) {
    std::vector<DictEntry> entries;
    int line_no = 0;
    for (const auto& line : read_lines(path)) {
        ++line_no;
        if (trim(line).empty() || line[0] == '#') continue;
        const auto cols = split(line, '\t');
        if (cols.size() < 4)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected at least 4 tab-separated columns");
        DictEntry e;
        e.concept_id = trim(cols[0]);
        e.canonical = trim(cols[1]);
        try {
            e.type = parse_semantic_type(trim(cols[2]));
            e.flags = parse_flags(cols[3]);
        } catch (const ParseError& err) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + err.what());
        }
        e.synonyms.push_back(e.canonical);
        if (cols.size() > 4)
            for (const auto& s : split(cols[4], '|'))
                if (!trim(s).empty()) e.synonyms.push_back(trim(s));
        entries.push_back(std::move(e));
    }
    return Dictionary(std::move(entries));
}

const DictEntry* Dictionary::find(std::string_view concept_id) const {
    const auto it = by_id_.find(std::string(concept_id));
    return it == by_id_.end() ? nullptr : &entries_[it->second];
}

const DictEntry& Dictionary::at(std::string_view concept_id) const {
    const auto* e = find(concept_id);
    if (!e) throw LookupError("unknown dictionary concept " + std::string(concept_id));
    return *e;
}

std::optional<std::size_t> Dictionary::match(const std::vector<std::string>& tokens, std::size_t begin,
                                             std::size_t end) const {
    std::string key;
    for (std::size_t i = begin; i < end; ++i) {
        if (i > begin) key += ' ';
        key += tokens[i];
    }
    const auto it = by_surface_.find(key);
    if (it == by_surface_.end()) return std::nullopt;
    return it->second;
}

// ---------------------------------------------------------------------------

AbbreviationTable AbbreviationTable::load(const std::string& path) {
    AbbreviationTable table;
    int line_no = 0;
    for (const auto& line : read_lines(path)) {
        ++line_no;
        if (trim(line).empty() || line[0] == '#') continue;
        const auto cols = split(line, '\t');
        if (cols.size() < 2)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected abbreviation and expansion");
        AbbreviationRule r;
        r.abbreviation = normalize_word(cols[0]);
        r.expansion = split(normalize_phrase(cols[1]), ' ');
        if (cols.size() > 2)
            for (const auto& t : split(cols[2], ','))
                if (auto n = normalize_word(t); !n.empty()) r.triggers.push_back(std::move(n));
        if (r.abbreviation.empty() || r.expansion.empty() || r.expansion[0].empty())
            throw ParseError(path + ":" + std::to_string(line_no) + ": empty abbreviation or expansion");
        table.rules.push_back(std::move(r));
    }
    return table;
}

ExpansionResult expand_abbreviations(const Sentence& tokens, const AbbreviationTable& table) {
    WordSet context;
    for (const auto& t : tokens) context.insert(t.normalized);

    ExpansionResult out;
    for (const auto& tok : tokens) {
        const AbbreviationRule* chosen = nullptr;
        const AbbreviationRule* fallback = nullptr;
        bool any_rule = false;
        for (const auto& r : table.rules) {
            if (r.abbreviation != tok.normalized) continue;
            any_rule = true;
            if (r.triggers.empty()) {
                if (!fallback) fallback = &r;
                continue;
            }
            const bool triggered = std::any_of(r.triggers.begin(), r.triggers.end(),
                                               [&](const std::string& t) { return context.contains(t); });
            if (triggered) {
                chosen = &r;
                break;
            }
        }
        if (!chosen) chosen = fallback;
        if (!chosen) {
            if (any_rule) out.ambiguous.push_back(static_cast<int>(out.tokens.size()));
            out.tokens.push_back(tok);
            continue;
        }
        for (const auto& w : chosen->expansion) {
            Token t = tok;
            t.surface = w;
            t.normalized = w;
            out.tokens.push_back(std::move(t));
        }
    }
    for (std::size_t i = 0; i < out.tokens.size(); ++i) out.tokens[i].index = static_cast<int>(i);
    return out;
}

CorrectionTable load_corrections(const std::string& path) {
    CorrectionTable table;
    int line_no = 0;
    for (const auto& line : read_lines(path)) {
        ++line_no;
        if (trim(line).empty() || line[0] == '#') continue;
        const auto cols = split(line, '\t');
        if (cols.size() < 2) throw ParseError(path + ":" + std::to_string(line_no) + ": expected two columns");
        table[normalize_word(cols[0])] = normalize_word(cols[1]);
    }
    return table;
}

Sentence apply_corrections(Sentence tokens, const CorrectionTable& table) {
    for (auto& t : tokens)
        if (const auto it = table.find(t.normalized); it != table.end()) t.normalized = it->second;
    return tokens;
}

// ---------------------------------------------------------------------------

std::vector<Mention> detect_entities(const Sentence& tokens, const Dictionary& dictionary) {
    std::vector<std::string> words;
    words.reserve(tokens.size());
    for (const auto& t : tokens) words.push_back(t.normalized);

    std::vector<Mention> out;
    const std::size_t n = tokens.size();
    std::size_t i = 0;
    while (i < n) {
        std::size_t max_len = std::min(dictionary.max_match_len(), n - i);
        // Restrict the window to the current clause.
        for (std::size_t len = 1; len < max_len; ++len) {
            if (tokens[i + len].clause != tokens[i].clause) {
                max_len = len;
                break;
            }
        }
        bool matched = false;
        for (std::size_t len = max_len; len >= 1; --len) {
            if (const auto idx = dictionary.match(words, i, i + len)) {
                const auto& e = dictionary.entries()[*idx];
                Mention m;
                m.concept_id = e.concept_id;
                m.start = static_cast<int>(i);
                m.end = static_cast<int>(i + len);
                m.type = e.type;
                out.push_back(std::move(m));
                i += len;
                matched = true;
                break;
            }
        }
        if (!matched) ++i;
    }
    return out;
}

std::vector<Mention> detect_negation(const Sentence& tokens, std::vector<Mention> mentions,
                                     const PolarityConfig& config) {
    const int n = static_cast<int>(tokens.size());
    auto historical_at = [&](int j) {
        if (config.historical_triggers.contains(tokens[j].normalized)) return true;
        return tokens[j].normalized == "vor" && j + 2 < n && is_number(tokens[j + 1].normalized) &&
               config.historical_units.contains(tokens[j + 2].normalized);
    };
    for (auto& m : mentions) {
        const int clause = tokens[m.start].clause;
        bool negated = false, historical = false;
        auto scan = [&](int j) {
            if (j < 0 || j >= n || tokens[j].clause != clause) return;
            if (config.negation_triggers.contains(tokens[j].normalized)) negated = true;
            else if (historical_at(j)) historical = true;
        };
        for (int j = m.start - config.window; j < m.start; ++j) scan(j);
        for (int j = m.end; j < m.end + config.window; ++j) scan(j);
        m.polarity = negated ? Polarity::negated : historical ? Polarity::historical : Polarity::present;
    }
    return mentions;
}

std::vector<RelationCandidate> extract_relations_rules(const Sentence& tokens, const std::vector<Mention>& mentions,
                                                       const RelationRuleConfig& config) {
    auto is_head = [](SemanticType t) {
        return t == SemanticType::symptom || t == SemanticType::disease || t == SemanticType::operation;
    };
    std::vector<RelationCandidate> out;
    for (const auto& a : mentions) {
        if (!is_head(a.type)) continue;
        for (const auto& b : mentions) {
            if (b.type != SemanticType::anatomy) continue;
            if (tokens[a.start].clause != tokens[b.start].clause) continue;
            const bool a_first = a.end <= b.start;
            const int gap_begin = a_first ? a.end : b.end;
            const int gap_end = a_first ? b.start : a.start;
            if (gap_end < gap_begin) continue;  // overlapping spans cannot happen after NER
            const int distance = gap_end - gap_begin + 1;
            if (distance > config.max_distance) continue;
            int connectives = 0;
            bool blocked = false;
            for (int j = gap_begin; j < gap_end; ++j) {
                if (config.connectives.contains(tokens[j].normalized)) ++connectives;
                for (const auto& other : mentions)
                    if (j >= other.start && j < other.end) blocked = true;
            }
            if (blocked || connectives > 1) continue;
            out.push_back(RelationCandidate{a, b, RelationKind::located_in, RelationSource::rule});
        }
    }
    return out;
}

void assign_tags(Sentence& tokens, const std::vector<Mention>& mentions) {
    for (auto& t : tokens) t.tag = kTagWord;
    for (const auto& m : mentions)
        for (int j = m.start; j < m.end; ++j) tokens[j].tag = tag_for(m.type);
}

// ---------------------------------------------------------------------------

TextResources TextResources::load(const std::string& data_dir) {
    TextResources r;
    r.stopwords = load_word_list(data_dir + "/stopwords.txt");
    r.dictionary = Dictionary::load(data_dir + "/dictionary.tsv");
    r.abbreviations = AbbreviationTable::load(data_dir + "/abbreviations.tsv");
    r.corrections = load_corrections(data_dir + "/misspellings.tsv");
    r.polarity.negation_triggers = load_word_list(data_dir + "/negation_triggers.txt");
    r.polarity.historical_triggers = load_word_list(data_dir + "/historical_triggers.txt");
    // Dictionary entries are matched against stopword-free token streams, so
    // their synonyms must be normalized the same way.
    std::vector<DictEntry> entries = r.dictionary.entries();
    for (auto& e : entries) {
        e.normalized_synonyms.clear();
        for (const auto& s : e.synonyms) {
            std::vector<std::string> words;
            for (const auto& sent : preprocess(s, r.stopwords))
                for (const auto& t : sent) words.push_back(t.normalized);
            if (!words.empty()) e.normalized_synonyms.push_back(join(words, " "));
        }
    }
    r.dictionary = Dictionary(std::move(entries));
    return r;
}

std::vector<AnnotatedSentence> annotate(std::string_view text, const TextResources& resources) {
    std::vector<AnnotatedSentence> out;
    for (auto& raw : preprocess(text, resources.stopwords)) {
        AnnotatedSentence s;
        auto expanded = expand_abbreviations(apply_corrections(std::move(raw), resources.corrections),
                                             resources.abbreviations);
        s.tokens = std::move(expanded.tokens);
        s.ambiguous_abbreviations = std::move(expanded.ambiguous);
        s.mentions = detect_negation(s.tokens, detect_entities(s.tokens, resources.dictionary), resources.polarity);
        s.relations = extract_relations_rules(s.tokens, s.mentions, resources.relations);
        assign_tags(s.tokens, s.mentions);
        out.push_back(std::move(s));
    }
    return out;
}

std::string mention_surface(const Sentence& tokens, const Mention& m) {
    std::string out;
    for (int j = m.start; j < m.end; ++j) {
        if (j > m.start) out += ' ';
        out += tokens[j].normalized;
    }
    return out;
}

}  // namespace triage::text
