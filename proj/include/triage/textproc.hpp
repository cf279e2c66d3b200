#pragma once

// Deterministic text pipeline: normalization, abbreviation expansion,
// dictionary NER, negation/historical polarity and short-distance relation
// rules. All functions are pure over immutable resources.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "triage/types.hpp"

namespace triage::text {

// Tag ids for the part-of-speech feature slot. The default tagger assigns the
// dictionary semantic type of the covering mention, `word` otherwise.
enum TagId : int { kTagPad = 0, kTagWord = 1, kTagSymptom, kTagDisease, kTagAnatomy, kTagOperation, kTagOther };
inline constexpr int kTagCount = 7;
int tag_for(SemanticType t);

struct Token {
    std::string surface;     // original word as written
    std::string normalized;  // lowercase ASCII
    int index = 0;           // position in the sentence
    int clause = 0;          // incremented at every ',' or ';'
    int tag = kTagWord;
};

using Sentence = std::vector<Token>;

/// Lowercases and transliterates one word (ä->ae, ö->oe, ü->ue, ß->ss, common
/// accents stripped) and drops every character that is not [a-z0-9].
std::string normalize_word(std::string_view word);

/// Normalizes a multi-word phrase to space-joined normalized words (no stopword removal).
std::string normalize_phrase(std::string_view phrase);

using WordSet = std::set<std::string>;

/// One term per line; blank lines and '#' comments ignored; terms normalized.
WordSet load_word_list(const std::string& path);

/// Splits text into sentences at '.', clauses at ',' and ';', drops stopwords.
std::vector<Sentence> preprocess(std::string_view text, const WordSet& stopwords);

/// Inverse of preprocess up to whitespace: words joined by ' ', clauses by ' , ',
/// sentences by ' . '.
std::string render(const std::vector<Sentence>& sentences);

// ---------------------------------------------------------------------------
// Dictionary

struct DictEntry {
    std::string concept_id;
    std::string canonical;
    SemanticType type = SemanticType::other;
    ConceptFlags flags;
    std::vector<std::string> synonyms;             // as written in the file
    std::vector<std::string> normalized_synonyms;  // normalized, stopwords kept
};

class Dictionary {
public:
    Dictionary() = default;
    explicit Dictionary(std::vector<DictEntry> entries);

    /// TSV: concept_id, canonical, semantic_type, flags, synonyms (pipe-separated).
    static Dictionary load(const std::string& path);

    const std::vector<DictEntry>& entries() const { return entries_; }
    const DictEntry* find(std::string_view concept_id) const;
    const DictEntry& at(std::string_view concept_id) const;

    /// Entry index matching exactly the given normalized token sequence.
    std::optional<std::size_t> match(const std::vector<std::string>& tokens, std::size_t begin,
                                     std::size_t end) const;
    std::size_t max_match_len() const { return max_len_; }

private:
    std::vector<DictEntry> entries_;
    std::unordered_map<std::string, std::size_t> by_id_;
    std::unordered_map<std::string, std::size_t> by_surface_;  // space-joined tokens
    std::size_t max_len_ = 0;
};

// ---------------------------------------------------------------------------
// Abbreviations and corrections

struct AbbreviationRule {
    std::string abbreviation;
    std::vector<std::string> expansion;  // normalized tokens
    std::vector<std::string> triggers;   // empty => unconditional
};

struct AbbreviationTable {
    std::vector<AbbreviationRule> rules;
    /// TSV: abbreviation, expansion, optional comma-separated trigger list.
    static AbbreviationTable load(const std::string& path);
};

struct ExpansionResult {
    Sentence tokens;
    std::vector<int> ambiguous;  // indices (into `tokens`) left verbatim for lack of context
};

/// Conditional rules are tried first (first rule whose trigger co-occurs in the
/// sentence wins); an abbreviation with only conditional rules and no trigger
/// present is kept and flagged.
ExpansionResult expand_abbreviations(const Sentence& tokens, const AbbreviationTable& table);

/// Static misspelling table: TSV misspelled -> corrected (both normalized).
using CorrectionTable = std::unordered_map<std::string, std::string>;
CorrectionTable load_corrections(const std::string& path);
Sentence apply_corrections(Sentence tokens, const CorrectionTable& table);

// ---------------------------------------------------------------------------
// Mentions and relations

enum class MentionSource : std::uint8_t { dictionary, rule };
enum class RelationKind : std::uint8_t { located_in, not_located_in };
enum class RelationSource : std::uint8_t { rule, model };

struct Mention {
    std::string concept_id;
    int start = 0;  // token span [start, end)
    int end = 0;
    Polarity polarity = Polarity::present;
    MentionSource source = MentionSource::dictionary;
    SemanticType type = SemanticType::other;

    bool operator==(const Mention&) const = default;
};

struct RelationCandidate {
    Mention e1;  // symptom, disease or operation
    Mention e2;  // anatomy
    RelationKind relation = RelationKind::located_in;
    RelationSource source = RelationSource::rule;
};

/// Greedy longest match over normalized tokens; matches never cross a clause.
std::vector<Mention> detect_entities(const Sentence& tokens, const Dictionary& dictionary);

struct PolarityConfig {
    int window = 4;
    WordSet negation_triggers;
    WordSet historical_triggers;
    // "vor <number> <unit>" marks the clause as historical.
    WordSet historical_units{"tag", "tagen", "woche", "wochen", "monat", "monaten", "jahr", "jahren"};
};

/// Marks a mention negated iff a negation trigger lies within `window` tokens
/// before or after its span in the same clause; otherwise historical iff a
/// historical trigger does; otherwise present.
std::vector<Mention> detect_negation(const Sentence& tokens, std::vector<Mention> mentions,
                                     const PolarityConfig& config);

struct RelationRuleConfig {
    int max_distance = 3;
    WordSet connectives{"in", "im", "am", "an"};
};

/// Emits located_in for a symptom/disease/operation mention followed or preceded by
/// an anatomy mention within `max_distance` tokens in the same clause, where the
/// tokens in between are at most one connective.
std::vector<RelationCandidate> extract_relations_rules(const Sentence& tokens, const std::vector<Mention>& mentions,
                                                       const RelationRuleConfig& config);

/// Default tagger: tag of the covering mention's semantic type, else kTagWord.
void assign_tags(Sentence& tokens, const std::vector<Mention>& mentions);

// ---------------------------------------------------------------------------
// Whole-text annotation

struct TextResources {
    Dictionary dictionary;
    WordSet stopwords;
    AbbreviationTable abbreviations;
    CorrectionTable corrections;
    PolarityConfig polarity;
    RelationRuleConfig relations;

    /// Loads the standard file set from a data directory.
    static TextResources load(const std::string& data_dir);
};

struct AnnotatedSentence {
    Sentence tokens;
    std::vector<Mention> mentions;
    std::vector<RelationCandidate> relations;
    std::vector<int> ambiguous_abbreviations;
};

/// preprocess -> corrections -> abbreviation expansion -> NER -> polarity -> rules -> tags.
std::vector<AnnotatedSentence> annotate(std::string_view text, const TextResources& resources);

/// Surface text of a mention's tokens (normalized, space-joined).
std::string mention_surface(const Sentence& tokens, const Mention& m);

}  // namespace triage::text
