#pragma once

// Case-record data model, the seeded synthetic corpus generator, JSONL
// persistence and deterministic splitting.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "triage/types.hpp"

namespace triage::corpus {

inline constexpr int kCorpusSchemaVersion = 1;
inline constexpr int kProfileSchemaVersion = 1;

struct ConceptMention {
    std::string concept_id;
    Polarity polarity = Polarity::present;
    std::optional<std::string> body_location;

    bool operator==(const ConceptMention&) const = default;
};

struct CaseRecord {
    std::string id;
    int age = 0;
    Gender gender = Gender::other;
    std::vector<ConceptMention> mentions;
    std::string free_text;
    RecommendationLabel label;
    // Ground-truth suites may carry an expected recommendation that differs
    // from the historical label; absent in plain corpora.
    std::optional<RecommendationLabel> expected;

    bool operator==(const CaseRecord&) const = default;
};

/// Throws ValidationError naming the record id on any invariant violation.
void validate(const CaseRecord& record);

// ---------------------------------------------------------------------------
// Generator profile

struct SymptomDraw {
    std::string concept_id;
    double probability = 0.0;
    std::optional<std::string> location;  // anatomy concept rendered as "<symptom> am <location>"
};

struct ConditionTemplate {
    std::string name;
    std::string condition;  // disease concept id
    double prevalence = 1.0;
    std::vector<SymptomDraw> symptoms;
    std::vector<std::string> red_flags;
    double red_flag_probability = 0.0;
    RecommendationLabel label;
    std::optional<Gender> gender;  // restricts the patient's gender
    int min_age = 0;
    int max_age = 120;
    double diagnosis_probability = 0.0;  // probability the condition itself is mentioned
};

struct AgeBand {
    int lo = 0;
    int hi = 0;
    double weight = 1.0;
};

struct NoiseConfig {
    double layman_rate = 0.0;        // use a surface of an alias entry instead of the concept's own
    double misspelling_rate = 0.0;   // replace a word by a table-listed misspelling
    double abbreviation_rate = 0.0;  // replace a surface by its unconditional abbreviation
};

struct GeneratorProfile {
    int schema_version = kProfileSchemaVersion;
    std::vector<ConditionTemplate> templates;
    std::vector<AgeBand> age_bands;
    double female = 0.5, male = 0.48, other = 0.02;
    std::vector<SymptomDraw> background;  // condition-independent mentions
    std::vector<std::string> negation_pool;
    double negation_probability = 0.0;    // per pool draw
    int max_negations = 2;
    double historical_probability = 0.0;  // chance one background mention is rendered historical
    NoiseConfig noise;

    // Rendering tables, filled by load_profile from the shipped text resources.
    std::map<std::string, std::vector<std::string>> surfaces;        // concept -> surfaces as written
    std::map<std::string, std::vector<std::string>> layman_aliases;  // concept -> alias concept ids
    std::map<std::string, std::vector<std::string>> misspellings;    // correct word -> misspelled forms
    std::map<std::string, std::string> abbreviations;                // normalized surface -> abbreviation

    /// Throws ConfigError when the profile cannot generate a well-formed corpus.
    void validate() const;
};

/// Reads the JSON profile and resolves its `resources` block (dictionary,
/// misspellings and abbreviation tables) relative to the profile's directory.
GeneratorProfile load_profile(const std::string& path);

/// Exactly n records; identical (profile, n, seed) gives identical output.
/// Record ids are "case-<seed>-<index>" zero-padded so they sort in generation order.
std::vector<CaseRecord> generate_corpus(const GeneratorProfile& profile, std::size_t n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Persistence

std::string to_jsonl_line(const CaseRecord& record);
CaseRecord from_jsonl_line(const std::string& line);

void save_corpus(const std::string& path, std::span<const CaseRecord> records);
/// Parse errors carry "line N"; validation errors name the record id.
std::vector<CaseRecord> load_corpus(const std::string& path);

/// Stable content hash of a corpus (over its serialized lines).
std::uint64_t corpus_hash(std::span<const CaseRecord> records);

// ---------------------------------------------------------------------------
// Splitting

/// Partition sizes by largest-remainder rounding (ties to the lower index).
std::vector<std::size_t> partition_sizes(std::size_t n, std::span<const double> ratios);

/// Shuffle (mt19937_64 seeded by `seed`, Fisher-Yates) then slice.
std::vector<std::vector<CaseRecord>> split_corpus(std::span<const CaseRecord> corpus, std::span<const double> ratios,
                                                  std::uint64_t seed);

/// Age group index for the fixed buckets 0-2, 3-12, 13-18, 19-40, 41-65, 66+.
int age_group(int age);
inline constexpr int kAgeGroupCount = 6;
std::string_view age_group_name(int group);

}  // namespace triage::corpus
