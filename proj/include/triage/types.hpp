#pragma once

// Vocabulary types shared by every module.

#include <array>
#include <compare>
#include <cstdint>
#include <string>
#include <string_view>

namespace triage {

enum class Gender : std::uint8_t { female, male, other };
enum class Polarity : std::uint8_t { present, negated, historical };
enum class Risk : std::uint8_t { high, medium, low };
enum class PointOfCare : std::uint8_t { emergency_call, teleconsultation, physical_visit, self_care };
enum class TimeFrame : std::uint8_t { immediate, within_24h, within_week, unscheduled };
enum class SemanticType : std::uint8_t { symptom, disease, anatomy, operation, other };

inline constexpr std::array kAllRisks{Risk::high, Risk::medium, Risk::low};

std::string_view to_string(Gender g);
std::string_view to_string(Polarity p);
std::string_view to_string(Risk r);
std::string_view to_string(PointOfCare p);
std::string_view to_string(TimeFrame t);
std::string_view to_string(SemanticType t);

// Parsers throw ParseError on unknown names.
Gender parse_gender(std::string_view s);
Polarity parse_polarity(std::string_view s);
Risk parse_risk(std::string_view s);
PointOfCare parse_point_of_care(std::string_view s);
TimeFrame parse_time_frame(std::string_view s);
SemanticType parse_semantic_type(std::string_view s);

struct RecommendationLabel {
    Risk risk = Risk::low;
    PointOfCare point_of_care = PointOfCare::self_care;
    TimeFrame time_frame = TimeFrame::unscheduled;

    /// high => immediate; low => within_week or unscheduled.
    bool valid() const;
    std::string str() const;
    auto operator<=>(const RecommendationLabel&) const = default;
};

/// Raises the risk one level (low -> medium -> high); high stays high.
Risk raise(Risk r);

struct ConceptFlags {
    bool red_flag = false;
    bool female_only = false;
    bool male_only = false;
    bool psych = false;
    bool common = false;
    bool adult_only = false;
    bool child_only = false;

    auto operator<=>(const ConceptFlags&) const = default;
    ConceptFlags& operator|=(const ConceptFlags& o);
    std::string str() const;  // comma list, empty when no flag is set
};

/// Parses a comma list such as "red_flag,psych"; throws ParseError on unknown names.
ConceptFlags parse_flags(std::string_view s);

/// Whether a concept with `flags` may be asked of a patient with these demographics.
bool demographically_allowed(const ConceptFlags& flags, int age, Gender gender);

}  // namespace triage
