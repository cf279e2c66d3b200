#include "triage/types.hpp"

#include "triage/common.hpp"

namespace triage {

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::array<std::string_view, N>& names, const char* what) {
    for (std::size_t i = 0; i < N; ++i)
        if (names[i] == s) return static_cast<E>(i);
    throw ParseError(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

constexpr std::array<std::string_view, 3> kGender{"female", "male", "other"};
constexpr std::array<std::string_view, 3> kPolarity{"present", "negated", "historical"};
constexpr std::array<std::string_view, 3> kRisk{"high", "medium", "low"};
constexpr std::array<std::string_view, 4> kPoc{"emergency_call", "teleconsultation", "physical_visit", "self_care"};
constexpr std::array<std::string_view, 4> kTime{"immediate", "within_24h", "within_week", "unscheduled"};
constexpr std::array<std::string_view, 5> kSemType{"symptom", "disease", "anatomy", "operation", "other"};

}  // namespace

std::string_view to_string(Gender g) { return kGender[static_cast<std::size_t>(g)]; }
std::string_view to_string(Polarity p) { return kPolarity[static_cast<std::size_t>(p)]; }
std::string_view to_string(Risk r) { return kRisk[static_cast<std::size_t>(r)]; }
std::string_view to_string(PointOfCare p) { return kPoc[static_cast<std::size_t>(p)]; }
std::string_view to_string(TimeFrame t) { return kTime[static_cast<std::size_t>(t)]; }
std::string_view to_string(SemanticType t) { return kSemType[static_cast<std::size_t>(t)]; }

Gender parse_gender(std::string_view s) { return parse_enum<Gender>(s, kGender, "gender"); }
Polarity parse_polarity(std::string_view s) { return parse_enum<Polarity>(s, kPolarity, "polarity"); }
Risk parse_risk(std::string_view s) { return parse_enum<Risk>(s, kRisk, "risk"); }
PointOfCare parse_point_of_care(std::string_view s) { return parse_enum<PointOfCare>(s, kPoc, "point_of_care"); }
TimeFrame parse_time_frame(std::string_view s) { return parse_enum<TimeFrame>(s, kTime, "time_frame"); }
SemanticType parse_semantic_type(std::string_view s) { return parse_enum<SemanticType>(s, kSemType, "semantic_type"); }

bool RecommendationLabel::valid() const {
    if (risk == Risk::high && time_frame != TimeFrame::immediate) return false;
    if (risk == Risk::low && time_frame != TimeFrame::within_week && time_frame != TimeFrame::unscheduled)
        return false;
    return true;
}

std::string RecommendationLabel::str() const {
    return std::string(to_string(risk)) + "/" + std::string(to_string(point_of_care)) + "/" +
           std::string(to_string(time_frame));
}

Risk raise(Risk r) {
    switch (r) {
        case Risk::low: return Risk::medium;
        case Risk::medium: return Risk::high;
        case Risk::high: return Risk::high;
    }
    return Risk::high;
}

ConceptFlags& ConceptFlags::operator|=(const ConceptFlags& o) {
    red_flag |= o.red_flag;
    female_only |= o.female_only;
    male_only |= o.male_only;
    psych |= o.psych;
    common |= o.common;
    adult_only |= o.adult_only;
    child_only |= o.child_only;
    return *this;
}

std::string ConceptFlags::str() const {
    std::string out;
    auto add = [&](bool on, const char* name) {
        if (!on) return;
        if (!out.empty()) out += ',';
        out += name;
    };
    add(red_flag, "red_flag");
    add(female_only, "female_only");
    add(male_only, "male_only");
    add(psych, "psych");
    add(common, "common");
    add(adult_only, "adult_only");
    add(child_only, "child_only");
    return out;
}

ConceptFlags parse_flags(std::string_view s) {
    ConceptFlags f;
    for (const auto& raw : split(s, ',')) {
        const auto name = trim(raw);
        if (name.empty()) continue;
        if (name == "red_flag") f.red_flag = true;
        else if (name == "female_only") f.female_only = true;
        else if (name == "male_only") f.male_only = true;
        else if (name == "psych") f.psych = true;
        else if (name == "common") f.common = true;
        else if (name == "adult_only") f.adult_only = true;
        else if (name == "child_only") f.child_only = true;
        else throw ParseError("unknown concept flag '" + name + "'");
    }
    return f;
}

bool demographically_allowed(const ConceptFlags& flags, int age, Gender gender) {
    if (flags.female_only && gender == Gender::male) return false;
    if (flags.male_only && gender == Gender::female) return false;
    if (flags.adult_only && age < 18) return false;
    if (flags.child_only && age >= 13) return false;
    return true;
}

}  // namespace triage
