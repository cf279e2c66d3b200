#include "triage/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "triage/common.hpp"
#include "triage/textproc.hpp"

namespace triage::corpus {

using ojson = nlohmann::ordered_json;

void validate(const CaseRecord& r) {
    const std::string who = "record '" + r.id + "': ";
    if (r.id.empty()) throw ValidationError("record with empty id");
    if (r.age < 0 || r.age > 120) throw ValidationError(who + "age " + std::to_string(r.age) + " outside 0-120");
    if (r.mentions.empty()) throw ValidationError(who + "no concept mentions");
    for (const auto& m : r.mentions) {
        if (m.concept_id.empty()) throw ValidationError(who + "mention with empty concept id");
        if (m.body_location && m.body_location->empty()) throw ValidationError(who + "empty body location");
    }
    if (!r.label.valid()) throw ValidationError(who + "inconsistent label " + r.label.str());
    if (r.expected && !r.expected->valid())
        throw ValidationError(who + "inconsistent expected recommendation " + r.expected->str());
}

// ---------------------------------------------------------------------------

void GeneratorProfile::validate() const {
    if (schema_version != kProfileSchemaVersion)
        throw ConfigError("profile schema_version " + std::to_string(schema_version) + " unsupported");
    if (templates.empty()) throw ConfigError("profile has no condition templates");
    std::set<Risk> risks;
    auto check_p = [](double p, const std::string& what) {
        if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(what + ": probability " + std::to_string(p) + " outside [0,1]");
    };
    auto check_surface = [&](const std::string& id, const std::string& what) {
        const auto it = surfaces.find(id);
        if (it == surfaces.end() || it->second.empty())
            throw ConfigError(what + ": concept " + id + " has no surface forms");
    };
    for (const auto& t : templates) {
        const std::string what = "template '" + t.name + "'";
        if (t.symptoms.empty()) throw ConfigError(what + " has no symptoms");
        if (!t.label.valid()) throw ConfigError(what + " has inconsistent label " + t.label.str());
        if (!(t.prevalence > 0.0)) throw ConfigError(what + " needs positive prevalence");
        if (t.min_age < 0 || t.max_age > 120 || t.min_age > t.max_age) throw ConfigError(what + " has bad age range");
        check_p(t.red_flag_probability, what);
        check_p(t.diagnosis_probability, what);
        if (t.red_flag_probability > 0.0 && t.red_flags.empty())
            throw ConfigError(what + " has red-flag probability but no red flags");
        for (const auto& s : t.symptoms) {
            check_p(s.probability, what);
            check_surface(s.concept_id, what);
            if (s.location) check_surface(*s.location, what);
        }
        for (const auto& rf : t.red_flags) check_surface(rf, what);
        if (t.diagnosis_probability > 0.0) check_surface(t.condition, what);
        risks.insert(t.label.risk);
    }
    if (risks.size() != kAllRisks.size()) throw ConfigError("profile needs at least one template per risk class");
    if (age_bands.empty()) throw ConfigError("profile has no age bands");
    for (const auto& b : background) {
        check_p(b.probability, "background");
        check_surface(b.concept_id, "background");
    }
    for (const auto& c : negation_pool) check_surface(c, "negation pool");
    check_p(negation_probability, "negation");
    check_p(historical_probability, "historical");
    check_p(noise.layman_rate, "noise");
    check_p(noise.misspelling_rate, "noise");
    check_p(noise.abbreviation_rate, "noise");
}

namespace {

RecommendationLabel label_from_json(const ojson& j) {
    RecommendationLabel l;
    l.risk = parse_risk(j.at("risk").get<std::string>());
    l.point_of_care = parse_point_of_care(j.at("point_of_care").get<std::string>());
    l.time_frame = parse_time_frame(j.at("time_frame").get<std::string>());
    return l;
}

ojson label_to_json(const RecommendationLabel& l) {
    ojson j;
    j["risk"] = to_string(l.risk);
    j["point_of_care"] = to_string(l.point_of_care);
    j["time_frame"] = to_string(l.time_frame);
    return j;
}

SymptomDraw draw_from_json(const ojson& j) {
    SymptomDraw d;
    d.concept_id = j.at("concept").get<std::string>();
    d.probability = j.at("p").get<double>();
    if (j.contains("location")) d.location = j.at("location").get<std::string>();
    return d;
}

}  // namespace

GeneratorProfile load_profile(const std::string& path) {
    GeneratorProfile p;
    ojson j;
    try {
        j = ojson::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("profile " + path + ": " + e.what());
    }
    try {
        p.schema_version = j.at("schema_version").get<int>();
        for (const auto& t : j.at("templates")) {
            ConditionTemplate ct;
            ct.name = t.at("name").get<std::string>();
            ct.condition = t.value("condition", std::string{});
            ct.prevalence = t.value("prevalence", 1.0);
            ct.label = label_from_json(t.at("label"));
            for (const auto& s : t.at("symptoms")) ct.symptoms.push_back(draw_from_json(s));
            if (t.contains("red_flags")) ct.red_flags = t.at("red_flags").get<std::vector<std::string>>();
            ct.red_flag_probability = t.value("red_flag_probability", 0.0);
            ct.diagnosis_probability = t.value("diagnosis_probability", 0.0);
            if (t.contains("gender")) ct.gender = parse_gender(t.at("gender").get<std::string>());
            if (t.contains("age")) {
                ct.min_age = t.at("age").at(0).get<int>();
                ct.max_age = t.at("age").at(1).get<int>();
            }
            p.templates.push_back(std::move(ct));
        }
        const auto& demo = j.at("demographics");
        for (const auto& b : demo.at("age_bands"))
            p.age_bands.push_back(AgeBand{b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<double>()});
        if (demo.contains("gender")) {
            p.female = demo["gender"].value("female", p.female);
            p.male = demo["gender"].value("male", p.male);
            p.other = demo["gender"].value("other", p.other);
        }
        if (j.contains("background"))
            for (const auto& b : j["background"]) p.background.push_back(draw_from_json(b));
        if (j.contains("negation")) {
            p.negation_pool = j["negation"].at("pool").get<std::vector<std::string>>();
            p.negation_probability = j["negation"].value("probability", 0.0);
            p.max_negations = j["negation"].value("max", 2);
        }
        p.historical_probability = j.value("historical_probability", 0.0);
        if (j.contains("noise")) {
            p.noise.layman_rate = j["noise"].value("layman_rate", 0.0);
            p.noise.misspelling_rate = j["noise"].value("misspelling_rate", 0.0);
            p.noise.abbreviation_rate = j["noise"].value("abbreviation_rate", 0.0);
        }
        if (j.contains("layman_aliases"))
            for (const auto& [k, v] : j["layman_aliases"].items())
                p.layman_aliases[k] = v.get<std::vector<std::string>>();

        const auto base = std::filesystem::path(path).parent_path();
        const auto& res = j.at("resources");
        const auto dict = text::Dictionary::load((base / res.at("dictionary").get<std::string>()).string());
        for (const auto& e : dict.entries()) p.surfaces[e.concept_id] = e.synonyms;
        if (res.contains("misspellings")) {
            const auto table = text::load_corrections((base / res["misspellings"].get<std::string>()).string());
            // Sorted so the generator's choice among forms is independent of hash order.
            std::vector<std::pair<std::string, std::string>> pairs(table.begin(), table.end());
            std::sort(pairs.begin(), pairs.end());
            for (const auto& [wrong, right] : pairs) p.misspellings[right].push_back(wrong);
        }
        if (res.contains("abbreviations")) {
            const auto table =
                text::AbbreviationTable::load((base / res["abbreviations"].get<std::string>()).string());
            for (const auto& r : table.rules)
                if (r.triggers.empty()) p.abbreviations.emplace(join(r.expansion, " "), r.abbreviation);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("profile " + path + ": " + e.what());
    } catch (const ParseError& e) {
        throw ConfigError("profile " + path + ": " + e.what());
    }
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------

namespace {

class Renderer {
public:
    Renderer(const GeneratorProfile& p, Rng& rng) : p_(p), rng_(rng) {}

    std::string surface(const std::string& concept_id) {
        std::string id = concept_id;
        if (const auto it = p_.layman_aliases.find(concept_id);
            it != p_.layman_aliases.end() && !it->second.empty() && bernoulli(rng_, p_.noise.layman_rate))
            id = it->second[uniform_index(rng_, it->second.size())];
        const auto& forms = p_.surfaces.at(id);
        std::string s = forms[uniform_index(rng_, forms.size())];

        const auto norm = text::normalize_phrase(s);
        if (const auto it = p_.abbreviations.find(norm);
            it != p_.abbreviations.end() && bernoulli(rng_, p_.noise.abbreviation_rate))
            return it->second;

        if (p_.noise.misspelling_rate > 0.0) {
            auto words = split(s, ' ');
            for (auto& w : words) {
                const auto it = p_.misspellings.find(text::normalize_word(w));
                if (it != p_.misspellings.end() && bernoulli(rng_, p_.noise.misspelling_rate))
                    w = it->second[uniform_index(rng_, it->second.size())];
            }
            s = join(words, " ");
        }
        return s;
    }

    std::string pick(std::initializer_list<const char*> options) {
        return *(options.begin() + uniform_index(rng_, options.size()));
    }

private:
    const GeneratorProfile& p_;
    Rng& rng_;
};

int draw_age(const GeneratorProfile& p, const ConditionTemplate& t, Rng& rng) {
    std::vector<double> w;
    for (const auto& b : p.age_bands) {
        const int lo = std::max(b.lo, t.min_age), hi = std::min(b.hi, t.max_age);
        w.push_back(lo <= hi ? b.weight * (hi - lo + 1) / (b.hi - b.lo + 1) : 0.0);
    }
    if (std::accumulate(w.begin(), w.end(), 0.0) <= 0.0)
        return t.min_age + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(t.max_age - t.min_age + 1)));
    const auto& b = p.age_bands[weighted_choice(rng, w)];
    const int lo = std::max(b.lo, t.min_age), hi = std::min(b.hi, t.max_age);
    return lo + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(hi - lo + 1)));
}

}  // namespace

std::vector<CaseRecord> generate_corpus(const GeneratorProfile& profile, std::size_t n, std::uint64_t seed) {
    profile.validate();
    Rng rng(seed);
    Renderer render(profile, rng);
    std::vector<double> prevalence;
    for (const auto& t : profile.templates) prevalence.push_back(t.prevalence);
    const std::vector<double> gender_w{profile.female, profile.male, profile.other};

    std::vector<CaseRecord> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& t = profile.templates[weighted_choice(rng, prevalence)];
        CaseRecord r;
        char id[64];
        std::snprintf(id, sizeof id, "case-%llu-%07zu", static_cast<unsigned long long>(seed), i);
        r.id = id;
        r.label = t.label;
        r.gender = t.gender ? *t.gender : static_cast<Gender>(weighted_choice(rng, gender_w));
        r.age = draw_age(profile, t, rng);

        std::set<std::string> used;
        auto add = [&](const std::string& concept_id, Polarity pol, std::optional<std::string> loc) {
            if (!used.insert(concept_id).second) return;
            r.mentions.push_back(ConceptMention{concept_id, pol, std::move(loc)});
        };

        if (!t.red_flags.empty() && bernoulli(rng, t.red_flag_probability))
            add(t.red_flags[uniform_index(rng, t.red_flags.size())], Polarity::present, std::nullopt);
        for (const auto& s : t.symptoms)
            if (bernoulli(rng, s.probability)) add(s.concept_id, Polarity::present, s.location);
        if (r.mentions.empty()) {
            const auto best = std::max_element(t.symptoms.begin(), t.symptoms.end(),
                                               [](const auto& a, const auto& b) { return a.probability < b.probability; });
            add(best->concept_id, Polarity::present, best->location);
        }
        if (!t.condition.empty() && bernoulli(rng, t.diagnosis_probability))
            add(t.condition, Polarity::present, std::nullopt);
        for (const auto& b : profile.background) {
            if (!bernoulli(rng, b.probability)) continue;
            const bool hist = bernoulli(rng, profile.historical_probability);
            add(b.concept_id, hist ? Polarity::historical : Polarity::present, b.location);
        }
        if (!profile.negation_pool.empty()) {
            for (int k = 0; k < profile.max_negations; ++k) {
                if (!bernoulli(rng, profile.negation_probability)) continue;
                const auto& c = profile.negation_pool[uniform_index(rng, profile.negation_pool.size())];
                add(c, Polarity::negated, std::nullopt);
            }
        }

        std::vector<std::string> present, negated, historical;
        for (const auto& m : r.mentions) {
            std::string s = render.surface(m.concept_id);
            switch (m.polarity) {
                case Polarity::present: {
                    std::string clause = render.pick({"", "seit gestern ", "seit 2 tagen ", "starke ", "leichte ",
                                                      "zunehmende "}) + s;
                    if (m.body_location)
                        clause += " " + render.pick({"am", "im", "an"}) + " " + render.surface(*m.body_location);
                    present.push_back(std::move(clause));
                    break;
                }
                case Polarity::negated: {
                    const auto form = uniform_index(rng, 3);
                    negated.push_back(form == 0 ? "kein " + s : form == 1 ? "keine " + s : s + " verneint");
                    break;
                }
                case Polarity::historical:
                    historical.push_back(render.pick({"frueher ", "vor 2 jahren ", "damals "}) + s);
                    break;
            }
        }
        std::string text = join(present, ", ") + ".";
        if (!negated.empty()) text += " " + join(negated, ", ") + ".";
        if (!historical.empty()) text += " " + join(historical, ", ") + ".";
        r.free_text = std::move(text);
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------

std::string to_jsonl_line(const CaseRecord& r) {
    ojson j;
    j["schema_version"] = kCorpusSchemaVersion;
    j["id"] = r.id;
    j["age"] = r.age;
    j["gender"] = to_string(r.gender);
    ojson mentions = ojson::array();
    for (const auto& m : r.mentions) {
        ojson mj;
        mj["concept"] = m.concept_id;
        mj["polarity"] = to_string(m.polarity);
        if (m.body_location) mj["location"] = *m.body_location;
        mentions.push_back(std::move(mj));
    }
    j["mentions"] = std::move(mentions);
    j["text"] = r.free_text;
    j["label"] = label_to_json(r.label);
    if (r.expected) j["expected"] = label_to_json(*r.expected);
    return j.dump();
}

CaseRecord from_jsonl_line(const std::string& line) {
    ojson j;
    try {
        j = ojson::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed JSON: ") + e.what());
    }
    try {
        const int version = j.at("schema_version").get<int>();
        if (version != kCorpusSchemaVersion)
            throw ParseError("unsupported schema_version " + std::to_string(version));
        CaseRecord r;
        r.id = j.at("id").get<std::string>();
        r.age = j.at("age").get<int>();
        r.gender = parse_gender(j.at("gender").get<std::string>());
        for (const auto& mj : j.at("mentions")) {
            ConceptMention m;
            m.concept_id = mj.at("concept").get<std::string>();
            m.polarity = parse_polarity(mj.at("polarity").get<std::string>());
            if (mj.contains("location") && !mj["location"].is_null()) m.body_location = mj["location"].get<std::string>();
            r.mentions.push_back(std::move(m));
        }
        r.free_text = j.at("text").get<std::string>();
        r.label = label_from_json(j.at("label"));
        if (j.contains("expected")) r.expected = label_from_json(j["expected"]);
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad record: ") + e.what());
    }
}

void save_corpus(const std::string& path, std::span<const CaseRecord> records) {
    std::string out;
    for (const auto& r : records) {
        out += to_jsonl_line(r);
        out += '\n';
    }
    write_file(path, out);
}

std::vector<CaseRecord> load_corpus(const std::string& path) {
    std::vector<CaseRecord> out;
    std::size_t line_no = 0;
    for (const auto& line : read_lines(path)) {
        ++line_no;
        if (trim(line).empty()) continue;
        CaseRecord r;
        try {
            r = from_jsonl_line(line);
        } catch (const ParseError& e) {
            throw ParseError(path + ": line " + std::to_string(line_no) + ": " + e.what());
        }
        validate(r);
        out.push_back(std::move(r));
    }
    return out;
}

std::uint64_t corpus_hash(std::span<const CaseRecord> records) {
    std::uint64_t h = fnv1a64("");
    for (const auto& r : records) h = fnv1a64_mix(h, to_jsonl_line(r) + "\n");
    return h;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> partition_sizes(std::size_t n, std::span<const double> ratios) {
    if (ratios.empty()) throw ConfigError("split needs at least one ratio");
    double sum = 0.0;
    for (double r : ratios) {
        if (!(r > 0.0)) throw ConfigError("split ratios must be positive");
        sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split ratios sum to " + std::to_string(sum) + ", not 1");

    std::vector<std::size_t> sizes(ratios.size());
    std::vector<double> rema(ratios.size());
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        const double quota = static_cast<double>(n) * ratios[i];
        // Guard against 0.7*100 = 69.99999999999999.
        const double fl = std::floor(quota + 1e-9);
        sizes[i] = static_cast<std::size_t>(fl);
        rema[i] = quota - fl;
        assigned += sizes[i];
    }
    std::vector<std::size_t> order(ratios.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rema[a] > rema[b]; });
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++sizes[order[k % order.size()]];
    return sizes;
}

std::vector<std::vector<CaseRecord>> split_corpus(std::span<const CaseRecord> corpus, std::span<const double> ratios,
                                                  std::uint64_t seed) {
    const auto sizes = partition_sizes(corpus.size(), ratios);
    std::vector<std::size_t> idx(corpus.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    shuffle(idx, rng);
    std::vector<std::vector<CaseRecord>> out(sizes.size());
    std::size_t pos = 0;
    for (std::size_t p = 0; p < sizes.size(); ++p) {
        out[p].reserve(sizes[p]);
        for (std::size_t k = 0; k < sizes[p]; ++k) out[p].push_back(corpus[idx[pos++]]);
    }
    return out;
}

int age_group(int age) {
    if (age <= 2) return 0;
    if (age <= 12) return 1;
    if (age <= 18) return 2;
    if (age <= 40) return 3;
    if (age <= 65) return 4;
    return 5;
}

std::string_view age_group_name(int group) {
    static constexpr std::array<std::string_view, kAgeGroupCount> names{"0-2", "3-12", "13-18", "19-40", "41-65",
                                                                        "66+"};
    return names.at(static_cast<std::size_t>(group));
}

}  // namespace triage::corpus
