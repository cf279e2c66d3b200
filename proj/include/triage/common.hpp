#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace triage {

// Error taxonomy. Every failure surfaced by the library is one of these; the
// CLI prints `kind()` in its machine-parsable error line and the HTTP layer
// maps kinds to status codes.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define TRIAGE_DEFINE_ERROR(Name, Kind)                                        \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& message) : Error(Kind, message) {}    \
    };

TRIAGE_DEFINE_ERROR(ConfigError, "config")
TRIAGE_DEFINE_ERROR(ParseError, "parse")
TRIAGE_DEFINE_ERROR(ValidationError, "validation")
TRIAGE_DEFINE_ERROR(DataError, "data")
TRIAGE_DEFINE_ERROR(TrainingError, "training")
TRIAGE_DEFINE_ERROR(LookupError, "lookup")
TRIAGE_DEFINE_ERROR(ClusteringConflict, "clustering_conflict")
TRIAGE_DEFINE_ERROR(TaxonomyError, "taxonomy")
TRIAGE_DEFINE_ERROR(MappingError, "mapping")
TRIAGE_DEFINE_ERROR(IngestionError, "ingestion")
TRIAGE_DEFINE_ERROR(PathError, "path")
TRIAGE_DEFINE_ERROR(QueryError, "query")
TRIAGE_DEFINE_ERROR(SessionError, "session")
TRIAGE_DEFINE_ERROR(ProtocolError, "protocol")
TRIAGE_DEFINE_ERROR(InputError, "input")
TRIAGE_DEFINE_ERROR(InferenceError, "inference")
TRIAGE_DEFINE_ERROR(BenchError, "bench")
TRIAGE_DEFINE_ERROR(IoError, "io")
TRIAGE_DEFINE_ERROR(ExpiredError, "expired")

#undef TRIAGE_DEFINE_ERROR

// The one PRNG used everywhere randomness is seeded. The distributions below
// are hand-written because the std:: distributions are not bit-reproducible
// across standard library implementations.
using Rng = std::mt19937_64;

/// Uniform double in [0, 1) built from the top 53 bits.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Uniform integer in [0, n) by rejection; n must be > 0.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = rng();
    } while (x >= limit);
    return x % n;
}

inline double uniform_range(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_index(rng, i));
        std::swap(v[i - 1], v[j]);
    }
}

/// Draws an index with probability proportional to `weights[i]` (all >= 0, sum > 0).
std::size_t weighted_choice(Rng& rng, std::span<const double> weights);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64_mix(std::uint64_t h, std::string_view bytes);
std::string hex64(std::uint64_t value);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view content);
std::vector<std::string> read_lines(const std::string& path);

std::vector<std::string> split(std::string_view s, char sep);
std::string trim(std::string_view s);
std::string join(std::span<const std::string> parts, std::string_view sep);

}  // namespace triage
