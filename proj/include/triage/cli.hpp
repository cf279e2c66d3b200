#pragma once

// Command-line front end. Subcommands: generate, ingest, build-ontology,
// build-kg, train-relext, eval-relext, train-qgen, eval-qgen, eval-triage,
// serve, bench, stats.
//
// Option precedence: command line, then TRIAGE_<OPTION> environment
// variables, then the --config JSON file, then built-in defaults. In the
// config file, scalar top-level keys apply to every subcommand that has the
// option and object-valued keys apply to the subcommand of that name.

#include <ostream>
#include <string>
#include <vector>

namespace triage::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Runs one invocation (args exclude the program name). Failures print one
/// JSON line {"error": kind, "message": ...} to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace triage::cli
