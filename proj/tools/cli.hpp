#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "zonas/accounting.hpp"
#include "zonas/data.hpp"
#include "zonas/oneshot.hpp"
#include "zonas/oracle.hpp"
#include "zonas/pruning.hpp"
#include "zonas/ranking.hpp"

namespace zonas::cli {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitMismatch = 1;  // replay differs
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

/// Built-in defaults: the planted toy problem with the standard optimizer
/// settings where the toy scale allows them.
nlohmann::json default_config();

/// Sets a dotted path ("schedule.a_lr") in `j`, creating objects on the way.
void set_path(nlohmann::json& j, const std::string& path, nlohmann::json value);
/// Parses "path=value"; the value is read as JSON when it parses, else as a string.
std::pair<std::string, nlohmann::json> parse_assignment(const std::string& text);

/// Defaults, then the config file (merge patch), then overrides in order.
/// Unknown top-level keys are rejected. Fills derived seeds so the result is
/// fully explicit.
nlohmann::json resolve_config(const std::string& config_file,
                              const std::vector<std::pair<std::string, nlohmann::json>>& overrides);

/// Typed view of a resolved config. Throws ConfigError on invalid values.
struct RunConfig {
  nlohmann::json raw;
  SearchSpace space;
  PruneConfig prune;
  std::vector<std::string> rankers;
  NngpBudget nngp;
  SupernetConfig network;
  SearchSchedule schedule;
  AccountingOptions accounting;
  FitnessBudget fitness;
  std::uint64_t seed = 0;

  static RunConfig from_json(const nlohmann::json& resolved);
  /// Space with the configured mask file applied (if any).
  SearchSpace masked_space() const;
  Dataset load_data() const;
};

struct Invocation {
  std::string command;           // prune | search | derive | account | oracle
  nlohmann::json config;         // resolved
  std::string out_dir;
  bool force = false;
  std::size_t workers = 1;
  bool quiet = false;
};

/// Output directory for a command when none was given: $ZONAS_OUTPUT_ROOT
/// (default "runs") / <command>-seed<seed>.
std::string default_out_dir(const std::string& command, std::uint64_t seed);

/// Runs one pipeline command. Writes config.json and the command's outputs
/// into inv.out_dir; human summaries go to `console`.
void run_command(const Invocation& inv, std::ostream& console);

struct ReplayOutcome {
  std::vector<std::string> identical;
  std::vector<std::string> differing;  // present in both, bytes differ
  std::vector<std::string> missing;    // present in only one run
  bool ok() const { return differing.empty() && missing.empty(); }
};

/// Re-executes the run recorded in `run_dir` into `out_dir` and compares
/// every output file byte for byte (timing.jsonl excluded).
ReplayOutcome replay(const std::string& run_dir, const std::string& out_dir, bool force, std::size_t workers,
                     std::ostream& console);

/// Maps an exception from the library onto an exit code.
int exit_code_for(const std::exception& e);

}  // namespace zonas::cli
