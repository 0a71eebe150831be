#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "zonas/ranking.hpp"
#include "zonas/search_space.hpp"

namespace zonas {

enum class PruneMode { kAlgorithmic, kRandom };
/// What the pruning level measures: the surviving share of architectures,
/// or the share (random mode: keep probability) of candidate ops.
enum class XiSemantics { kArchitectureFraction, kOperationKeepProbability };

PruneMode parse_prune_mode(const std::string& s);
XiSemantics parse_xi_semantics(const std::string& s);
std::string_view prune_mode_name(PruneMode m);
std::string_view xi_semantics_name(XiSemantics s);
/// Default pairing: architecture fraction for algorithmic, keep probability for random.
XiSemantics default_semantics(PruneMode m);

struct PruneConfig {
  double xi = 0.5;
  PruneMode mode = PruneMode::kAlgorithmic;
  XiSemantics semantics = XiSemantics::kArchitectureFraction;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  /// Throws ConfigError unless xi is in (0, 1) and the mode/semantics pair is
  /// meaningful (random masking only has a keep probability).
  void validate() const;
  nlohmann::json to_json() const;
};

struct ImportanceRecord {
  std::size_t round = 0;
  std::size_t edge_id = 0;
  std::size_t op_index = 0;
  double score = 0.0;
};

struct PruneRound {
  std::size_t round = 0;
  double fraction_before = 1.0;
  double fraction_after = 1.0;
  double kept_ops_after = 1.0;
  std::vector<ImportanceRecord> scores;
  std::vector<std::pair<std::size_t, std::size_t>> pruned;  // (edge, op)
};

struct PruneResult {
  SearchSpace space;
  std::vector<PruneRound> rounds;
};

/// s_j = sum over rankers of (r(N) - r(N without e_j)) / r(N) for every
/// unmasked op on edges holding at least two; floored edges are skipped.
/// Evaluations run on up to `workers` threads. Throws NumericError naming
/// the ranker when r(N) = 0.
std::vector<ImportanceRecord> importance_scores(const SearchSpace& space, const std::vector<const Ranker*>& rankers,
                                                std::size_t round = 0, std::size_t workers = 1);

/// Each round masks, in every set with two or more unmasked ops, the op of
/// least importance (ties to the lowest index), until the measured level is
/// at most xi or every set is down to one op.
PruneResult partial_prune(const SearchSpace& space, const std::vector<const Ranker*>& rankers, const PruneConfig& cfg);

/// Keeps each unmasked op with probability xi; a set left empty gets one of
/// its previously unmasked ops back, chosen uniformly.
SearchSpace random_mask(const SearchSpace& space, double xi, std::uint64_t seed);

/// Expected share of candidate ops kept by random_mask on an unmasked space:
/// per set of n ops, xi + (1 - xi)^n / n.
double expected_kept_fraction(const SearchSpace& space, double xi);

nlohmann::json prune_round_to_json(const PruneRound& r);
/// Mask entries plus provenance: config, rankers, and the fraction trajectory.
nlohmann::json mask_file_json(const PruneResult& result, const SearchSpace& original, const PruneConfig& cfg,
                              const std::vector<std::string>& ranker_names);

}  // namespace zonas
