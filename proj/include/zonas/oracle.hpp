#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "zonas/data.hpp"
#include "zonas/oneshot.hpp"
#include "zonas/pruning.hpp"
#include "zonas/ranking.hpp"
#include "zonas/search_space.hpp"

namespace zonas {

inline constexpr std::size_t kDefaultEnumerationCap = 4096;

/// Every unmasked genotype in odometer order. Throws ConfigError with the
/// architecture count when it exceeds `cap`.
std::vector<Genotype> enumerate_space(const SearchSpace& space, std::size_t cap = kDefaultEnumerationCap);

/// Training budget shared by every architecture of a table.
struct FitnessBudget {
  std::size_t epochs = 5;
  double train_fraction = 0.75;  // rest is the validation set
  std::size_t eval_batch = 256;
  SearchSchedule schedule;       // weight optimizer settings and batch size

  nlohmann::json to_json() const;
  static FitnessBudget from_json(const nlohmann::json& j);
};

/// Validation accuracy per canonical genotype key.
struct FitnessTable {
  FitnessMap fitness;
  std::map<std::string, std::string> failures;  // key -> error message
  nlohmann::json provenance;

  /// (key, fitness) by decreasing fitness, ties by key.
  std::vector<std::pair<std::string, double>> ranked() const;
  nlohmann::json to_json() const;
  static FitnessTable from_json(const nlohmann::json& j);
};

/// Trains each architecture of `space` from the same seed-derived
/// initialization on the same data order and records its validation
/// accuracy. Architectures whose training throws are listed in `failures`.
FitnessTable build_fitness_table(const SearchSpace& space, const SupernetConfig& cfg, const Dataset& data,
                                 const FitnessBudget& budget, std::uint64_t seed, std::size_t workers = 1,
                                 std::size_t cap = kDefaultEnumerationCap);

/// Linear-interpolation quantile of unsorted values.
double quantile(std::vector<double> values, double q);

struct QuantileSummary {
  double p10 = 0.0, p25 = 0.0, median = 0.0, p75 = 0.0, p90 = 0.0, max = 0.0;

  static QuantileSummary of(const std::vector<double>& values);
  nlohmann::json to_json() const;
};

/// One pruning method applied once per seed. Algorithmic methods rank with
/// the table itself (max aggregate); the seed shuffles the candidate order,
/// which only changes how ties are broken.
struct SurvivalMethod {
  std::string name;
  PruneConfig prune;
  std::vector<std::uint64_t> seeds;
};

struct MethodSurvival {
  std::string name;
  PruneConfig prune;
  std::size_t runs = 0;
  std::size_t survived = 0;                // runs keeping >= 1 top-q architecture
  double probability = 0.0;
  std::optional<double> closed_form;       // random masking only
  double top1_probability = 0.0;
  double mean_surviving_max = 0.0;
  double mean_survivors = 0.0;
  QuantileSummary after;                   // per-seed quantiles averaged over seeds
  double median_shift = 0.0;               // |mean after median - before median|
  double median_std = 0.0;                 // inter-seed std of the after median
  std::vector<double> histogram;           // mean fraction of survivors per bin
};

struct SurvivalReport {
  double top_q = 0.05;
  double threshold = 0.0;
  std::vector<std::string> top_keys;
  std::string top1_key;
  QuantileSummary before;
  std::vector<double> bin_edges;
  std::vector<double> histogram_before;
  std::vector<MethodSurvival> methods;

  nlohmann::json to_json() const;
  /// bin_lo, bin_hi, before, then one column per method.
  std::string histogram_csv() const;
};

/// Top-q set: the ceil(q * N) best architectures plus any tied with the last.
std::vector<std::string> top_q_keys(const FitnessTable& table, double top_q);

/// Exact probability that random_mask(space, xi) keeps at least one of
/// `targets` (op index per edge), floor repair included. Enumerates the
/// per-edge kept-set distribution; throws ConfigError when that product
/// exceeds `max_states`.
double random_survival_probability(const SearchSpace& space, const std::vector<std::vector<std::size_t>>& targets,
                                   double xi, std::size_t max_states = 1u << 22);

/// Throws ContractError if the table does not cover every architecture of
/// `space`.
SurvivalReport survival_study(const FitnessTable& table, const SearchSpace& space,
                              const std::vector<SurvivalMethod>& methods, double top_q = 0.05, std::size_t bins = 20,
                              std::size_t workers = 1);

}  // namespace zonas
