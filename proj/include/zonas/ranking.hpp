#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "zonas/search_space.hpp"
#include "zonas/supernet.hpp"
#include "zonas/tensor.hpp"

namespace zonas {

/// Canonical genotype key -> fitness in [0, 1].
using FitnessMap = std::map<std::string, double>;

enum class Aggregate { kMean, kMax };
Aggregate parse_aggregate(const std::string& s);
std::string_view aggregate_name(Aggregate a);

/// Training-free score of a (masked) search space. Implementations must be
/// safe to call concurrently on different spaces.
class Ranker {
 public:
  virtual ~Ranker() = default;
  virtual std::string name() const = 0;
  virtual double score(const SearchSpace& space) const = 0;
};

struct KernelEstimate {
  std::vector<double> gram;  // m x m, row-major
  std::size_t m = 0;

  double at(std::size_t i, std::size_t j) const { return gram[i * m + j]; }
  double frobenius() const;
};

/// G_ij = <z_i, z_j> / classes for logits of shape (m, classes).
KernelEstimate nngp_kernel(const Tensor& logits);

/// Frobenius norm of the NNGP kernel of a freshly initialized network. All m
/// points go through one forward pass, so batch statistics (and the score)
/// do not depend on their order. No tape is recorded.
double nngp_frobenius(Supernet& net, const Tensor& data);

struct NngpBudget {
  std::size_t datapoints = 384;
  std::size_t batch_size = 128;  // recorded for provenance; evaluation uses one pass
  std::uint64_t seed = 0;
};

/// Builds a fresh network over each scored space. Parameters are seeded by
/// name, so a masked variant shares every remaining weight with the full net.
std::unique_ptr<Ranker> make_nngp_ranker(SupernetConfig cfg, Tensor data);
std::unique_ptr<Ranker> make_tabular_ranker(FitnessMap table, Aggregate aggregate);
std::unique_ptr<Ranker> make_constant_ranker(double value);

/// Aggregate fitness over every unmasked architecture of a chain-enumerable
/// space. Throws LookupError with the missing genotype key.
double tabular_ranking(const SearchSpace& space, const FitnessMap& table, Aggregate aggregate);

FitnessMap fitness_map_from_json(const nlohmann::json& j);
nlohmann::json fitness_map_to_json(const FitnessMap& table);

}  // namespace zonas
