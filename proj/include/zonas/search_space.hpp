#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>
#include "json.hpp"

#include "zonas/operations.hpp"

namespace zonas {

using BigInt = boost::multiprecision::cpp_int;

/// darts: two cell templates (normal, reduction) with `steps` intermediate
/// nodes each. chain: a flat sequence of edges at constant width.
enum class Topology { kDarts, kChain };
enum class CellKind { kNormal, kReduction };

std::string_view cell_kind_name(CellKind kind);

/// One mixing operation: an edge with its candidate ops and pruning mask.
struct MixingSet {
  std::size_t edge_id = 0;
  CellKind cell = CellKind::kNormal;
  std::size_t from = 0;  // darts: 0,1 are the cell inputs, 2.. intermediate nodes
  std::size_t to = 0;
  std::vector<OpKind> candidates;
  std::vector<bool> mask;

  std::size_t unmasked() const;
  std::vector<std::size_t> unmasked_indices() const;
};

class SearchSpace {
 public:
  /// DARTS cell space: 2 templates x steps*(steps+3)/2 edges.
  static SearchSpace darts(std::size_t steps = 4, std::vector<OpKind> ops = darts_ops());
  /// Flat chain of `edges` edges, each holding the same candidate ops.
  static SearchSpace chain(std::size_t edges, std::vector<OpKind> ops);

  static SearchSpace from_json(const nlohmann::json& j);
  /// Structural description only; the mask is serialized separately.
  nlohmann::json to_json() const;
  /// FNV-1a digest of the structure (independent of the mask).
  std::string digest() const;

  Topology topology() const { return topology_; }
  std::size_t steps() const { return steps_; }
  const std::vector<MixingSet>& edges() const { return edges_; }
  const MixingSet& edge(std::size_t id) const { return edges_.at(id); }
  std::size_t edge_count() const { return edges_.size(); }
  /// Edges belonging to one template, in edge-id order.
  std::vector<std::size_t> template_edges(CellKind kind) const;

  std::size_t candidate_count() const;
  /// Concatenated per-edge masks, edge-id order.
  std::vector<bool> flat_mask() const;
  /// Offset of edge e's first entry in the flat mask.
  std::size_t flat_offset(std::size_t edge_id) const;

  bool same_structure(const SearchSpace& other) const;

 private:
  friend SearchSpace apply_mask(const SearchSpace&, const std::vector<bool>&);
  Topology topology_ = Topology::kChain;
  std::size_t steps_ = 0;
  std::vector<MixingSet> edges_;
};

/// Restricts the space by conjunction with `mask` (flat layout). Throws
/// InvariantError naming the first edge left without an unmasked op.
SearchSpace apply_mask(const SearchSpace& space, const std::vector<bool>& mask);
/// Mask hiding a single op on top of the current one.
SearchSpace without_op(const SearchSpace& space, std::size_t edge_id, std::size_t op_index);

/// Product of per-edge unmasked-count ratios, computed in log space.
double architecture_fraction(const SearchSpace& space, const SearchSpace& baseline);
BigInt count_architectures(const SearchSpace& space);
/// Fraction of candidate ops left unmasked.
double kept_op_fraction(const SearchSpace& space);

struct GenotypeEdge {
  std::size_t edge_id = 0;
  CellKind cell = CellKind::kNormal;
  std::size_t from = 0;
  std::size_t to = 0;
  std::size_t op_index = 0;
  OpKind op = OpKind::kZero;

  bool operator==(const GenotypeEdge&) const = default;
};

/// Discrete architecture: one op per retained edge, sorted by edge id.
struct Genotype {
  std::vector<GenotypeEdge> edges;

  /// Canonical key, e.g. "0:skip_connect|1:none|2:avg_pool_3x3".
  std::string key() const;
  std::vector<GenotypeEdge> of_cell(CellKind kind) const;
  bool operator==(const Genotype&) const = default;
};

/// Per edge: argmax over unmasked alphas (ties to the lowest index). In the
/// darts topology every intermediate node then keeps its two incoming edges
/// with the largest unmasked softmax weight.
Genotype derive_genotype(const SearchSpace& space, const std::vector<std::vector<double>>& alphas);

/// Genotype with exactly the given op index on every edge (chain spaces).
Genotype genotype_from_choices(const SearchSpace& space, const std::vector<std::size_t>& choices);
/// Calls fn with one op index per edge for every unmasked combination, in
/// odometer order (last edge fastest). Per-edge choices, no darts top-2 rule.
void for_each_architecture(const SearchSpace& space, const std::function<void(const std::vector<std::size_t>&)>& fn);

/// Space whose only unmasked op per edge is the genotype's choice; edges the
/// genotype drops keep only their zero op (if present) and fail otherwise.
SearchSpace restrict_to(const SearchSpace& space, const Genotype& g);

nlohmann::json mask_to_json(const SearchSpace& space);
std::vector<bool> mask_from_json(const SearchSpace& space, const nlohmann::json& j);

nlohmann::json genotype_to_json(const Genotype& g, const SearchSpace& space, const std::string& config_digest);
Genotype genotype_from_json(const nlohmann::json& j);

}  // namespace zonas
