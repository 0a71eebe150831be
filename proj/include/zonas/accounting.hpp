#pragma once

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "zonas/search_space.hpp"
#include "zonas/supernet.hpp"

namespace zonas {

// Analytic element and MAC counts for one search step of a masked supernet.
//
// Activations retained for backward, per op kind (input N*C*H*W, output
// N*C*H'*W', C channels routed through the op):
//
//   none                 N*C*H'*W'                  (output kept by the mix)
//   skip_connect         N*C*H*W                    (stride 1: the input itself)
//   skip_connect, s=2    N*C*H*W + 2*N*C*H'*W' + C  (relu out, norm xhat + 1/std, output)
//   sep_conv_*           N*C*H*W + 6*N*C*H'*W' + 2*C
//   dil_conv_*           N*C*H*W + 3*N*C*H'*W' + C
//   avg_pool_3x3         2*N*C*H'*W' + C            (norm xhat + 1/std, output)
//   max_pool_3x3         3*N*C*H'*W' + C            (argmax, norm xhat + 1/std, output)
//
// plus one softmax element per unmasked candidate. Partial channels route
// C/K channels through the ops; the strided bypass keeps its max-pool argmax.
// Fixed blocks: stem (input image, xhat, 1/std), preprocessing (relu out,
// xhat, 1/std), chain head (conv input, xhat, 1/std, relu out), classifier
// (linear input, softmax probabilities). Each row is counted on its own, so
// two identity edges reading the same node are counted twice.
//
// MACs count convolutions and linear layers only; backward is 2x forward.

struct AccountingOptions {
  std::size_t batch = 64;
  double weight_state_per_param = 1.0;  // SGD momentum
  double alpha_state_per_param = 2.0;   // Adam moments

  nlohmann::json to_json() const;
};

inline constexpr std::size_t kNoEdge = std::numeric_limits<std::size_t>::max();

/// Standalone cost of one op at one site, or of a fixed block. `weight` is 1
/// for kept ops (or the expected keep probability), 0 for masked ones.
struct CostRow {
  std::string site;
  std::size_t edge_id = kNoEdge;
  std::string op;
  double weight = 1.0;
  double weight_params = 0.0;
  double alpha_params = 0.0;
  double activations = 0.0;
  double macs = 0.0;
};

struct EdgeMemory {
  std::size_t edge_id = 0;
  double parameter_elements = 0.0;
  double retained_activation_elements = 0.0;
  double macs = 0.0;
};

struct MemoryReport {
  double parameter_elements = 0.0;
  double optimizer_state_elements = 0.0;
  double retained_activation_elements = 0.0;
  double gradient_elements = 0.0;
  double total_elements = 0.0;
  std::vector<EdgeMemory> per_edge;

  nlohmann::json to_json() const;
};

struct ComputeReport {
  double forward_macs = 0.0;
  double backward_macs = 0.0;
  std::vector<EdgeMemory> per_edge;

  nlohmann::json to_json() const;
};

/// One row per fixed block, per unmasked op per site (masked ops get weight
/// 0), and per strided partial-channel bypass.
std::vector<CostRow> cost_rows(const SearchSpace& space, const SupernetConfig& cfg, const AccountingOptions& opt);
/// Rows weighted by the expected keep probability of a random mask with level
/// xi applied to `space`: xi + (1 - xi)^n / n per op of an n-op set.
std::vector<CostRow> expected_cost_rows(const SearchSpace& space, const SupernetConfig& cfg,
                                        const AccountingOptions& opt, double xi);

MemoryReport memory_report(const std::vector<CostRow>& rows, const AccountingOptions& opt);
ComputeReport compute_report(const std::vector<CostRow>& rows);

MemoryReport estimate_memory(const SearchSpace& space, const SupernetConfig& cfg, const AccountingOptions& opt);
ComputeReport estimate_compute(const SearchSpace& space, const SupernetConfig& cfg, std::size_t batch);

/// Flat CSV: site, edge, op, weight, params, alpha_params, activations, macs.
std::string cost_rows_csv(const std::vector<CostRow>& rows);

}  // namespace zonas
