#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "zonas/autodiff.hpp"
#include "zonas/search_space.hpp"

namespace zonas {

struct SupernetConfig {
  std::size_t in_channels = 3;
  std::size_t image_size = 32;
  std::size_t init_channels = 16;
  std::size_t cells = 8;  // darts topology: reductions at cells/3 and 2*cells/3
  std::size_t classes = 10;
  std::size_t partial_k = 1;  // 1 = full channels
  bool resample_channels = true;  // new channel subset per batch; false keeps `seed`'s subset
  bool stem = true;  // chain topology only; without a stem in_channels must equal init_channels
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static SupernetConfig from_json(const nlohmann::json& j);
};

// Static shape of a network: which blocks and mixing sites exist, at what
// width and resolution. Shared by the supernet and the accounting model.

enum class BlockKind { kStem, kPreprocess, kHeadConv, kClassifier };

struct BlockLayout {
  std::string name;
  BlockKind kind;
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t in_hw = 0;
  std::size_t out_hw = 0;
};

struct SiteLayout {
  std::string name;  // parameter prefix, e.g. "cell3.edge7"
  std::size_t cell = 0;
  std::size_t edge_id = 0;
  std::size_t channels = 0;  // full width at the site
  std::size_t stride = 1;
  std::size_t in_hw = 0;
  std::size_t out_hw = 0;
};

struct CellLayout {
  std::size_t index = 0;
  CellKind kind = CellKind::kNormal;
  std::size_t c = 0;  // width of every intermediate node
  bool reduction_prev = false;
  std::size_t in_hw = 0;  // resolution of the previous cell's output
  std::size_t out_hw = 0;
};

struct NetworkLayout {
  std::vector<CellLayout> cells;
  std::vector<BlockLayout> blocks;
  std::vector<SiteLayout> sites;
  std::size_t final_channels = 0;
};

/// Throws ConfigError when K does not divide the width of some mixing site.
NetworkLayout network_layout(const SearchSpace& space, const SupernetConfig& cfg);

/// Candidate weights of one mixing site, indexed by candidate; masked
/// candidates have no entries.
using OpWeights = std::vector<std::vector<Parameter*>>;

/// Softmax over the unmasked alphas; masked entries get weight 0.
std::vector<double> mixing_weights(const MixingSet& set, const std::vector<double>& alpha);

/// Softmax-weighted sum of the unmasked candidates. Masked candidates are
/// never executed and leave nothing on the tape.
Var masked_mix(const Var& x, const MixingSet& set, const Var& alpha, std::size_t stride, const OpWeights& weights,
               Tape* tape);

/// Routes a seeded subset of channels/K channels through masked_mix and
/// bypasses the rest (2x2 max pool at stride 2), then shuffles K groups.
/// `weights` must be sized for channels/K.
Var masked_mix_partial(const Var& x, const MixingSet& set, const Var& alpha, std::size_t stride,
                       const OpWeights& weights, std::size_t k, std::uint64_t channel_seed, Tape* tape);

/// Channels routed through the mixed branch, ascending.
std::vector<std::size_t> partial_channels(std::size_t channels, std::size_t k, std::uint64_t seed);

struct ForwardOptions {
  Tape* tape = nullptr;  // nullptr: no recording
  /// Mask to use instead of the network's own; must be a subset of it.
  const SearchSpace* mask = nullptr;
  std::uint64_t channel_seed = 0;
};

class Supernet {
 public:
  /// Allocates weights for the unmasked ops of `space` only. Every parameter
  /// is seeded from (cfg.seed, its name), so a parameter's initial value
  /// does not depend on what else is masked.
  Supernet(SearchSpace space, SupernetConfig cfg);
  Supernet(Supernet&&) = default;
  Supernet& operator=(Supernet&&) = default;
  Supernet(const Supernet&) = delete;
  Supernet& operator=(const Supernet&) = delete;

  /// Deep copy (independent weight buffers).
  Supernet clone() const;

  const SearchSpace& space() const { return space_; }
  const SupernetConfig& config() const { return cfg_; }
  const NetworkLayout& layout() const { return layout_; }

  Var forward(const Var& batch, const ForwardOptions& opt = {});
  Var forward(const Tensor& batch, const ForwardOptions& opt = {}) { return forward(Var::constant(batch), opt); }

  std::vector<Parameter*> weights();
  std::vector<Parameter*> alphas();
  Parameter& alpha(std::size_t edge_id) { return alphas_.at(edge_id); }
  std::vector<std::vector<double>> alpha_values() const;
  bool has_param(const std::string& name) const { return weights_.count(name) != 0; }
  const Parameter& param(const std::string& name) const;
  std::size_t weight_elements() const;

  void save(const std::string& path) const;
  void load(const std::string& path);
  nlohmann::json alphas_to_json() const;

 private:
  Var mix_site(const Var& x, const SiteLayout& site, const SearchSpace& mask, const ForwardOptions& opt);
  std::vector<Parameter*> block_params(const std::string& prefix, std::size_t n);
  void add_params(const std::string& prefix, const std::vector<ParamSpec>& specs);

  SearchSpace space_;
  SupernetConfig cfg_;
  NetworkLayout layout_;
  std::map<std::string, Parameter> weights_;
  std::vector<Parameter> alphas_;
};

/// Parameter specs of a fixed block (stem, preprocessing, head, classifier).
std::vector<ParamSpec> block_param_specs(const BlockLayout& block);

}  // namespace zonas
