#include "zonas/supernet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "zonas/container.hpp"
#include "zonas/error.hpp"
#include "zonas/rng.hpp"

namespace zonas {

using nlohmann::json;

json SupernetConfig::to_json() const {
  return {{"in_channels", in_channels},
          {"image_size", image_size},
          {"init_channels", init_channels},
          {"cells", cells},
          {"classes", classes},
          {"partial_k", partial_k},
          {"resample_channels", resample_channels},
          {"stem", stem},
          {"seed", seed}};
}

SupernetConfig SupernetConfig::from_json(const json& j) {
  SupernetConfig c;
  try {
    c.in_channels = j.value("in_channels", c.in_channels);
    c.image_size = j.value("image_size", c.image_size);
    c.init_channels = j.value("init_channels", c.init_channels);
    c.cells = j.value("cells", c.cells);
    c.classes = j.value("classes", c.classes);
    c.partial_k = j.value("partial_k", c.partial_k);
    c.resample_channels = j.value("resample_channels", c.resample_channels);
    c.stem = j.value("stem", c.stem);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("supernet config: ") + e.what());
  }
  if (c.partial_k == 0) throw ConfigError("partial_k must be >= 1");
  if (c.classes < 2) throw ConfigError("classes must be >= 2");
  if (c.image_size == 0 || c.init_channels == 0 || c.in_channels == 0)
    throw ConfigError("image_size, init_channels and in_channels must be positive");
  return c;
}

namespace {

std::size_t halve(std::size_t hw) { return (hw + 1) / 2; }

std::string cell_prefix(std::size_t i) { return "cell" + std::to_string(i); }

void check_divisible(const SiteLayout& s, std::size_t k) {
  if (s.channels % k != 0)
    throw ConfigError("partial_k=" + std::to_string(k) + " does not divide " + std::to_string(s.channels) +
                      " channels at " + s.name);
}

}  // namespace

NetworkLayout network_layout(const SearchSpace& space, const SupernetConfig& cfg) {
  NetworkLayout L;
  const std::size_t C = cfg.init_channels;
  const std::size_t hw = cfg.image_size;
  if (space.topology() == Topology::kChain) {
    if (cfg.stem)
      L.blocks.push_back({"stem", BlockKind::kStem, cfg.in_channels, C, 3, 1, hw, hw});
    else if (cfg.in_channels != C)
      throw ConfigError("a chain network without stem needs in_channels == init_channels");
    for (const auto& e : space.edges())
      L.sites.push_back({"edge" + std::to_string(e.edge_id), 0, e.edge_id, C, 1, hw, hw});
    L.blocks.push_back({"head", BlockKind::kHeadConv, C, C, 1, 1, hw, hw});
    L.blocks.push_back({"classifier", BlockKind::kClassifier, C, cfg.classes, 1, 1, 1, 1});
    L.final_channels = C;
  } else {
    if (cfg.cells == 0) throw ConfigError("darts network needs at least one cell");
    L.blocks.push_back({"stem", BlockKind::kStem, cfg.in_channels, C, 3, 1, hw, hw});
    std::size_t c_pp = C, c_p = C, c_cur = C, hw_pp = hw, hw_p = hw;
    bool red_prev = false;
    for (std::size_t i = 0; i < cfg.cells; ++i) {
      const bool red = i == cfg.cells / 3 || i == 2 * cfg.cells / 3;
      if (red) c_cur *= 2;
      const std::size_t out_hw = red ? halve(hw_p) : hw_p;
      L.cells.push_back({i, red ? CellKind::kReduction : CellKind::kNormal, c_cur, red_prev, hw_p, out_hw});
      L.blocks.push_back({cell_prefix(i) + ".pre0", BlockKind::kPreprocess, c_pp, c_cur, 1, red_prev ? 2u : 1u,
                          hw_pp, hw_p});
      L.blocks.push_back({cell_prefix(i) + ".pre1", BlockKind::kPreprocess, c_p, c_cur, 1, 1, hw_p, hw_p});
      for (std::size_t id : space.template_edges(red ? CellKind::kReduction : CellKind::kNormal)) {
        const auto& e = space.edge(id);
        const bool from_input = e.from < 2;
        L.sites.push_back({cell_prefix(i) + ".edge" + std::to_string(id), i, id, c_cur,
                           red && from_input ? 2u : 1u, from_input ? hw_p : out_hw, out_hw});
      }
      c_pp = c_p;
      c_p = space.steps() * c_cur;
      hw_pp = hw_p;
      hw_p = out_hw;
      red_prev = red;
    }
    L.blocks.push_back({"classifier", BlockKind::kClassifier, c_p, cfg.classes, 1, 1, 1, 1});
    L.final_channels = c_p;
  }
  for (const auto& s : L.sites) check_divisible(s, cfg.partial_k);
  return L;
}

std::vector<ParamSpec> block_param_specs(const BlockLayout& b) {
  if (b.kind == BlockKind::kClassifier)
    return {{"w", {b.c_out, b.c_in}, InitKind::kKaimingUniform, b.c_in}, {"b", {b.c_out}, InitKind::kZeros}};
  return relu_conv_norm_specs(b.c_in, b.c_out, b.kernel);
}

std::vector<double> mixing_weights(const MixingSet& set, const std::vector<double>& alpha) {
  if (set.unmasked() == 0) throw InvariantError("edge " + std::to_string(set.edge_id) + ": all operations masked");
  const Tensor w = ops::masked_softmax(Var::constant(Tensor({alpha.size()}, alpha)), set.mask).value();
  std::vector<double> full(alpha.size(), 0.0);
  std::size_t k = 0;
  for (std::size_t i = 0; i < alpha.size(); ++i)
    if (set.mask[i]) full[i] = w[k++];
  return full;
}

Var masked_mix(const Var& x, const MixingSet& set, const Var& alpha, std::size_t stride, const OpWeights& weights,
               Tape* tape) {
  if (set.unmasked() == 0) throw InvariantError("edge " + std::to_string(set.edge_id) + ": all operations masked");
  if (alpha.shape() != Shape{set.candidates.size()})
    throw ShapeError("masked_mix: alpha " + shape_str(alpha.shape()) + " for " +
                     std::to_string(set.candidates.size()) + " candidates");
  std::vector<Var> outs;
  for (std::size_t i : set.unmasked_indices()) {
    const auto& p = i < weights.size() ? weights[i] : std::vector<Parameter*>{};
    outs.push_back(apply_op(set.candidates[i], x, stride, p, tape));
  }
  return ops::weighted_sum(outs, ops::masked_softmax(alpha, set.mask));
}

std::vector<std::size_t> partial_channels(std::size_t channels, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> perm(channels);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  rng.shuffle(perm);
  perm.resize(channels / k);
  std::sort(perm.begin(), perm.end());
  return perm;
}

Var masked_mix_partial(const Var& x, const MixingSet& set, const Var& alpha, std::size_t stride,
                       const OpWeights& weights, std::size_t k, std::uint64_t channel_seed, Tape* tape) {
  if (k == 1) return masked_mix(x, set, alpha, stride, weights, tape);
  const std::size_t C = x.shape().at(1);
  if (k == 0 || C % k != 0)
    throw ConfigError("partial_k=" + std::to_string(k) + " does not divide " + std::to_string(C) + " channels");
  const auto picked = partial_channels(C, k, channel_seed);
  std::vector<std::size_t> rest;
  for (std::size_t c = 0, j = 0; c < C; ++c) {
    if (j < picked.size() && picked[j] == c)
      ++j;
    else
      rest.push_back(c);
  }
  Var mixed = masked_mix(ops::select_channels(x, picked), set, alpha, stride, weights, tape);
  Var bypass = ops::select_channels(x, rest);
  if (stride == 2) bypass = ops::max_pool2d(bypass, {.kernel = 2, .stride = 2, .pad = 0});
  const Var parts[] = {mixed, bypass};
  return ops::channel_shuffle(ops::concat_channels(parts), k);
}

Supernet::Supernet(SearchSpace space, SupernetConfig cfg)
    : space_(std::move(space)), cfg_(cfg), layout_(network_layout(space_, cfg_)) {
  for (const auto& b : layout_.blocks) add_params(b.name, block_param_specs(b));
  for (const auto& site : layout_.sites) {
    const auto& set = space_.edge(site.edge_id);
    for (std::size_t i : set.unmasked_indices()) {
      const OpKind kind = set.candidates[i];
      add_params(site.name + "." + std::string(op_name(kind)),
                 op_param_specs(kind, site.channels / cfg_.partial_k, site.stride));
    }
  }
  for (const auto& e : space_.edges()) {
    const std::string name = "alpha.edge" + std::to_string(e.edge_id);
    Tensor a({e.candidates.size()});
    Rng rng(derive_seed(cfg_.seed, name));
    for (auto& v : a.data()) v = 1e-3 * rng.normal();
    alphas_.emplace_back(name, std::move(a));
    alphas_.back().zero_grad();
  }
}

void Supernet::add_params(const std::string& prefix, const std::vector<ParamSpec>& specs) {
  for (const auto& spec : specs) {
    const std::string name = prefix + "." + spec.suffix;
    Parameter p(name, init_param(spec, derive_seed(cfg_.seed, name)));
    p.zero_grad();
    weights_.emplace(name, std::move(p));
  }
}

Supernet Supernet::clone() const {
  Supernet out(space_, cfg_);
  for (auto& [name, p] : out.weights_) *p.value = *weights_.at(name).value;
  for (std::size_t e = 0; e < alphas_.size(); ++e) *out.alphas_[e].value = *alphas_[e].value;
  return out;
}

std::vector<Parameter*> Supernet::block_params(const std::string& prefix, std::size_t n) {
  std::vector<Parameter*> out;
  for (auto it = weights_.lower_bound(prefix + "."); it != weights_.end() && it->first.starts_with(prefix + ".");
       ++it)
    out.push_back(&it->second);
  if (out.size() != n) throw ContractError("missing parameters for " + prefix);
  return out;
}

Var Supernet::mix_site(const Var& x, const SiteLayout& site, const SearchSpace& mask, const ForwardOptions& opt) {
  const auto& set = mask.edge(site.edge_id);
  const auto& own = space_.edge(site.edge_id);
  OpWeights w(set.candidates.size());
  for (std::size_t i : set.unmasked_indices()) {
    if (!own.mask[i])
      throw ContractError("mask override unmasks " + std::string(op_name(set.candidates[i])) + " on edge " +
                          std::to_string(site.edge_id) + ", which has no weights");
    const std::string prefix = site.name + "." + std::string(op_name(set.candidates[i]));
    const auto specs = op_param_specs(set.candidates[i], site.channels / cfg_.partial_k, site.stride);
    for (const auto& spec : specs) w[i].push_back(&weights_.at(prefix + "." + spec.suffix));
  }
  Parameter& a = alphas_.at(site.edge_id);
  const Var alpha = use_param(a, opt.tape);
  const std::uint64_t seed = cfg_.resample_channels ? opt.channel_seed : cfg_.seed;
  try {
    return masked_mix_partial(x, set, alpha, site.stride, w, cfg_.partial_k, seed, opt.tape);
  } catch (const ShapeError& e) {
    throw ShapeError(site.name + ": " + e.what());
  } catch (const NumericError& e) {
    throw NumericError(site.name + ": " + e.what());
  }
}

Var Supernet::forward(const Var& batch, const ForwardOptions& opt) {
  const Shape& bs = batch.shape();
  if (bs.size() != 4 || bs[1] != cfg_.in_channels || bs[2] != cfg_.image_size || bs[3] != cfg_.image_size)
    throw ShapeError("supernet: expected batch (N, " + std::to_string(cfg_.in_channels) + ", " +
                     std::to_string(cfg_.image_size) + ", " + std::to_string(cfg_.image_size) + "), got " +
                     shape_str(bs));
  const SearchSpace& mask = opt.mask ? *opt.mask : space_;
  if (opt.mask && !opt.mask->same_structure(space_))
    throw ContractError("mask override does not match the network's search space");
  Tape* tape = opt.tape;
  // Recording from a leaf puts every executed op on the tape, including
  // parameter-free ops that only see the input batch.
  const Var input = tape && !batch.tracked() ? tape->leaf(batch.value()) : batch;

  auto stem = [&](const Var& x) {
    auto p = block_params("stem", 3);
    Var y = ops::conv2d(x, use_param(*p[0], tape), {.stride = 1, .pad = 1});
    return ops::channel_norm(y, use_param(*p[1], tape), use_param(*p[2], tape));
  };
  Var h;
  if (space_.topology() == Topology::kChain) {
    h = cfg_.stem ? stem(input) : input;
    for (const auto& site : layout_.sites) h = mix_site(h, site, mask, opt);
    auto hp = block_params("head", 3);
    h = ops::relu(ops::channel_norm(ops::conv2d(h, use_param(*hp[0], tape), {}), use_param(*hp[1], tape),
                                    use_param(*hp[2], tape)));
  } else {
    Var s0 = stem(input);
    Var s1 = s0;
    std::size_t next_site = 0;
    for (const auto& cell : layout_.cells) {
      const std::string pre = cell_prefix(cell.index);
      std::vector<Var> states;
      states.push_back(relu_conv_norm(s0, cell.reduction_prev ? 2 : 1, block_params(pre + ".pre0", 3), tape));
      states.push_back(relu_conv_norm(s1, 1, block_params(pre + ".pre1", 3), tape));
      std::vector<std::vector<Var>> incoming(space_.steps() + 2);
      for (; next_site < layout_.sites.size() && layout_.sites[next_site].cell == cell.index; ++next_site) {
        const auto& site = layout_.sites[next_site];
        const auto& e = space_.edge(site.edge_id);
        // Template edges are ordered by target node, so sources are ready.
        incoming[e.to].push_back(mix_site(states.at(e.from), site, mask, opt));
        if (incoming[e.to].size() == e.to) states.push_back(ops::add_n(incoming[e.to]));
      }
      s0 = s1;
      s1 = ops::concat_channels(std::span<const Var>(states).subspan(2));
    }
    h = s1;
  }
  auto cp = block_params("classifier", 2);
  return ops::linear(ops::global_avg_pool(h), use_param(*cp[1], tape), use_param(*cp[0], tape));
}

std::vector<Parameter*> Supernet::weights() {
  std::vector<Parameter*> out;
  for (auto& [name, p] : weights_) out.push_back(&p);
  return out;
}

std::vector<Parameter*> Supernet::alphas() {
  std::vector<Parameter*> out;
  for (auto& a : alphas_) out.push_back(&a);
  return out;
}

std::vector<std::vector<double>> Supernet::alpha_values() const {
  std::vector<std::vector<double>> out;
  for (const auto& a : alphas_) out.emplace_back(a.value->vec());
  return out;
}

const Parameter& Supernet::param(const std::string& name) const {
  auto it = weights_.find(name);
  if (it == weights_.end()) throw LookupError("no parameter named '" + name + "'");
  return it->second;
}

std::size_t Supernet::weight_elements() const {
  std::size_t n = 0;
  for (const auto& [name, p] : weights_) n += p.numel();
  return n;
}

void Supernet::save(const std::string& path) const {
  std::vector<NamedTensor> entries;
  for (const auto& [name, p] : weights_) entries.push_back({name, *p.value});
  for (const auto& a : alphas_) entries.push_back({a.name, *a.value});
  write_container(path, entries);
}

void Supernet::load(const std::string& path) {
  std::size_t matched = 0;
  for (auto& e : read_container(path)) {
    Parameter* target = nullptr;
    if (auto it = weights_.find(e.name); it != weights_.end()) target = &it->second;
    for (auto& a : alphas_)
      if (a.name == e.name) target = &a;
    if (!target) throw FormatError(path + ": unknown parameter '" + e.name + "'");
    if (target->value->shape() != e.value.shape())
      throw FormatError(path + ": parameter '" + e.name + "' has shape " + shape_str(e.value.shape()) +
                        ", expected " + shape_str(target->value->shape()));
    *target->value = std::move(e.value);
    ++matched;
  }
  if (matched != weights_.size() + alphas_.size())
    throw FormatError(path + ": checkpoint covers " + std::to_string(matched) + " of " +
                      std::to_string(weights_.size() + alphas_.size()) + " parameters");
}

json Supernet::alphas_to_json() const {
  json out = json::array();
  for (const auto& e : space_.edges()) {
    json names = json::array();
    for (OpKind k : e.candidates) names.push_back(std::string(op_name(k)));
    out.push_back({{"edge", e.edge_id},
                   {"cell", cell_kind_name(e.cell)},
                   {"ops", names},
                   {"mask", e.mask},
                   {"alpha", alphas_[e.edge_id].value->vec()},
                   {"weight", mixing_weights(e, alphas_[e.edge_id].value->vec())}});
  }
  return out;
}

}  // namespace zonas
