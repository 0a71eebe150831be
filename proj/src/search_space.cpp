#include "zonas/search_space.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "zonas/error.hpp"
#include "zonas/rng.hpp"

namespace zonas {

using nlohmann::json;

std::string_view cell_kind_name(CellKind kind) {
  return kind == CellKind::kNormal ? "normal" : "reduction";
}

namespace {

CellKind parse_cell_kind(const std::string& s) {
  if (s == "normal") return CellKind::kNormal;
  if (s == "reduction") return CellKind::kReduction;
  throw FormatError("unknown cell kind '" + s + "'");
}

std::vector<OpKind> parse_ops(const json& j) {
  std::vector<OpKind> ops;
  for (const auto& name : j) {
    auto k = parse_op(name.get<std::string>());
    if (!k) throw ConfigError("unknown operation '" + name.get<std::string>() + "'");
    ops.push_back(*k);
  }
  if (ops.empty()) throw ConfigError("search space needs at least one candidate op");
  return ops;
}

json ops_json(const std::vector<OpKind>& ops) {
  json a = json::array();
  for (OpKind k : ops) a.push_back(std::string(op_name(k)));
  return a;
}

MixingSet make_set(std::size_t id, CellKind cell, std::size_t from, std::size_t to, const std::vector<OpKind>& ops) {
  MixingSet s;
  s.edge_id = id;
  s.cell = cell;
  s.from = from;
  s.to = to;
  s.candidates = ops;
  s.mask.assign(ops.size(), true);
  return s;
}

}  // namespace

std::size_t MixingSet::unmasked() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

std::vector<std::size_t> MixingSet::unmasked_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out.push_back(i);
  return out;
}

SearchSpace SearchSpace::darts(std::size_t steps, std::vector<OpKind> ops) {
  if (steps == 0) throw ConfigError("darts space needs at least one intermediate node");
  if (ops.empty()) throw ConfigError("search space needs at least one candidate op");
  SearchSpace s;
  s.topology_ = Topology::kDarts;
  s.steps_ = steps;
  for (CellKind cell : {CellKind::kNormal, CellKind::kReduction})
    for (std::size_t node = 0; node < steps; ++node)
      for (std::size_t from = 0; from < node + 2; ++from)
        s.edges_.push_back(make_set(s.edges_.size(), cell, from, node + 2, ops));
  return s;
}

SearchSpace SearchSpace::chain(std::size_t edges, std::vector<OpKind> ops) {
  if (edges == 0) throw ConfigError("chain space needs at least one edge");
  if (ops.empty()) throw ConfigError("search space needs at least one candidate op");
  SearchSpace s;
  s.topology_ = Topology::kChain;
  for (std::size_t e = 0; e < edges; ++e) s.edges_.push_back(make_set(e, CellKind::kNormal, e, e + 1, ops));
  return s;
}

SearchSpace SearchSpace::from_json(const json& j) {
  try {
    const std::string topo = j.at("topology").get<std::string>();
    const auto ops = j.contains("ops") ? parse_ops(j.at("ops")) : darts_ops();
    if (topo == "darts") return darts(j.value("steps", std::size_t{4}), ops);
    if (topo == "chain") return chain(j.at("edges").get<std::size_t>(), ops);
    throw ConfigError("unknown topology '" + topo + "' (expected darts or chain)");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("search space definition: ") + e.what());
  }
}

json SearchSpace::to_json() const {
  json j;
  j["topology"] = topology_ == Topology::kDarts ? "darts" : "chain";
  if (topology_ == Topology::kDarts)
    j["steps"] = steps_;
  else
    j["edges"] = edges_.size();
  j["ops"] = ops_json(edges_.front().candidates);
  return j;
}

std::string SearchSpace::digest() const { return digest_hex(to_json().dump()); }

std::vector<std::size_t> SearchSpace::template_edges(CellKind kind) const {
  std::vector<std::size_t> out;
  for (const auto& e : edges_)
    if (e.cell == kind) out.push_back(e.edge_id);
  return out;
}

std::size_t SearchSpace::candidate_count() const {
  std::size_t n = 0;
  for (const auto& e : edges_) n += e.candidates.size();
  return n;
}

std::vector<bool> SearchSpace::flat_mask() const {
  std::vector<bool> m;
  for (const auto& e : edges_) m.insert(m.end(), e.mask.begin(), e.mask.end());
  return m;
}

std::size_t SearchSpace::flat_offset(std::size_t edge_id) const {
  std::size_t off = 0;
  for (std::size_t e = 0; e < edge_id; ++e) off += edges_.at(e).candidates.size();
  return off;
}

bool SearchSpace::same_structure(const SearchSpace& other) const {
  if (topology_ != other.topology_ || steps_ != other.steps_ || edges_.size() != other.edges_.size()) return false;
  for (std::size_t e = 0; e < edges_.size(); ++e) {
    const auto& a = edges_[e];
    const auto& b = other.edges_[e];
    if (a.cell != b.cell || a.from != b.from || a.to != b.to || a.candidates != b.candidates) return false;
  }
  return true;
}

SearchSpace apply_mask(const SearchSpace& space, const std::vector<bool>& mask) {
  if (mask.size() != space.candidate_count())
    throw ContractError("mask length " + std::to_string(mask.size()) + " does not match " +
                        std::to_string(space.candidate_count()) + " candidates");
  SearchSpace out = space;
  std::size_t k = 0;
  for (auto& e : out.edges_) {
    for (std::size_t i = 0; i < e.mask.size(); ++i, ++k) e.mask[i] = e.mask[i] && mask[k];
    if (e.unmasked() == 0)
      throw InvariantError("mask leaves edge " + std::to_string(e.edge_id) + " without an unmasked operation");
  }
  return out;
}

SearchSpace without_op(const SearchSpace& space, std::size_t edge_id, std::size_t op_index) {
  std::vector<bool> m(space.candidate_count(), true);
  m.at(space.flat_offset(edge_id) + op_index) = false;
  return apply_mask(space, m);
}

double architecture_fraction(const SearchSpace& space, const SearchSpace& baseline) {
  if (space.edge_count() != baseline.edge_count())
    throw ContractError("architecture_fraction: spaces have different edge structure");
  // Direct product of per-edge ratios keeps small cases exact (0.75 * 0.75 ==
  // 0.5625); log space takes over only where the product would underflow.
  double frac = 1.0, log_frac = 0.0;
  for (std::size_t e = 0; e < space.edge_count(); ++e) {
    const std::size_t a = space.edge(e).unmasked();
    const std::size_t b = baseline.edge(e).unmasked();
    if (a == 0 || b == 0)
      throw InvariantError("edge " + std::to_string(e) + " has no unmasked operation");
    frac *= static_cast<double>(a) / static_cast<double>(b);
    log_frac += std::log(static_cast<double>(a)) - std::log(static_cast<double>(b));
  }
  return frac > 1e-280 ? frac : std::exp(log_frac);
}

BigInt count_architectures(const SearchSpace& space) {
  BigInt n = 1;
  for (const auto& e : space.edges()) n *= e.unmasked();
  return n;
}

double kept_op_fraction(const SearchSpace& space) {
  std::size_t kept = 0;
  for (const auto& e : space.edges()) kept += e.unmasked();
  return static_cast<double>(kept) / static_cast<double>(space.candidate_count());
}

std::string Genotype::key() const {
  std::string k;
  for (const auto& e : edges) {
    if (!k.empty()) k += '|';
    k += std::to_string(e.edge_id);
    k += ':';
    k += op_name(e.op);
  }
  return k;
}

std::vector<GenotypeEdge> Genotype::of_cell(CellKind kind) const {
  std::vector<GenotypeEdge> out;
  for (const auto& e : edges)
    if (e.cell == kind) out.push_back(e);
  return out;
}

namespace {

struct EdgeChoice {
  std::size_t op_index;
  double strength;  // softmax weight of the chosen op among unmasked entries
};

EdgeChoice choose(const MixingSet& set, const std::vector<double>& alpha) {
  if (alpha.size() != set.candidates.size())
    throw ContractError("edge " + std::to_string(set.edge_id) + ": alpha has " + std::to_string(alpha.size()) +
                        " entries for " + std::to_string(set.candidates.size()) + " candidates");
  std::size_t best = set.candidates.size();
  for (std::size_t i = 0; i < alpha.size(); ++i)
    if (set.mask[i] && (best == set.candidates.size() || alpha[i] > alpha[best])) best = i;
  if (best == set.candidates.size())
    throw InvariantError("edge " + std::to_string(set.edge_id) + " has no unmasked operation");
  double z = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i)
    if (set.mask[i]) z += std::exp(alpha[i] - alpha[best]);
  return {best, 1.0 / z};
}

GenotypeEdge make_edge(const MixingSet& set, std::size_t op_index) {
  return {set.edge_id, set.cell, set.from, set.to, op_index, set.candidates.at(op_index)};
}

}  // namespace

Genotype derive_genotype(const SearchSpace& space, const std::vector<std::vector<double>>& alphas) {
  if (alphas.size() != space.edge_count())
    throw ContractError("derive_genotype: " + std::to_string(alphas.size()) + " alpha vectors for " +
                        std::to_string(space.edge_count()) + " edges");
  std::vector<EdgeChoice> choice;
  for (const auto& set : space.edges()) choice.push_back(choose(set, alphas[set.edge_id]));

  Genotype g;
  if (space.topology() == Topology::kChain) {
    for (const auto& set : space.edges()) g.edges.push_back(make_edge(set, choice[set.edge_id].op_index));
    return g;
  }
  for (CellKind cell : {CellKind::kNormal, CellKind::kReduction}) {
    for (std::size_t node = 2; node < space.steps() + 2; ++node) {
      std::vector<std::size_t> incoming;
      for (std::size_t id : space.template_edges(cell))
        if (space.edge(id).to == node) incoming.push_back(id);
      std::stable_sort(incoming.begin(), incoming.end(),
                       [&](std::size_t a, std::size_t b) { return choice[a].strength > choice[b].strength; });
      incoming.resize(std::min<std::size_t>(2, incoming.size()));
      std::sort(incoming.begin(), incoming.end());
      for (std::size_t id : incoming) g.edges.push_back(make_edge(space.edge(id), choice[id].op_index));
    }
  }
  std::sort(g.edges.begin(), g.edges.end(), [](const auto& a, const auto& b) { return a.edge_id < b.edge_id; });
  return g;
}

Genotype genotype_from_choices(const SearchSpace& space, const std::vector<std::size_t>& choices) {
  if (choices.size() != space.edge_count()) throw ContractError("genotype_from_choices: one choice per edge required");
  Genotype g;
  for (const auto& set : space.edges()) g.edges.push_back(make_edge(set, choices[set.edge_id]));
  return g;
}

void for_each_architecture(const SearchSpace& space,
                           const std::function<void(const std::vector<std::size_t>&)>& fn) {
  std::vector<std::vector<std::size_t>> options;
  for (const auto& set : space.edges()) options.push_back(set.unmasked_indices());
  std::vector<std::size_t> pos(options.size(), 0), choice(options.size());
  while (true) {
    for (std::size_t e = 0; e < options.size(); ++e) choice[e] = options[e][pos[e]];
    fn(choice);
    std::size_t e = options.size();
    while (e > 0 && ++pos[e - 1] == options[e - 1].size()) pos[--e] = 0;
    if (e == 0) return;
  }
}

SearchSpace restrict_to(const SearchSpace& space, const Genotype& g) {
  std::vector<bool> m(space.candidate_count(), false);
  std::vector<bool> covered(space.edge_count(), false);
  for (const auto& e : g.edges) {
    m.at(space.flat_offset(e.edge_id) + e.op_index) = true;
    covered.at(e.edge_id) = true;
  }
  for (const auto& set : space.edges()) {
    if (covered[set.edge_id]) continue;
    auto it = std::find(set.candidates.begin(), set.candidates.end(), OpKind::kZero);
    if (it == set.candidates.end())
      throw ContractError("edge " + std::to_string(set.edge_id) + " is dropped but has no zero candidate");
    m[space.flat_offset(set.edge_id) + static_cast<std::size_t>(it - set.candidates.begin())] = true;
  }
  return apply_mask(space, m);
}

json mask_to_json(const SearchSpace& space) {
  json entries = json::array();
  for (const auto& set : space.edges())
    for (std::size_t i = 0; i < set.candidates.size(); ++i)
      entries.push_back({{"edge", set.edge_id}, {"op", i}, {"name", op_name(set.candidates[i])}, {"kept", bool(set.mask[i])}});
  return {{"space_digest", space.digest()}, {"entries", entries}};
}

std::vector<bool> mask_from_json(const SearchSpace& space, const json& j) {
  try {
    const auto digest = j.at("space_digest").get<std::string>();
    if (digest != space.digest())
      throw ConfigError("mask was built for space " + digest + ", current space is " + space.digest());
    std::vector<bool> m(space.candidate_count(), true);
    std::vector<bool> seen(m.size(), false);
    for (const auto& e : j.at("entries")) {
      const auto edge = e.at("edge").get<std::size_t>();
      const auto op = e.at("op").get<std::size_t>();
      if (edge >= space.edge_count() || op >= space.edge(edge).candidates.size())
        throw FormatError("mask entry (" + std::to_string(edge) + ", " + std::to_string(op) + ") out of range");
      const std::size_t k = space.flat_offset(edge) + op;
      m[k] = e.at("kept").get<bool>();
      seen[k] = true;
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end()) throw FormatError("mask file does not cover every candidate");
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("mask file: ") + e.what());
  }
}

json genotype_to_json(const Genotype& g, const SearchSpace& space, const std::string& config_digest) {
  json edges = json::array();
  for (const auto& e : g.edges)
    edges.push_back({{"edge", e.edge_id},
                     {"cell", cell_kind_name(e.cell)},
                     {"from", e.from},
                     {"to", e.to},
                     {"op_index", e.op_index},
                     {"op", op_name(e.op)}});
  return {{"key", g.key()}, {"edges", edges}, {"space", space.to_json()}, {"mask", mask_to_json(space)},
          {"config_digest", config_digest}};
}

Genotype genotype_from_json(const json& j) {
  try {
    Genotype g;
    for (const auto& e : j.at("edges")) {
      auto op = parse_op(e.at("op").get<std::string>());
      if (!op) throw FormatError("genotype names unknown op '" + e.at("op").get<std::string>() + "'");
      g.edges.push_back({e.at("edge").get<std::size_t>(), parse_cell_kind(e.at("cell").get<std::string>()),
                         e.at("from").get<std::size_t>(), e.at("to").get<std::size_t>(),
                         e.at("op_index").get<std::size_t>(), *op});
    }
    return g;
  } catch (const json::exception& e) {
    throw FormatError(std::string("genotype file: ") + e.what());
  }
}

}  // namespace zonas
