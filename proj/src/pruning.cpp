#include "zonas/pruning.hpp"

#include <cmath>

#include "zonas/error.hpp"
#include "zonas/parallel.hpp"
#include "zonas/rng.hpp"

namespace zonas {

using nlohmann::json;

PruneMode parse_prune_mode(const std::string& s) {
  if (s == "algorithmic") return PruneMode::kAlgorithmic;
  if (s == "random") return PruneMode::kRandom;
  throw ConfigError("unknown prune mode '" + s + "' (expected algorithmic or random)");
}

XiSemantics parse_xi_semantics(const std::string& s) {
  if (s == "architecture_fraction") return XiSemantics::kArchitectureFraction;
  if (s == "operation_keep_probability") return XiSemantics::kOperationKeepProbability;
  throw ConfigError("unknown xi semantics '" + s +
                    "' (expected architecture_fraction or operation_keep_probability)");
}

std::string_view prune_mode_name(PruneMode m) { return m == PruneMode::kAlgorithmic ? "algorithmic" : "random"; }

std::string_view xi_semantics_name(XiSemantics s) {
  return s == XiSemantics::kArchitectureFraction ? "architecture_fraction" : "operation_keep_probability";
}

XiSemantics default_semantics(PruneMode m) {
  return m == PruneMode::kAlgorithmic ? XiSemantics::kArchitectureFraction : XiSemantics::kOperationKeepProbability;
}

void PruneConfig::validate() const {
  if (!(xi > 0.0 && xi < 1.0)) throw ConfigError("xi must lie strictly inside (0, 1), got " + std::to_string(xi));
  if (mode == PruneMode::kRandom && semantics == XiSemantics::kArchitectureFraction)
    throw ConfigError(
        "random masking draws each op with keep probability xi; architecture_fraction semantics only applies to "
        "algorithmic pruning");
}

json PruneConfig::to_json() const {
  return {{"xi", xi},
          {"mode", prune_mode_name(mode)},
          {"semantics", xi_semantics_name(semantics)},
          {"seed", seed}};
}

std::vector<ImportanceRecord> importance_scores(const SearchSpace& space, const std::vector<const Ranker*>& rankers,
                                                std::size_t round, std::size_t workers) {
  std::vector<double> base(rankers.size());
  for (std::size_t r = 0; r < rankers.size(); ++r) {
    base[r] = rankers[r]->score(space);
    if (base[r] == 0.0)
      throw NumericError("importance: ranker '" + rankers[r]->name() + "' scored the space 0 (division by zero)");
  }
  std::vector<ImportanceRecord> records;
  for (const auto& set : space.edges()) {
    if (set.unmasked() < 2) continue;
    for (std::size_t op : set.unmasked_indices()) records.push_back({round, set.edge_id, op, 0.0});
  }
  const std::size_t nr = rankers.size();
  std::vector<double> reduced(records.size() * nr);
  parallel_for(reduced.size(), workers, [&](std::size_t t) {
    const auto& rec = records[t / nr];
    reduced[t] = rankers[t % nr]->score(without_op(space, rec.edge_id, rec.op_index));
  });
  for (std::size_t i = 0; i < records.size(); ++i)
    for (std::size_t r = 0; r < nr; ++r) records[i].score += (base[r] - reduced[i * nr + r]) / base[r];
  return records;
}

namespace {

std::size_t unmasked_total(const SearchSpace& s) {
  std::size_t n = 0;
  for (const auto& set : s.edges()) n += set.unmasked();
  return n;
}

double level(const SearchSpace& current, const SearchSpace& original, XiSemantics semantics) {
  if (semantics == XiSemantics::kArchitectureFraction) return architecture_fraction(current, original);
  return static_cast<double>(unmasked_total(current)) / static_cast<double>(unmasked_total(original));
}

}  // namespace

PruneResult partial_prune(const SearchSpace& space, const std::vector<const Ranker*>& rankers,
                          const PruneConfig& cfg) {
  cfg.validate();
  if (cfg.mode != PruneMode::kAlgorithmic) throw ConfigError("partial_prune runs the algorithmic mode only");
  if (rankers.empty()) throw ConfigError("algorithmic pruning needs at least one ranking function");

  PruneResult result{space, {}};
  double frac = level(space, space, cfg.semantics);
  while (frac > cfg.xi) {
    PruneRound round;
    round.round = result.rounds.size();
    round.fraction_before = frac;
    round.scores = importance_scores(result.space, rankers, round.round, cfg.workers);
    if (round.scores.empty()) break;  // every set is at the floor

    // Records are grouped by edge in ascending op order: strict < keeps the lowest index on ties.
    std::vector<bool> m = result.space.flat_mask();
    for (std::size_t i = 0; i < round.scores.size();) {
      std::size_t best = i, j = i;
      for (; j < round.scores.size() && round.scores[j].edge_id == round.scores[i].edge_id; ++j)
        if (round.scores[j].score < round.scores[best].score) best = j;
      const auto& rec = round.scores[best];
      m[result.space.flat_offset(rec.edge_id) + rec.op_index] = false;
      round.pruned.emplace_back(rec.edge_id, rec.op_index);
      i = j;
    }
    result.space = apply_mask(result.space, m);
    frac = level(result.space, space, cfg.semantics);
    round.fraction_after = frac;
    round.kept_ops_after = kept_op_fraction(result.space);
    result.rounds.push_back(std::move(round));
  }
  return result;
}

SearchSpace random_mask(const SearchSpace& space, double xi, std::uint64_t seed) {
  if (!(xi > 0.0 && xi < 1.0)) throw ConfigError("xi must lie strictly inside (0, 1), got " + std::to_string(xi));
  Rng rng(seed);
  std::vector<bool> m = space.flat_mask();
  for (const auto& set : space.edges()) {
    const auto open = set.unmasked_indices();
    const std::size_t off = space.flat_offset(set.edge_id);
    bool any = false;
    for (std::size_t op : open) {
      m[off + op] = rng.bernoulli(xi);
      any = any || m[off + op];
    }
    if (!any) m[off + open[rng.below(open.size())]] = true;
  }
  return apply_mask(space, m);
}

double expected_kept_fraction(const SearchSpace& space, double xi) {
  double kept = 0.0, total = 0.0;
  for (const auto& set : space.edges()) {
    const double n = static_cast<double>(set.unmasked());
    kept += n * xi + std::pow(1.0 - xi, n);
    total += n;
  }
  return kept / total;
}

json prune_round_to_json(const PruneRound& r) {
  json scores = json::array();
  for (const auto& s : r.scores) scores.push_back({{"edge", s.edge_id}, {"op", s.op_index}, {"score", s.score}});
  json pruned = json::array();
  for (const auto& [e, o] : r.pruned) pruned.push_back({{"edge", e}, {"op", o}});
  return {{"round", r.round},
          {"fraction_before", r.fraction_before},
          {"fraction_after", r.fraction_after},
          {"kept_ops_after", r.kept_ops_after},
          {"scores", scores},
          {"pruned", pruned}};
}

json mask_file_json(const PruneResult& result, const SearchSpace& original, const PruneConfig& cfg,
                    const std::vector<std::string>& ranker_names) {
  json j = mask_to_json(result.space);
  json trajectory = json::array({architecture_fraction(original, original)});
  for (const auto& r : result.rounds) trajectory.push_back(r.fraction_after);
  j["provenance"] = {{"config", cfg.to_json()},
                     {"rankers", ranker_names},
                     {"fractions", trajectory},
                     {"architecture_fraction", architecture_fraction(result.space, original)},
                     {"kept_op_fraction", kept_op_fraction(result.space)}};
  return j;
}

}  // namespace zonas
