#include "zonas/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "zonas/error.hpp"
#include "zonas/parallel.hpp"
#include "zonas/rng.hpp"

namespace zonas {

using nlohmann::json;

std::vector<Genotype> enumerate_space(const SearchSpace& space, std::size_t cap) {
  const BigInt count = count_architectures(space);
  if (count > cap)
    throw ConfigError("space has " + count.str() + " architectures, above the enumeration cap of " +
                      std::to_string(cap));
  std::vector<Genotype> out;
  out.reserve(static_cast<std::size_t>(count));
  for_each_architecture(space, [&](const std::vector<std::size_t>& c) { out.push_back(genotype_from_choices(space, c)); });
  return out;
}

json FitnessBudget::to_json() const {
  return {{"epochs", epochs}, {"train_fraction", train_fraction}, {"eval_batch", eval_batch},
          {"schedule", schedule.to_json()}};
}

FitnessBudget FitnessBudget::from_json(const json& j) {
  FitnessBudget b;
  try {
    b.epochs = j.value("epochs", b.epochs);
    b.train_fraction = j.value("train_fraction", b.train_fraction);
    b.eval_batch = j.value("eval_batch", b.eval_batch);
    if (j.contains("schedule")) b.schedule = SearchSchedule::from_json(j.at("schedule"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("fitness budget: ") + e.what());
  }
  if (b.epochs == 0 || b.eval_batch == 0) throw ConfigError("fitness budget needs epochs >= 1 and eval_batch >= 1");
  if (!(b.train_fraction > 0.0 && b.train_fraction < 1.0))
    throw ConfigError("fitness budget train_fraction must lie in (0, 1)");
  return b;
}

std::vector<std::pair<std::string, double>> FitnessTable::ranked() const {
  std::vector<std::pair<std::string, double>> r(fitness.begin(), fitness.end());
  std::stable_sort(r.begin(), r.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return r;
}

json FitnessTable::to_json() const {
  json j = fitness_map_to_json(fitness);
  json f = json::object();
  for (const auto& [k, msg] : failures) f[k] = msg;
  j["failures"] = f;
  j["provenance"] = provenance;
  return j;
}

FitnessTable FitnessTable::from_json(const json& j) {
  FitnessTable t;
  t.fitness = fitness_map_from_json(j);
  try {
    if (j.contains("failures"))
      for (const auto& [k, v] : j.at("failures").items()) t.failures[k] = v.get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("fitness table failures: ") + e.what());
  }
  t.provenance = j.value("provenance", json::object());
  return t;
}

FitnessTable build_fitness_table(const SearchSpace& space, const SupernetConfig& cfg, const Dataset& data,
                                 const FitnessBudget& budget, std::uint64_t seed, std::size_t workers,
                                 std::size_t cap) {
  budget.schedule.validate();
  data.validate();
  const auto genotypes = enumerate_space(space, cap);
  const auto split = split_and_batch(data, {.weight_fraction = budget.train_fraction,
                                            .seed = derive_seed(seed, "oracle split"),
                                            .batch_size = budget.schedule.batch_size});
  const auto& train = split.weight.indices();
  const auto& val = split.alpha.indices();
  SupernetConfig net_cfg = cfg;
  net_cfg.seed = derive_seed(seed, "oracle init");
  const std::uint64_t order_seed = derive_seed(seed, "oracle order");

  std::vector<double> acc(genotypes.size(), 0.0);
  std::vector<std::string> err(genotypes.size());
  parallel_for(genotypes.size(), workers, [&](std::size_t i) {
    try {
      Supernet net(restrict_to(space, genotypes[i]), net_cfg);
      train_weights(net, data, train, budget.schedule, budget.epochs, order_seed);
      acc[i] = evaluate(net, data, val, budget.eval_batch).accuracy;
      if (!std::isfinite(acc[i])) throw NumericError("non-finite validation accuracy");
    } catch (const Error& e) {
      err[i] = e.what();
    }
  });

  FitnessTable t;
  for (std::size_t i = 0; i < genotypes.size(); ++i) {
    const std::string key = genotypes[i].key();
    if (err[i].empty())
      t.fitness[key] = acc[i];
    else
      t.failures[key] = err[i];
  }
  t.provenance = {{"seed", seed},
                  {"budget", budget.to_json()},
                  {"network", net_cfg.to_json()},
                  {"space", space.to_json()},
                  {"mask", mask_to_json(space)},
                  {"architectures", genotypes.size()},
                  {"train_points", train.size()},
                  {"val_points", val.size()}};
  return t;
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw ContractError("quantile of an empty set");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

QuantileSummary QuantileSummary::of(const std::vector<double>& v) {
  return {quantile(v, 0.1), quantile(v, 0.25), quantile(v, 0.5), quantile(v, 0.75), quantile(v, 0.9),
          quantile(v, 1.0)};
}

json QuantileSummary::to_json() const {
  return {{"p10", p10}, {"p25", p25}, {"median", median}, {"p75", p75}, {"p90", p90}, {"max", max}};
}

std::vector<std::string> top_q_keys(const FitnessTable& table, double top_q) {
  if (!(top_q > 0.0 && top_q <= 1.0)) throw ConfigError("top_q must lie in (0, 1]");
  const auto r = table.ranked();
  if (r.empty()) throw ContractError("empty fitness table");
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(top_q * static_cast<double>(r.size()))));
  const double threshold = r[std::min(n, r.size()) - 1].second;
  std::vector<std::string> keys;
  for (const auto& [k, f] : r)
    if (f >= threshold) keys.push_back(k);
  return keys;
}

double random_survival_probability(const SearchSpace& space, const std::vector<std::vector<std::size_t>>& targets,
                                   double xi, std::size_t max_states) {
  if (!(xi > 0.0 && xi < 1.0)) throw ConfigError("xi must lie strictly inside (0, 1)");
  // Per edge: every non-empty subset of the open ops with its probability
  // under independent keeps plus the uniform floor repair.
  struct Outcome {
    std::vector<bool> kept;
    double p;
  };
  std::vector<std::vector<Outcome>> per_edge;
  double states = 1.0;
  for (const auto& set : space.edges()) {
    const auto open = set.unmasked_indices();
    const std::size_t n = open.size();
    states *= std::ldexp(1.0, static_cast<int>(n)) - 1.0;
    if (states > static_cast<double>(max_states))
      throw ConfigError("closed-form survival needs too many mask states; use sampling");
    std::vector<Outcome> outs;
    for (std::size_t bits = 1; bits < (std::size_t{1} << n); ++bits) {
      Outcome o{std::vector<bool>(set.candidates.size(), false), 1.0};
      std::size_t k = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const bool in = (bits >> i) & 1u;
        o.kept[open[i]] = in;
        o.p *= in ? xi : 1.0 - xi;
        k += in;
      }
      if (k == 1) o.p += std::pow(1.0 - xi, static_cast<double>(n)) / static_cast<double>(n);
      outs.push_back(std::move(o));
    }
    per_edge.push_back(std::move(outs));
  }

  // Depth-first over edges, carrying the targets still alive.
  std::vector<std::size_t> all(targets.size());
  std::iota(all.begin(), all.end(), 0);
  auto rec = [&](auto& self, std::size_t e, const std::vector<std::size_t>& alive, double p) -> double {
    if (alive.empty()) return 0.0;
    if (e == per_edge.size()) return p;
    double sum = 0.0;
    std::vector<std::size_t> next;
    for (const auto& o : per_edge[e]) {
      next.clear();
      for (std::size_t t : alive)
        if (o.kept[targets[t][e]]) next.push_back(t);
      sum += self(self, e + 1, next, p * o.p);
    }
    return sum;
  };
  return rec(rec, 0, all, 1.0);
}

namespace {

// Same structure with the shared candidate list reordered; masks follow ops.
SearchSpace shuffled_ops(const SearchSpace& space, std::uint64_t seed) {
  const auto& ops = space.edge(0).candidates;
  std::vector<std::size_t> perm(ops.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, "op order"));
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  json j = space.to_json();
  json names = json::array();
  for (std::size_t i : perm) names.push_back(std::string(op_name(ops[i])));
  j["ops"] = names;
  const SearchSpace fresh = SearchSpace::from_json(j);
  std::vector<bool> mask;
  for (const auto& set : space.edges())
    for (std::size_t i : perm) mask.push_back(set.mask[i]);
  return apply_mask(fresh, mask);
}

std::vector<double> histogram(const std::vector<double>& values, const std::vector<double>& edges) {
  const std::size_t bins = edges.size() - 1;
  std::vector<double> h(bins, 0.0);
  for (double v : values) {
    std::size_t b = 0;
    while (b + 1 < bins && v >= edges[b + 1]) ++b;
    h[b] += 1.0;
  }
  for (double& x : h) x /= static_cast<double>(values.size());
  return h;
}

struct RunOutcome {
  bool top_survived = false;
  bool top1_survived = false;
  double surviving_max = 0.0;
  std::vector<double> fitness;
};

}  // namespace

SurvivalReport survival_study(const FitnessTable& table, const SearchSpace& space,
                              const std::vector<SurvivalMethod>& methods, double top_q, std::size_t bins,
                              std::size_t workers) {
  if (bins == 0) throw ConfigError("histogram needs at least one bin");
  std::vector<double> before;
  std::size_t missing = 0;
  std::string first_missing;
  for_each_architecture(space, [&](const std::vector<std::size_t>& c) {
    const std::string key = genotype_from_choices(space, c).key();
    const auto it = table.fitness.find(key);
    if (it == table.fitness.end()) {
      if (missing++ == 0) first_missing = key;
    } else {
      before.push_back(it->second);
    }
  });
  if (missing > 0)
    throw ContractError("fitness table misses " + std::to_string(missing) + " architectures of the space, e.g. " +
                        first_missing);

  SurvivalReport rep;
  rep.top_q = top_q;
  rep.top_keys = top_q_keys(table, top_q);
  rep.top1_key = table.ranked().front().first;
  rep.threshold = table.fitness.at(rep.top_keys.back());
  const std::set<std::string> top(rep.top_keys.begin(), rep.top_keys.end());
  rep.before = QuantileSummary::of(before);
  for (std::size_t b = 0; b <= bins; ++b) rep.bin_edges.push_back(static_cast<double>(b) / static_cast<double>(bins));
  rep.histogram_before = histogram(before, rep.bin_edges);

  const auto ranker = make_tabular_ranker(table.fitness, Aggregate::kMax);
  const std::vector<const Ranker*> rankers{ranker.get()};

  for (const auto& m : methods) {
    m.prune.validate();
    if (m.seeds.empty()) throw ConfigError("survival method '" + m.name + "' has no seeds");
    std::vector<RunOutcome> runs(m.seeds.size());
    parallel_for(runs.size(), workers, [&](std::size_t i) {
      SearchSpace pruned;
      if (m.prune.mode == PruneMode::kRandom) {
        pruned = random_mask(space, m.prune.xi, m.seeds[i]);
      } else {
        PruneConfig cfg = m.prune;
        cfg.seed = m.seeds[i];
        cfg.workers = 1;
        pruned = partial_prune(shuffled_ops(space, m.seeds[i]), rankers, cfg).space;
      }
      RunOutcome& out = runs[i];
      for_each_architecture(pruned, [&](const std::vector<std::size_t>& c) {
        const std::string key = genotype_from_choices(pruned, c).key();
        const double f = table.fitness.at(key);
        out.fitness.push_back(f);
        out.top_survived = out.top_survived || top.count(key) > 0;
        out.top1_survived = out.top1_survived || key == rep.top1_key;
      });
      out.surviving_max = *std::max_element(out.fitness.begin(), out.fitness.end());
    });

    MethodSurvival s;
    s.name = m.name;
    s.prune = m.prune;
    s.runs = runs.size();
    std::vector<double> medians;
    s.histogram.assign(bins, 0.0);
    double top1 = 0.0;
    for (const auto& r : runs) {
      s.survived += r.top_survived;
      top1 += r.top1_survived;
      s.mean_surviving_max += r.surviving_max;
      s.mean_survivors += static_cast<double>(r.fitness.size());
      const auto q = QuantileSummary::of(r.fitness);
      medians.push_back(q.median);
      s.after.p10 += q.p10;
      s.after.p25 += q.p25;
      s.after.median += q.median;
      s.after.p75 += q.p75;
      s.after.p90 += q.p90;
      s.after.max += q.max;
      const auto h = histogram(r.fitness, rep.bin_edges);
      for (std::size_t b = 0; b < bins; ++b) s.histogram[b] += h[b];
    }
    const double n = static_cast<double>(runs.size());
    s.probability = static_cast<double>(s.survived) / n;
    s.top1_probability = top1 / n;
    s.mean_surviving_max /= n;
    s.mean_survivors /= n;
    for (double* f : {&s.after.p10, &s.after.p25, &s.after.median, &s.after.p75, &s.after.p90, &s.after.max}) *f /= n;
    for (double& x : s.histogram) x /= n;
    s.median_shift = std::abs(s.after.median - rep.before.median);
    double var = 0.0;
    for (double md : medians) var += (md - s.after.median) * (md - s.after.median);
    s.median_std = runs.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;

    if (m.prune.mode == PruneMode::kRandom) {
      std::vector<std::vector<std::size_t>> targets;
      for_each_architecture(space, [&](const std::vector<std::size_t>& c) {
        if (top.count(genotype_from_choices(space, c).key())) targets.push_back(c);
      });
      s.closed_form = random_survival_probability(space, targets, m.prune.xi);
    }
    rep.methods.push_back(std::move(s));
  }
  return rep;
}

json SurvivalReport::to_json() const {
  json methods_j = json::array();
  for (const auto& m : methods) {
    json j = {{"name", m.name},
              {"prune", m.prune.to_json()},
              {"runs", m.runs},
              {"survived", m.survived},
              {"probability", m.probability},
              {"closed_form", m.closed_form ? json(*m.closed_form) : json(nullptr)},
              {"top1_probability", m.top1_probability},
              {"mean_surviving_max", m.mean_surviving_max},
              {"mean_survivors", m.mean_survivors},
              {"after", m.after.to_json()},
              {"median_shift", m.median_shift},
              {"median_std", m.median_std}};
    methods_j.push_back(j);
  }
  return {{"top_q", top_q},       {"threshold", threshold}, {"top_keys", top_keys}, {"top1", top1_key},
          {"before", before.to_json()}, {"methods", methods_j}};
}

std::string SurvivalReport::histogram_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "bin_lo,bin_hi,before";
  for (const auto& m : methods) os << ',' << m.name;
  os << '\n';
  for (std::size_t b = 0; b + 1 < bin_edges.size(); ++b) {
    os << bin_edges[b] << ',' << bin_edges[b + 1] << ',' << histogram_before[b];
    for (const auto& m : methods) os << ',' << m.histogram[b];
    os << '\n';
  }
  return os.str();
}

}  // namespace zonas
