#include <cmath>
#include <set>

#include "doctest.h"
#include "zonas/error.hpp"
#include "zonas/oracle.hpp"
#include "zonas/parallel.hpp"
#include "zonas/rng.hpp"

using namespace zonas;

namespace {

SearchSpace toy_space() {
  return SearchSpace::chain(3, {OpKind::kZero, OpKind::kMaxPool3, OpKind::kAvgPool3, OpKind::kIdentity});
}

// Table from a closure over per-edge op indices.
template <class F>
FitnessTable synthetic_table(const SearchSpace& space, F f) {
  FitnessTable t;
  for_each_architecture(space, [&](const std::vector<std::size_t>& c) {
    t.fitness[genotype_from_choices(space, c).key()] = f(c);
  });
  return t;
}

std::vector<std::uint64_t> seeds(std::size_t n, std::uint64_t first = 0) {
  std::vector<std::uint64_t> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = first + i;
  return s;
}

PruneConfig random_cfg(double xi) {
  PruneConfig c;
  c.xi = xi;
  c.mode = PruneMode::kRandom;
  c.semantics = XiSemantics::kOperationKeepProbability;
  return c;
}

// Skewed toward high fitness: most architectures are good, a few are bad.
FitnessTable skewed_table(const SearchSpace& space) {
  Rng rng(21);
  return synthetic_table(space, [&](const std::vector<std::size_t>& c) {
    double f = 0.9 + 0.02 * static_cast<double>(c[0] + c[1] + c[2]) / 9.0;
    f -= 0.3 * std::pow(rng.uniform(0.0, 1.0), 6.0);
    return f;
  });
}

}  // namespace

TEST_CASE("enumeration") {
  const auto space = toy_space();
  const auto all = enumerate_space(space);
  CHECK(all.size() == 64);
  std::set<std::string> keys;
  for (const auto& g : all) keys.insert(g.key());
  CHECK(keys.size() == 64);
  CHECK(all.front().key() == "0:none|1:none|2:none");
  CHECK(all.back().key() == "0:skip_connect|1:skip_connect|2:skip_connect");

  const auto masked = without_op(without_op(space, 0, 0), 2, 3);
  const auto some = enumerate_space(masked);
  CHECK(some.size() == 36);
  for (const auto& g : some) {
    CHECK(g.edges[0].op != OpKind::kZero);
    CHECK(g.edges[2].op != OpKind::kIdentity);
  }

  try {
    enumerate_space(SearchSpace::chain(7, darts_ops()));
    FAIL("expected refusal");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("2097152") != std::string::npos);
  }
  CHECK(enumerate_space(space, 64).size() == 64);
  CHECK_THROWS_AS(enumerate_space(space, 63), ConfigError);
}

TEST_CASE("quantiles and top-q sets") {
  CHECK(quantile({3.0, 1.0, 2.0}, 0.5) == 2.0);
  CHECK(quantile({0.0, 10.0}, 0.9) == doctest::Approx(9.0));
  CHECK(quantile({4.0}, 0.1) == 4.0);
  CHECK_THROWS_AS(quantile({}, 0.5), ContractError);

  FitnessTable t;
  for (int i = 0; i < 40; ++i) t.fitness["a" + std::to_string(i)] = i / 40.0;
  CHECK(top_q_keys(t, 0.05).size() == 2);
  t.fitness["a37"] = 38 / 40.0;  // tie with the second best
  CHECK(top_q_keys(t, 0.05).size() == 3);
  CHECK(top_q_keys(t, 0.001).size() == 1);
  CHECK_THROWS_AS(top_q_keys(t, 0.0), ConfigError);
}

TEST_CASE("closed-form random survival") {
  const auto space = toy_space();
  const double xi = 0.5;
  const double keep_one = xi + std::pow(1.0 - xi, 4) / 4.0;  // 0.515625
  const std::vector<std::size_t> g{3, 1, 2};
  CHECK(std::pow(xi, 3) == 0.125);  // before the floor repair
  CHECK(random_survival_probability(space, {g}, xi) == doctest::Approx(std::pow(keep_one, 3)).epsilon(1e-12));

  // Two targets that differ on edge 1 only: P(neither op kept there) =
  // (1-xi)^2 * [1 - (1-xi)^2 + (1-xi)^2 * 2/4].
  const double neither = 0.25 * (1.0 - 0.25 + 0.25 * 0.5);
  CHECK(random_survival_probability(space, {g, {3, 0, 2}}, xi) ==
        doctest::Approx(keep_one * keep_one * (1.0 - neither)).epsilon(1e-12));
  CHECK(random_survival_probability(space, {}, xi) == 0.0);

  // Monte-Carlo over 10^4 masks.
  int hits = 0;
  for (std::uint64_t s = 0; s < 10000; ++s) {
    const auto m = random_mask(space, xi, s);
    hits += m.edge(0).mask[3] && m.edge(1).mask[1] && m.edge(2).mask[2];
  }
  const double freq = hits / 10000.0;
  MESSAGE("empirical " << freq << ", closed form " << std::pow(keep_one, 3));
  CHECK(std::abs(freq - std::pow(keep_one, 3)) <= 0.02);
  CHECK(std::abs(freq - 0.125) <= 0.02);

  CHECK_THROWS_AS(random_survival_probability(SearchSpace::darts(), {}, xi), ConfigError);
}

TEST_CASE("survival study on synthetic tables") {
  const auto space = toy_space();
  // Edge-unique optimum: skip_connect everywhere, strictly best.
  const auto table = synthetic_table(space, [](const std::vector<std::size_t>& c) {
    return 0.5 + 0.1 * static_cast<double>(c[0] + c[1] + c[2]) / 9.0 + (c == std::vector<std::size_t>{3, 3, 3} ? 0.3 : 0.0);
  });
  PruneConfig alg;
  alg.xi = 0.5;
  const auto rep = survival_study(table, space,
                                  {{"algorithmic", alg, seeds(100)},
                                   {"random", random_cfg(0.5), seeds(100)},
                                   {"keep_all", random_cfg(1.0 - 1e-12), seeds(20)}},
                                  0.05, 10, 2);
  CHECK(rep.top1_key == "0:skip_connect|1:skip_connect|2:skip_connect");
  CHECK(rep.top_keys.size() == 4);
  const auto& a = rep.methods[0];
  const auto& r = rep.methods[1];
  const auto& k = rep.methods[2];
  CHECK(a.top1_probability == 1.0);
  CHECK(a.probability == 1.0);
  CHECK_FALSE(a.closed_form.has_value());
  CHECK(k.probability == 1.0);
  CHECK(*k.closed_form == doctest::Approx(1.0));
  CHECK(k.mean_survivors == 64.0);
  CHECK(k.median_shift == doctest::Approx(0.0));
  // Exact-fitness pruning never loses to random pruning on the surviving maximum.
  CHECK(a.mean_surviving_max >= r.mean_surviving_max);
  for (const auto& m : rep.methods) {
    CHECK(m.probability >= 0.0);
    CHECK(m.probability <= 1.0);
    double mass = 0.0;
    for (double h : m.histogram) mass += h;
    CHECK(mass == doctest::Approx(1.0));
  }
  const std::string csv = rep.histogram_csv();
  CHECK(csv.rfind("bin_lo,bin_hi,before,algorithmic,random,keep_all\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 11);
  const auto j = rep.to_json();
  CHECK(j["methods"].size() == 3);
  CHECK(j["methods"][1]["closed_form"].is_number());
}

TEST_CASE("random pruning barely moves a high-skewed distribution") {
  const auto space = toy_space();
  const auto rep = survival_study(skewed_table(space), space, {{"random", random_cfg(0.5), seeds(200)}});
  const auto& r = rep.methods[0];
  MESSAGE("median before " << rep.before.median << ", after " << r.after.median << ", inter-seed std "
                           << r.median_std);
  CHECK(r.median_shift < r.median_std);
  CHECK(std::abs(r.after.p90 - rep.before.p90) < 0.05);
}

TEST_CASE("algorithmic pruning beats random on the surviving maximum for any table") {
  const auto space = toy_space();
  for (std::uint64_t t = 0; t < 5; ++t) {
    Rng rng(t);
    const auto table = synthetic_table(space, [&](const std::vector<std::size_t>&) { return rng.uniform(0.0, 1.0); });
    PruneConfig alg;
    alg.xi = 0.5;
    const auto rep = survival_study(table, space, {{"alg", alg, seeds(100)}, {"rnd", random_cfg(0.5), seeds(100)}});
    CHECK(rep.methods[0].mean_surviving_max >= rep.methods[1].mean_surviving_max);
    CHECK(rep.methods[0].top1_probability == 1.0);
  }
}

TEST_CASE("survival study needs a covering table") {
  const auto space = toy_space();
  auto table = synthetic_table(space, [](const std::vector<std::size_t>&) { return 0.5; });
  table.fitness.erase("0:none|1:none|2:none");
  CHECK_THROWS_AS(survival_study(table, space, {}), ContractError);
  // A masked space only needs its own architectures.
  CHECK_NOTHROW(survival_study(table, without_op(space, 0, 0), {}));
}

TEST_CASE("fitness tables: determinism, failures, serialization") {
  PlantedTask t = planted_task();
  t.data.count = 128;
  const auto ds = planted_generate(t.data);
  const auto space = without_op(without_op(t.space, 0, 0), 1, 0);  // 36 architectures
  const auto sub = without_op(without_op(space, 2, 0), 2, 1);      // 18
  FitnessBudget budget;
  budget.epochs = 1;
  budget.schedule.batch_size = 32;
  const auto a = build_fitness_table(sub, t.net, ds, budget, 3, 2);
  const auto b = build_fitness_table(sub, t.net, ds, budget, 3, 1);
  CHECK(a.fitness.size() == 18);
  CHECK(a.failures.empty());
  CHECK(a.to_json().dump() == b.to_json().dump());
  for (const auto& [k, f] : a.fitness) {
    CHECK(f >= 0.0);
    CHECK(f <= 1.0);
  }
  CHECK(a.provenance["seed"] == 3);
  CHECK(a.provenance["budget"]["epochs"] == 1);

  const auto back = FitnessTable::from_json(nlohmann::json::parse(a.to_json().dump()));
  CHECK(back.fitness == a.fitness);
  CHECK(back.provenance == a.provenance);
  CHECK_THROWS_AS(FitnessTable::from_json({{"fitness", {{"x", "high"}}}}), FormatError);

  // Diverging training is recorded per architecture, not thrown.
  budget.schedule.w_lr = 1e300;
  budget.schedule.grad_clip = 1e300;
  const auto bad = build_fitness_table(sub, t.net, ds, budget, 3, 1);
  CHECK(bad.fitness.size() + bad.failures.size() == 18);
  CHECK_FALSE(bad.failures.empty());
}

TEST_CASE("planted fitness table has the planted optimum as its unique argmax") {
  const PlantedTask t = planted_task();
  PlantedSpec spec = t.data;
  spec.seed = 1;
  FitnessBudget budget;
  budget.schedule.batch_size = t.schedule.batch_size;
  const auto table = build_fitness_table(t.space, t.net, planted_generate(spec), budget, 11, default_workers());
  REQUIRE(table.fitness.size() == 64);
  const auto r = table.ranked();
  MESSAGE("best " << r[0].first << " " << r[0].second << ", runner-up " << r[1].first << " " << r[1].second);
  CHECK(r[0].first == t.optimum().key());
  CHECK(r[0].second > r[1].second);
}
