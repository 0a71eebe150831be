#include <cmath>

#include "doctest.h"
#include "zonas/error.hpp"
#include "zonas/rng.hpp"
#include "zonas/search_space.hpp"

using namespace zonas;

namespace {

std::vector<OpKind> four_ops() {
  return {OpKind::kZero, OpKind::kMaxPool3, OpKind::kAvgPool3, OpKind::kIdentity};
}

std::vector<bool> random_mask(const SearchSpace& s, Rng& rng) {
  std::vector<bool> m;
  for (const auto& e : s.edges()) {
    std::vector<bool> em(e.candidates.size());
    for (std::size_t i = 0; i < em.size(); ++i) em[i] = rng.bernoulli(0.5);
    em[rng.below(em.size())] = true;
    m.insert(m.end(), em.begin(), em.end());
  }
  return m;
}

}  // namespace

TEST_CASE("darts space has 14 edges per template and 8 candidates per edge") {
  const auto s = SearchSpace::darts();
  CHECK(s.edge_count() == 28);
  CHECK(s.template_edges(CellKind::kNormal).size() == 14);
  CHECK(s.template_edges(CellKind::kReduction).size() == 14);
  for (const auto& e : s.edges()) {
    CHECK(e.candidates.size() == 8);
    CHECK(e.from < e.to);
  }
}

TEST_CASE("architecture fraction") {
  const auto s = SearchSpace::chain(2, four_ops());
  CHECK(architecture_fraction(s, s) == 1.0);

  auto m = s.flat_mask();
  m[0] = false;
  m[4] = false;
  CHECK(architecture_fraction(apply_mask(s, m), s) == doctest::Approx(0.5625).epsilon(1e-15));

  const auto d = SearchSpace::darts();
  auto dm = d.flat_mask();
  for (std::size_t e = 0; e < d.edge_count(); ++e) dm[d.flat_offset(e)] = false;
  const double expect = std::pow(7.0 / 8.0, 28);
  CHECK(architecture_fraction(apply_mask(d, dm), d) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(expect == doctest::Approx(0.0236).epsilon(0.01));
}

TEST_CASE("architecture counts are exact") {
  CHECK(count_architectures(SearchSpace::chain(3, four_ops())) == 64);
  const BigInt darts = count_architectures(SearchSpace::darts());
  CHECK(darts == boost::multiprecision::pow(BigInt(8), 28));
  CHECK(darts >= boost::multiprecision::pow(BigInt(10), 18));

  const auto s = SearchSpace::chain(3, four_ops());
  std::vector<bool> m(s.candidate_count(), true);
  m[0] = m[1] = m[2] = false;
  CHECK(count_architectures(apply_mask(s, m)) == 16);
}

TEST_CASE("apply_mask") {
  const auto s = SearchSpace::chain(3, four_ops());
  const auto all = apply_mask(s, std::vector<bool>(s.candidate_count(), true));
  CHECK(all.flat_mask() == s.flat_mask());

  const auto hidden = without_op(s, 1, 2);
  CHECK(count_architectures(hidden) * 4 == count_architectures(s) * 3);
  CHECK(s.edge(1).unmasked() == 4);  // original untouched

  std::vector<bool> bad(s.candidate_count(), true);
  for (std::size_t i = 0; i < 4; ++i) bad[i] = false;
  try {
    apply_mask(s, bad);
    FAIL("expected an invariant error");
  } catch (const InvariantError& e) {
    CHECK(std::string(e.what()).find("edge 0") != std::string::npos);
  }
  CHECK_THROWS_AS(apply_mask(s, std::vector<bool>(3, true)), ContractError);
}

TEST_CASE("fraction equals the exact count ratio under random masks") {
  const auto s = SearchSpace::chain(6, four_ops());
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto masked = apply_mask(s, random_mask(s, rng));
    const double exact = static_cast<double>(count_architectures(masked)) / static_cast<double>(count_architectures(s));
    CHECK(architecture_fraction(masked, s) == doctest::Approx(exact).epsilon(1e-12));
  }
}

TEST_CASE("apply_mask is idempotent and composes by conjunction") {
  const auto s = SearchSpace::chain(5, four_ops());
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_mask(s, rng);
    const auto b = random_mask(s, rng);
    const auto once = apply_mask(s, a);
    CHECK(apply_mask(once, a).flat_mask() == once.flat_mask());

    std::vector<bool> both(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) both[i] = a[i] && b[i];
    bool valid = true;
    for (const auto& e : s.edges()) {
      bool any = false;
      for (std::size_t i = 0; i < e.candidates.size(); ++i) any = any || both[s.flat_offset(e.edge_id) + i];
      valid = valid && any;
    }
    if (!valid) continue;
    CHECK(apply_mask(apply_mask(s, a), b).flat_mask() == apply_mask(s, both).flat_mask());
    CHECK(apply_mask(apply_mask(s, b), a).flat_mask() == apply_mask(s, both).flat_mask());
  }
}

TEST_CASE("genotype argmax respects the mask and breaks ties low") {
  auto s = SearchSpace::chain(1, {OpKind::kZero, OpKind::kIdentity, OpKind::kAvgPool3});
  CHECK(derive_genotype(s, {{1, 2, 3}}).edges[0].op_index == 2);
  CHECK(derive_genotype(apply_mask(s, {true, false, true}), {{1, 2, 3}}).edges[0].op_index == 2);
  CHECK(derive_genotype(apply_mask(s, {true, true, false}), {{1, 2, 3}}).edges[0].op_index == 1);

  auto two = SearchSpace::chain(1, {OpKind::kZero, OpKind::kIdentity});
  CHECK(derive_genotype(two, {{5, 5}}).edges[0].op_index == 0);
}

TEST_CASE("genotype never selects a masked op") {
  const auto d = SearchSpace::darts();
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const auto masked = apply_mask(d, random_mask(d, rng));
    std::vector<std::vector<double>> alphas(d.edge_count(), std::vector<double>(8));
    for (auto& a : alphas)
      for (auto& v : a) v = rng.normal();
    const auto g = derive_genotype(masked, alphas);
    for (const auto& e : g.edges) CHECK(masked.edge(e.edge_id).mask[e.op_index]);
  }
}

TEST_CASE("darts genotype keeps two incoming edges per node") {
  const auto d = SearchSpace::darts();
  std::vector<std::vector<double>> alphas(d.edge_count(), std::vector<double>(8, 0.0));
  // Node 5 of the normal cell (edges 9..13): make edges 11 and 13 the strongest.
  alphas[11][3] = 4.0;
  alphas[13][4] = 3.0;
  alphas[10][5] = 1.0;
  const auto g = derive_genotype(d, alphas);
  CHECK(g.edges.size() == 16);
  std::vector<std::size_t> node5;
  for (const auto& e : g.of_cell(CellKind::kNormal))
    if (e.to == 5) node5.push_back(e.edge_id);
  CHECK(node5 == std::vector<std::size_t>{11, 13});
  for (const auto& e : g.edges)
    if (e.edge_id == 11) CHECK(e.op == OpKind::kIdentity);
}

TEST_CASE("space, mask and genotype serialization round-trip") {
  const auto s = SearchSpace::chain(3, four_ops());
  const auto back = SearchSpace::from_json(s.to_json());
  CHECK(back.same_structure(s));
  CHECK(back.digest() == s.digest());
  CHECK(SearchSpace::darts().digest() != s.digest());

  const auto masked = without_op(s, 2, 1);
  CHECK(mask_from_json(s, mask_to_json(masked)) == masked.flat_mask());
  CHECK_THROWS_AS(mask_from_json(SearchSpace::chain(4, four_ops()), mask_to_json(masked)), ConfigError);

  const auto g = genotype_from_choices(s, {3, 3, 1});
  CHECK(g.key() == "0:skip_connect|1:skip_connect|2:max_pool_3x3");
  const auto j = genotype_to_json(g, masked, "abc");
  CHECK(genotype_from_json(j) == g);
  CHECK(j.at("config_digest") == "abc");

  CHECK_THROWS_AS(SearchSpace::from_json({{"topology", "chain"}, {"edges", 2}, {"ops", {"conv_7x7"}}}), ConfigError);
}

TEST_CASE("restrict_to leaves exactly the genotype") {
  const auto s = SearchSpace::chain(3, four_ops());
  const auto g = genotype_from_choices(s, {0, 2, 3});
  const auto r = restrict_to(s, g);
  CHECK(count_architectures(r) == 1);
  CHECK(derive_genotype(r, std::vector<std::vector<double>>(3, std::vector<double>(4, 0.0))) == g);
}
