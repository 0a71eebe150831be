#include <chrono>
#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "zonas/accounting.hpp"
#include "zonas/error.hpp"
#include "zonas/pruning.hpp"
#include "zonas/rng.hpp"

using namespace zonas;
using zonas::testing::random_tensor;

namespace {

SupernetConfig full_darts() {
  SupernetConfig c;  // 16 channels, 8 cells, 32x32, CIFAR-10
  return c;
}

SupernetConfig toy_darts(std::size_t k = 1) {
  SupernetConfig c;
  c.image_size = 8;
  c.init_channels = 8;
  c.cells = 3;
  c.classes = 4;
  c.partial_k = k;
  c.seed = 5;
  return c;
}

SupernetConfig toy_chain(std::size_t k = 1) {
  SupernetConfig c;
  c.in_channels = 3;
  c.image_size = 6;
  c.init_channels = 8;
  c.classes = 3;
  c.partial_k = k;
  c.seed = 2;
  return c;
}

void check_same(const MemoryReport& a, const MemoryReport& b) {
  CHECK(a.parameter_elements == b.parameter_elements);
  CHECK(a.optimizer_state_elements == b.optimizer_state_elements);
  CHECK(a.retained_activation_elements == b.retained_activation_elements);
  CHECK(a.gradient_elements == b.gradient_elements);
  CHECK(a.total_elements == b.total_elements);
}

MemoryReport minus(const MemoryReport& a, const MemoryReport& b) {
  MemoryReport d;
  d.parameter_elements = a.parameter_elements - b.parameter_elements;
  d.optimizer_state_elements = a.optimizer_state_elements - b.optimizer_state_elements;
  d.retained_activation_elements = a.retained_activation_elements - b.retained_activation_elements;
  d.gradient_elements = a.gradient_elements - b.gradient_elements;
  d.total_elements = a.total_elements - b.total_elements;
  return d;
}

// Live elements after a recorded forward + loss: saved activations plus one
// gradient buffer per watched parameter.
double measured_elements(Supernet& net, std::size_t batch) {
  Tape tape;
  const auto& cfg = net.config();
  const Tensor x = random_tensor({batch, cfg.in_channels, cfg.image_size, cfg.image_size}, 3);
  std::vector<int> labels(batch);
  for (std::size_t i = 0; i < batch; ++i) labels[i] = static_cast<int>(i % cfg.classes);
  const Var loss = ops::cross_entropy(net.forward(x, {.tape = &tape, .channel_seed = 1}), labels);
  double grads = 0.0;
  for (const Parameter* p : tape.watched_parameters()) grads += static_cast<double>(p->numel());
  tape.backward(loss);
  return static_cast<double>(tape.retained_elements()) + grads;
}

}  // namespace

TEST_CASE("masking an op removes exactly its standalone contribution") {
  AccountingOptions opt;
  opt.batch = 8;
  Rng rng(4);
  for (const auto& [space, cfg] : {std::pair{SearchSpace::darts(), toy_darts(2)},
                                   std::pair{SearchSpace::chain(3, darts_ops()), toy_chain(1)}}) {
    const auto base_rows = cost_rows(space, cfg, opt);
    const auto base = memory_report(base_rows, opt);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t e = rng.below(space.edge_count());
      const std::size_t op = rng.below(space.edge(e).candidates.size());
      const auto reduced = memory_report(cost_rows(without_op(space, e, op), cfg, opt), opt);
      std::vector<CostRow> standalone;
      for (const auto& r : base_rows)
        if (r.edge_id == e && r.op == op_name(space.edge(e).candidates[op])) standalone.push_back(r);
      check_same(minus(base, reduced), memory_report(standalone, opt));
    }
  }
}

TEST_CASE("masking never increases any field") {
  AccountingOptions opt;
  opt.batch = 4;
  auto space = SearchSpace::darts();
  auto prev = estimate_memory(space, toy_darts(), opt);
  auto prev_c = estimate_compute(space, toy_darts(), 4);
  const auto rows = cost_rows(space, toy_darts(), opt);
  for (const auto& r : rows) {
    CHECK(r.activations >= 0.0);
    CHECK(r.weight_params >= 0.0);
  }
  Rng rng(6);
  for (int step = 0; step < 100; ++step) {
    const std::size_t e = rng.below(space.edge_count());
    if (space.edge(e).unmasked() < 2) continue;
    const auto open = space.edge(e).unmasked_indices();
    space = without_op(space, e, open[rng.below(open.size())]);
    const auto m = estimate_memory(space, toy_darts(), opt);
    const auto c = estimate_compute(space, toy_darts(), 4);
    CHECK(m.parameter_elements <= prev.parameter_elements);
    CHECK(m.optimizer_state_elements <= prev.optimizer_state_elements);
    CHECK(m.retained_activation_elements <= prev.retained_activation_elements);
    CHECK(m.total_elements <= prev.total_elements);
    CHECK(c.forward_macs <= prev_c.forward_macs);
    prev = m;
    prev_c = c;
  }
}

TEST_CASE("totals are the sum of their parts") {
  const auto m = estimate_memory(SearchSpace::darts(), full_darts(), {});
  CHECK(m.total_elements ==
        m.parameter_elements + m.optimizer_state_elements + m.retained_activation_elements + m.gradient_elements);
  double edges = 0.0;
  for (const auto& e : m.per_edge) edges += e.retained_activation_elements;
  CHECK(edges < m.retained_activation_elements);
  CHECK(m.per_edge.size() == 28);
}

TEST_CASE("partial channels quarter the mixed branch") {
  AccountingOptions opt;
  opt.batch = 16;
  const auto space = SearchSpace::chain(1, {OpKind::kIdentity});
  const auto r1 = cost_rows(space, toy_chain(1), opt);
  const auto r4 = cost_rows(space, toy_chain(4), opt);
  auto site = [](const std::vector<CostRow>& rows) {
    for (const auto& r : rows)
      if (r.edge_id == 0) return r.activations - 1.0;  // without the softmax entry
    return -1.0;
  };
  CHECK(site(r4) / site(r1) == 0.25);
}

TEST_CASE("free ops cost no MACs and MACs are additive per edge") {
  const auto space = SearchSpace::chain(1, {OpKind::kZero, OpKind::kIdentity, OpKind::kAvgPool3, OpKind::kMaxPool3});
  CHECK(estimate_compute(space, toy_chain(), 8).per_edge.at(0).macs == 0.0);

  const auto convs = SearchSpace::chain(1, {OpKind::kSepConv3, OpKind::kSepConv5, OpKind::kDilConv3, OpKind::kDilConv5});
  const auto full = estimate_compute(convs, toy_chain(), 8).per_edge.at(0).macs;
  const auto half = estimate_compute(without_op(without_op(convs, 0, 1), 0, 3), toy_chain(), 8).per_edge.at(0).macs;
  const auto rest = estimate_compute(without_op(without_op(convs, 0, 0), 0, 2), toy_chain(), 8).per_edge.at(0).macs;
  CHECK(half + rest == full);
  const auto c = estimate_compute(convs, toy_chain(), 8);
  CHECK(c.backward_macs == 2.0 * c.forward_macs);
}

TEST_CASE("full-config memory ratios") {
  const auto t0 = std::chrono::steady_clock::now();
  AccountingOptions opt;
  const auto space = SearchSpace::darts();
  auto k4 = full_darts();
  k4.partial_k = 4;
  const auto plain = estimate_memory(space, full_darts(), opt);
  const auto pc = estimate_memory(space, k4, opt);
  const auto rnd = memory_report(expected_cost_rows(space, full_darts(), opt, 0.5), opt);
  const auto both = memory_report(expected_cost_rows(space, k4, opt, 0.5), opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const double r_pc = pc.total_elements / plain.total_elements;
  const double r_rnd = rnd.retained_activation_elements / plain.retained_activation_elements;
  const double r_both = both.total_elements / plain.total_elements;
  MESSAGE("K=4 total ratio " << r_pc << ", xi=0.5 activation ratio " << r_rnd << ", combined " << r_both);
  CHECK(r_pc >= 0.25);
  CHECK(r_pc <= 0.40);
  CHECK(r_rnd >= 0.45);
  CHECK(r_rnd <= 0.60);
  CHECK(r_both <= 0.25);
  CHECK(secs < 1.0);

  const double mac_ratio = compute_report(expected_cost_rows(space, k4, opt, 0.5)).forward_macs /
                           estimate_compute(space, full_darts(), opt.batch).forward_macs;
  CHECK(mac_ratio < 0.5);
}

TEST_CASE("expected random-mask rows match the Monte-Carlo mean") {
  AccountingOptions opt;
  opt.batch = 2;
  const auto space = SearchSpace::darts();
  const double expected = memory_report(expected_cost_rows(space, toy_darts(), opt, 0.5), opt).total_elements;
  double mean = 0.0;
  const int draws = 2000;
  for (int s = 0; s < draws; ++s)
    mean += estimate_memory(random_mask(space, 0.5, static_cast<std::uint64_t>(s)), toy_darts(), opt).total_elements;
  mean /= draws;
  CHECK(std::abs(mean - expected) / expected < 0.005);
}

TEST_CASE("model agrees with the tape on toy networks") {
  Rng rng(12);
  for (int trial = 0; trial < 6; ++trial) {
    const bool darts = trial % 2 == 0;
    const std::size_t k = trial < 2 ? 1 : (trial < 4 ? 2 : 4);
    const auto base = darts ? SearchSpace::darts() : SearchSpace::chain(3, darts_ops());
    const auto space = trial == 0 ? base : random_mask(base, 0.5, rng.next_u64());
    const auto cfg = darts ? toy_darts(k) : toy_chain(k);
    AccountingOptions opt;
    opt.batch = 4;
    const auto m = estimate_memory(space, cfg, opt);
    Supernet net(space, cfg);
    const double measured = measured_elements(net, opt.batch);
    const double model = m.retained_activation_elements + m.gradient_elements;
    MESSAGE("trial " << trial << ": model " << model << " measured " << measured);
    CHECK(std::abs(model - measured) <= 0.25 * measured);
  }
}

TEST_CASE("reports serialize") {
  AccountingOptions opt;
  opt.batch = 2;
  const auto space = SearchSpace::chain(2, {OpKind::kZero, OpKind::kIdentity});
  const auto rows = cost_rows(space, toy_chain(), opt);
  const std::string csv = cost_rows_csv(rows);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(rows.size() + 1));
  CHECK(csv.rfind("site,edge,op,", 0) == 0);
  const auto j = memory_report(rows, opt).to_json();
  CHECK(j.contains("total_elements"));
  CHECK(j["per_edge"].size() == 2);
  CHECK(estimate_compute(space, toy_chain(), 2).to_json().contains("forward_macs"));
}
