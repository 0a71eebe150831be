// Acceptance run: one PASS/FAIL line per criterion, tolerances fixed below.
// Exit status is the number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <unistd.h>

#include "cli.hpp"
#include "zonas/accounting.hpp"
#include "zonas/autodiff.hpp"
#include "zonas/data.hpp"
#include "zonas/oneshot.hpp"
#include "zonas/operations.hpp"
#include "zonas/ops.hpp"
#include "zonas/oracle.hpp"
#include "zonas/parallel.hpp"
#include "zonas/pruning.hpp"
#include "zonas/ranking.hpp"
#include "zonas/rng.hpp"
#include "zonas/supernet.hpp"

using namespace zonas;
namespace fs = std::filesystem;

namespace {

constexpr double kMixSumTol = 1e-12;
constexpr double kGradRelTol = 1e-4;
constexpr std::size_t kGradInputs = 20;
constexpr double kImportanceTol = 1e-12;
constexpr double kSurvivalTol = 0.03;
constexpr std::size_t kAlgorithmicRuns = 100;
constexpr std::size_t kRandomDraws = 10000;
constexpr double kPermutationTol = 1e-9;

struct Check {
  bool ok = true;
  std::ostringstream detail;

  void require(bool cond, const std::string& what) {
    if (!cond) {
      if (ok) detail << "failed: " << what << "; ";
      ok = false;
    }
  }
};

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

// Distinct values on a lattice of spacing 2/n, shuffled. Keeps max-pool
// windows and relu inputs far from ties relative to the difference step.
Tensor lattice_tensor(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  const std::size_t n = t.numel();
  std::vector<double> v(n);
  for (std::size_t k = 0; k < n; ++k) v[k] = -1.0 + (static_cast<double>(k) + 0.5) * 2.0 / static_cast<double>(n);
  Rng rng(seed);
  rng.shuffle(v);
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

struct EdgeWeights {
  std::vector<std::vector<Parameter>> store;
  OpWeights ptrs;

  EdgeWeights(const std::vector<OpKind>& ops, std::size_t C, std::size_t stride, std::uint64_t seed)
      : store(ops.size()), ptrs(ops.size()) {
    for (std::size_t i = 0; i < ops.size(); ++i)
      for (const auto& spec : op_param_specs(ops[i], C, stride))
        store[i].emplace_back(spec.suffix, init_param(spec, derive_seed(seed, spec.suffix + std::to_string(i))));
    for (std::size_t i = 0; i < store.size(); ++i)
      for (auto& p : store[i]) ptrs[i].push_back(&p);
  }
};

MixingSet make_set(std::vector<OpKind> ops, std::vector<bool> mask) {
  MixingSet s;
  s.candidates = std::move(ops);
  s.mask = std::move(mask);
  return s;
}

// ---------------------------------------------------------------- 1
Check masked_mixing() {
  Check c;
  Rng rng(101);
  const auto& ops = darts_ops();
  double worst_sum = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto set = make_set(ops, std::vector<bool>(ops.size()));
    for (std::size_t i = 0; i < ops.size(); ++i) set.mask[i] = rng.bernoulli(0.5);
    set.mask[rng.below(ops.size())] = true;
    std::vector<double> a(ops.size());
    for (auto& v : a) v = rng.uniform(-20.0, 20.0);
    const auto w = mixing_weights(set, a);
    double s = 0.0;
    for (std::size_t i = 0; i < ops.size(); ++i) {
      s += w[i];
      if (!set.mask[i]) c.require(w[i] == 0.0, "masked op has nonzero weight");
    }
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
  }
  c.require(worst_sum <= kMixSumTol, "weights sum to one");

  std::size_t tape_checks = 0, bitwise_checks = 0;
  for (int trial = 0; trial < 24; ++trial) {
    const std::size_t stride = trial % 2 ? 2 : 1;
    auto set = make_set(ops, std::vector<bool>(ops.size()));
    for (std::size_t i = 0; i < ops.size(); ++i) set.mask[i] = rng.bernoulli(0.5);
    set.mask[rng.below(ops.size())] = true;
    std::vector<double> a(ops.size());
    for (auto& v : a) v = rng.normal();
    EdgeWeights w(ops, 3, stride, 200 + trial);
    const Tensor xt = random_tensor({2, 3, 6, 6}, 300 + trial);

    // Masked mix versus a mix over the unmasked candidates alone.
    Tape tape;
    Parameter alpha("alpha", Tensor({ops.size()}, a));
    const Var y = masked_mix(tape.leaf(xt), set, tape.watch(alpha), stride, w.ptrs, &tape);
    const std::size_t mix_nodes = tape.size();
    tape.backward(ops::weighted_total(y, random_tensor(y.shape(), 400 + trial)));
    std::vector<OpKind> kept;
    std::vector<double> kept_a;
    OpWeights kept_w;
    for (std::size_t i = 0; i < ops.size(); ++i) {
      if (set.mask[i]) {
        kept.push_back(ops[i]);
        kept_a.push_back(a[i]);
        kept_w.push_back(w.ptrs[i]);
        continue;
      }
      c.require(alpha.grad[i] == 0.0, "masked alpha has zero gradient");
      for (const auto& p : w.store[i]) {
        c.require(p.grad.numel() == 0, "masked op weights receive no gradient");
        for (const Parameter* q : tape.watched_parameters()) c.require(q != &p, "masked op weights not on the tape");
      }
    }
    Tape sub_tape;
    Parameter sub_alpha("alpha", Tensor({kept.size()}, kept_a));
    const Var z = masked_mix(sub_tape.leaf(xt), make_set(kept, std::vector<bool>(kept.size(), true)),
                             sub_tape.watch(sub_alpha), stride, kept_w, &sub_tape);
    c.require(sub_tape.size() == mix_nodes, "masked tape matches the tape of the unmasked ops alone");
    c.require(z.value() == y.value(), "masked output equals the output over unmasked ops");
    ++tape_checks;

    // Full mask against plain softmax mixing, bitwise.
    const auto full = make_set(ops, std::vector<bool>(ops.size(), true));
    const Var x = Var::constant(xt);
    const Var mixed = masked_mix(x, full, Var::constant(Tensor({ops.size()}, a)), stride, w.ptrs, nullptr);
    std::vector<Var> outs;
    for (std::size_t i = 0; i < ops.size(); ++i) outs.push_back(apply_op(ops[i], x, stride, w.ptrs[i], nullptr));
    const Var plain = ops::weighted_sum(outs, ops::softmax(Var::constant(Tensor({ops.size()}, a))));
    c.require(mixed.value() == plain.value(), "full mask equals plain mixing bitwise");
    ++bitwise_checks;
  }
  c.detail << "1000 masks, max |sum-1| " << worst_sum << "; " << tape_checks << " tape and " << bitwise_checks
           << " bitwise comparisons";
  return c;
}

// ---------------------------------------------------------------- 2
Check autodiff_soundness() {
  Check c;
  double worst = 0.0;
  std::string worst_case;
  std::size_t cases = 0;
  for (OpKind kind : darts_ops()) {
    for (std::size_t stride : {1u, 2u}) {
      for (std::size_t n = 0; n < kGradInputs; ++n) {
        const std::uint64_t seed = derive_seed(derive_seed(500, op_name(kind)), stride * 1000 + n);
        std::vector<Parameter> store;
        std::vector<Parameter*> ptrs;
        for (const auto& spec : op_param_specs(kind, 3, stride)) {
          Tensor v = init_param(spec, derive_seed(seed, spec.suffix));
          if (spec.init != InitKind::kKaimingUniform) {
            Rng rng(derive_seed(seed, spec.suffix + "!"));
            for (auto& e : v.data()) e += rng.uniform(-0.3, 0.3);
          }
          store.emplace_back(spec.suffix, std::move(v));
        }
        for (auto& p : store) ptrs.push_back(&p);
        auto f = [&](const Var& x) {
          const Var y = apply_op(kind, x, stride, ptrs, x.tape());
          return ops::weighted_total(y, random_tensor(y.shape(), seed + 1));
        };
        const double err = finite_difference_check(f, lattice_tensor({2, 3, 6, 6}, seed + 2), 1e-5);
        if (err > worst) {
          worst = err;
          worst_case = std::string(op_name(kind)) + " stride " + std::to_string(stride);
        }
        ++cases;
      }
    }
  }
  c.require(worst <= kGradRelTol, "relative error within " + std::to_string(kGradRelTol));
  c.detail << cases << " checks over " << darts_ops().size() << " ops x 2 strides, worst relative error " << worst
           << " (" << worst_case << ")";
  return c;
}

// ---------------------------------------------------------------- 3
Check algorithm_fidelity() {
  Check c;
  const std::vector<OpKind> toy = {OpKind::kZero, OpKind::kMaxPool3, OpKind::kAvgPool3, OpKind::kIdentity};
  const auto space = SearchSpace::chain(2, toy);
  Rng rng(11);
  FitnessMap table;
  for_each_architecture(space, [&](const std::vector<std::size_t>& ch) {
    table[genotype_from_choices(space, ch).key()] = rng.uniform(0.1, 1.0);
  });
  const auto ranker = make_tabular_ranker(table, Aggregate::kMax);

  // r(N) by direct enumeration over an explicit allowed-op grid.
  auto brute = [&](const std::vector<std::vector<bool>>& allowed) {
    double best = -1.0;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        if (allowed[0][i] && allowed[1][j])
          best = std::max(best, table.at(genotype_from_choices(space, {i, j}).key()));
    return best;
  };
  double worst = 0.0;
  const std::vector<std::vector<bool>> all(2, std::vector<bool>(4, true));
  const double base = brute(all);
  for (const auto& s : importance_scores(space, {ranker.get()})) {
    auto a = all;
    a[s.edge_id][s.op_index] = false;
    worst = std::max(worst, std::abs(s.score - (base - brute(a)) / base));
  }
  c.require(worst <= kImportanceTol, "importance equals the brute-force formula");

  PruneConfig cfg;
  cfg.xi = 0.5;
  const auto res = partial_prune(space, {ranker.get()}, cfg);
  std::vector<double> traj{1.0};
  for (const auto& r : res.rounds) traj.push_back(r.fraction_after);
  c.require(traj == std::vector<double>{1.0, 0.5625, 0.25}, "trajectory 1 -> 0.5625 -> 0.25");
  c.detail << "trajectory";
  for (double f : traj) c.detail << " " << f;
  c.detail << "; max importance deviation " << worst;
  return c;
}

// ---------------------------------------------------------------- 4
Check memory_ratios() {
  Check c;
  const auto t0 = Clock::now();
  AccountingOptions opt;
  const auto space = SearchSpace::darts();
  const SupernetConfig plain_cfg;  // 16 channels, 8 cells, 32x32, 10 classes
  SupernetConfig k4 = plain_cfg;
  k4.partial_k = 4;
  const auto plain = estimate_memory(space, plain_cfg, opt);
  const double r_pc = estimate_memory(space, k4, opt).total_elements / plain.total_elements;
  const double r_rnd = memory_report(expected_cost_rows(space, plain_cfg, opt, 0.5), opt).retained_activation_elements /
                       plain.retained_activation_elements;
  const double r_both = memory_report(expected_cost_rows(space, k4, opt, 0.5), opt).total_elements /
                        plain.total_elements;
  const double secs = seconds_since(t0);
  c.require(r_pc >= 0.25 && r_pc <= 0.40, "K=4 total ratio in [0.25, 0.40]");
  c.require(r_rnd >= 0.45 && r_rnd <= 0.60, "xi=0.5 activation ratio in [0.45, 0.60]");
  c.require(r_both <= 0.25, "combined total ratio <= 0.25");
  c.require(secs < 1.0, "model evaluation under 1 s");
  c.detail << "K=4 " << r_pc << ", xi=0.5 activations " << r_rnd << ", combined " << r_both << ", evaluated in "
           << secs << " s";
  return c;
}

// ---------------------------------------------------------------- 5
struct PlantedOracle {
  PlantedTask task = planted_task();
  FitnessTable table;
};

PlantedOracle build_planted_oracle() {
  PlantedOracle o;
  PlantedSpec spec = o.task.data;
  spec.seed = 1;
  FitnessBudget budget;
  budget.schedule.batch_size = o.task.schedule.batch_size;
  o.table = build_fitness_table(o.task.space, o.task.net, planted_generate(spec), budget, 11, default_workers());
  return o;
}

Check pruning_safety(const PlantedOracle& o) {
  Check c;
  c.require(o.table.fitness.size() == 64 && o.table.failures.empty(), "64-architecture table without failures");
  const auto ranked = o.table.ranked();
  c.require(ranked[0].first == o.task.optimum().key() && ranked[0].second > ranked[1].second,
            "unique optimum is the planted genotype");

  PruneConfig alg;
  alg.xi = 0.5;
  PruneConfig rnd = alg;
  rnd.mode = PruneMode::kRandom;
  rnd.semantics = XiSemantics::kOperationKeepProbability;
  std::vector<std::uint64_t> alg_seeds(kAlgorithmicRuns), rnd_seeds(kRandomDraws);
  std::iota(alg_seeds.begin(), alg_seeds.end(), 0);
  for (std::size_t i = 0; i < kRandomDraws; ++i) rnd_seeds[i] = derive_seed(derive_seed(11, "random masks"), i);
  const auto rep = survival_study(o.table, o.task.space, {{"algorithmic", alg, alg_seeds}, {"random", rnd, rnd_seeds}},
                                  0.05, 20, default_workers());
  const auto& a = rep.methods[0];
  const auto& r = rep.methods[1];
  const std::size_t top1_kept = static_cast<std::size_t>(std::lround(a.top1_probability * a.runs));
  c.require(top1_kept == kAlgorithmicRuns, "algorithmic pruning keeps the top-1 in every run");
  c.require(std::abs(r.probability - *r.closed_form) <= kSurvivalTol, "random survival within 0.03 of closed form");
  c.require(r.median_shift < r.median_std, "random-prune median shift below inter-seed std");
  c.detail << "(a) top-1 kept " << top1_kept << "/" << a.runs << "; (b) random top-5% survival " << r.probability
           << " vs closed form " << *r.closed_form << " over " << r.runs << " draws; (c) median shift "
           << r.median_shift << " vs std " << r.median_std << " (algorithmic " << a.median_shift << " vs "
           << a.median_std << ")";
  return c;
}

// ---------------------------------------------------------------- 6
Check planted_search(const PlantedOracle& o) {
  Check c;
  const auto top = top_q_keys(o.table, 0.05);
  int recovered = 0, in_top = 0;
  std::string found;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    PlantedSpec spec = o.task.data;
    spec.seed = 100 + seed;
    const auto res = run_search(o.task.space, o.task.schedule, o.task.net, planted_generate(spec), seed);
    const std::string key = res.genotype.key();
    if (res.genotype == o.task.optimum()) {
      ++recovered;
      in_top += std::find(top.begin(), top.end(), key) != top.end();
    }
    found += (found.empty() ? "" : ", ") + key;
  }
  c.require(recovered >= 4, "planted genotype recovered in at least 4 of 5 seeds");
  c.require(in_top == recovered, "recovered genotype lies in the table's top 5%");
  c.detail << recovered << "/5 recovered, " << in_top << " in the top-5% set of " << top.size() << " [" << found
           << "]";
  return c;
}

// ---------------------------------------------------------------- 7
Check nngp_ranker() {
  Check c;
  SupernetConfig cfg;
  cfg.in_channels = 3;
  cfg.image_size = 6;
  cfg.init_channels = 4;
  cfg.classes = 3;
  cfg.seed = 21;
  const auto space = SearchSpace::chain(3, {OpKind::kZero, OpKind::kMaxPool3, OpKind::kAvgPool3, OpKind::kIdentity});
  const std::size_t m = 16;
  const Tensor data = random_tensor({m, 3, 6, 6}, 5);
  const double s = make_nngp_ranker(cfg, data)->score(space);
  c.require(std::isfinite(s) && s > 0.0, "finite positive score");
  c.require(make_nngp_ranker(cfg, data)->score(space) == s, "same seed gives the same score");

  const std::size_t per = data.numel() / m;
  Rng rng(8);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::size_t> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Tensor shuffled(data.shape());
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(data.data().begin() + perm[i] * per, per, shuffled.data().begin() + i * per);
    worst = std::max(worst, std::abs(make_nngp_ranker(cfg, shuffled)->score(space) - s));
  }
  c.require(worst <= kPermutationTol, "permutation changes the score by at most 1e-9");

  Supernet net(space, cfg);
  for (Parameter* p : net.weights())
    if (p->name.rfind("classifier.", 0) == 0) p->value->fill(0.0);
  const double zero = nngp_frobenius(net, data);
  c.require(zero == 0.0, "zero-logit network scores 0");
  c.detail << "score " << s << ", max permutation change " << worst << ", zero-logit score " << zero;
  return c;
}

// ---------------------------------------------------------------- 8
std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Check replay_identity(const fs::path& scratch) {
  Check c;
  cli::Invocation inv;
  inv.command = "search";
  inv.config = cli::resolve_config("", {{"seed", 4}});
  inv.out_dir = (scratch / "search").string();
  inv.quiet = true;
  std::ostringstream sink;
  cli::run_command(inv, sink);
  const auto out = cli::replay(inv.out_dir, (scratch / "search-replay").string(), false, 1, sink);
  for (const char* f : {"genotype.json", "metrics.jsonl"}) {
    const auto a = read_bytes(scratch / "search" / f), b = read_bytes(scratch / "search-replay" / f);
    c.require(!a.empty() && a == b, std::string(f) + " byte-identical");
  }
  c.require(out.ok(), "every recorded output reproduced");
  c.detail << out.identical.size() << " files identical, " << out.differing.size() << " differing, "
           << out.missing.size() << " missing";
  return c;
}

// ---------------------------------------------------------------- 9
Check cifar_loader(const fs::path& scratch) {
  Check c;
  fs::path dir;
  const char* env = std::getenv("CIFAR10_DIR");
  if (env && *env && fs::exists(fs::path(env) / "data_batch_1.bin")) {
    dir = env;
    c.detail << "dataset at " << dir.string() << "; ";
  } else {
    // Full-size synthetic stand-ins with the exact binary layout.
    dir = scratch / "cifar";
    fs::create_directories(dir);
    Rng rng(9);
    std::string rec(kCifarRecordBytes * kCifarRecordsPerFile, '\0');
    for (int f = 1; f <= 5; ++f) {
      for (std::size_t r = 0; r < kCifarRecordsPerFile; ++r) {
        rec[r * kCifarRecordBytes] = static_cast<char>(rng.below(10));
        for (std::size_t k = 1; k < kCifarRecordBytes; ++k)
          rec[r * kCifarRecordBytes + k] = static_cast<char>(rng.below(256));
      }
      std::ofstream(dir / ("data_batch_" + std::to_string(f) + ".bin"), std::ios::binary) << rec;
    }
    c.detail << "CIFAR10_DIR not set, synthetic full-size files; ";
  }
  {
    const auto split = load_cifar10(dir.string());
    c.require(split.train.size() == 50000, "50000 training records");
    const auto [lo, hi] = std::minmax_element(split.train.labels.begin(), split.train.labels.end());
    c.require(*lo >= 0 && *hi <= 9, "labels in [0, 9]");
    c.detail << split.train.size() << " records, labels in [" << *lo << ", " << *hi << "]";
  }
  std::size_t identical = 0;
  for (int f = 1; f <= 5; ++f) {
    const fs::path src = dir / ("data_batch_" + std::to_string(f) + ".bin");
    const fs::path back = scratch / "roundtrip.bin";
    write_cifar10_file(back.string(), read_cifar10_file(src.string()));
    identical += read_bytes(src) == read_bytes(back);
    fs::remove(back);
  }
  c.require(identical == 5, "re-serialization byte-identical");
  c.detail << ", " << identical << "/5 files re-serialize byte-identically";
  return c;
}

}  // namespace

int main() {
  const fs::path scratch = fs::temp_directory_path() / ("zonas_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(scratch);
  fs::create_directories(scratch);

  int failed = 0;
  auto run = [&](int id, const char* title, const std::function<Check()>& fn) {
    const auto t0 = Clock::now();
    Check c;
    try {
      c = fn();
    } catch (const std::exception& e) {
      c.ok = false;
      c.detail << "exception: " << e.what();
    }
    failed += !c.ok;
    std::printf("criterion %d %s  %s: %s [%.1f s]\n", id, c.ok ? "PASS" : "FAIL", title, c.detail.str().c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  };

  run(1, "masked mixing", masked_mixing);
  run(2, "autodiff finite differences", autodiff_soundness);
  run(3, "partial prune trajectory and importance", algorithm_fidelity);
  run(4, "memory ratios", memory_ratios);
  std::optional<PlantedOracle> oracle;
  run(5, "pruning safety on the planted table", [&] {
    oracle = build_planted_oracle();
    return pruning_safety(*oracle);
  });
  run(6, "planted-signal search", [&] {
    if (!oracle) oracle = build_planted_oracle();
    return planted_search(*oracle);
  });
  run(7, "nngp ranker", nngp_ranker);
  run(8, "search replay", [&] { return replay_identity(scratch); });
  run(9, "cifar-10 loader", [&] { return cifar_loader(scratch); });

  fs::remove_all(scratch);
  std::printf("%d of 9 criteria failed\n", failed);
  return failed;
}
