// zonas: pruning, one-shot search, accounting and oracle studies from the
// command line. Every run writes a self-describing directory that `zonas
// replay` can re-execute and compare byte for byte.

#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "cli.hpp"
#include "zonas/parallel.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;
using namespace zonas::cli;

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  std::size_t workers = zonas::default_workers();
  bool quiet = false;
  // Flag -> config path, applied after --set in declaration order.
  std::vector<std::pair<std::string, json>> flags;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_file, "JSON config file merged over the defaults")->check(CLI::ExistingFile);
  app->add_option("--set", c.sets, "Override a config value: dotted.path=value (repeatable)");
  app->add_option("--seed", c.seed, "Root seed");
  app->add_option("--out", c.out, "Output directory (default $ZONAS_OUTPUT_ROOT/<command>-seed<seed>)");
  app->add_flag("--force", c.force, "Overwrite a non-empty output directory");
  app->add_option("--workers", c.workers, "Worker threads (not part of the recorded config)")
      ->check(CLI::PositiveNumber);
  app->add_flag("--quiet", c.quiet, "No console summary");
}

// Registers an option whose value lands at `path` in the config.
template <class T>
void add_mapped(CLI::App* app, Common& c, const std::string& flag, const std::string& path, const std::string& help,
                bool is_path = false) {
  app->add_option_function<T>(
      flag,
      [&c, path, is_path](const T& v) {
        if constexpr (std::is_same_v<T, std::string>) {
          c.flags.emplace_back(path, is_path ? fs::absolute(v).string() : v);
        } else {
          c.flags.emplace_back(path, v);
        }
      },
      help);
}

int run(const std::string& command, Common& c) {
  std::vector<std::pair<std::string, json>> overrides;
  for (const auto& s : c.sets) overrides.push_back(parse_assignment(s));
  if (c.seed) overrides.emplace_back("seed", *c.seed);
  overrides.insert(overrides.end(), c.flags.begin(), c.flags.end());
  Invocation inv;
  inv.command = command;
  inv.config = resolve_config(c.config_file, overrides);
  inv.out_dir = c.out.empty() ? default_out_dir(command, inv.config["seed"].get<std::uint64_t>()) : c.out;
  inv.force = c.force;
  inv.workers = c.workers;
  inv.quiet = c.quiet;
  run_command(inv, std::cout);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero-cost operation pruning for differentiable architecture search"};
  app.require_subcommand(1);

  Common prune, search, derive, account, oracle;

  auto* p = app.add_subcommand("prune", "Mask low-importance ops (or a random share) of the search space");
  add_common(p, prune);
  add_mapped<std::string>(p, prune, "--mode", "prune.mode", "algorithmic | random");
  add_mapped<double>(p, prune, "--xi", "prune.xi", "Pruning level in (0, 1)");
  add_mapped<std::string>(p, prune, "--semantics", "prune.semantics",
                          "architecture_fraction | operation_keep_probability");
  add_mapped<std::vector<std::string>>(p, prune, "--ranker", "prune.rankers", "nngp | tabular (repeatable)");
  add_mapped<std::string>(p, prune, "--table", "prune.table", "Fitness table for the tabular ranker", true);
  add_mapped<std::string>(p, prune, "--mask", "mask", "Start from an existing mask file", true);

  auto* s = app.add_subcommand("search", "Run the one-shot search on the (masked) space");
  add_common(s, search);
  add_mapped<std::string>(s, search, "--mask", "mask", "Mask file from `zonas prune`", true);

  auto* d = app.add_subcommand("derive", "Derive a genotype from a search checkpoint");
  add_common(d, derive);
  add_mapped<std::string>(d, derive, "--mask", "mask", "Mask file used by the search", true);
  add_mapped<std::string>(d, derive, "--checkpoint", "checkpoint", "Checkpoint file", true);

  auto* a = app.add_subcommand("account", "Memory and compute estimates for the (masked) space");
  add_common(a, account);
  add_mapped<std::string>(a, account, "--mask", "mask", "Mask file", true);
  add_mapped<std::size_t>(a, account, "--batch", "accounting.batch", "Batch size");
  add_mapped<std::size_t>(a, account, "--partial-k", "network.partial_k", "Partial-channel divisor K");
  add_mapped<double>(a, account, "--xi", "prune.xi", "Level of the expected random mask");

  auto* o = app.add_subcommand("oracle", "Exhaustive fitness table and pruning survival study");
  add_common(o, oracle);
  add_mapped<std::string>(o, oracle, "--mask", "mask", "Mask file", true);
  add_mapped<std::size_t>(o, oracle, "--cap", "oracle.cap", "Refuse spaces with more architectures");
  add_mapped<std::string>(o, oracle, "--table", "oracle.table", "Reuse an existing fitness table", true);
  add_mapped<double>(o, oracle, "--top-q", "oracle.top_q", "Top quantile for survival");

  std::string run_dir, replay_out;
  bool replay_force = false;
  std::size_t replay_workers = zonas::default_workers();
  auto* r = app.add_subcommand("replay", "Re-run a recorded run and compare outputs byte for byte");
  r->add_option("run_dir", run_dir, "Directory of the recorded run")->required()->check(CLI::ExistingDirectory);
  r->add_option("--out", replay_out, "Replay output directory (default <run_dir>-replay)");
  r->add_flag("--force", replay_force, "Overwrite a non-empty replay directory");
  r->add_option("--workers", replay_workers, "Worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (p->parsed()) return run("prune", prune);
    if (s->parsed()) return run("search", search);
    if (d->parsed()) return run("derive", derive);
    if (a->parsed()) return run("account", account);
    if (o->parsed()) return run("oracle", oracle);
    fs::path rec = fs::path(run_dir).lexically_normal();
    if (!rec.has_filename()) rec = rec.parent_path();
    const std::string out = replay_out.empty() ? rec.string() + "-replay" : replay_out;
    const ReplayOutcome res = replay(run_dir, out, replay_force, replay_workers, std::cout);
    for (const auto& f : res.identical) std::cout << "identical  " << f << '\n';
    for (const auto& f : res.differing) std::cout << "DIFFERS    " << f << '\n';
    for (const auto& f : res.missing) std::cout << "MISSING    " << f << '\n';
    std::cout << (res.ok() ? "replay identical" : "replay mismatch") << '\n';
    return res.ok() ? kExitOk : kExitMismatch;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}
