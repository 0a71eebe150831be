#include "cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "zonas/container.hpp"
#include "zonas/error.hpp"
#include "zonas/rng.hpp"

namespace zonas::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

json read_json_file(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError("'" + path + "' is not valid JSON: " + e.what());
  }
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force)
      throw ConfigError("output directory '" + dir.string() + "' is not empty; pass --force to overwrite it");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

// Machine-readable records to log.jsonl, one human line each to the console.
class RunLog {
 public:
  RunLog(const fs::path& file, std::ostream& console, bool quiet)
      : file_(file, std::ios::binary), console_(console), quiet_(quiet) {
    if (!file_) throw FormatError("cannot write '" + file.string() + "'");
  }
  void event(const std::string& name, json rec, const std::string& human) {
    rec["event"] = name;
    file_ << rec.dump() << '\n';
    file_.flush();
    if (!quiet_) console_ << human << '\n';
  }

 private:
  std::ofstream file_;
  std::ostream& console_;
  bool quiet_;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

void require_keys(const json& j, const json& allowed, const std::string& where) {
  for (const auto& [k, v] : j.items())
    if (!allowed.contains(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

SearchSpace space_from(const json& j) {
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    if (name == "planted") return planted_task().space;
    if (name == "darts") return SearchSpace::darts();
    throw ConfigError("unknown space preset '" + name + "' (expected planted, darts, or a definition object)");
  }
  if (!j.is_object()) throw ConfigError("space must be a preset name or a definition object");
  return SearchSpace::from_json(j);
}

template <class T>
T get_as(const json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

std::vector<std::uint64_t> seed_list(std::uint64_t root, const char* label, std::size_t n) {
  std::vector<std::uint64_t> s(n);
  const std::uint64_t base = derive_seed(root, label);
  for (std::size_t i = 0; i < n; ++i) s[i] = derive_seed(base, static_cast<std::uint64_t>(i));
  return s;
}

}  // namespace

json default_config() {
  const PlantedTask t = planted_task();
  json data = t.data.to_json();
  data["source"] = "planted";
  FitnessBudget budget;
  budget.schedule.batch_size = t.schedule.batch_size;
  return {
      {"seed", 0},
      {"space", "planted"},
      {"mask", nullptr},
      {"mask_digest", nullptr},
      {"checkpoint", nullptr},
      {"data", data},
      {"network", t.net.to_json()},
      {"schedule", t.schedule.to_json()},
      {"prune",
       {{"xi", 0.5},
        {"mode", "algorithmic"},
        {"semantics", nullptr},
        {"seed", nullptr},
        {"rankers", {"nngp"}},
        {"table", nullptr},
        {"aggregate", "max"},
        {"nngp", {{"datapoints", 384}, {"batch_size", 128}}}}},
      {"accounting", AccountingOptions{}.to_json()},
      {"oracle",
       {{"budget", budget.to_json()},
        {"cap", kDefaultEnumerationCap},
        {"top_q", 0.05},
        {"bins", 20},
        {"xi", 0.5},
        {"algorithmic_runs", 100},
        {"random_draws", 10000},
        {"table", nullptr}}},
  };
}

void set_path(json& j, const std::string& path, json value) {
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("bad config path '" + path + "'");
    if (!node->is_object()) throw ConfigError("config path '" + path + "' runs through a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

std::pair<std::string, json> parse_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("expected key=value, got '" + text + "'");
  const std::string value = text.substr(eq + 1);
  json v = json::parse(value, nullptr, false);
  if (v.is_discarded()) v = value;
  return {text.substr(0, eq), v};
}

json resolve_config(const std::string& config_file, const std::vector<std::pair<std::string, json>>& overrides) {
  json cfg = default_config();
  const json allowed = cfg;
  if (!config_file.empty()) {
    const json file = read_json_file(config_file);
    if (!file.is_object()) throw ConfigError("config file must hold a JSON object");
    require_keys(file, allowed, "config file");
    cfg.merge_patch(file);
  }
  for (const auto& [path, value] : overrides) {
    const std::string top = path.substr(0, path.find('.'));
    if (!allowed.contains(top)) throw ConfigError("unknown config key '" + top + "'");
    set_path(cfg, path, value);
  }
  // Restore keys a merge patch with null removed.
  for (const auto& [k, v] : allowed.items())
    if (!cfg.contains(k)) cfg[k] = v;

  auto& prune = cfg["prune"];
  if (prune["seed"].is_null()) prune["seed"] = cfg["seed"];
  if (prune["semantics"].is_null())
    prune["semantics"] =
        xi_semantics_name(default_semantics(parse_prune_mode(get_as<std::string>(prune, "mode", "prune"))));
  if (!cfg["mask"].is_null() && cfg["mask_digest"].is_null())
    cfg["mask_digest"] = digest_hex(read_file(get_as<std::string>(cfg, "mask", "config")));
  RunConfig::from_json(cfg);  // validate before any compute
  return cfg;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig rc;
  rc.raw = j;
  rc.seed = get_as<std::uint64_t>(j, "seed", "config");
  rc.space = space_from(j.at("space"));
  rc.network = SupernetConfig::from_json(j.at("network"));
  rc.schedule = SearchSchedule::from_json(j.at("schedule"));

  const json& p = j.at("prune");
  rc.prune.xi = get_as<double>(p, "xi", "prune");
  rc.prune.mode = parse_prune_mode(get_as<std::string>(p, "mode", "prune"));
  rc.prune.semantics = parse_xi_semantics(get_as<std::string>(p, "semantics", "prune"));
  rc.prune.seed = get_as<std::uint64_t>(p, "seed", "prune");
  rc.prune.validate();
  rc.rankers = get_as<std::vector<std::string>>(p, "rankers", "prune");
  for (const auto& r : rc.rankers)
    if (r != "nngp" && r != "tabular") throw ConfigError("unknown ranker '" + r + "' (expected nngp or tabular)");
  if (rc.prune.mode == PruneMode::kAlgorithmic && rc.rankers.empty())
    throw ConfigError("algorithmic pruning needs at least one ranker");
  parse_aggregate(get_as<std::string>(p, "aggregate", "prune"));
  rc.nngp.datapoints = get_as<std::size_t>(p.at("nngp"), "datapoints", "prune.nngp");
  rc.nngp.batch_size = get_as<std::size_t>(p.at("nngp"), "batch_size", "prune.nngp");
  rc.nngp.seed = rc.prune.seed;
  if (rc.nngp.datapoints < 2) throw ConfigError("prune.nngp.datapoints must be >= 2");

  const json& a = j.at("accounting");
  rc.accounting.batch = get_as<std::size_t>(a, "batch", "accounting");
  rc.accounting.weight_state_per_param = get_as<double>(a, "weight_state_per_param", "accounting");
  rc.accounting.alpha_state_per_param = get_as<double>(a, "alpha_state_per_param", "accounting");
  if (rc.accounting.batch == 0) throw ConfigError("accounting.batch must be positive");

  const json& o = j.at("oracle");
  rc.fitness = FitnessBudget::from_json(o.at("budget"));
  const double top_q = get_as<double>(o, "top_q", "oracle");
  if (!(top_q > 0.0 && top_q <= 1.0)) throw ConfigError("oracle.top_q must lie in (0, 1]");
  const double oxi = get_as<double>(o, "xi", "oracle");
  if (!(oxi > 0.0 && oxi < 1.0)) throw ConfigError("oracle.xi must lie strictly inside (0, 1)");
  if (get_as<std::size_t>(o, "bins", "oracle") == 0) throw ConfigError("oracle.bins must be positive");

  const std::string source = get_as<std::string>(j.at("data"), "source", "data");
  if (source != "planted" && source != "synthetic" && source != "cifar10" && source != "cache")
    throw ConfigError("unknown data source '" + source + "' (expected planted, synthetic, cifar10 or cache)");
  return rc;
}

SearchSpace RunConfig::masked_space() const {
  if (raw.at("mask").is_null()) return space;
  const std::string path = raw.at("mask").get<std::string>();
  const std::string text = read_file(path);
  if (!raw.at("mask_digest").is_null() && digest_hex(text) != raw.at("mask_digest").get<std::string>())
    throw ConfigError("mask file '" + path + "' changed since this config was resolved");
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError("mask file '" + path + "': " + e.what());
  }
  return apply_mask(space, mask_from_json(space, j));
}

Dataset RunConfig::load_data() const {
  const json& d = raw.at("data");
  const std::string source = d.at("source").get<std::string>();
  if (source == "planted") return planted_generate(PlantedSpec::from_json(d));
  if (source == "synthetic")
    return synth_generate(get_as<std::size_t>(d, "classes", "data"), get_as<std::size_t>(d, "per_class", "data"),
                          get_as<std::size_t>(d, "size", "data"), get_as<std::size_t>(d, "channels", "data"),
                          parse_difficulty(get_as<std::string>(d, "difficulty", "data")),
                          get_as<std::uint64_t>(d, "seed", "data"));
  if (source == "cache") return load_dataset(get_as<std::string>(d, "path", "data"));
  Dataset train = load_cifar10(get_as<std::string>(d, "path", "data")).train;
  const std::size_t limit = d.value("limit", std::size_t{0});
  if (limit > 0 && limit < train.size()) {
    train.labels.resize(limit);
    train.pixels.resize(limit * train.image_elements());
  }
  return train;
}

std::string default_out_dir(const std::string& command, std::uint64_t seed) {
  const char* root = std::getenv("ZONAS_OUTPUT_ROOT");
  return (fs::path(root && *root ? root : "runs") / (command + "-seed" + std::to_string(seed))).string();
}

namespace {

std::vector<std::unique_ptr<Ranker>> build_rankers(const RunConfig& rc) {
  std::vector<std::unique_ptr<Ranker>> out;
  for (const auto& name : rc.rankers) {
    if (name == "nngp") {
      const Dataset data = rc.load_data();
      std::vector<std::size_t> idx(data.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      Rng rng(derive_seed(rc.nngp.seed, "nngp points"));
      for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
      idx.resize(std::min(rc.nngp.datapoints, idx.size()));
      SupernetConfig cfg = rc.network;
      cfg.seed = derive_seed(rc.nngp.seed, "nngp init");
      out.push_back(make_nngp_ranker(cfg, data.images(idx)));
    } else {
      const json& p = rc.raw.at("prune");
      if (p.at("table").is_null()) throw ConfigError("the tabular ranker needs prune.table (a fitness table file)");
      out.push_back(make_tabular_ranker(fitness_map_from_json(read_json_file(p.at("table").get<std::string>())),
                                        parse_aggregate(p.at("aggregate").get<std::string>())));
    }
  }
  return out;
}

void cmd_prune(const RunConfig& rc, const Invocation& inv, const fs::path& out, RunLog& log) {
  const SearchSpace space = rc.masked_space();
  PruneConfig cfg = rc.prune;
  cfg.workers = inv.workers;
  PruneResult result{space, {}};
  std::vector<std::string> names;
  if (cfg.mode == PruneMode::kRandom) {
    result.space = random_mask(space, cfg.xi, cfg.seed);
  } else {
    const auto owned = build_rankers(rc);
    std::vector<const Ranker*> rankers;
    for (const auto& r : owned) {
      rankers.push_back(r.get());
      names.push_back(r->name());
    }
    result = partial_prune(space, rankers, cfg);
  }
  std::string audit;
  for (const auto& r : result.rounds) {
    const json rec = prune_round_to_json(r);
    audit += rec.dump() + "\n";
    log.event("prune_round", rec,
              "round " + std::to_string(r.round) + ": fraction " + fmt(r.fraction_before) + " -> " +
                  fmt(r.fraction_after) + ", pruned " + std::to_string(r.pruned.size()) + " ops");
  }
  write_file(out / "audit.jsonl", audit);
  const json mask = mask_file_json(result, space, cfg, names);
  write_json(out / "mask.json", mask);
  std::string trajectory;
  for (const auto& f : mask["provenance"]["fractions"]) trajectory += (trajectory.empty() ? "" : " -> ") + fmt(f);
  log.event("prune_done",
            {{"fractions", mask["provenance"]["fractions"]},
             {"architecture_fraction", mask["provenance"]["architecture_fraction"]},
             {"kept_op_fraction", mask["provenance"]["kept_op_fraction"]}},
            (result.rounds.empty() ? std::string() : "fractions: " + trajectory + "\n") + "kept ops: " + fmt(kept_op_fraction(result.space)) +
                ", architectures left: " + fmt(architecture_fraction(result.space, space)));
}

void cmd_search(const RunConfig& rc, const Invocation&, const fs::path& out, RunLog& log) {
  const SearchSpace space = rc.masked_space();
  const Dataset data = rc.load_data();
  std::ofstream metrics(out / "metrics.jsonl", std::ios::binary);
  std::ofstream timing(out / "timing.jsonl", std::ios::binary);
  SearchOptions opt;
  opt.checkpoint_dir = (out / "checkpoints").string();
  opt.on_epoch = [&](const json& rec) {
    metrics << rec.dump() << '\n';
    metrics.flush();
    const auto& al = rec["alpha_loss"];
    log.event("epoch", {{"epoch", rec["epoch"]}, {"phase", rec["phase"]}},
              "epoch " + rec["epoch"].dump() + " " + rec["phase"].get<std::string>() + ": train loss " +
                  fmt(rec["train_loss"].get<double>()) + " acc " + fmt(rec["train_acc"].get<double>()) +
                  (al.is_null() ? "" : ", alpha loss " + fmt(al.get<double>())) + ", val loss " +
                  fmt(rec["val_loss"].get<double>()) + " acc " + fmt(rec["val_acc"].get<double>()) + ", entropy " +
                  fmt(rec["mean_alpha_entropy"].get<double>()));
  };
  opt.on_timing = [&](std::size_t epoch, double seconds) {
    timing << json{{"epoch", epoch}, {"seconds", seconds}}.dump() << '\n';
  };
  SearchResult res = run_search(space, rc.schedule, rc.network, data, rc.seed, opt);
  const std::string digest = digest_hex(rc.raw.dump());
  write_json(out / "genotype.json", genotype_to_json(res.genotype, space, digest));
  write_json(out / "alphas.json", res.state.net.alphas_to_json());
  log.event("search_done", {{"genotype", res.genotype.key()}, {"config_digest", digest}},
            "genotype: " + res.genotype.key());
}

void cmd_derive(const RunConfig& rc, const Invocation&, const fs::path& out, RunLog& log) {
  if (rc.raw.at("checkpoint").is_null()) throw ConfigError("derive needs --checkpoint (a search checkpoint file)");
  const std::string path = rc.raw.at("checkpoint").get<std::string>();
  const SearchSpace space = rc.masked_space();
  std::vector<std::vector<double>> alphas(space.edge_count());
  std::vector<bool> seen(space.edge_count(), false);
  for (const auto& e : read_container(path)) {
    if (e.name.rfind("alpha.edge", 0) != 0) continue;
    const std::size_t id = std::stoul(e.name.substr(10));
    if (id >= alphas.size() || e.value.numel() != space.edge(id).candidates.size())
      throw FormatError("checkpoint entry '" + e.name + "' does not fit the configured space");
    alphas[id].assign(e.value.data().begin(), e.value.data().end());
    seen[id] = true;
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) throw FormatError("checkpoint '" + path + "' has no alphas for edge " + std::to_string(i));
  const Genotype g = derive_genotype(space, alphas);
  write_json(out / "genotype.json", genotype_to_json(g, space, digest_hex(rc.raw.dump())));
  log.event("derive_done", {{"genotype", g.key()}}, "genotype: " + g.key());
}

json ratio(double num, double den) { return den > 0.0 ? json(num / den) : json(nullptr); }

void cmd_account(const RunConfig& rc, const Invocation&, const fs::path& out, RunLog& log) {
  const SearchSpace space = rc.masked_space();
  const auto& opt = rc.accounting;
  const auto rows = cost_rows(space, rc.network, opt);
  const MemoryReport masked = memory_report(rows, opt);
  const MemoryReport plain = estimate_memory(rc.space, rc.network, opt);
  const MemoryReport expected = memory_report(expected_cost_rows(rc.space, rc.network, opt, rc.prune.xi), opt);
  const ComputeReport compute = compute_report(rows);
  const ComputeReport plain_c = estimate_compute(rc.space, rc.network, opt.batch);

  json partial = nullptr;
  try {
    SupernetConfig k1 = rc.network, k4 = rc.network;
    k1.partial_k = 1;
    k4.partial_k = 4;
    partial = ratio(estimate_memory(space, k4, opt).total_elements, estimate_memory(space, k1, opt).total_elements);
  } catch (const ConfigError&) {
    // K = 4 does not divide some site width; reported as null.
  }
  const json ratios = {
      {"mask_total", ratio(masked.total_elements, plain.total_elements)},
      {"mask_activations", ratio(masked.retained_activation_elements, plain.retained_activation_elements)},
      {"mask_macs", ratio(compute.forward_macs, plain_c.forward_macs)},
      {"random_xi", rc.prune.xi},
      {"random_expected_total", ratio(expected.total_elements, plain.total_elements)},
      {"random_expected_activations",
       ratio(expected.retained_activation_elements, plain.retained_activation_elements)},
      {"partial_k4_vs_k1_total", partial}};
  write_json(out / "memory.json",
             {{"masked", masked.to_json()}, {"unmasked", plain.to_json()}, {"expected_random", expected.to_json()},
              {"ratios", ratios}, {"options", opt.to_json()}});
  write_json(out / "compute.json", {{"masked", compute.to_json()}, {"unmasked", plain_c.to_json()}});
  write_file(out / "rows.csv", cost_rows_csv(rows));
  std::ostringstream human;
  human << "total elements " << fmt(masked.total_elements, 10) << " (unmasked " << fmt(plain.total_elements, 10)
        << "), ratio " << ratios["mask_total"].dump() << "\nrandom xi=" << rc.prune.xi
        << " expected activation ratio " << ratios["random_expected_activations"].dump()
        << "\npartial channels K=4 vs K=1 total ratio " << partial.dump();
  log.event("account_done", {{"ratios", ratios}}, human.str());
}

void cmd_oracle(const RunConfig& rc, const Invocation& inv, const fs::path& out, RunLog& log) {
  const json& o = rc.raw.at("oracle");
  const SearchSpace space = rc.masked_space();
  const std::size_t cap = o.at("cap").get<std::size_t>();
  const auto all = enumerate_space(space, cap);
  FitnessTable table;
  if (o.at("table").is_null()) {
    log.event("oracle_train", {{"architectures", all.size()}},
              "training " + std::to_string(all.size()) + " architectures");
    table = build_fitness_table(space, rc.network, rc.load_data(), rc.fitness, rc.seed, inv.workers, cap);
  } else {
    table = FitnessTable::from_json(read_json_file(o.at("table").get<std::string>()));
  }
  write_json(out / "fitness_table.json", table.to_json());
  if (!table.failures.empty())
    log.event("oracle_failures", {{"count", table.failures.size()}},
              std::to_string(table.failures.size()) + " architectures failed to train; see fitness_table.json");

  const double xi = o.at("xi").get<double>();
  PruneConfig alg;
  alg.xi = xi;
  PruneConfig rnd;
  rnd.xi = xi;
  rnd.mode = PruneMode::kRandom;
  rnd.semantics = XiSemantics::kOperationKeepProbability;
  const std::vector<SurvivalMethod> methods{
      {"algorithmic", alg, seed_list(rc.seed, "algorithmic runs", o.at("algorithmic_runs").get<std::size_t>())},
      {"random", rnd, seed_list(rc.seed, "random masks", o.at("random_draws").get<std::size_t>())}};
  const auto rep = survival_study(table, space, methods, o.at("top_q").get<double>(), o.at("bins").get<std::size_t>(),
                                  inv.workers);
  write_json(out / "survival.json", rep.to_json());
  write_file(out / "histogram.csv", rep.histogram_csv());
  std::ostringstream human;
  human << "best " << rep.top1_key << " (" << fmt(table.fitness.at(rep.top1_key)) << "), top-" << rep.top_q * 100
        << "% set of " << rep.top_keys.size();
  for (const auto& m : rep.methods) {
    human << "\n" << m.name << ": top-q survival " << fmt(m.probability);
    if (m.closed_form) human << " (closed form " << fmt(*m.closed_form) << ")";
    human << ", top-1 " << fmt(m.top1_probability) << ", median shift " << fmt(m.median_shift) << " vs inter-seed std "
          << fmt(m.median_std);
  }
  log.event("oracle_done", rep.to_json(), human.str());
}

// Relative paths of every regular file under `dir`, sorted.
std::vector<std::string> list_files(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), dir).generic_string());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

void run_command(const Invocation& inv, std::ostream& console) {
  const RunConfig rc = RunConfig::from_json(inv.config);
  // Refusals that need no compute happen before the output directory is touched.
  const SearchSpace space = rc.masked_space();
  if (inv.command == "oracle" && inv.config.at("oracle").at("table").is_null())
    enumerate_space(space, inv.config.at("oracle").at("cap").get<std::size_t>());
  const fs::path out(inv.out_dir);
  prepare_out_dir(out, inv.force);
  write_json(out / "config.json", {{"command", inv.command}, {"config", inv.config}});
  RunLog log(out / "log.jsonl", console, inv.quiet);
  log.event("start", {{"command", inv.command}, {"seed", rc.seed}},
            inv.command + " -> " + out.string() + " (seed " + std::to_string(rc.seed) + ")");
  if (inv.command == "prune")
    cmd_prune(rc, inv, out, log);
  else if (inv.command == "search")
    cmd_search(rc, inv, out, log);
  else if (inv.command == "derive")
    cmd_derive(rc, inv, out, log);
  else if (inv.command == "account")
    cmd_account(rc, inv, out, log);
  else if (inv.command == "oracle")
    cmd_oracle(rc, inv, out, log);
  else
    throw ConfigError("unknown command '" + inv.command + "'");
}

ReplayOutcome replay(const std::string& run_dir, const std::string& out_dir, bool force, std::size_t workers,
                     std::ostream& console) {
  const json recorded = read_json_file((fs::path(run_dir) / "config.json").string());
  Invocation inv;
  try {
    inv.command = recorded.at("command").get<std::string>();
    inv.config = recorded.at("config");
  } catch (const json::exception& e) {
    throw FormatError("'" + run_dir + "/config.json' is not a run record: " + e.what());
  }
  if (inv.command == "replay") throw ConfigError("cannot replay a replay record");
  RunConfig::from_json(inv.config);
  inv.out_dir = out_dir;
  inv.force = force;
  inv.workers = workers;
  inv.quiet = true;
  if (fs::weakly_canonical(run_dir) == fs::weakly_canonical(out_dir))
    throw ConfigError("replay output must differ from the recorded run directory");
  run_command(inv, console);

  const auto a = list_files(run_dir), b = list_files(out_dir);
  ReplayOutcome r;
  for (const auto& f : a) {
    if (f == "timing.jsonl") continue;
    if (!std::binary_search(b.begin(), b.end(), f)) {
      r.missing.push_back(f);
    } else if (read_file((fs::path(run_dir) / f).string()) == read_file((fs::path(out_dir) / f).string())) {
      r.identical.push_back(f);
    } else {
      r.differing.push_back(f);
    }
  }
  for (const auto& f : b)
    if (f != "timing.jsonl" && !std::binary_search(a.begin(), a.end(), f)) r.missing.push_back(f);
  return r;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  if (dynamic_cast<const FormatError*>(&e)) return kExitData;
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return kExitData;
  if (dynamic_cast<const Error*>(&e)) return kExitUsage;
  return kExitMismatch;
}

}  // namespace zonas::cli
