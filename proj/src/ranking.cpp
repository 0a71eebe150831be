#include "zonas/ranking.hpp"

#include <algorithm>
#include <cmath>

#include "zonas/error.hpp"

namespace zonas {

using nlohmann::json;

Aggregate parse_aggregate(const std::string& s) {
  if (s == "mean") return Aggregate::kMean;
  if (s == "max") return Aggregate::kMax;
  throw ConfigError("unknown aggregate '" + s + "' (expected mean or max)");
}

std::string_view aggregate_name(Aggregate a) { return a == Aggregate::kMean ? "mean" : "max"; }

double KernelEstimate::frobenius() const {
  double s = 0.0;
  for (double g : gram) s += g * g;
  return std::sqrt(s);
}

KernelEstimate nngp_kernel(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("nngp_kernel expects (m, classes) logits, got " + shape_str(logits.shape()));
  const std::size_t m = logits.shape()[0], d = logits.shape()[1];
  const auto z = logits.data();
  KernelEstimate k{std::vector<double>(m * m), m};
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i; j < m; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += z[i * d + c] * z[j * d + c];
      k.gram[i * m + j] = k.gram[j * m + i] = dot / static_cast<double>(d);
    }
  return k;
}

double nngp_frobenius(Supernet& net, const Tensor& data) {
  if (data.rank() != 4 || data.shape()[0] < 2)
    throw ContractError("nngp_frobenius needs at least 2 datapoints, got shape " + shape_str(data.shape()));
  Var logits;
  try {
    logits = net.forward(data);
  } catch (const NumericError& e) {
    throw NumericError("nngp_frobenius batch 0 (points 0.." + std::to_string(data.shape()[0] - 1) + "): " + e.what());
  }
  if (!logits.value().all_finite()) throw NumericError("nngp_frobenius batch 0: non-finite logits");
  return nngp_kernel(logits.value()).frobenius();
}

double tabular_ranking(const SearchSpace& space, const FitnessMap& table, Aggregate aggregate) {
  double sum = 0.0, best = -INFINITY;
  std::size_t n = 0;
  for_each_architecture(space, [&](const std::vector<std::size_t>& choice) {
    const std::string key = genotype_from_choices(space, choice).key();
    auto it = table.find(key);
    if (it == table.end()) throw LookupError("fitness table has no entry for '" + key + "'");
    sum += it->second;
    best = std::max(best, it->second);
    ++n;
  });
  return aggregate == Aggregate::kMax ? best : sum / static_cast<double>(n);
}

namespace {

class NngpRanker final : public Ranker {
 public:
  NngpRanker(SupernetConfig cfg, Tensor data) : cfg_(std::move(cfg)), data_(std::move(data)) {}
  std::string name() const override { return "nngp_frobenius"; }
  double score(const SearchSpace& space) const override {
    Supernet net(space, cfg_);
    return nngp_frobenius(net, data_);
  }

 private:
  SupernetConfig cfg_;
  Tensor data_;
};

class TabularRanker final : public Ranker {
 public:
  TabularRanker(FitnessMap table, Aggregate aggregate) : table_(std::move(table)), aggregate_(aggregate) {}
  std::string name() const override { return "tabular_" + std::string(aggregate_name(aggregate_)); }
  double score(const SearchSpace& space) const override { return tabular_ranking(space, table_, aggregate_); }

 private:
  FitnessMap table_;
  Aggregate aggregate_;
};

class ConstantRanker final : public Ranker {
 public:
  explicit ConstantRanker(double v) : v_(v) {}
  std::string name() const override { return "constant"; }
  double score(const SearchSpace&) const override { return v_; }

 private:
  double v_;
};

}  // namespace

std::unique_ptr<Ranker> make_nngp_ranker(SupernetConfig cfg, Tensor data) {
  return std::make_unique<NngpRanker>(std::move(cfg), std::move(data));
}

std::unique_ptr<Ranker> make_tabular_ranker(FitnessMap table, Aggregate aggregate) {
  return std::make_unique<TabularRanker>(std::move(table), aggregate);
}

std::unique_ptr<Ranker> make_constant_ranker(double value) { return std::make_unique<ConstantRanker>(value); }

FitnessMap fitness_map_from_json(const json& j) {
  try {
    FitnessMap m;
    for (const auto& [k, v] : j.at("fitness").items()) m[k] = v.get<double>();
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("fitness table: ") + e.what());
  }
}

json fitness_map_to_json(const FitnessMap& table) {
  json f = json::object();
  for (const auto& [k, v] : table) f[k] = v;
  return {{"fitness", f}};
}

}  // namespace zonas
