#include "zonas/accounting.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "zonas/error.hpp"

namespace zonas {

using nlohmann::json;

json AccountingOptions::to_json() const {
  return {{"batch", batch},
          {"weight_state_per_param", weight_state_per_param},
          {"alpha_state_per_param", alpha_state_per_param}};
}

namespace {

double spec_elements(const std::vector<ParamSpec>& specs) {
  double n = 0.0;
  for (const auto& s : specs) n += static_cast<double>(shape_numel(s.shape));
  return n;
}

std::size_t kernel_of(OpKind k) { return k == OpKind::kSepConv5 || k == OpKind::kDilConv5 ? 5 : 3; }

// Retained activations and MACs of one candidate op at C channels.
CostRow op_row(OpKind kind, std::size_t C, std::size_t stride, std::size_t in_hw, std::size_t out_hw,
               std::size_t batch) {
  const double N = static_cast<double>(batch), c = static_cast<double>(C);
  const double in = N * c * static_cast<double>(in_hw * in_hw);
  const double out = N * c * static_cast<double>(out_hw * out_hw);
  const double k2 = static_cast<double>(kernel_of(kind) * kernel_of(kind));
  CostRow r;
  r.op = std::string(op_name(kind));
  r.weight_params = spec_elements(op_param_specs(kind, C, stride));
  r.alpha_params = 1.0;
  switch (kind) {
    case OpKind::kZero: r.activations = out; break;
    case OpKind::kIdentity:
      if (stride == 1) {
        r.activations = in;
      } else {
        r.activations = in + 2 * out + c;
        r.macs = out * c;
      }
      break;
    case OpKind::kSepConv3:
    case OpKind::kSepConv5:
      r.activations = in + 6 * out + 2 * c;
      r.macs = 2 * (out * k2 + out * c);
      break;
    case OpKind::kDilConv3:
    case OpKind::kDilConv5:
      r.activations = in + 3 * out + c;
      r.macs = out * k2 + out * c;
      break;
    case OpKind::kAvgPool3: r.activations = 2 * out + c; break;
    case OpKind::kMaxPool3: r.activations = 3 * out + c; break;
  }
  r.activations += 1.0;  // the op's entry of the saved softmax
  return r;
}

CostRow block_row(const BlockLayout& b, std::size_t batch) {
  const double N = static_cast<double>(batch);
  const double ci = static_cast<double>(b.c_in), co = static_cast<double>(b.c_out);
  const double in_s = static_cast<double>(b.in_hw * b.in_hw), out_s = static_cast<double>(b.out_hw * b.out_hw);
  CostRow r;
  r.site = b.name;
  r.weight_params = spec_elements(block_param_specs(b));
  switch (b.kind) {
    case BlockKind::kStem:
      r.op = "stem";
      r.activations = N * ci * in_s + N * co * out_s + co;
      r.macs = N * co * out_s * ci * static_cast<double>(b.kernel * b.kernel);
      break;
    case BlockKind::kPreprocess:
      r.op = "preprocess";
      r.activations = N * ci * in_s + N * co * out_s + co;
      r.macs = N * co * out_s * ci;
      break;
    case BlockKind::kHeadConv:
      r.op = "head";
      r.activations = N * ci * in_s + 2 * N * co * out_s + co;
      r.macs = N * co * out_s * ci;
      break;
    case BlockKind::kClassifier:
      r.op = "classifier";
      r.activations = N * ci + N * co;
      r.macs = N * ci * co;
      break;
  }
  return r;
}

using KeepFn = double (*)(const MixingSet&, std::size_t, double);

std::vector<CostRow> rows_with(const SearchSpace& space, const SupernetConfig& cfg, const AccountingOptions& opt,
                               double xi, KeepFn keep) {
  const NetworkLayout L = network_layout(space, cfg);
  const std::size_t K = cfg.partial_k;
  std::vector<CostRow> rows;
  for (const auto& b : L.blocks) rows.push_back(block_row(b, opt.batch));
  for (const auto& site : L.sites) {
    const auto& set = space.edge(site.edge_id);
    for (std::size_t i = 0; i < set.candidates.size(); ++i) {
      CostRow r = op_row(set.candidates[i], site.channels / K, site.stride, site.in_hw, site.out_hw, opt.batch);
      r.site = site.name;
      r.edge_id = site.edge_id;
      r.weight = keep(set, i, xi);
      rows.push_back(std::move(r));
    }
    if (K > 1 && site.stride == 2) {
      CostRow r;
      r.site = site.name;
      r.edge_id = site.edge_id;
      r.op = "bypass";
      r.activations = static_cast<double>(opt.batch * (site.channels - site.channels / K) * site.out_hw * site.out_hw);
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

std::vector<EdgeMemory> per_edge(const std::vector<CostRow>& rows) {
  std::map<std::size_t, EdgeMemory> m;
  for (const auto& r : rows) {
    if (r.edge_id == kNoEdge) continue;
    auto& e = m[r.edge_id];
    e.edge_id = r.edge_id;
    e.parameter_elements += r.weight * (r.weight_params + r.alpha_params);
    e.retained_activation_elements += r.weight * r.activations;
    e.macs += r.weight * r.macs;
  }
  std::vector<EdgeMemory> out;
  for (auto& [id, e] : m) out.push_back(e);
  return out;
}

json per_edge_json(const std::vector<EdgeMemory>& edges) {
  json a = json::array();
  for (const auto& e : edges)
    a.push_back({{"edge", e.edge_id},
                 {"parameter_elements", e.parameter_elements},
                 {"retained_activation_elements", e.retained_activation_elements},
                 {"macs", e.macs}});
  return a;
}

}  // namespace

std::vector<CostRow> cost_rows(const SearchSpace& space, const SupernetConfig& cfg, const AccountingOptions& opt) {
  return rows_with(space, cfg, opt, 1.0,
                   [](const MixingSet& set, std::size_t i, double) { return set.mask[i] ? 1.0 : 0.0; });
}

std::vector<CostRow> expected_cost_rows(const SearchSpace& space, const SupernetConfig& cfg,
                                        const AccountingOptions& opt, double xi) {
  if (!(xi > 0.0 && xi < 1.0)) throw ConfigError("xi must lie strictly inside (0, 1), got " + std::to_string(xi));
  return rows_with(space, cfg, opt, xi, [](const MixingSet& set, std::size_t i, double p) {
    if (!set.mask[i]) return 0.0;
    const double n = static_cast<double>(set.unmasked());
    return p + std::pow(1.0 - p, n) / n;
  });
}

MemoryReport memory_report(const std::vector<CostRow>& rows, const AccountingOptions& opt) {
  MemoryReport m;
  for (const auto& r : rows) {
    m.parameter_elements += r.weight * (r.weight_params + r.alpha_params);
    m.optimizer_state_elements +=
        r.weight * (opt.weight_state_per_param * r.weight_params + opt.alpha_state_per_param * r.alpha_params);
    m.retained_activation_elements += r.weight * r.activations;
  }
  m.gradient_elements = m.parameter_elements;
  m.total_elements =
      m.parameter_elements + m.optimizer_state_elements + m.retained_activation_elements + m.gradient_elements;
  m.per_edge = per_edge(rows);
  return m;
}

ComputeReport compute_report(const std::vector<CostRow>& rows) {
  ComputeReport c;
  for (const auto& r : rows) c.forward_macs += r.weight * r.macs;
  c.backward_macs = 2.0 * c.forward_macs;
  c.per_edge = per_edge(rows);
  return c;
}

MemoryReport estimate_memory(const SearchSpace& space, const SupernetConfig& cfg, const AccountingOptions& opt) {
  return memory_report(cost_rows(space, cfg, opt), opt);
}

ComputeReport estimate_compute(const SearchSpace& space, const SupernetConfig& cfg, std::size_t batch) {
  AccountingOptions opt;
  opt.batch = batch;
  return compute_report(cost_rows(space, cfg, opt));
}

json MemoryReport::to_json() const {
  return {{"parameter_elements", parameter_elements},
          {"optimizer_state_elements", optimizer_state_elements},
          {"retained_activation_elements", retained_activation_elements},
          {"gradient_elements", gradient_elements},
          {"total_elements", total_elements},
          {"per_edge", per_edge_json(per_edge)}};
}

json ComputeReport::to_json() const {
  return {{"forward_macs", forward_macs}, {"backward_macs", backward_macs}, {"per_edge", per_edge_json(per_edge)}};
}

std::string cost_rows_csv(const std::vector<CostRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "site,edge,op,weight,params,alpha_params,activations,macs\n";
  for (const auto& r : rows) {
    os << r.site << ',';
    if (r.edge_id != kNoEdge) os << r.edge_id;
    os << ',' << r.op << ',' << r.weight << ',' << r.weight_params << ',' << r.alpha_params << ',' << r.activations
       << ',' << r.macs << '\n';
  }
  return os.str();
}

}  // namespace zonas
