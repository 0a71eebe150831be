#include "zonas/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>

#include "zonas/error.hpp"

namespace zonas {

Var Var::constant(Tensor t) { return constant(std::make_shared<const Tensor>(std::move(t))); }

Var Var::constant(std::shared_ptr<const Tensor> t) {
  Var v;
  v.value_ = std::move(t);
  return v;
}

const Tensor& Gradients::of(const Var& v) const {
  auto it = by_node_.find(v.node());
  if (it == by_node_.end()) throw LookupError("gradients: no gradient for node " + std::to_string(v.node()));
  return it->second;
}

bool Gradients::has(const Var& v) const { return by_node_.count(v.node()) != 0; }

Var Tape::leaf(Tensor value) {
  TapeNode n;
  n.op = "leaf";
  n.shape = value.shape();
  n.leaf = true;
  nodes_.push_back(std::move(n));
  Var v;
  v.value_ = std::make_shared<const Tensor>(std::move(value));
  v.tape_ = this;
  v.node_ = static_cast<int>(nodes_.size() - 1);
  return v;
}

Var Tape::watch(Parameter& param) {
  Var v;
  v.value_ = param.value;
  v.tape_ = this;
  if (auto it = watched_.find(&param); it != watched_.end()) {
    v.node_ = it->second;
    return v;
  }
  TapeNode n;
  n.op = "param:" + param.name;
  n.shape = param.value->shape();
  n.leaf = true;
  n.param = &param;
  nodes_.push_back(std::move(n));
  v.node_ = static_cast<int>(nodes_.size() - 1);
  watched_.emplace(&param, v.node_);
  return v;
}

Var Tape::record(std::string_view op, std::shared_ptr<const Tensor> output, std::span<const Var> inputs,
                 BackwardFn fn, SavedTensors saved) {
  TapeNode n;
  n.op = std::string(op);
  n.shape = output->shape();
  for (const auto& in : inputs) {
    if (in.tracked() && in.tape() != this) {
      throw ContractError(std::string(op) + ": input recorded on a different tape");
    }
    n.inputs.push_back(in.tracked() ? in.node() : -1);
  }
  n.backward = std::move(fn);
  n.saved = std::move(saved);
  nodes_.push_back(std::move(n));
  Var v;
  v.value_ = std::move(output);
  v.tape_ = this;
  v.node_ = static_cast<int>(nodes_.size() - 1);
  return v;
}

Gradients Tape::backward(const Var& loss) {
  if (!loss.tracked() || loss.tape() != this) {
    throw ContractError("backward: loss is not recorded on this tape");
  }
  if (loss.value().numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  std::vector<std::optional<Tensor>> grads(nodes_.size());
  grads[static_cast<std::size_t>(loss.node())] = Tensor(loss.shape(), 1.0);

  Gradients out;
  for (int id = loss.node(); id >= 0; --id) {
    auto& slot = grads[static_cast<std::size_t>(id)];
    if (!slot) continue;
    TapeNode& n = nodes_[static_cast<std::size_t>(id)];
    if (n.leaf) {
      if (n.param) {
        if (n.param->grad.shape() != n.shape) n.param->zero_grad();
        n.param->grad.add_(*slot);
      }
      out.by_node_.emplace(id, std::move(*slot));
      slot.reset();
      continue;
    }
    std::vector<Tensor*> acc(n.inputs.size(), nullptr);
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      const int in = n.inputs[i];
      if (in < 0) continue;
      auto& g = grads[static_cast<std::size_t>(in)];
      if (!g) g = Tensor(nodes_[static_cast<std::size_t>(in)].shape);
      acc[i] = &*g;
    }
    if (n.backward) n.backward(*slot, n.saved, acc);
    slot.reset();
  }
  // Leaves that were never reached still get a zero gradient entry.
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].leaf && !out.by_node_.count(static_cast<int>(id))) {
      out.by_node_.emplace(static_cast<int>(id), Tensor(nodes_[id].shape));
    }
  }
  return out;
}

std::vector<const Parameter*> Tape::watched_parameters() const {
  std::vector<const Parameter*> ps;
  for (const auto& [p, id] : watched_) ps.push_back(p);
  return ps;
}

std::size_t Tape::retained_elements() const {
  std::set<const Tensor*> params;
  for (const auto& [p, id] : watched_) params.insert(p->value.get());
  std::set<const Tensor*> seen;
  std::size_t total = 0;
  for (const auto& n : nodes_) {
    for (const auto& s : n.saved) {
      if (!s || params.count(s.get())) continue;
      if (seen.insert(s.get()).second) total += s->numel();
    }
  }
  return total;
}

double finite_difference_check(const std::function<Var(const Var&)>& f, const Tensor& x, double step) {
  Tape tape;
  Var xv = tape.leaf(x);
  Var y = f(xv);
  const Gradients g = tape.backward(y);
  const Tensor& analytic = g.of(xv);

  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double fp = f(Var::constant(probe)).value().item();
    probe[i] = orig - step;
    const double fm = f(Var::constant(probe)).value().item();
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace zonas
