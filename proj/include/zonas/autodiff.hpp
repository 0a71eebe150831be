#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "zonas/tensor.hpp"

namespace zonas {

class Tape;

/// Trainable tensor with a gradient accumulator. The value lives behind a
/// shared_ptr so tape nodes can hold it without copying.
struct Parameter {
  std::string name;
  std::shared_ptr<Tensor> value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::make_shared<Tensor>(std::move(v))) {}

  std::size_t numel() const { return value ? value->numel() : 0; }
  void zero_grad() { grad = Tensor(value->shape()); }
};

/// Handle to a value, optionally tracked by a tape. An untracked Var (no
/// tape, or node == -1) is a constant: gradients never flow into it.
class Var {
 public:
  Var() = default;
  static Var constant(Tensor t);
  static Var constant(std::shared_ptr<const Tensor> t);

  const Tensor& value() const { return *value_; }
  const std::shared_ptr<const Tensor>& value_ptr() const { return value_; }
  const Shape& shape() const { return value_->shape(); }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }
  bool tracked() const { return tape_ != nullptr && node_ >= 0; }
  bool defined() const { return value_ != nullptr; }

 private:
  friend class Tape;
  std::shared_ptr<const Tensor> value_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

using SavedTensors = std::vector<std::shared_ptr<const Tensor>>;

/// Backward closure of a node: receives the upstream gradient, the node's
/// saved tensors and one accumulator per input (nullptr for inputs that do
/// not require a gradient).
using BackwardFn = std::function<void(const Tensor& grad_out, const SavedTensors& saved,
                                      std::span<Tensor* const> grad_inputs)>;

struct TapeNode {
  std::string op;
  Shape shape;
  std::vector<int> inputs;
  BackwardFn backward;
  SavedTensors saved;
  Parameter* param = nullptr;  // set on parameter leaves
  bool leaf = false;
};

/// Gradients of a scalar loss, keyed by leaf node id.
class Gradients {
 public:
  const Tensor& of(const Var& v) const;
  bool has(const Var& v) const;
  std::size_t size() const { return by_node_.size(); }

 private:
  friend class Tape;
  std::unordered_map<int, Tensor> by_node_;
};

/// Append-only record of primitive operations. Nodes are appended in
/// execution order, so inputs always precede the nodes that consume them.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf tracking an arbitrary tensor (tests, finite differences).
  Var leaf(Tensor value);
  /// Leaf for a parameter; backward accumulates into param.grad.
  Var watch(Parameter& param);

  Var record(std::string_view op, std::shared_ptr<const Tensor> output, std::span<const Var> inputs,
             BackwardFn fn, SavedTensors saved = {});

  /// Reverse sweep from a scalar loss; seed gradient is 1.
  Gradients backward(const Var& loss);

  std::size_t size() const { return nodes_.size(); }
  const TapeNode& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::vector<const Parameter*> watched_parameters() const;

  /// Elements held alive for backward: distinct saved buffers, excluding
  /// parameter values.
  std::size_t retained_elements() const;

 private:
  std::vector<TapeNode> nodes_;
  std::map<const Parameter*, int> watched_;
};

/// Central-difference gradient check of a scalar function. Returns the worst
/// elementwise relative error, with denominator max(|analytic|, |numeric|, 1e-8).
double finite_difference_check(const std::function<Var(const Var&)>& f, const Tensor& x,
                               double step = 1e-5);

}  // namespace zonas
