#include "zonas/operations.hpp"

#include <array>
#include <cmath>

#include "zonas/error.hpp"
#include "zonas/rng.hpp"

namespace zonas {

namespace {
constexpr std::array<std::pair<OpKind, std::string_view>, 8> kNames{{
    {OpKind::kZero, "none"},
    {OpKind::kMaxPool3, "max_pool_3x3"},
    {OpKind::kAvgPool3, "avg_pool_3x3"},
    {OpKind::kIdentity, "skip_connect"},
    {OpKind::kSepConv3, "sep_conv_3x3"},
    {OpKind::kSepConv5, "sep_conv_5x5"},
    {OpKind::kDilConv3, "dil_conv_3x3"},
    {OpKind::kDilConv5, "dil_conv_5x5"},
}};

std::size_t kernel_of(OpKind k) {
  return (k == OpKind::kSepConv5 || k == OpKind::kDilConv5) ? 5 : 3;
}

void require_params(OpKind kind, std::span<Parameter* const> params, std::size_t n) {
  if (params.size() != n) {
    throw ContractError(std::string(op_name(kind)) + ": expected " + std::to_string(n) + " parameters, got " +
                        std::to_string(params.size()));
  }
}
}  // namespace

std::string_view op_name(OpKind kind) {
  for (const auto& [k, n] : kNames)
    if (k == kind) return n;
  return "unknown";
}

std::optional<OpKind> parse_op(std::string_view name) {
  for (const auto& [k, n] : kNames)
    if (n == name) return k;
  if (name == "zero") return OpKind::kZero;
  if (name == "identity") return OpKind::kIdentity;
  return std::nullopt;
}

const std::vector<OpKind>& darts_ops() {
  static const std::vector<OpKind> ops = [] {
    std::vector<OpKind> v;
    for (const auto& [k, n] : kNames) v.push_back(k);
    return v;
  }();
  return ops;
}

std::vector<ParamSpec> op_param_specs(OpKind kind, std::size_t C, std::size_t stride) {
  const std::size_t k = kernel_of(kind);
  switch (kind) {
    case OpKind::kZero:
    case OpKind::kAvgPool3:
    case OpKind::kMaxPool3:
      return {};
    case OpKind::kIdentity:
      if (stride == 1) return {};
      return relu_conv_norm_specs(C, C, 1);
    case OpKind::kSepConv3:
    case OpKind::kSepConv5:
      return {{"dw1", {C, 1, k, k}, InitKind::kKaimingUniform, k * k},
              {"pw1", {C, C, 1, 1}, InitKind::kKaimingUniform, C},
              {"norm1.scale", {C}, InitKind::kOnes},
              {"norm1.shift", {C}, InitKind::kZeros},
              {"dw2", {C, 1, k, k}, InitKind::kKaimingUniform, k * k},
              {"pw2", {C, C, 1, 1}, InitKind::kKaimingUniform, C},
              {"norm2.scale", {C}, InitKind::kOnes},
              {"norm2.shift", {C}, InitKind::kZeros}};
    case OpKind::kDilConv3:
    case OpKind::kDilConv5:
      return {{"dw", {C, 1, k, k}, InitKind::kKaimingUniform, k * k},
              {"pw", {C, C, 1, 1}, InitKind::kKaimingUniform, C},
              {"norm.scale", {C}, InitKind::kOnes},
              {"norm.shift", {C}, InitKind::kZeros}};
  }
  return {};
}

std::vector<ParamSpec> relu_conv_norm_specs(std::size_t c_in, std::size_t c_out, std::size_t kernel) {
  return {{"conv", {c_out, c_in, kernel, kernel}, InitKind::kKaimingUniform, c_in * kernel * kernel},
          {"norm.scale", {c_out}, InitKind::kOnes},
          {"norm.shift", {c_out}, InitKind::kZeros}};
}

Tensor init_param(const ParamSpec& spec, std::uint64_t seed) {
  Tensor t(spec.shape);
  switch (spec.init) {
    case InitKind::kOnes: t.fill(1.0); break;
    case InitKind::kZeros: break;
    case InitKind::kKaimingUniform: {
      // He-uniform bound for ReLU networks: sqrt(6 / fan_in).
      const double bound = std::sqrt(6.0 / static_cast<double>(spec.fan_in));
      Rng rng(seed);
      for (auto& v : t.data()) v = rng.uniform(-bound, bound);
      break;
    }
  }
  return t;
}

Var use_param(Parameter& p, Tape* tape) {
  return tape ? tape->watch(p) : Var::constant(std::shared_ptr<const Tensor>(p.value));
}

Var depthwise_conv(const Var& x, const Var& w, std::size_t stride, std::size_t dilation) {
  const std::size_t k = w.shape().at(2);
  return ops::conv2d(x, w, {.stride = stride, .pad = dilation * (k - 1) / 2, .dilation = dilation,
                            .groups = x.shape().at(1)});
}

Var pointwise_conv(const Var& x, const Var& w) { return ops::conv2d(x, w, {}); }

Var relu_conv_norm(const Var& x, std::size_t stride, std::span<Parameter* const> p, Tape* tape) {
  const Var w = use_param(*p[0], tape);
  const std::size_t k = w.shape().at(2);
  Var y = ops::conv2d(ops::relu(x), w, {.stride = stride, .pad = (k - 1) / 2});
  return ops::channel_norm(y, use_param(*p[1], tape), use_param(*p[2], tape));
}

Var apply_op(OpKind kind, const Var& x, std::size_t stride, std::span<Parameter* const> p, Tape* tape) {
  if (x.shape().size() != 4) throw ShapeError(std::string(op_name(kind)) + ": expected NCHW input, got " + shape_str(x.shape()));
  if (stride != 1 && stride != 2) throw ContractError(std::string(op_name(kind)) + ": stride must be 1 or 2");
  switch (kind) {
    case OpKind::kZero:
      require_params(kind, p, 0);
      return ops::zero(x, stride);
    case OpKind::kIdentity:
      if (stride == 1) {
        require_params(kind, p, 0);
        return ops::identity(x);
      }
      require_params(kind, p, 3);
      return relu_conv_norm(x, 2, p, tape);
    case OpKind::kSepConv3:
    case OpKind::kSepConv5: {
      require_params(kind, p, 8);
      Var y = depthwise_conv(ops::relu(x), use_param(*p[0], tape), stride, 1);
      y = pointwise_conv(y, use_param(*p[1], tape));
      y = ops::channel_norm(y, use_param(*p[2], tape), use_param(*p[3], tape));
      y = depthwise_conv(ops::relu(y), use_param(*p[4], tape), 1, 1);
      y = pointwise_conv(y, use_param(*p[5], tape));
      return ops::channel_norm(y, use_param(*p[6], tape), use_param(*p[7], tape));
    }
    case OpKind::kDilConv3:
    case OpKind::kDilConv5: {
      require_params(kind, p, 4);
      Var y = depthwise_conv(ops::relu(x), use_param(*p[0], tape), stride, 2);
      y = pointwise_conv(y, use_param(*p[1], tape));
      return ops::channel_norm(y, use_param(*p[2], tape), use_param(*p[3], tape));
    }
    case OpKind::kAvgPool3:
      require_params(kind, p, 0);
      return ops::channel_norm(ops::avg_pool2d(x, {.kernel = 3, .stride = stride, .pad = 1}), Var{}, Var{});
    case OpKind::kMaxPool3:
      require_params(kind, p, 0);
      return ops::channel_norm(ops::max_pool2d(x, {.kernel = 3, .stride = stride, .pad = 1}), Var{}, Var{});
  }
  throw ContractError("apply_op: unknown op kind");
}

}  // namespace zonas
